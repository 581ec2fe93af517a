//! Synthetic verifiable tasks and the RL data-construction transforms.
//!
//! Tasks are modular-arithmetic prompts standing in for the reasoning
//! corpora. Evidence-bearing tasks carry their operand in `context`, the
//! text stand-in for an image; ablating that context turns the task into
//! an abstention example.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a64;
use crate::verifier::{accepted_answers, is_abstain, ABSTAIN};

/// Appended to every training prompt so the answer location is fixed.
pub const BOXED_INSTRUCTION: &str = "The final answer MUST BE put in \\boxed{}.";

/// Suffix marking context-ablated variants.
pub const ABLATED_SUFFIX: &str = "-ablated";

/// Word that marks evidence-dependent prompts.
pub const EVIDENCE_WORD: &str = "evidence";

const DEFAULT_MODULUS: u32 = 10;

/// Padding that turns a concise answer into a verbose one (at least 3x longer).
const VERBOSE_TEMPLATES: &[&str] = &[
    "well let me think about this so the answer is",
    "let me think about this well so we get the answer",
    "so let me think well the answer we get is hence",
];
const STILTED_TEMPLATES: &[&str] = &[
    "the the answer answer is is so so",
    "so so we we get get the the answer",
];

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task count must be at least 1")]
    EmptyRequest,
    #[error("modulus must be at least 2, got {0}")]
    InvalidModulus(u32),
    #[error("correct label `{0}` is not among the options")]
    MissingLabel(String),
    #[error("options contain duplicate content `{0}`")]
    DuplicateOption(String),
    #[error("task `{0}` has no context to ablate")]
    NoContext(String),
    #[error("text-only fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("empty task list")]
    EmptyTasks,
    #[error("invalid task `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("task record on line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    #[default]
    Unknown,
    Mastered,
    Partial,
    Unmastered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub prompt: String,
    pub ground_truth: String,
    pub context: Option<String>,
    pub requires_context: bool,
    pub tags: BTreeSet<String>,
    pub tier: Tier,
    pub is_text_only: bool,
}

impl Task {
    fn new(id: String, question: &str, ground_truth: String) -> Self {
        Self {
            id,
            prompt: append_boxed_instruction(question),
            ground_truth,
            context: None,
            requires_context: false,
            tags: BTreeSet::new(),
            tier: Tier::Unknown,
            is_text_only: false,
        }
    }

    fn with_tags<'a>(mut self, tags: impl IntoIterator<Item = &'a str>) -> Self {
        self.tags.extend(tags.into_iter().map(str::to_string));
        self
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |reason: &str| TaskError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.ground_truth.trim().is_empty() {
            return Err(invalid("empty ground truth"));
        }
        if self.requires_context && self.context.is_none() && !self.is_abstain() {
            return Err(invalid(
                "context required but absent, ground truth must abstain",
            ));
        }
        Ok(())
    }

    pub fn is_abstain(&self) -> bool {
        is_abstain(&self.ground_truth)
    }

    pub fn is_ablated(&self) -> bool {
        self.requires_context && self.context.is_none()
    }

    /// Modulus recorded in the `mod:<m>` tag, if any.
    pub fn modulus(&self) -> Option<u32> {
        self.tags
            .iter()
            .find_map(|t| t.strip_prefix("mod:").and_then(|m| m.parse().ok()))
    }

    /// The first accepted answer; the canonical correct response value.
    pub fn canonical_answer(&self) -> &str {
        accepted_answers(&self.ground_truth)
            .next()
            .unwrap_or(&self.ground_truth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreferenceAttribute {
    Conciseness,
    Fluency,
    Abstention,
    StyleCompliance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub chosen: String,
    pub rejected: String,
    pub attribute: PreferenceAttribute,
}

/// Appends the boxed-answer instruction unless the prompt already ends with it.
pub fn append_boxed_instruction(prompt: &str) -> String {
    let trimmed = prompt.trim_end();
    if trimmed.ends_with(BOXED_INSTRUCTION) {
        trimmed.to_string()
    } else if trimmed.is_empty() {
        BOXED_INSTRUCTION.to_string()
    } else {
        format!("{trimmed} {BOXED_INSTRUCTION}")
    }
}

/// Prompt text with the trailing instruction removed.
pub fn strip_boxed_instruction(prompt: &str) -> &str {
    prompt
        .strip_suffix(BOXED_INSTRUCTION)
        .unwrap_or(prompt)
        .trim_end()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub const ALL: [ArithOp; 3] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul];

    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Sub => '-',
            ArithOp::Mul => '*',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.symbol() == c)
    }

    pub fn apply_mod(self, a: i64, b: i64, modulus: i64) -> i64 {
        let raw = match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        };
        raw.rem_euclid(modulus)
    }

    fn tag(self) -> &'static str {
        match self {
            ArithOp::Add => "op:add",
            ArithOp::Sub => "op:sub",
            ArithOp::Mul => "op:mul",
        }
    }
}

fn check_modulus(modulus: u32) -> Result<(), TaskError> {
    if modulus < 2 {
        Err(TaskError::InvalidModulus(modulus))
    } else {
        Ok(())
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> ArithOp {
    ArithOp::ALL[rng.random_range(0..ArithOp::ALL.len())]
}

/// `count` tasks of the form `(a op b) mod m`, a pure function of its arguments.
pub fn gen_arith_tasks(count: usize, modulus: u32, seed: u64) -> Result<Vec<Task>, TaskError> {
    check_modulus(modulus)?;
    if count == 0 {
        return Err(TaskError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mod_tag = format!("mod:{modulus}");
    Ok((0..count)
        .map(|i| {
            let a = rng.random_range(0..modulus);
            let b = rng.random_range(0..modulus);
            let op = random_op(&mut rng);
            let answer = op.apply_mod(a.into(), b.into(), modulus.into());
            let question = format!("Compute ({a} {} {b}) mod {modulus}.", op.symbol());
            Task::new(format!("arith-{i:04}"), &question, answer.to_string()).with_tags([
                "arith",
                op.tag(),
                mod_tag.as_str(),
            ])
        })
        .collect())
}

/// Evidence-bearing tasks: the operand `x` lives only in the context, except
/// for the leaky fraction whose prompt restates it.
pub fn gen_context_tasks(
    count: usize,
    modulus: u32,
    leak_fraction: f64,
    seed: u64,
) -> Result<Vec<Task>, TaskError> {
    check_modulus(modulus)?;
    if count == 0 {
        return Err(TaskError::EmptyRequest);
    }
    if !(0.0..=1.0).contains(&leak_fraction) {
        return Err(TaskError::InvalidFraction(leak_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_leaky = floor_fraction(leak_fraction, count);
    let leaky: BTreeSet<usize> = index::sample(&mut rng, count, n_leaky)
        .into_iter()
        .collect();
    let mod_tag = format!("mod:{modulus}");
    Ok((0..count)
        .map(|i| {
            let x = rng.random_range(0..modulus);
            let b = rng.random_range(0..modulus);
            let op = random_op(&mut rng);
            let answer = op.apply_mod(x.into(), b.into(), modulus.into());
            let mut question = format!(
                "Using the {EVIDENCE_WORD}, compute (x {} {b}) mod {modulus}",
                op.symbol()
            );
            if leaky.contains(&i) {
                question.push_str(&format!(" where x = {x}"));
            }
            question.push('.');
            let mut task = Task::new(format!("ctx-{i:04}"), &question, answer.to_string())
                .with_tags(["context", op.tag(), mod_tag.as_str()]);
            if leaky.contains(&i) {
                task.tags.insert("prompt-states-evidence".into());
            }
            task.context = Some(format!("x = {x}"));
            task.requires_context = true;
            task
        })
        .collect())
}

/// Every `y mod d = r` question over `0..m` that has at least three answers.
///
/// The ground truth lists all solutions, so several distinct responses verify.
pub fn gen_ambiguous_tasks(modulus: u32) -> Result<Vec<Task>, TaskError> {
    check_modulus(modulus)?;
    let mod_tag = format!("mod:{modulus}");
    let mut tasks = Vec::new();
    for d in 2..=modulus / 3 {
        let r_limit = d.min(modulus.saturating_sub(2 * d));
        for r in 0..r_limit {
            let answers: Vec<String> = (r..modulus)
                .step_by(d as usize)
                .map(|y| y.to_string())
                .collect();
            let question = format!(
                "Name any number y between 0 and {} with y mod {d} = {r}.",
                modulus - 1
            );
            tasks.push(
                Task::new(format!("probe-d{d}-r{r}"), &question, answers.join("||"))
                    .with_tags(["ambiguous", mod_tag.as_str()]),
            );
        }
    }
    Ok(tasks)
}

/// Converts a multiple-choice item into an open cloze task.
pub fn to_cloze(
    question: &str,
    options: &[(&str, &str)],
    correct_label: &str,
) -> Result<Task, TaskError> {
    let mut seen = BTreeSet::new();
    for (_, content) in options {
        if !seen.insert(content.trim()) {
            return Err(TaskError::DuplicateOption(content.to_string()));
        }
    }
    let (_, answer) = options
        .iter()
        .find(|(label, _)| *label == correct_label)
        .ok_or_else(|| TaskError::MissingLabel(correct_label.to_string()))?;
    let id = format!("cloze-{:016x}", fnv1a64(0, question.as_bytes()));
    Ok(Task::new(id, question.trim(), answer.trim().to_string()).with_tags(["cloze"]))
}

/// Drops the evidence from a context-bearing task; the variant must abstain.
pub fn ablate_context(task: &Task) -> Result<Task, TaskError> {
    if !task.requires_context || task.context.is_none() {
        return Err(TaskError::NoContext(task.id.clone()));
    }
    let mut out = task.clone();
    out.id = format!("{}{ABLATED_SUFFIX}", task.id);
    out.context = None;
    out.ground_truth = ABSTAIN.to_string();
    out.tags.insert("ablated".into());
    Ok(out)
}

fn boxed(value: &str) -> String {
    format!("\\boxed{{{value}}}")
}

/// Builds one corrective preference pair per task.
///
/// Answerable tasks pair a bare boxed answer against a padded (conciseness)
/// or stilted (fluency) rendering of the same answer. Ablated tasks pair an
/// abstention against a fabricated answer of the same token length, so the
/// pair contrasts the decision rather than the verbosity.
pub fn make_preference_pairs(tasks: &[Task], seed: u64) -> Result<Vec<PreferencePair>, TaskError> {
    if tasks.is_empty() {
        return Err(TaskError::EmptyTasks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tasks
        .iter()
        .map(|task| {
            if task.is_abstain() {
                let m = task.modulus().unwrap_or(DEFAULT_MODULUS);
                let fake = rng.random_range(0..m);
                PreferencePair {
                    task_id: task.id.clone(),
                    chosen: boxed(ABSTAIN),
                    rejected: boxed(&fake.to_string()),
                    attribute: PreferenceAttribute::Abstention,
                }
            } else {
                let answer = boxed(task.canonical_answer());
                let (template, attribute) = if rng.random_bool(0.5) {
                    (
                        VERBOSE_TEMPLATES[rng.random_range(0..VERBOSE_TEMPLATES.len())],
                        PreferenceAttribute::Conciseness,
                    )
                } else {
                    (
                        STILTED_TEMPLATES[rng.random_range(0..STILTED_TEMPLATES.len())],
                        PreferenceAttribute::Fluency,
                    )
                };
                PreferencePair {
                    task_id: task.id.clone(),
                    rejected: format!("{template} {answer}"),
                    chosen: answer,
                    attribute,
                }
            }
        })
        .collect())
}

fn floor_fraction(fraction: f64, n: usize) -> usize {
    // The epsilon keeps e.g. 0.29 * 100 from flooring to 28.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Interleaves `floor(fraction * |tasks|)` freshly generated text-only tasks
/// into `tasks`, preserving the relative order of the originals.
pub fn mix_text_only(tasks: &[Task], fraction: f64, seed: u64) -> Result<Vec<Task>, TaskError> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(TaskError::InvalidFraction(fraction));
    }
    let n_add = floor_fraction(fraction, tasks.len());
    if n_add == 0 {
        return Ok(tasks.to_vec());
    }
    let modulus = tasks
        .iter()
        .find_map(Task::modulus)
        .unwrap_or(DEFAULT_MODULUS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mod_tag = format!("mod:{modulus}");
    let additions: Vec<Task> = (0..n_add)
        .map(|i| {
            let n = rng.random_range(0..modulus);
            let question = format!("Counting modulo {modulus}, which number comes after {n}?");
            let mut task = Task::new(
                format!("text-{i:04}"),
                &question,
                ((n + 1) % modulus).to_string(),
            )
            .with_tags(["text-only", mod_tag.as_str()]);
            task.is_text_only = true;
            task
        })
        .collect();

    let total = tasks.len() + n_add;
    let slots: BTreeSet<usize> = index::sample(&mut rng, total, n_add).into_iter().collect();
    let mut originals = tasks.iter();
    let mut added = additions.into_iter();
    Ok((0..total)
        .map(|slot| {
            if slots.contains(&slot) {
                added.next().expect("one addition per slot")
            } else {
                originals
                    .next()
                    .expect("remaining slots hold originals")
                    .clone()
            }
        })
        .collect())
}

pub fn write_tasks_jsonl<W: Write>(mut out: W, tasks: &[Task]) -> Result<(), TaskError> {
    for task in tasks {
        serde_json::to_writer(&mut out, task).map_err(|e| TaskError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(input: R) -> Result<Vec<Task>, TaskError> {
    let mut tasks = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line).map_err(|source| TaskError::Parse {
            line: i + 1,
            source,
        })?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{extract_boxed, verify};

    /// Parses `Compute (a op b) mod m.` back out of the prompt.
    fn recompute(prompt: &str) -> i64 {
        let body = prompt.strip_prefix("Compute (").unwrap();
        let (expr, rest) = body.split_once(") mod ").unwrap();
        let m: i64 = rest.split('.').next().unwrap().parse().unwrap();
        let parts: Vec<&str> = expr.split(' ').collect();
        let a: i64 = parts[0].parse().unwrap();
        let b: i64 = parts[2].parse().unwrap();
        let v = match parts[1] {
            "+" => a + b,
            "-" => a - b,
            "*" => a * b,
            other => panic!("unknown op {other}"),
        };
        ((v % m) + m) % m
    }

    #[test]
    fn single_task_matches_direct_arithmetic() {
        let tasks = gen_arith_tasks(1, 10, 7).unwrap();
        let t = &tasks[0];
        assert_eq!(t.ground_truth, recompute(&t.prompt).to_string());
        assert!(t.prompt.ends_with(BOXED_INSTRUCTION));
    }

    #[test]
    fn ground_truths_recompute_for_many_seeds() {
        for seed in 0..20 {
            for m in [2, 3, 10, 16] {
                for t in gen_arith_tasks(50, m, seed).unwrap() {
                    assert_eq!(t.ground_truth, recompute(&t.prompt).to_string());
                    t.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn generation_rejects_bad_requests() {
        assert!(matches!(
            gen_arith_tasks(0, 10, 7),
            Err(TaskError::EmptyRequest)
        ));
        assert!(matches!(
            gen_arith_tasks(5, 1, 7),
            Err(TaskError::InvalidModulus(1))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            gen_arith_tasks(100, 10, 7).unwrap(),
            gen_arith_tasks(100, 10, 7).unwrap()
        );
        assert_ne!(
            gen_arith_tasks(100, 10, 7).unwrap(),
            gen_arith_tasks(100, 10, 8).unwrap()
        );
    }

    #[test]
    fn cloze_conversion() {
        let t = to_cloze("Capital of France?", &[("A", "Paris"), ("B", "Rome")], "A").unwrap();
        assert_eq!(t.prompt, format!("Capital of France? {BOXED_INSTRUCTION}"));
        assert_eq!(t.ground_truth, "Paris");
        assert!(!t.prompt.contains("Rome"));
        let t = to_cloze("2+2?", &[("A", "4"), ("B", "5")], "A").unwrap();
        assert_eq!(t.ground_truth, "4");
    }

    #[test]
    fn cloze_rejects_degenerate_options() {
        assert!(matches!(
            to_cloze("q?", &[("A", "x"), ("B", "x")], "A"),
            Err(TaskError::DuplicateOption(_))
        ));
        assert!(matches!(
            to_cloze("q?", &[("A", "x")], "C"),
            Err(TaskError::MissingLabel(_))
        ));
    }

    #[test]
    fn ablation_produces_abstain_variant_once() {
        let task = gen_context_tasks(1, 10, 0.0, 3).unwrap().remove(0);
        let ablated = ablate_context(&task).unwrap();
        assert_eq!(ablated.context, None);
        assert!(ablated.requires_context);
        assert_eq!(ablated.ground_truth, ABSTAIN);
        assert_eq!(ablated.id, format!("{}{ABLATED_SUFFIX}", task.id));
        ablated.validate().unwrap();
        assert!(matches!(
            ablate_context(&ablated),
            Err(TaskError::NoContext(_))
        ));

        assert_eq!(
            verify("the answer is \\boxed{3}", &ablated.ground_truth).reward,
            0
        );
        assert_eq!(
            verify("\\boxed{<ABSTAIN>}", &ablated.ground_truth).reward,
            1
        );
    }

    #[test]
    fn context_tasks_leak_exactly_the_requested_fraction() {
        let tasks = gen_context_tasks(40, 10, 0.25, 11).unwrap();
        let leaky = tasks
            .iter()
            .filter(|t| t.tags.contains("prompt-states-evidence"))
            .count();
        assert_eq!(leaky, 10);
        for t in &tasks {
            let x: i64 = t
                .context
                .as_ref()
                .unwrap()
                .trim_start_matches("x = ")
                .parse()
                .unwrap();
            let (expr, _) = t.prompt.split_once(") mod").unwrap();
            let expr = expr.split_once("(x ").unwrap().1;
            let op = ArithOp::from_symbol(expr.chars().next().unwrap()).unwrap();
            let b: i64 = expr[2..].parse().unwrap();
            assert_eq!(t.ground_truth, op.apply_mod(x, b, 10).to_string());
        }
    }

    #[test]
    fn ambiguous_tasks_have_at_least_three_answers() {
        let tasks = gen_ambiguous_tasks(10).unwrap();
        assert_eq!(tasks.len(), 5);
        for t in &tasks {
            let answers: Vec<&str> = accepted_answers(&t.ground_truth).collect();
            assert!(answers.len() >= 3, "{}", t.ground_truth);
            for a in answers {
                assert_eq!(
                    verify(&format!("\\boxed{{{a}}}"), &t.ground_truth).reward,
                    1
                );
            }
        }
    }

    #[test]
    fn preference_pairs_follow_construction_rules() {
        let mut tasks = gen_arith_tasks(20, 10, 1).unwrap();
        let ctx = gen_context_tasks(5, 10, 0.0, 2).unwrap();
        tasks.extend(ctx.iter().map(|t| ablate_context(t).unwrap()));
        let pairs = make_preference_pairs(&tasks, 9).unwrap();
        assert_eq!(pairs, make_preference_pairs(&tasks, 9).unwrap());
        for (pair, task) in pairs.iter().zip(&tasks) {
            assert_ne!(pair.chosen, pair.rejected);
            if task.is_abstain() {
                assert_eq!(pair.attribute, PreferenceAttribute::Abstention);
                assert_eq!(verify(&pair.chosen, &task.ground_truth).reward, 1);
                assert_eq!(verify(&pair.rejected, &task.ground_truth).reward, 0);
            } else {
                let c = extract_boxed(&pair.chosen).unwrap();
                assert_eq!(Some(c.clone()), extract_boxed(&pair.rejected));
                assert_eq!(c, task.ground_truth);
                assert!(pair.rejected.len() >= 3 * pair.chosen.len());
            }
        }
        assert!(make_preference_pairs(&[], 0).is_err());
    }

    #[test]
    fn text_only_mixing_counts() {
        let tasks = gen_arith_tasks(100, 10, 4).unwrap();
        let mixed = mix_text_only(&tasks, 0.25, 5).unwrap();
        assert_eq!(mixed.iter().filter(|t| t.is_text_only).count(), 25);
        assert!(mixed
            .iter()
            .filter(|t| t.is_text_only)
            .all(|t| !t.requires_context));
        let originals: Vec<&Task> = mixed.iter().filter(|t| !t.is_text_only).collect();
        assert_eq!(originals, tasks.iter().collect::<Vec<_>>());
        assert_eq!(mixed, mix_text_only(&tasks, 0.25, 5).unwrap());

        assert_eq!(mix_text_only(&tasks, 0.0, 5).unwrap(), tasks);
        assert!(mix_text_only(&[], 1.0, 5).unwrap().is_empty());
        assert!(mix_text_only(&tasks, 1.5, 5).is_err());
        assert_eq!(mix_text_only(&tasks, 0.29, 5).unwrap().len(), 129);
    }

    #[test]
    fn jsonl_roundtrip_and_field_names() {
        let mut tasks = gen_arith_tasks(3, 10, 1).unwrap();
        tasks.extend(gen_context_tasks(2, 10, 0.5, 1).unwrap());
        let mut buf = Vec::new();
        write_tasks_jsonl(&mut buf, &tasks).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = first
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "context",
                "ground_truth",
                "id",
                "is_text_only",
                "prompt",
                "requires_context",
                "tags",
                "tier"
            ]
        );
        assert_eq!(read_tasks_jsonl(buf.as_slice()).unwrap(), tasks);
    }

    #[test]
    fn jsonl_rejects_invariant_violations() {
        let bad = r#"{"id":"x","prompt":"p","ground_truth":"3","context":null,"requires_context":true,"tags":[],"tier":"unknown","is_text_only":false}"#;
        assert!(matches!(
            read_tasks_jsonl(bad.as_bytes()),
            Err(TaskError::Invalid { .. })
        ));
    }
}
