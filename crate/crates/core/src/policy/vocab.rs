//! Fixed token table for the toy policy.
//!
//! Answers are single tokens that render as a complete `\boxed{v}`, so a
//! response's final answer is simply its last answer token.

use super::PolicyError;

pub type TokenId = u32;

pub const EOS: TokenId = 0;
pub const ABSTAIN_TOKEN: TokenId = 1;
const FIRST_ANSWER: TokenId = 2;

/// Connective words available for padding and phrasing.
pub const FILLER_WORDS: &[&str] = &[
    "well", "let", "me", "think", "about", "this", "so", "the", "answer", "is", "we", "get",
    "hence",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    n_answers: u32,
    entries: Vec<String>,
}

impl Vocab {
    /// Vocabulary with answer tokens for the values `0..n_answers`.
    pub fn new(n_answers: u32) -> Self {
        let mut entries = vec![String::new(), "\\boxed{<ABSTAIN>}".to_string()];
        entries.extend((0..n_answers).map(|v| format!("\\boxed{{{v}}}")));
        entries.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
        Self { n_answers, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_answers(&self) -> u32 {
        self.n_answers
    }

    pub fn answer_token(&self, value: u32) -> Option<TokenId> {
        (value < self.n_answers).then_some(FIRST_ANSWER + value)
    }

    /// Answer value of a token, if it is an answer token.
    pub fn answer_value(&self, token: TokenId) -> Option<u32> {
        (FIRST_ANSWER..FIRST_ANSWER + self.n_answers)
            .contains(&token)
            .then(|| token - FIRST_ANSWER)
    }

    /// Answer or abstention token; either completes a response.
    pub fn is_final(&self, token: TokenId) -> bool {
        token == ABSTAIN_TOKEN || self.answer_value(token).is_some()
    }

    pub fn is_filler(&self, token: TokenId) -> bool {
        token >= FIRST_ANSWER + self.n_answers && (token as usize) < self.len()
    }

    pub fn filler_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (FIRST_ANSWER + self.n_answers..self.len() as TokenId).filter(|&t| self.is_filler(t))
    }

    pub fn token_str(&self, token: TokenId) -> Option<&str> {
        self.entries.get(token as usize).map(String::as_str)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != EOS)
            .filter_map(|&t| self.token_str(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`render`](Self::render) for whitespace-separated text; appends EOS.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut out = text
            .split_whitespace()
            .map(|piece| {
                self.entries
                    .iter()
                    .skip(1)
                    .position(|e| e == piece)
                    .map(|p| p as TokenId + 1)
                    .ok_or_else(|| PolicyError::UnknownWord(piece.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(EOS);
        Ok(out)
    }
}
