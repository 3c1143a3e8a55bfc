use std::collections::HashMap;
use std::path::Path;

use crate::error::{Result, StoaError};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const ANS: &str = "[ANS]";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, CLS, SEP, MASK, ANS];

pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"];
pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const VERB_NAMES: [&str; 6] = ["moves", "bounces", "spins", "shrinks", "grows", "collides"];
pub const FUNCTION_WORDS: [&str; 10] = [
    "the", "and", "with", "empty", "scene", "what", "color", "is", "does", "do",
];

/// Closed whitespace vocabulary; line number in the vocabulary file = id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The template vocabulary: specials, function words, colors, shapes, verbs.
    pub fn builtin() -> Self {
        let tokens = SPECIAL_TOKENS
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(COLOR_NAMES.iter())
            .chain(SHAPE_NAMES.iter())
            .chain(VERB_NAMES.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_tokens(tokens).expect("builtin vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(StoaError::Config(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(StoaError::Config(format!("duplicate vocabulary entry {t}")));
            }
        }
        let vocab = Self { tokens, index };
        for required in SPECIAL_TOKENS
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(COLOR_NAMES.iter())
            .chain(SHAPE_NAMES.iter())
            .chain(VERB_NAMES.iter())
        {
            if !vocab.index.contains_key(*required) {
                return Err(StoaError::Config(format!(
                    "vocabulary is missing template token {required}"
                )));
            }
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StoaError::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| StoaError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| StoaError::Vocabulary(token.to_string()))
    }

    /// Id of a token known to be present (template words and specials).
    pub fn known(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| StoaError::Vocabulary(format!("#{id}")))
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.tokens
            .get(id as usize)
            .is_some_and(|t| SPECIAL_TOKENS.contains(&t.as_str()))
    }

    /// Whitespace tokenisation; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn color_ids(&self) -> Vec<u32> {
        COLOR_NAMES.iter().map(|c| self.known(c)).collect()
    }

    pub fn verb_ids(&self) -> Vec<u32> {
        VERB_NAMES.iter().map(|c| self.known(c)).collect()
    }

    /// Tokens that may replace a masked position (everything but specials).
    pub fn content_ids(&self) -> Vec<u32> {
        (0..self.len() as u32).filter(|&i| !self.is_special(i)).collect()
    }
}
