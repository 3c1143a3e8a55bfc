use std::path::Path;

use super::vocab::Vocabulary;
use crate::error::{Result, StoaError};
use crate::kv::{self, parse_num, KvSection};

/// Which caption clause templates the generator may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateSet {
    /// Only "the <color> <shape> <verb>".
    Single,
    /// Single clauses plus "the <color> <shape> collides with the <color> <shape>".
    Mixed,
}

impl TemplateSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateSet::Single => "single",
            TemplateSet::Mixed => "mixed",
        }
    }

    fn parse(value: &str) -> Result<Self> {
        match value {
            "single" => Ok(TemplateSet::Single),
            "mixed" => Ok(TemplateSet::Mixed),
            other => Err(StoaError::Config(format!("templates: unknown set {other:?}"))),
        }
    }
}

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Frames per clip (T).
    pub frames: usize,
    /// Frame side in pixels (S).
    pub image_size: usize,
    /// Patch side the frame must be divisible by.
    pub patch: usize,
    /// Maximum objects per scene and detections kept per frame (K).
    pub max_objects: usize,
    /// Maximum caption length including [CLS] and [SEP].
    pub max_text_len: usize,
    pub vocab: Vocabulary,
    pub templates: TemplateSet,
    /// Probability of replacing a detection's class with a random other class.
    pub label_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            image_size: 32,
            patch: 8,
            max_objects: 3,
            max_text_len: 16,
            vocab: Vocabulary::builtin(),
            templates: TemplateSet::Mixed,
            label_noise: 0.0,
        }
    }
}

impl CorpusConfig {
    /// 12 frames of 224×224 with 16-pixel patches, K = 10, captions up to 32 tokens.
    pub fn paper_scale() -> Self {
        Self {
            frames: 12,
            image_size: 224,
            patch: 16,
            max_objects: 10,
            max_text_len: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(StoaError::Config("T must be at least 1".into()));
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(StoaError::Config(format!(
                "frame size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.max_objects == 0 {
            return Err(StoaError::Config("K_max must be at least 1".into()));
        }
        if self.max_text_len < 6 {
            return Err(StoaError::Config(format!(
                "L_max {} cannot hold a single clause",
                self.max_text_len
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(StoaError::Config("label_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies keys from a flat config section. Relative `vocab_path` values
    /// resolve against `base_dir`.
    pub fn apply(&mut self, section: &KvSection, base_dir: &Path) -> Result<()> {
        for (key, value) in &section.entries {
            match key.as_str() {
                "T" => self.frames = parse_num(key, value)?,
                "S" => self.image_size = parse_num(key, value)?,
                "patch" => self.patch = parse_num(key, value)?,
                "K_max" => self.max_objects = parse_num(key, value)?,
                "L_max" => self.max_text_len = parse_num(key, value)?,
                "vocab_path" => self.vocab = Vocabulary::load(&base_dir.join(value))?,
                "templates" => self.templates = TemplateSet::parse(value)?,
                "label_noise" => self.label_noise = parse_num(key, value)?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sections = kv::read(path)?;
        let mut cfg = Self::default();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply(&sections[0], base)?;
        Ok(cfg)
    }

    pub fn num_classes(&self) -> usize {
        super::NUM_CLASSES
    }
}
