//! Deterministic moving-shapes clips with exact detections and tagged captions.

mod config;
mod corpus_io;
mod qa;
mod render;
mod scene;
mod vocab;

pub use config::{CorpusConfig, TemplateSet};
pub use corpus_io::{
    corpus_hash, read_corpus, write_corpus, CorpusManifest, RecordDescriptor, BLOB_FILE, BLOB_HEADER_BYTES, BLOB_MAGIC,
    BLOB_VERSION, MANIFEST_FILE,
};
pub use qa::{build_qa, QaItem, QuestionKind};
pub use render::{
    build_caption, mask_box, noun_classes, object_mask, render_scene, Caption, Detection, Frames, PosTag, SampleRecord,
};
pub use scene::{
    class_id, class_parts, reflect, Action, ActionUnit, Color, ObjectSpec, SceneSpec, Shape, MARGIN, MAX_SPEED,
};
pub use vocab::{
    Vocabulary, ANS, CLS, COLOR_NAMES, FUNCTION_WORDS, MASK, PAD, SEP, SHAPE_NAMES, SPECIAL_TOKENS, VERB_NAMES,
};

use crate::error::{Result, StoaError};

/// Number of detector classes (3 shapes × 8 colors).
pub const NUM_CLASSES: usize = 24;

/// Samples a scene from `seed` and renders it.
pub fn generate_scene(seed: u64, config: &CorpusConfig) -> Result<SampleRecord> {
    config.validate()?;
    render_scene(&SceneSpec::sample(seed, config), config)
}

/// Seed of the `index`-th clip of a corpus generated from `base_seed`.
pub fn corpus_seed(base_seed: u64, index: u64) -> u64 {
    base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// `count` independent clips.
pub fn generate_corpus(base_seed: u64, count: usize, config: &CorpusConfig) -> Result<Vec<SampleRecord>> {
    (0..count as u64)
        .map(|i| generate_scene(corpus_seed(base_seed, i), config))
        .collect()
}

/// Like [`generate_corpus`] but skips seeds whose caption repeats an
/// earlier one, so every caption identifies its clip. Gives up after
/// `100 · count` seeds.
pub fn generate_unique_corpus(base_seed: u64, count: usize, config: &CorpusConfig) -> Result<Vec<SampleRecord>> {
    let mut out: Vec<SampleRecord> = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for i in 0..(count as u64).saturating_mul(100) {
        if out.len() == count {
            break;
        }
        let s = generate_scene(corpus_seed(base_seed, i), config)?;
        if seen.insert(s.caption.tokens.clone()) {
            out.push(s);
        }
    }
    if out.len() < count {
        return Err(StoaError::Refused(format!(
            "only {} distinct captions found for {count} requested clips",
            out.len()
        )));
    }
    Ok(out)
}
