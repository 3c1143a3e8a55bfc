//! Synthetic corpus: rendering examples, determinism and on-disk format.

use proptest::prelude::*;
use stoa_vlp::synthetic_world::{
    corpus_hash, generate_corpus, generate_scene, read_corpus, render_scene, write_corpus, Action, ActionUnit, Color,
    CorpusConfig, ObjectSpec, SceneSpec, Shape, BLOB_HEADER_BYTES,
};

#[test]
fn forced_empty_scene() {
    let cfg = CorpusConfig::default();
    let s = render_scene(&SceneSpec::sample_with_count(7, &cfg, 0), &cfg).unwrap();
    assert!(s.detections.iter().all(|d| d.is_empty()));
    assert_eq!(s.detections.len(), 4);
    assert_eq!(cfg.vocab.decode(&s.caption.tokens).unwrap(), "[CLS] empty scene [SEP]");
    assert!(s.frames.data().iter().all(|&p| p == 0.0));
}

#[test]
fn same_seed_same_record() {
    let cfg = CorpusConfig::default();
    assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
    assert_ne!(generate_scene(42, &cfg).unwrap(), generate_scene(43, &cfg).unwrap());
}

#[test]
fn linear_motion_lands_where_expected() {
    let cfg = CorpusConfig::default();
    let mut obj = ObjectSpec::still(Shape::Square, Color::ALL[0], [0.2, 0.2], 0.12);
    obj.velocity = [0.1, 0.0];
    let scene = SceneSpec {
        seed: 42,
        objects: vec![obj],
        actions: vec![ActionUnit::Single {
            object: 0,
            action: Action::Moves,
        }],
    };
    let s = render_scene(&scene, &cfg).unwrap();
    let b = s.detections[3][0].bbox;
    let cx = 0.5 * (b[0] + b[2]);
    // 0.2 + 3 * 0.1
    assert!((cx - 0.5).abs() <= 1.0 / 32.0, "center x {cx}");
}

#[test]
fn corpus_round_trip() {
    let cfg = CorpusConfig::default();
    let samples = generate_corpus(3, 16, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&samples, dir.path()).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap(), samples);
}

#[test]
fn empty_corpus_is_readable() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(&[], dir.path()).unwrap();
    assert!(m.records.is_empty());
    assert!(read_corpus(dir.path()).unwrap().is_empty());
}

#[test]
fn blob_size_is_exact() {
    let cfg = CorpusConfig::default();
    let samples = generate_corpus(0, 512, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_corpus(&samples, dir.path()).unwrap();
    let expected = 512 * 4 * 3 * 32 * 32 * 4 + BLOB_HEADER_BYTES;
    assert_eq!(m.blob_bytes, expected);
    assert_eq!(std::fs::metadata(&m.blob_path).unwrap().len(), expected);
}

#[test]
fn corpus_bytes_are_reproducible() {
    let cfg = CorpusConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&generate_corpus(9, 8, &cfg).unwrap(), a.path()).unwrap();
    write_corpus(&generate_corpus(9, 8, &cfg).unwrap(), b.path()).unwrap();
    assert_eq!(corpus_hash(a.path()).unwrap(), corpus_hash(b.path()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn records_respect_config_bounds(seed in any::<u64>()) {
        let cfg = CorpusConfig::default();
        let s = generate_scene(seed, &cfg).unwrap();
        prop_assert!(s.caption.len() <= cfg.max_text_len);
        prop_assert_eq!(s.caption.tokens.len(), s.caption.tags.len());
        prop_assert!(s.frames.data().iter().all(|p| (0.0..=1.0).contains(p)));
        for dets in &s.detections {
            prop_assert!(dets.len() <= cfg.max_objects);
            for w in dets.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            for d in dets {
                prop_assert!(d.bbox[0] <= d.bbox[2] && d.bbox[1] <= d.bbox[3]);
                prop_assert!(d.bbox.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
