//! Training loop, checkpoints and probes.

mod common;

use std::fs;

use common::tiny_corpus_config;
use stoa_vlp::harness::{
    checkpoint_path, decode_captions, pretrain_on, qa_probe, retrieval_from_scores, retrieval_probe, run_probe,
    train_step, visual_features, Adam, Precision, ProbeTask, RunConfig, Trained,
};
use stoa_vlp::nn_core::{f64_test_mode, Tensor};
use stoa_vlp::objectives::LossToggles;
use stoa_vlp::synthetic_world::{build_qa, generate_corpus, CorpusConfig, QuestionKind, SampleRecord, Vocabulary};
use stoa_vlp::StoaError;

fn tiny_run(steps: usize, precision: Precision) -> (RunConfig, Vec<SampleRecord>) {
    let mut cfg = RunConfig::tiny();
    cfg.steps = steps;
    cfg.precision = precision;
    cfg.checkpoint_every = 0;
    (cfg, generate_corpus(5, 16, &tiny_corpus_config()).unwrap())
}

#[test]
fn first_step_is_reproducible() {
    let (cfg, corpus) = tiny_run(3, Precision::F64);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, a) = pretrain_on(&cfg, &corpus, Some(da.path())).unwrap();
    let (_, b) = pretrain_on(&cfg, &corpus, Some(db.path())).unwrap();
    assert_eq!(a.history[0], b.history[0]);
    assert_eq!(a.history, b.history);
    let log = |s: &stoa_vlp::harness::PretrainSummary| fs::read_to_string(s.metrics_log.as_ref().unwrap()).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_eq!(log(&a).lines().count(), 3);
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let (cfg, corpus) = tiny_run(0, Precision::F32);
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = pretrain_on(&cfg, &corpus, Some(dir.path())).unwrap();
    assert!(s.history.is_empty());
    assert_eq!(s.checkpoints, vec![checkpoint_path(dir.path(), 0)]);
    let files: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(files.len(), 1);
    assert_eq!(fs::read_to_string(s.metrics_log.unwrap()).unwrap(), "");
}

#[test]
fn checkpoint_cadence() {
    let (mut cfg, corpus) = tiny_run(5, Precision::F32);
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = pretrain_on(&cfg, &corpus, Some(dir.path())).unwrap();
    let want: Vec<_> = [0, 2, 4, 5].iter().map(|&k| checkpoint_path(dir.path(), k)).collect();
    assert_eq!(s.checkpoints, want);
}

#[test]
fn checkpoint_round_trip_keeps_probe_outputs() {
    let (cfg, corpus) = tiny_run(2, Precision::F32);
    let dir = tempfile::tempdir().unwrap();
    let (trained, s) = pretrain_on(&cfg, &corpus, Some(dir.path())).unwrap();
    let (loaded, step) = Trained::load(s.checkpoints.last().unwrap()).unwrap();
    assert_eq!(step, 2);
    assert_eq!(loaded.config.steps, cfg.steps);
    assert_eq!(loaded.store.len(), trained.store.len());
    for id in trained.store.ids() {
        let (a, b) = (trained.store.get(id), loaded.store.get(id));
        for (&x, &y) in a.data().iter().zip(b.data()) {
            if f64_test_mode() {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            } else {
                assert_eq!(x, y, "{}", trained.store.name(id));
            }
        }
    }
    if !f64_test_mode() {
        let a = run_probe(&trained, ProbeTask::Retrieval, &corpus).unwrap();
        let b = run_probe(&loaded, ProbeTask::Retrieval, &corpus).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn probes_never_touch_the_weights() {
    let mut cfg = RunConfig::desk();
    cfg.adapt.caption_steps = 2;
    cfg.adapt.qa_steps = 2;
    cfg.adapt.batch = 4;
    let trained = Trained::init(&cfg).unwrap();
    let before = trained.store.clone();
    let corpus = generate_corpus(3, 6, &CorpusConfig::default()).unwrap();
    for task in [ProbeTask::Caption, ProbeTask::Qa, ProbeTask::Retrieval] {
        run_probe(&trained, task, &corpus).unwrap();
    }
    for id in before.ids() {
        assert_eq!(before.get(id), trained.store.get(id));
    }
}

#[test]
fn question_without_answer_slot_is_rejected() {
    let trained = Trained::init(&RunConfig::desk()).unwrap();
    let vocab = Vocabulary::builtin();
    let corpus = generate_corpus(4, 4, &CorpusConfig::default()).unwrap();
    let mut items = build_qa(&corpus, &vocab);
    assert!(!items.is_empty());
    let ans = vocab.known("[ANS]");
    items[0].question.retain(|&t| t != ans);
    let err = qa_probe(&trained.model, &trained.store, &corpus, &items, &vocab).unwrap_err();
    assert!(matches!(err, StoaError::Contract(_)), "{err}");
}

#[test]
fn oracle_matching_head_fixes_stage_one_mistakes() {
    // Stage 1 prefers the wrong candidate everywhere; a perfect matching
    // head restores the diagonal once the truth is inside the top K.
    let n = 5;
    let data = (0..n * n)
        .map(|i| {
            let (v, t) = (i / n, i % n);
            if v == t {
                0.0
            } else {
                1.0 - 0.1 * ((v + t) % n) as f64
            }
        })
        .collect();
    let sim = Tensor::from_vec(n, n, data);
    let oracle = |pairs: &[(usize, usize)]| Ok(pairs.iter().map(|&(v, t)| f64::from(u8::from(v == t))).collect());
    let r = retrieval_from_scores(&sim, n, oracle).unwrap();
    assert_eq!(r.text_to_video, [1.0; 3]);
    assert_eq!(r.video_to_text, [1.0; 3]);

    // Top-1 rerank cannot reach the truth ranked last by stage 1.
    let r = retrieval_from_scores(&sim, 1, oracle).unwrap();
    assert_eq!(r.text_to_video[0], 0.0);
    assert_eq!(r.video_to_text[0], 0.0);
}

#[test]
fn caption_decoding_is_deterministic() {
    let trained = Trained::init(&RunConfig::desk()).unwrap();
    let corpus = generate_corpus(8, 3, &CorpusConfig::default()).unwrap();
    let visual = visual_features(&trained.model, &trained.store, &corpus).unwrap();
    let max_len = trained.model.config().max_text_len;
    let a = decode_captions(&trained.model, &trained.store, &visual, max_len).unwrap();
    let b = decode_captions(&trained.model, &trained.store, &visual, max_len).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|c| c.len() <= max_len));
}

#[test]
fn untrained_retrieval_is_at_chance() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        let trained = Trained::init(&cfg).unwrap();
        let corpus = generate_corpus(1000 + seed, 64, &CorpusConfig::default()).unwrap();
        total += retrieval_probe(&trained.model, &trained.store, &corpus)
            .unwrap()
            .mean_r1();
    }
    let mean = total / 10.0;
    assert!((mean - 1.0 / 64.0).abs() <= 0.05, "mean R@1 {mean}");
}

#[test]
fn untrained_color_answers_are_at_chance() {
    let vocab = Vocabulary::builtin();
    let chance = 1.0 / vocab.color_ids().len() as f64;
    let mut total = 0.0;
    for seed in 0..10 {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        let trained = Trained::init(&cfg).unwrap();
        let corpus = generate_corpus(2000 + seed, 64, &CorpusConfig::default()).unwrap();
        let items: Vec<_> = build_qa(&corpus, &vocab)
            .into_iter()
            .filter(|q| q.kind == QuestionKind::Color)
            .collect();
        let r = qa_probe(&trained.model, &trained.store, &corpus, &items, &vocab).unwrap();
        total += r.restricted_accuracy;
    }
    let mean = total / 10.0;
    assert!(
        (mean - chance).abs() <= 0.08,
        "mean color accuracy {mean}, chance {chance}"
    );
}

#[test]
fn non_finite_values_abort_with_the_step() {
    let (cfg, corpus) = tiny_run(1, Precision::F64);
    let mut trained = Trained::init(&cfg).unwrap();
    let scale = trained.model.logit_scale_param();
    trained.store.set(scale, Tensor::scalar(f64::NAN));
    let mut optim = Adam::new(cfg.optim, &trained.store);
    let batch: Vec<&SampleRecord> = corpus.iter().take(4).collect();
    let mut rng = stoa_vlp::model::StoaModel::step_rng(0, 1);
    let toggles = LossToggles::none().with(stoa_vlp::objectives::LossKind::Vtc, true);
    let err = train_step(
        &trained.model,
        &mut trained.store,
        &mut optim,
        &batch,
        toggles,
        &mut rng,
        1e-3,
        Precision::F64,
    )
    .unwrap_err();
    assert!(matches!(err, StoaError::Numeric(_)), "{err}");
    assert!(err.to_string().contains("vtc"), "{err}");

    // A corrupt pixel poisons every loss; the loop reports where it stopped.
    let (cfg, mut corpus) = tiny_run(3, Precision::F64);
    for s in &mut corpus {
        s.frames.data_mut()[0] = f32::NAN;
    }
    let err = pretrain_on(&cfg, &corpus, None).unwrap_err();
    assert!(matches!(err, StoaError::Numeric(_)), "{err}");
    assert!(err.to_string().contains("step 1: "), "{err}");
}
