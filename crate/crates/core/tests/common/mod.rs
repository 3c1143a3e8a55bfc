//! Trials shared by the module tests and the acceptance target.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stoa_vlp::encoders::TextAttention;
use stoa_vlp::fusion::{FusionConfig, FusionEncoder, FusionInput, RowRef};
use stoa_vlp::nn_core::{Graph, ParamStore, Tensor, TransformerConfig};
use stoa_vlp::trajectory::{
    roi_align_weights, select_trajectories, ObjectFeatures, ObjectSlots, TrajectoryConfig, TrajectoryModule, ROI_GRID,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bilinear value at normalized `(x, y)` of a `grid × grid` map stored
/// row-major in `feat` (one row per position).
pub fn bilinear_sample(feat: &Tensor, grid: usize, x: f64, y: f64) -> Vec<f64> {
    let clampc = |u: f64| (u * grid as f64 - 0.5).max(0.0).min((grid - 1) as f64);
    let (px, py) = (clampc(x), clampc(y));
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(grid - 1), (y0 + 1).min(grid - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let at = |yy: usize, xx: usize, c: usize| feat.get(yy * grid + xx, c);
    (0..feat.cols())
        .map(|c| {
            let top = (1.0 - fx) * at(y0, x0, c) + fx * at(y0, x1, c);
            let bottom = (1.0 - fx) * at(y1, x0, c) + fx * at(y1, x1, c);
            (1.0 - fy) * top + fy * bottom
        })
        .collect()
}

/// RoIAlign oracle: 2×2 sample points at the cell centers of the box, then
/// an element-wise max over the four samples.
pub fn roi_oracle(feat: &Tensor, grid: usize, b: [f64; 4]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; feat.cols()];
    for cy in 0..2 {
        for cx in 0..2 {
            let x = b[0] + (cx as f64 + 0.5) / 2.0 * (b[2] - b[0]);
            let y = b[1] + (cy as f64 + 0.5) / 2.0 * (b[3] - b[1]);
            for (o, v) in out.iter_mut().zip(bilinear_sample(feat, grid, x, y)) {
                *o = o.max(v);
            }
        }
    }
    out
}

/// The library's pooling path: sampling weights, matmul, max over cells.
pub fn roi_pooled(feat: &Tensor, grid: usize, b: [f64; 4]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = g.constant(feat.clone());
    let s = g.const_left_mul(Arc::new(roi_align_weights(b, grid)), f);
    let p = g.max_pool_rows(s, ROI_GRID * ROI_GRID);
    g.value(p).row(0).to_vec()
}

/// Largest deviation from the oracle over `cases` random (grid, box) pairs.
pub fn roi_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let grid = r.gen_range(2..=6);
        let feat = Tensor::randn(grid * grid, 5, 1.0, &mut r);
        let (xa, xb): (f64, f64) = (r.gen(), r.gen());
        let (ya, yb): (f64, f64) = (r.gen(), r.gen());
        let b = [xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb)];
        let want = roi_oracle(&feat, grid, b);
        let got = roi_pooled(&feat, grid, b);
        for (w, g) in want.iter().zip(&got) {
            worst = worst.max((w - g).abs());
        }
    }
    worst
}

pub fn trajectory_module(store: &mut ParamStore, seed: u64) -> TrajectoryModule {
    let cfg = TrajectoryConfig {
        frames: 4,
        per_frame: 3,
        grid: 4,
        trajectories: 4,
        transformer: TransformerConfig::new(2, 2, 8),
        out_width: 6,
    };
    TrajectoryModule::new(store, cfg, &mut rng(seed)).unwrap()
}

pub fn random_slots(r: &mut ChaCha8Rng, frames: usize, k: usize, classes: usize) -> ObjectSlots {
    let n = frames * k;
    ObjectSlots {
        frames,
        per_frame: k,
        boxes: (0..n).map(|_| [0.1, 0.1, 0.6, 0.6]).collect(),
        class_ids: (0..n).map(|_| r.gen_range(0..classes)).collect(),
        confidences: (0..n).map(|_| r.gen_range(0.5..1.0)).collect(),
        validity: (0..n).map(|_| r.gen_bool(0.7)).collect(),
    }
}

/// Largest change of any trajectory embedding when every object slot
/// outside its class mask is overwritten with fresh noise.
pub fn mask_soundness_max_delta(trials: usize, seed: u64) -> f64 {
    let mut store = ParamStore::new();
    let module = trajectory_module(&mut store, seed);
    let (t, k, h) = (4, 3, 8);
    let mut r = rng(seed ^ 0xABCD);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let slots = random_slots(&mut r, t, k, 5);
        let sel = select_trajectories(&slots, 4).unwrap();
        let base = Tensor::randn(t * k, h, 1.0, &mut r);
        let encode = |o: Tensor| -> Option<Tensor> {
            let mut g = Graph::new(&store);
            let o = g.constant(o);
            let feats = ObjectFeatures {
                o,
                slots: vec![slots.clone()],
            };
            let sets = module
                .encode_trajectories(&mut g, &feats, std::slice::from_ref(&sel))
                .unwrap();
            sets[0].o.map(|v| g.value(v).clone())
        };
        let Some(reference) = encode(base.clone()) else {
            continue;
        };
        for (c, mask) in sel.masks.iter().take(sel.present()).enumerate() {
            let mut perturbed = base.clone();
            for s in 0..t * k {
                if !mask[s] {
                    for v in perturbed.row_mut(s) {
                        *v += 10.0 * r.gen_range(-1.0..1.0);
                    }
                }
            }
            let out = encode(perturbed).unwrap();
            for (a, b) in out.row(c).iter().zip(reference.row(c)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

pub fn fusion_encoder(store: &mut ParamStore, layers: usize, seed: u64) -> FusionEncoder {
    let cfg = FusionConfig {
        frames: 4,
        max_tokens: 40,
        transformer: TransformerConfig::new(layers, 2, 8),
    };
    FusionEncoder::new(store, cfg, &mut rng(seed)).unwrap()
}

/// Runs causal fusion on a sequence and on a copy whose text suffix after a
/// random cut is replaced (possibly with a different length). Returns the
/// number of prefix or non-text output values that are not bit-identical.
pub fn prefix_invariance_violations(trials: usize, seed: u64) -> usize {
    let mut store = ParamStore::new();
    let enc = fusion_encoder(&mut store, 2, seed);
    let mut r = rng(seed ^ 0x5151);
    let mut bad = 0;
    for _ in 0..trials {
        let video = Tensor::randn(4, 8, 1.0, &mut r);
        let objects = Tensor::randn(r.gen_range(1..4), 8, 1.0, &mut r);
        let actions = Tensor::randn(2, 8, 1.0, &mut r);
        let len = r.gen_range(2..10);
        let cut = r.gen_range(0..len - 1);
        let text = Tensor::randn(len, 8, 1.0, &mut r);
        let new_len = r.gen_range(cut + 2..12);
        let mut data = text.data()[..(cut + 1) * 8].to_vec();
        data.extend(Tensor::randn(new_len - cut - 1, 8, 1.0, &mut r).into_data());
        let text2 = Tensor::from_vec(new_len, 8, data);
        // A second sequence in the batch must not matter either.
        let other = Tensor::randn(5, 8, 1.0, &mut r);

        let run = |text: &Tensor| -> (Tensor, Vec<usize>) {
            let mut g = Graph::new(&store);
            let (v, o, a, t, u) = (
                g.constant(video.clone()),
                g.constant(objects.clone()),
                g.constant(actions.clone()),
                g.constant(text.clone()),
                g.constant(other.clone()),
            );
            let inputs = [
                FusionInput {
                    video: RowRef::range(v, 0, 4),
                    objects: Some(RowRef::range(o, 0, objects.rows())),
                    actions: Some(RowRef::range(a, 0, 2)),
                    text: RowRef::range(t, 0, text.rows()),
                    text_sep: text.rows() - 1,
                },
                FusionInput {
                    video: RowRef::range(v, 0, 4),
                    objects: None,
                    actions: None,
                    text: RowRef::range(u, 0, 5),
                    text_sep: 4,
                },
            ];
            let out = enc.fuse(&mut g, &inputs, TextAttention::Causal).unwrap();
            let l = out.layouts[0];
            let keep: Vec<usize> = (0..l.text.0 + cut + 1).collect();
            (g.value(out.h).clone(), keep)
        };
        let (h1, keep) = run(&text);
        let (h2, _) = run(&text2);
        for &p in &keep {
            for (a, b) in h1.row(p).iter().zip(h2.row(p)) {
                if a.to_bits() != b.to_bits() {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// Corpus settings matching `ModelConfig::tiny()`.
pub fn tiny_corpus_config() -> stoa_vlp::synthetic_world::CorpusConfig {
    stoa_vlp::synthetic_world::CorpusConfig {
        frames: 2,
        image_size: 8,
        patch: 4,
        max_objects: 2,
        max_text_len: 6,
        ..Default::default()
    }
}

pub struct TinySetup {
    pub model: stoa_vlp::model::StoaModel,
    pub store: ParamStore,
    pub batch: Vec<stoa_vlp::synthetic_world::SampleRecord>,
}

/// Tiny model plus a four-clip batch whose captions all carry a noun and a
/// verb, so every loss is active.
pub fn tiny_setup(seed: u64) -> TinySetup {
    use stoa_vlp::synthetic_world::{generate_corpus, PosTag};
    let cfg = tiny_corpus_config();
    let batch: Vec<_> = generate_corpus(seed, 64, &cfg)
        .unwrap()
        .into_iter()
        .filter(|s| {
            s.caption.tags.contains(&PosTag::Noun)
                && s.caption.tags.contains(&PosTag::Verb)
                && s.detections.iter().any(|d| !d.is_empty())
        })
        .take(4)
        .collect();
    assert_eq!(batch.len(), 4, "not enough informative tiny clips");
    let (model, store) =
        stoa_vlp::model::StoaModel::build(stoa_vlp::model::ModelConfig::tiny(), &cfg.vocab, seed).unwrap();
    TinySetup { model, store, batch }
}

fn single_loss(
    setup: &TinySetup,
    store: &ParamStore,
    kind: stoa_vlp::objectives::LossKind,
) -> (f64, Option<stoa_vlp::nn_core::ParamGrads>) {
    use stoa_vlp::objectives::LossToggles;
    let mut g = Graph::new(store);
    let refs: Vec<_> = setup.batch.iter().collect();
    let toggles = LossToggles::none().with(kind, true);
    let out = setup
        .model
        .pretrain_losses(&mut g, &refs, toggles, &mut rng(77))
        .unwrap();
    let (_, var) = *out.parts.iter().find(|p| p.0 == kind).expect("loss is active");
    let value = g.value(var).item();
    (value, Some(g.backward(var).param_grads(&g)))
}

pub struct GradReport {
    pub max_rel_error: f64,
    pub coords: usize,
    pub loss: f64,
}

/// Central differences at two coordinates of every trainable parameter
/// tensor, against backprop through the full model.
pub fn loss_gradient_check(kind: stoa_vlp::objectives::LossKind, seed: u64) -> GradReport {
    use stoa_vlp::nn_core::{finite_difference_at, relative_error};
    use stoa_vlp::objectives::LossKind;
    let setup = tiny_setup(seed);
    let (loss, grads) = single_loss(&setup, &setup.store, kind);
    let grads = grads.unwrap();
    let mut r = rng(seed ^ 0x6EAD);
    // The alignment losses read the text side through a stop-gradient, so
    // central differences over text parameters measure a path backprop
    // deliberately cuts; those are covered by `text_side_gradients`.
    let frozen = if matches!(kind, LossKind::Ota | LossKind::Asp) {
        setup.model.text_params(&setup.store)
    } else {
        Vec::new()
    };
    let mut coords = Vec::new();
    for id in setup.store.ids().filter(|id| !frozen.contains(id)) {
        let n = setup.store.get(id).len();
        for _ in 0..2.min(n) {
            coords.push((id, r.gen_range(0..n)));
        }
    }
    let numeric = finite_difference_at(|s| Ok(single_loss(&setup, s, kind).0), &setup.store, &coords, 1e-5).unwrap();
    let mut worst = 0.0f64;
    for (&(id, i), n) in coords.iter().zip(&numeric) {
        let a = grads.get(id).data()[i];
        worst = worst.max(relative_error(a, *n, 1e-6));
    }
    GradReport {
        max_rel_error: worst,
        coords: coords.len(),
        loss,
    }
}

/// Largest |gradient| over every text-encoder parameter, and the number of
/// non-zero gradient entries elsewhere (to show the loss does train
/// something).
pub fn text_side_gradients(kind: stoa_vlp::objectives::LossKind, seed: u64) -> (f64, usize) {
    let setup = tiny_setup(seed);
    let (_, grads) = single_loss(&setup, &setup.store, kind);
    let grads = grads.unwrap();
    let text: Vec<_> = setup.model.text_params(&setup.store);
    let mut text_max = 0.0f64;
    let mut other_nonzero = 0;
    for id in setup.store.ids() {
        let g = grads.get(id);
        if text.contains(&id) {
            text_max = text_max.max(g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        } else {
            other_nonzero += g.data().iter().filter(|v| **v != 0.0).count();
        }
    }
    (text_max, other_nonzero)
}

/// VTC loss with `b` identical video and text features.
pub fn vtc_equal_features(b: usize) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let row = Tensor::randn(1, 6, 1.0, &mut rng(b as u64));
    let feats = Tensor::from_rows(&vec![row.row(0).to_vec(); b]);
    let v = g.input(feats.clone());
    let t = g.input(feats);
    let s = g.input(Tensor::scalar((1.0f64 / 0.07).ln()));
    let l = stoa_vlp::objectives::vtc_loss(&mut g, v, t, s).unwrap();
    g.value(l).item()
}
