//! Encoders, trajectory, action and fusion modules.

mod common;

use common::{fusion_encoder, random_slots, rng, roi_oracle, roi_pooled, trajectory_module};
use proptest::prelude::*;
use rand::Rng;
use stoa_vlp::action::{attend_queries, gather_action_context, ActionConfig, ActionContext, ActionModule};
use stoa_vlp::encoders::{TextAttention, TextEncoder, TextEncoderConfig, TextInput, VideoEncoder, VideoEncoderConfig};
use stoa_vlp::fusion::{FusionInput, RowRef};
use stoa_vlp::nn_core::{Graph, ParamStore, Tensor, TransformerConfig};
use stoa_vlp::synthetic_world::{Detection, Frames, PosTag, Vocabulary};
use stoa_vlp::trajectory::{select_trajectories, ObjectFeatures, ObjectSlots, TrajectoryConfig, TrajectoryModule};

// unimodal encoders

fn video_encoder(store: &mut ParamStore, frames: usize, size: usize, patch: usize) -> VideoEncoder {
    let cfg = VideoEncoderConfig {
        frames,
        image_size: size,
        patch,
        transformer: TransformerConfig::new(3, 2, 8),
        out_width: 6,
    };
    VideoEncoder::new(store, cfg, &mut rng(1)).unwrap()
}

#[test]
fn black_and_white_frames_differ() {
    let mut store = ParamStore::new();
    let enc = video_encoder(&mut store, 2, 8, 4);
    let mut clip = Frames::zeros(2, 8);
    clip.frame_mut(1).fill(1.0);
    let mut g = Graph::new(&store);
    let grid = enc.encode(&mut g, &[&clip]).unwrap();
    let v = g.value(grid.v);
    let diff: f64 = v.row(0).iter().zip(v.row(1)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3);
}

#[test]
fn desk_patch_grid_shape() {
    let mut store = ParamStore::new();
    let enc = video_encoder(&mut store, 4, 32, 8);
    assert_eq!(enc.config().grid(), 4);
    let clip = Frames::zeros(4, 32);
    let mut g = Graph::new(&store);
    let grid = enc.encode(&mut g, &[&clip, &clip]).unwrap();
    assert_eq!(g.shape(grid.z), (2 * 4 * 16, 8));
    assert_eq!(g.shape(grid.v), (2 * 4, 6));
    assert_eq!(g.shape(grid.tap(enc.config().trajectory_tap())), (2 * 4 * 16, 8));
}

fn text_encoder(store: &mut ParamStore, vocab: &Vocabulary) -> TextEncoder {
    let cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        max_len: 16,
        transformer: TransformerConfig::new(2, 2, 8),
        out_width: 6,
        pad_id: vocab.known("[PAD]"),
    };
    TextEncoder::new(store, cfg, &mut rng(2)).unwrap()
}

struct Encoded {
    t: Tensor,
    stride: usize,
    cls: Vec<usize>,
    sep: Vec<usize>,
}

fn encode_texts(store: &ParamStore, enc: &TextEncoder, vocab: &Vocabulary, texts: &[&str]) -> Encoded {
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode(t).unwrap()).collect();
    let tags: Vec<Vec<PosTag>> = ids.iter().map(|i| vec![PosTag::Other; i.len()]).collect();
    let inputs: Vec<TextInput> = ids
        .iter()
        .zip(&tags)
        .map(|(t, g)| TextInput {
            tokens: t,
            tags: g,
            cls_id: vocab.known("[CLS]"),
            sep_id: vocab.known("[SEP]"),
        })
        .collect();
    let mut g = Graph::new(store);
    let f = enc.encode(&mut g, &inputs, TextAttention::Bidirectional).unwrap();
    Encoded {
        t: g.value(f.t).clone(),
        stride: f.stride,
        cls: f.index_cls,
        sep: f.index_sep,
    }
}

#[test]
fn text_encoder_examples() {
    let vocab = Vocabulary::builtin();
    let mut store = ParamStore::new();
    let enc = text_encoder(&mut store, &vocab);

    let e = encode_texts(&store, &enc, &vocab, &["[CLS] [SEP]"]);
    assert_eq!((e.t.rows(), e.cls[0], e.sep[0]), (2, 0, 1));

    let s = "[CLS] the red circle moves [SEP]";
    let e = encode_texts(&store, &enc, &vocab, &[s, s]);
    for p in 0..6 {
        assert_eq!(e.t.row(p), e.t.row(e.stride + p));
    }

    // Swap "red" and "circle".
    let w = encode_texts(&store, &enc, &vocab, &[s, "[CLS] the circle red moves [SEP]"]);
    for p in [2, 3] {
        let d: f64 =
            w.t.row(p)
                .iter()
                .zip(w.t.row(w.stride + p))
                .map(|(a, b)| (a - b).abs())
                .sum();
        assert!(d > 1e-6, "position {p} unchanged");
    }
}

// trajectory module

#[test]
fn top_left_quadrant_by_hand() {
    // Corner vectors are one-hot so each output column reads one weight.
    let feat = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ]);
    // Cell centers at 0.125 and 0.375 map to grid coords 0 (clamped) and 0.25.
    let want = [1.0, 0.25, 0.25, 0.0625];
    let got = roi_pooled(&feat, 2, [0.0, 0.0, 0.5, 0.5]);
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn full_box_on_constant_grid_is_constant() {
    let row = vec![0.3, -1.2, 2.0];
    let feat = Tensor::from_rows(&vec![row.clone(); 16]);
    let got = roi_pooled(&feat, 4, [0.0, 0.0, 1.0, 1.0]);
    for (a, b) in got.iter().zip(&row) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roi_matches_oracle(
        seed in any::<u64>(),
        grid in 2usize..7,
        x in (0.0f64..1.0, 0.0f64..1.0),
        y in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let feat = Tensor::randn(grid * grid, 3, 1.0, &mut rng(seed));
        let b = [x.0.min(x.1), y.0.min(y.1), x.0.max(x.1), y.0.max(y.1)];
        let want = roi_oracle(&feat, grid, b);
        let got = roi_pooled(&feat, grid, b);
        for (a, w) in got.iter().zip(&want) {
            prop_assert!((a - w).abs() < 1e-10);
        }
    }
}

fn detection(class_id: usize, confidence: f64) -> Detection {
    Detection {
        bbox: [0.2, 0.2, 0.5, 0.5],
        class_id,
        confidence,
    }
}

#[test]
fn single_class_fills_first_trajectory() {
    let dets: Vec<Vec<Detection>> = (0..4).map(|_| vec![detection(5, 0.8)]).collect();
    let slots = ObjectSlots::from_detections(&dets, 3);
    let sel = select_trajectories(&slots, 2).unwrap();
    assert_eq!(sel.classes, vec![5]);
    assert_eq!(sel.present(), 1);
    assert!(sel.masks[1].iter().all(|&m| !m));
}

#[test]
fn summed_confidence_orders_classes() {
    let dets = vec![vec![detection(1, 0.95), detection(0, 0.9)], vec![detection(0, 0.9)]];
    let sel = select_trajectories(&ObjectSlots::from_detections(&dets, 2), 2).unwrap();
    assert_eq!(sel.classes, vec![0, 1]);
}

#[test]
fn paper_scale_object_slots_shape() {
    let mut store = ParamStore::new();
    let cfg = TrajectoryConfig {
        frames: 12,
        per_frame: 10,
        grid: 14,
        trajectories: 20,
        transformer: TransformerConfig::new(2, 2, 8),
        out_width: 6,
    };
    let module = TrajectoryModule::new(&mut store, cfg, &mut rng(3)).unwrap();
    let dets: Vec<Vec<Detection>> = (0..12).map(|_| (0..10).map(|c| detection(c, 0.9)).collect()).collect();
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::randn(12 * 196, 8, 1.0, &mut rng(4)));
    let o = module
        .roi_align_pool(&mut g, z, vec![ObjectSlots::from_detections(&dets, 10)])
        .unwrap();
    assert_eq!(g.shape(o.o), (12 * 10, 8));
}

#[test]
fn invalid_slots_pool_to_zero_rows() {
    let mut store = ParamStore::new();
    let module = trajectory_module(&mut store, 5);
    let dets = vec![vec![detection(2, 0.9)], vec![], vec![detection(2, 0.7)], vec![]];
    let slots = ObjectSlots::from_detections(&dets, 3);
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::randn(4 * 16, 8, 1.0, &mut rng(6)));
    let o = module.roi_align_pool(&mut g, z, vec![slots.clone()]).unwrap();
    let o = g.value(o.o);
    for s in 0..12 {
        let zero = o.row(s).iter().all(|&v| v == 0.0);
        assert_eq!(zero, !slots.validity[s], "slot {s}");
    }
}

#[test]
fn four_present_classes_give_four_embeddings() {
    let mut store = ParamStore::new();
    let module = trajectory_module(&mut store, 7);
    let dets: Vec<Vec<Detection>> = vec![
        vec![detection(0, 0.9), detection(1, 0.8), detection(2, 0.7)],
        vec![detection(3, 0.9)],
        vec![],
        vec![detection(0, 0.6)],
    ];
    let slots = ObjectSlots::from_detections(&dets, 3);
    let sel = select_trajectories(&slots, 4).unwrap();
    let mut g = Graph::new(&store);
    let o = g.constant(Tensor::randn(12, 8, 1.0, &mut rng(8)));
    let feats = ObjectFeatures { o, slots: vec![slots] };
    let sets = module.encode_trajectories(&mut g, &feats, &[sel]).unwrap();
    assert_eq!(g.shape(sets[0].o.unwrap()), (4, 6));
    assert_eq!(sets[0].absent(), 0);
}

#[test]
fn single_visible_slot_alone_determines_output() {
    let mut store = ParamStore::new();
    let module = trajectory_module(&mut store, 9);
    let mut r = rng(10);
    let mut slots = random_slots(&mut r, 4, 3, 5);
    slots.validity = vec![false; 12];
    slots.validity[7] = true;
    let sel = select_trajectories(&slots, 4).unwrap();
    assert_eq!(sel.present(), 1);
    let keep = Tensor::randn(1, 8, 1.0, &mut r);
    let mut outs = Vec::new();
    for seed in 0..3 {
        let mut o = Tensor::randn(12, 8, 1.0, &mut rng(100 + seed));
        o.row_mut(7).copy_from_slice(keep.row(0));
        let mut g = Graph::new(&store);
        let o = g.constant(o);
        let feats = ObjectFeatures {
            o,
            slots: vec![slots.clone()],
        };
        let sets = module
            .encode_trajectories(&mut g, &feats, std::slice::from_ref(&sel))
            .unwrap();
        outs.push(g.value(sets[0].o.unwrap()).clone());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn class_mask_excludes_other_slots() {
    assert!(common::mask_soundness_max_delta(20, 11) < 1e-6);
}

// action module

fn context(g: &mut Graph<'_>, f: &Tensor, visible: Vec<bool>, frames: usize) -> ActionContext {
    let per = visible.len() / frames;
    let f = g.constant(f.clone());
    ActionContext {
        f,
        visible,
        clips: 1,
        frames,
        tokens_per_frame: per,
    }
}

#[test]
fn context_without_valid_objects_is_patches_only() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::zeros(4 * 16, 5));
    let o = g.constant(Tensor::zeros(4 * 3, 5));
    let ctx = gather_action_context(&mut g, z, o, &[false; 12], 4, 16, 3).unwrap();
    assert_eq!(g.shape(ctx.f), (4 * 19, 5));
    for tau in 0..4 {
        let v = &ctx.visible[tau * 19..(tau + 1) * 19];
        assert!(v[..16].iter().all(|&x| x) && v[16..].iter().all(|&x| !x));
    }

    let z = g.constant(Tensor::zeros(12 * 196, 4));
    let o = g.constant(Tensor::zeros(12 * 10, 4));
    let ctx = gather_action_context(&mut g, z, o, &[true; 120], 12, 196, 10).unwrap();
    assert_eq!(g.shape(ctx.f), (12 * 206, 4));
}

#[test]
fn single_visible_token_is_copied_to_every_query() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = Tensor::randn(2 * 3, 4, 1.0, &mut rng(12));
    let ctx = context(&mut g, &f, vec![false, true, false, true, false, false], 2);
    let q = g.constant(Tensor::randn(3, 4, 1.0, &mut rng(13)));
    let traces = attend_queries(&mut g, q, &ctx);
    let tr = g.value(traces);
    for i in 0..3 {
        assert_eq!(tr.row(i * 2), f.row(1));
        assert_eq!(tr.row(i * 2 + 1), f.row(3));
    }
}

#[test]
fn orthogonal_query_averages_visible_tokens() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = Tensor::randn(4, 3, 1.0, &mut rng(14));
    let ctx = context(&mut g, &f, vec![true, false, true, true], 1);
    let q = g.constant(Tensor::zeros(1, 3));
    let traces = attend_queries(&mut g, q, &ctx);
    let tr = g.value(traces);
    for c in 0..3 {
        let mean = (f.get(0, c) + f.get(2, c) + f.get(3, c)) / 3.0;
        assert!((tr.get(0, c) - mean).abs() < 1e-12);
    }
}

#[test]
fn three_token_frame_matches_hand_softmax() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = Tensor::randn(3, 4, 1.0, &mut rng(15));
    let qt = Tensor::randn(1, 4, 1.0, &mut rng(16));
    let ctx = context(&mut g, &f, vec![true; 3], 1);
    let q = g.constant(qt.clone());
    let traces = attend_queries(&mut g, q, &ctx);
    let s: Vec<f64> = (0..3)
        .map(|j| (0..4).map(|c| qt.get(0, c) * f.get(j, c)).sum::<f64>() / 2.0)
        .collect();
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    for c in 0..4 {
        let want: f64 = (0..3).map(|j| s[j].exp() / z * f.get(j, c)).sum();
        assert!((g.value(traces).get(0, c) - want).abs() < 1e-12);
    }
}

#[test]
fn queries_do_not_interact() {
    let store = ParamStore::new();
    let f = Tensor::randn(2 * 5, 4, 1.0, &mut rng(17));
    let q = Tensor::randn(3, 4, 1.0, &mut rng(18));
    let mut q2 = q.clone();
    q2.row_mut(1).copy_from_slice(&[5.0, -3.0, 0.5, 2.0]);
    let run = |q: &Tensor| {
        let mut g = Graph::new(&store);
        let ctx = context(&mut g, &f, vec![true; 10], 2);
        let qv = g.constant(q.clone());
        let t = attend_queries(&mut g, qv, &ctx);
        g.value(t).clone()
    };
    let (a, b) = (run(&q), run(&q2));
    // Rows are ordered query, frame.
    for r in [0, 1, 4, 5] {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(2), b.row(2));
}

fn action_module(store: &mut ParamStore, frames: usize) -> ActionModule {
    let cfg = ActionConfig {
        frames,
        patches: 16,
        per_frame: 3,
        queries: 4,
        transformer: TransformerConfig::new(2, 2, 8),
        out_width: 6,
    };
    ActionModule::new(store, cfg, &mut rng(19)).unwrap()
}

#[test]
fn action_tokens_shape_and_temporal_order() {
    let mut store = ParamStore::new();
    let module = action_module(&mut store, 4);
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::randn(4 * 16, 8, 1.0, &mut rng(20)));
    let o = g.constant(Tensor::randn(4 * 3, 8, 1.0, &mut rng(21)));
    let set = module.forward(&mut g, z, o, &[true; 12]).unwrap();
    assert_eq!(g.shape(set.x), (4, 6));

    // Reverse the frame order of every trace.
    let traces = g.value(set.traces).clone();
    let rev: Vec<Vec<f64>> = (0..4)
        .flat_map(|i| (0..4).rev().map(move |tau| i * 4 + tau))
        .map(|r| traces.row(r).to_vec())
        .collect();
    let rev = g.constant(Tensor::from_rows(&rev));
    let x_rev = module.encode_actions(&mut g, rev, 1).unwrap();
    assert!(g.value(x_rev).max_abs_diff(g.value(set.x)) > 1e-6);
}

#[test]
fn single_frame_trace_is_deterministic() {
    let mut store = ParamStore::new();
    let module = action_module(&mut store, 1);
    let trace = Tensor::randn(4, 8, 1.0, &mut rng(22));
    let run = || {
        let mut g = Graph::new(&store);
        let t = g.constant(trace.clone());
        let x = module.encode_actions(&mut g, t, 1).unwrap();
        g.value(x).clone()
    };
    assert_eq!(run(), run());
}

// fusion module

#[test]
fn zero_layer_fusion_returns_pooled_video() {
    let mut store = ParamStore::new();
    let enc = fusion_encoder(&mut store, 0, 23);
    let mut g = Graph::new(&store);
    let video = Tensor::randn(4, 8, 1.0, &mut rng(24));
    let v = g.constant(video.clone());
    let t = g.constant(Tensor::randn(3, 8, 1.0, &mut rng(25)));
    let input = FusionInput {
        video: RowRef::range(v, 0, 4),
        objects: None,
        actions: None,
        text: RowRef::range(t, 0, 3),
        text_sep: 2,
    };
    let out = enc.fuse(&mut g, &[input], TextAttention::Bidirectional).unwrap();
    for c in 0..8 {
        let mean = (0..4).map(|r| video.get(r, c)).sum::<f64>() / 4.0;
        assert!((g.value(out.v_o).get(0, c) - mean).abs() < 1e-12);
    }
}

#[test]
fn bidirectional_text_reads_video() {
    let mut store = ParamStore::new();
    let enc = fusion_encoder(&mut store, 2, 26);
    let mut r = rng(27);
    let video = Tensor::randn(4, 8, 1.0, &mut r);
    let text = Tensor::randn(5, 8, 1.0, &mut r);
    let run = |video: &Tensor| {
        let mut g = Graph::new(&store);
        let v = g.constant(video.clone());
        let t = g.constant(text.clone());
        let input = FusionInput {
            video: RowRef::range(v, 0, 4),
            objects: None,
            actions: None,
            text: RowRef::range(t, 0, 5),
            text_sep: 4,
        };
        let out = enc.fuse(&mut g, &[input], TextAttention::Bidirectional).unwrap();
        g.value(out.t_o).clone()
    };
    for frame in 0..4 {
        let mut v2 = video.clone();
        for x in v2.row_mut(frame) {
            *x += r.gen_range(0.5..1.0);
        }
        assert!(run(&v2).max_abs_diff(&run(&video)) > 1e-9, "frame {frame}");
    }
}

#[test]
fn causal_fusion_prefix_is_bit_identical() {
    assert_eq!(common::prefix_invariance_violations(20, 28), 0);
}
