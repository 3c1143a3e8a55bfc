//! The full network: unimodal encoders, trajectory and action modules, the
//! fusion encoder and the task heads, plus the batched pre-training forward.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{ActionConfig, ActionFeatureSet, ActionModule};
use crate::encoders::{
    PatchGrid, TextAttention, TextEncoder, TextEncoderConfig, TextFeatures, TextInput, VideoEncoder, VideoEncoderConfig,
};
use crate::error::{Result, StoaError};
use crate::fusion::{FusionConfig, FusionEncoder, FusionInput, FusionOutput, RowRef};
use crate::nn_core::{Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, TransformerConfig, Var};
use crate::objectives::{
    asp_loss, mine_hard_negatives, mlm_plan, ota_loss, plm_plan, similarity_matrix, symmetric_infonce,
    text_target_sets, token_loss, total_loss, vtm_loss, AlignmentOutcome, HardNegatives, LossBundle, LossKind,
    LossToggles, MaskPlan,
};
use crate::synthetic_world::{PosTag, SampleRecord, Vocabulary, ANS, CLS, MASK, PAD, SEP};
use crate::trajectory::{
    select_trajectories, ObjectFeatures, ObjectSlots, TrajectoryConfig, TrajectoryModule, TrajectorySet,
};

/// Initial VTC logit scale, `1 / 0.07`.
pub const INITIAL_LOGIT_SCALE: f64 = 1.0 / 0.07;
/// Upper clamp on the VTC logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Detections kept per frame (`K`).
    pub objects_per_frame: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Video encoder width `h`.
    pub video_width: usize,
    /// Cross-modal width `d`.
    pub cross_width: usize,
    pub text_width: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub trajectory_layers: usize,
    pub action_layers: usize,
    pub fusion_layers: usize,
    /// Trajectory tokens `N`.
    pub trajectories: usize,
    /// Action queries `M`.
    pub action_queries: usize,
    pub use_objects: bool,
    pub use_actions: bool,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            frames: 4,
            image_size: 32,
            patch: 8,
            objects_per_frame: 3,
            max_text_len: 16,
            vocab_size: Vocabulary::builtin().len(),
            video_width: 32,
            cross_width: 32,
            text_width: 32,
            heads: 2,
            video_layers: 3,
            text_layers: 2,
            trajectory_layers: 2,
            action_layers: 2,
            fusion_layers: 2,
            trajectories: 4,
            action_queries: 4,
            use_objects: true,
            use_actions: true,
            mlp_ratio: 2.0,
            dropout: 0.0,
        }
    }

    /// Full-scale dimensions (selectable, too large to train here).
    pub fn paper_scale() -> Self {
        Self {
            frames: 12,
            image_size: 224,
            patch: 16,
            objects_per_frame: 10,
            max_text_len: 32,
            video_width: 768,
            cross_width: 512,
            text_width: 512,
            heads: 8,
            video_layers: 12,
            text_layers: 12,
            trajectory_layers: 2,
            action_layers: 2,
            fusion_layers: 6,
            trajectories: 20,
            action_queries: 4,
            mlp_ratio: 4.0,
            ..Self::desk()
        }
    }

    /// Smallest configuration exercising every module; used by gradient
    /// checks.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            image_size: 8,
            patch: 4,
            objects_per_frame: 2,
            max_text_len: 6,
            video_width: 8,
            cross_width: 8,
            text_width: 8,
            heads: 2,
            video_layers: 2,
            text_layers: 1,
            trajectory_layers: 1,
            action_layers: 1,
            fusion_layers: 1,
            trajectories: 2,
            action_queries: 2,
            ..Self::desk()
        }
    }

    /// Base ablation: no trajectory or action tokens.
    pub fn without_modules(mut self) -> Self {
        self.use_objects = false;
        self.use_actions = false;
        self
    }

    fn tf(&self, layers: usize, width: usize) -> TransformerConfig {
        TransformerConfig {
            layers,
            heads: self.heads,
            width,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("max_text_len", self.max_text_len),
            ("vocab_size", self.vocab_size),
            ("video_width", self.video_width),
            ("cross_width", self.cross_width),
            ("text_width", self.text_width),
            ("heads", self.heads),
            ("video_layers", self.video_layers),
            ("trajectories", self.trajectories),
            ("action_queries", self.action_queries),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(StoaError::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(StoaError::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        for w in [self.video_width, self.cross_width, self.text_width] {
            self.tf(1, w).validate()?;
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Longest fusion sequence `T + 1 + N + M + L`.
    pub fn max_fusion_tokens(&self) -> usize {
        self.frames + 1 + self.trajectories + self.action_queries + self.max_text_len
    }
}

/// Ids of the special tokens the model relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub pad: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub ans: u32,
}

impl TokenIds {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            pad: vocab.id(PAD)?,
            cls: vocab.id(CLS)?,
            sep: vocab.id(SEP)?,
            mask: vocab.id(MASK)?,
            ans: vocab.id(ANS)?,
        })
    }

    pub fn is_special(&self, id: u32) -> bool {
        [self.pad, self.cls, self.sep, self.mask, self.ans].contains(&id)
    }
}

/// Visual features of a batch in the cross-modal width.
#[derive(Clone, Debug)]
pub struct VisualVars {
    pub clips: usize,
    /// Frame features `(clips·T, d)`.
    pub v: Var,
    /// Mean-pooled `v_[CLS]`, `(clips, d)`.
    pub pooled: Var,
    /// Present trajectories per clip.
    pub objects: Vec<Option<Var>>,
    /// Action tokens `(clips·M, d)`.
    pub actions: Option<Var>,
}

/// Everything the visual side produced for one batch.
#[derive(Clone, Debug)]
pub struct VisualEncoding {
    pub vars: VisualVars,
    pub grid: PatchGrid,
    pub object_features: Option<ObjectFeatures>,
    pub trajectories: Vec<TrajectorySet>,
    pub actions: Option<ActionFeatureSet>,
}

/// Detached visual features of one clip, reusable across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTensors {
    pub v: Tensor,
    pub pooled: Tensor,
    pub objects: Option<Tensor>,
    pub actions: Option<Tensor>,
}

/// One text sequence to encode.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSeq {
    pub tokens: Vec<u32>,
    pub tags: Vec<PosTag>,
}

impl TextSeq {
    pub fn untagged(tokens: Vec<u32>) -> Self {
        let tags = vec![PosTag::Other; tokens.len()];
        Self { tokens, tags }
    }
}

/// Per-step diagnostics beyond the loss values.
#[derive(Clone, Debug, Default)]
pub struct StepDetails {
    pub negatives: Option<HardNegatives>,
    pub ota: Vec<Option<AlignmentOutcome>>,
    pub asp: Vec<Option<AlignmentOutcome>>,
    pub mlm_plans: Vec<Option<MaskPlan>>,
    pub plm_plans: Vec<Option<MaskPlan>>,
    /// Losses that were enabled but had nothing to score this batch.
    pub skipped: Vec<LossKind>,
}

/// Output of [`StoaModel::pretrain_losses`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub total: Option<Var>,
    pub parts: Vec<(LossKind, Var)>,
    pub bundle: LossBundle,
    pub details: StepDetails,
}

#[derive(Clone, Debug)]
pub struct StoaModel {
    cfg: ModelConfig,
    ids: TokenIds,
    random_pool: Vec<u32>,
    video: VideoEncoder,
    text: TextEncoder,
    trajectory: Option<TrajectoryModule>,
    action: Option<ActionModule>,
    fusion: FusionEncoder,
    vtm_head: Linear,
    lm_norm: LayerNorm,
    lm_head: Linear,
    logit_scale: ParamId,
}

impl StoaModel {
    /// Builds the network and its freshly initialised parameters.
    pub fn build(cfg: ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab_size {
            return Err(StoaError::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ids = TokenIds::from_vocab(vocab)?;
        let (h, d) = (cfg.video_width, cfg.cross_width);
        let video = VideoEncoder::new(
            &mut store,
            VideoEncoderConfig {
                frames: cfg.frames,
                image_size: cfg.image_size,
                patch: cfg.patch,
                transformer: cfg.tf(cfg.video_layers, h),
                out_width: d,
            },
            rng,
        )?;
        let text = TextEncoder::new(
            &mut store,
            TextEncoderConfig {
                vocab_size: cfg.vocab_size,
                max_len: cfg.max_text_len,
                transformer: cfg.tf(cfg.text_layers, cfg.text_width),
                out_width: d,
                pad_id: ids.pad,
            },
            rng,
        )?;
        let trajectory = if cfg.use_objects || cfg.use_actions {
            Some(TrajectoryModule::new(
                &mut store,
                TrajectoryConfig {
                    frames: cfg.frames,
                    per_frame: cfg.objects_per_frame,
                    grid: cfg.grid(),
                    trajectories: cfg.trajectories,
                    transformer: cfg.tf(cfg.trajectory_layers, h),
                    out_width: d,
                },
                rng,
            )?)
        } else {
            None
        };
        let action = if cfg.use_actions {
            Some(ActionModule::new(
                &mut store,
                ActionConfig {
                    frames: cfg.frames,
                    patches: cfg.grid() * cfg.grid(),
                    per_frame: cfg.objects_per_frame,
                    queries: cfg.action_queries,
                    transformer: cfg.tf(cfg.action_layers, h),
                    out_width: d,
                },
                rng,
            )?)
        } else {
            None
        };
        let fusion = FusionEncoder::new(
            &mut store,
            FusionConfig {
                frames: cfg.frames,
                max_tokens: cfg.max_fusion_tokens(),
                transformer: cfg.tf(cfg.fusion_layers, d),
            },
            rng,
        )?;
        let vtm_head = Linear::new(&mut store, "head.vtm", d, 2, rng);
        let lm_norm = LayerNorm::new(&mut store, "head.lm_norm", d);
        let lm_head = Linear::new(&mut store, "head.lm", d, cfg.vocab_size, rng);
        let logit_scale = store.add("head.logit_scale", Tensor::scalar(INITIAL_LOGIT_SCALE.ln()));
        store.round_to_f32();
        let random_pool = vocab.content_ids();
        Ok((
            Self {
                cfg,
                ids,
                random_pool,
                video,
                text,
                trajectory,
                action,
                fusion,
                vtm_head,
                lm_norm,
                lm_head,
                logit_scale,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn token_ids(&self) -> &TokenIds {
        &self.ids
    }

    pub fn logit_scale_param(&self) -> ParamId {
        self.logit_scale
    }

    pub fn video_encoder(&self) -> &VideoEncoder {
        &self.video
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn trajectory_module(&self) -> Option<&TrajectoryModule> {
        self.trajectory.as_ref()
    }

    pub fn action_module(&self) -> Option<&ActionModule> {
        self.action.as_ref()
    }

    pub fn fusion_encoder(&self) -> &FusionEncoder {
        &self.fusion
    }

    /// Parameters owned by the text encoder.
    pub fn text_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store.with_prefix("text.").collect()
    }

    pub fn encode_visual(&self, g: &mut Graph<'_>, clips: &[&SampleRecord]) -> Result<VisualEncoding> {
        let n = clips.len();
        let t = self.cfg.frames;
        let frames: Vec<_> = clips.iter().map(|c| &c.frames).collect();
        let grid = self.video.encode(g, &frames)?;
        let mut avg = Tensor::zeros(n, n * t);
        for b in 0..n {
            for tau in 0..t {
                avg.set(b, b * t + tau, 1.0 / t as f64);
            }
        }
        let pooled = g.const_left_mul(Arc::new(avg), grid.v);

        let mut object_features = None;
        let mut trajectories = Vec::new();
        let mut objects = vec![None; n];
        let mut actions = None;
        if let Some(tm) = &self.trajectory {
            let slots: Vec<ObjectSlots> = clips
                .iter()
                .map(|c| ObjectSlots::from_detections(&c.detections, self.cfg.objects_per_frame))
                .collect();
            let of = tm.roi_align_pool(g, grid.tap(self.video.config().trajectory_tap()), slots)?;
            if self.cfg.use_objects {
                let selections = of
                    .slots
                    .iter()
                    .map(|s| select_trajectories(s, self.cfg.trajectories))
                    .collect::<Result<Vec<_>>>()?;
                trajectories = tm.encode_trajectories(g, &of, &selections)?;
                objects = trajectories.iter().map(|s| s.o).collect();
            }
            if let Some(am) = &self.action {
                let validity: Vec<bool> = of.slots.iter().flat_map(|s| s.validity.iter().copied()).collect();
                let set = am.forward(g, grid.tap(self.video.config().action_tap()), of.o, &validity)?;
                actions = Some(set);
            }
            object_features = Some(of);
        }
        Ok(VisualEncoding {
            vars: VisualVars {
                clips: n,
                v: grid.v,
                pooled,
                objects,
                actions: actions.as_ref().map(|a| a.x),
            },
            grid,
            object_features,
            trajectories,
            actions,
        })
    }

    /// Copies visual features out of a graph, one entry per clip.
    pub fn visual_tensors(&self, g: &Graph<'_>, vis: &VisualVars) -> Vec<VisualTensors> {
        let (t, m) = (self.cfg.frames, self.cfg.action_queries);
        let rows = |x: &Tensor, start: usize, len: usize| {
            Tensor::from_vec(
                len,
                x.cols(),
                x.data()[start * x.cols()..(start + len) * x.cols()].to_vec(),
            )
        };
        (0..vis.clips)
            .map(|b| VisualTensors {
                v: rows(g.value(vis.v), b * t, t),
                pooled: rows(g.value(vis.pooled), b, 1),
                objects: vis.objects[b].map(|o| g.value(o).clone()),
                actions: vis.actions.map(|a| rows(g.value(a), b * m, m)),
            })
            .collect()
    }

    /// Loads cached visual features into `g` as constants.
    pub fn load_visual(&self, g: &mut Graph<'_>, cached: &[&VisualTensors]) -> VisualVars {
        let v: Vec<Var> = cached.iter().map(|c| g.constant(c.v.clone())).collect();
        let v = g.concat_rows(&v);
        let pooled: Vec<Var> = cached.iter().map(|c| g.constant(c.pooled.clone())).collect();
        let pooled = g.concat_rows(&pooled);
        let objects = cached
            .iter()
            .map(|c| c.objects.as_ref().map(|o| g.constant(o.clone())))
            .collect();
        let actions = if cached.iter().all(|c| c.actions.is_some()) && !cached.is_empty() {
            let parts: Vec<Var> = cached
                .iter()
                .map(|c| g.constant(c.actions.clone().expect("checked")))
                .collect();
            Some(g.concat_rows(&parts))
        } else {
            None
        };
        VisualVars {
            clips: cached.len(),
            v,
            pooled,
            objects,
            actions,
        }
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, texts: &[TextSeq], attention: TextAttention) -> Result<TextFeatures> {
        let inputs: Vec<TextInput<'_>> = texts
            .iter()
            .map(|s| TextInput {
                tokens: &s.tokens,
                tags: &s.tags,
                cls_id: self.ids.cls,
                sep_id: self.ids.sep,
            })
            .collect();
        self.text.encode(g, &inputs, attention)
    }

    /// `[SEP]` feature of every text, `(batch, d)`.
    pub fn text_summary(&self, g: &mut Graph<'_>, text: &TextFeatures) -> Var {
        let rows: Vec<usize> = (0..text.batch()).map(|b| text.row_of(b, text.index_sep[b])).collect();
        g.gather_rows(text.t, &rows)
    }

    /// Fusion input pairing clip `clip` of `vis` with text `seq` of `text`.
    pub fn fusion_input(
        &self,
        g: &Graph<'_>,
        vis: &VisualVars,
        clip: usize,
        text: &TextFeatures,
        seq: usize,
    ) -> FusionInput {
        let (t, m) = (self.cfg.frames, self.cfg.action_queries);
        FusionInput {
            video: RowRef::range(vis.v, clip * t, t),
            objects: vis.objects[clip].map(|o| RowRef::range(o, 0, g.shape(o).0)),
            actions: vis.actions.map(|a| RowRef::range(a, clip * m, m)),
            text: RowRef::new(text.t, text.rows_of(seq)),
            text_sep: text.index_sep[seq],
        }
    }

    pub fn fuse(&self, g: &mut Graph<'_>, inputs: &[FusionInput], mode: TextAttention) -> Result<FusionOutput> {
        self.fusion.fuse(g, inputs, mode)
    }

    /// Positive-class logits of the matching head, `(batch, 2)`.
    pub fn vtm_logits(&self, g: &mut Graph<'_>, fused: &FusionOutput) -> Var {
        self.vtm_head.forward(g, fused.t_o)
    }

    /// Vocabulary logits at the given fusion rows.
    pub fn lm_logits(&self, g: &mut Graph<'_>, fused: &FusionOutput, rows: &[usize]) -> Var {
        let h = g.gather_rows(fused.h, rows);
        let h = self.lm_norm.forward(g, h);
        self.lm_head.forward(g, h)
    }

    /// All enabled pre-training losses for one batch. Random choices (token
    /// masks, suffix lengths, negatives) are drawn from `rng` in a fixed
    /// order.
    pub fn pretrain_losses(
        &self,
        g: &mut Graph<'_>,
        batch: &[&SampleRecord],
        toggles: LossToggles,
        rng: &mut ChaCha8Rng,
    ) -> Result<PretrainOutput> {
        let n = batch.len();
        if n == 0 {
            return Err(StoaError::Shape("empty batch".into()));
        }
        let mut details = StepDetails::default();
        let mut parts: Vec<(LossKind, Var)> = Vec::new();
        let on = |k| toggles.enabled(k);

        let vis = self.encode_visual(g, batch)?;
        let texts: Vec<TextSeq> = batch
            .iter()
            .map(|s| TextSeq {
                tokens: s.caption.tokens.clone(),
                tags: s.caption.tags.clone(),
            })
            .collect();
        let text = self.encode_text(g, &texts, TextAttention::Bidirectional)?;

        let is_special = |id: u32| self.ids.is_special(id);
        if on(LossKind::Mlm) {
            details.mlm_plans = texts
                .iter()
                .map(|s| mlm_plan(&s.tokens, is_special, self.ids.mask, &self.random_pool, rng))
                .collect();
        }
        if on(LossKind::Plm) {
            details.plm_plans = texts
                .iter()
                .map(|s| plm_plan(&s.tokens, is_special, self.ids.mask, rng))
                .collect();
        }

        let mut sim_value = None;
        if on(LossKind::Vtc) || on(LossKind::Vtm) {
            if n < 2 {
                return Err(StoaError::Shape("contrastive losses need a batch of at least 2".into()));
            }
            let t_sep = self.text_summary(g, &text);
            let scale = g.param(self.logit_scale);
            let sim = similarity_matrix(g, vis.vars.pooled, t_sep, scale)?;
            sim_value = Some(g.value(sim).clone());
            if on(LossKind::Vtc) {
                parts.push((LossKind::Vtc, symmetric_infonce(g, sim)));
            }
        }

        // Bidirectional fusion: positives, then mined negatives, then MLM.
        let mut fusion_inputs = Vec::new();
        let mut vtm_counts = (0, 0);
        if on(LossKind::Vtm) {
            let negs = mine_hard_negatives(sim_value.as_ref().expect("similarities computed"), rng)?;
            for b in 0..n {
                fusion_inputs.push(self.fusion_input(g, &vis.vars, b, &text, b));
            }
            for b in 0..n {
                fusion_inputs.push(self.fusion_input(g, &vis.vars, b, &text, negs.text_for_video[b]));
            }
            for b in 0..n {
                fusion_inputs.push(self.fusion_input(g, &vis.vars, negs.video_for_text[b], &text, b));
            }
            vtm_counts = (n, 2 * n);
            details.negatives = Some(negs);
        }
        let mut mlm_targets = Vec::new();
        let mut mlm_slots = Vec::new();
        if on(LossKind::Mlm) {
            let owners: Vec<usize> = (0..n).filter(|&b| details.mlm_plans[b].is_some()).collect();
            if owners.is_empty() {
                details.skipped.push(LossKind::Mlm);
            } else {
                let seqs: Vec<TextSeq> = owners
                    .iter()
                    .map(|&b| TextSeq {
                        tokens: details.mlm_plans[b].as_ref().expect("owner").input.clone(),
                        tags: texts[b].tags.clone(),
                    })
                    .collect();
                let masked = self.encode_text(g, &seqs, TextAttention::Bidirectional)?;
                for (i, &b) in owners.iter().enumerate() {
                    let plan = details.mlm_plans[b].as_ref().expect("owner");
                    let seq_index = fusion_inputs.len();
                    fusion_inputs.push(self.fusion_input(g, &vis.vars, b, &masked, i));
                    for (&p, &tgt) in plan.positions.iter().zip(&plan.targets) {
                        mlm_slots.push((seq_index, p));
                        mlm_targets.push(tgt);
                    }
                }
            }
        }
        if !fusion_inputs.is_empty() {
            let fused = self.fuse(g, &fusion_inputs, TextAttention::Bidirectional)?;
            if on(LossKind::Vtm) {
                let logits = self.vtm_logits(g, &fused);
                let pos = g.slice_rows(logits, 0, vtm_counts.0);
                let neg = g.slice_rows(logits, vtm_counts.0, vtm_counts.1);
                parts.push((LossKind::Vtm, vtm_loss(g, pos, neg)));
            }
            if !mlm_slots.is_empty() {
                let rows: Vec<usize> = mlm_slots.iter().map(|&(s, p)| fused.text_row(s, p)).collect();
                let logits = self.lm_logits(g, &fused, &rows);
                parts.push((LossKind::Mlm, token_loss(g, logits, &mlm_targets)));
            }
        }

        if on(LossKind::Plm) {
            let owners: Vec<usize> = (0..n).filter(|&b| details.plm_plans[b].is_some()).collect();
            if owners.is_empty() {
                details.skipped.push(LossKind::Plm);
            } else {
                let plans: Vec<&MaskPlan> = owners
                    .iter()
                    .map(|&b| details.plm_plans[b].as_ref().expect("owner"))
                    .collect();
                let clips: Vec<usize> = owners.clone();
                let loss = self.masked_token_loss(g, &vis.vars, &clips, &plans, TextAttention::Causal)?;
                parts.push((LossKind::Plm, loss));
            }
        }

        if on(LossKind::Ota) && self.cfg.use_objects {
            let mut losses = Vec::new();
            for b in 0..n {
                let sets = text_target_sets(&texts[b].tokens, &texts[b].tags, text.index_cls[b]);
                let rows: Vec<usize> = sets.nouns.iter().map(|&p| text.row_of(b, p)).collect();
                let out = ota_loss(g, vis.vars.objects[b], text.t, &rows)?;
                if let Some(o) = &out {
                    losses.push(o.loss);
                }
                details.ota.push(out);
            }
            match mean_of(g, &losses) {
                Some(l) => parts.push((LossKind::Ota, l)),
                None => details.skipped.push(LossKind::Ota),
            }
        }
        if on(LossKind::Asp) {
            if let Some(x) = vis.vars.actions {
                let m = self.cfg.action_queries;
                let mut losses = Vec::new();
                for b in 0..n {
                    let sets = text_target_sets(&texts[b].tokens, &texts[b].tags, text.index_cls[b]);
                    let rows: Vec<usize> = sets.actions.iter().map(|&p| text.row_of(b, p)).collect();
                    let xb = g.slice_rows(x, b * m, m);
                    let out = asp_loss(g, xb, text.t, &rows)?;
                    losses.push(out.loss);
                    details.asp.push(Some(out));
                }
                if let Some(l) = mean_of(g, &losses) {
                    parts.push((LossKind::Asp, l));
                }
            }
        }

        let (total, bundle) = total_loss(g, &parts)?;
        Ok(PretrainOutput {
            total,
            parts,
            bundle,
            details,
        })
    }

    /// Cross-entropy over the masked positions of `plans`, each paired with
    /// the clip of the same index in `clips`, through text encoder and fusion
    /// in the given attention mode.
    pub fn masked_token_loss(
        &self,
        g: &mut Graph<'_>,
        vis: &VisualVars,
        clips: &[usize],
        plans: &[&MaskPlan],
        mode: TextAttention,
    ) -> Result<Var> {
        let (rows, targets, _) = self.masked_token_logits_rows(g, vis, clips, plans, mode)?;
        Ok(token_loss(g, rows, &targets))
    }

    /// Vocabulary logits at every masked position of `plans`, the target ids
    /// and the fusion output.
    pub fn masked_token_logits_rows(
        &self,
        g: &mut Graph<'_>,
        vis: &VisualVars,
        clips: &[usize],
        plans: &[&MaskPlan],
        mode: TextAttention,
    ) -> Result<(Var, Vec<u32>, FusionOutput)> {
        let seqs: Vec<TextSeq> = plans.iter().map(|p| TextSeq::untagged(p.input.clone())).collect();
        let text = self.encode_text(g, &seqs, mode)?;
        let inputs: Vec<FusionInput> = clips
            .iter()
            .enumerate()
            .map(|(i, &c)| self.fusion_input(g, vis, c, &text, i))
            .collect();
        let fused = self.fuse(g, &inputs, mode)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            for (&p, &t) in plan.positions.iter().zip(&plan.targets) {
                rows.push(fused.text_row(i, p));
                targets.push(t);
            }
        }
        let logits = self.lm_logits(g, &fused, &rows);
        Ok((logits, targets, fused))
    }

    /// Draws nothing; exposed so callers can build replayable streams.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        base.set_stream(step);
        let s: u64 = base.gen();
        ChaCha8Rng::seed_from_u64(s)
    }
}

fn mean_of(g: &mut Graph<'_>, losses: &[Var]) -> Option<Var> {
    if losses.is_empty() {
        return None;
    }
    let sum = g.sum_scalars(losses);
    Some(g.scale(sum, 1.0 / losses.len() as f64))
}
