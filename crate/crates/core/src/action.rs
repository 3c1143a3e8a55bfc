//! Spatial-temporal action tokens: learned queries read each frame's patch
//! and object tokens, then a small transformer summarises each query's
//! frame trace.

use rand::Rng;

use crate::error::{Result, StoaError};
use crate::nn_core::{
    embedding_table, AttnLayout, AttnMask, Graph, LayerNorm, Linear, ParamId, ParamStore, Transformer,
    TransformerConfig, Var,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionConfig {
    pub frames: usize,
    pub patches: usize,
    pub per_frame: usize,
    pub queries: usize,
    pub transformer: TransformerConfig,
    pub out_width: usize,
}

/// Per-frame token sets `F_τ = [z_τ ; O_τ]` for a batch of clips.
#[derive(Clone, Debug)]
pub struct ActionContext {
    /// `(clips·T·(HW+K), h)`.
    pub f: Var,
    /// Visibility of every row of `f`.
    pub visible: Vec<bool>,
    pub clips: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
}

/// Action features of a batch, clip-major.
#[derive(Clone, Debug)]
pub struct ActionFeatureSet {
    /// `(clips·M, d)`.
    pub x: Var,
    /// Frame-wise traces `(clips·M·T, h)`, ordered clip, query, frame.
    pub traces: Var,
    pub clips: usize,
    pub queries: usize,
}

#[derive(Clone, Debug)]
pub struct ActionModule {
    cfg: ActionConfig,
    queries: ParamId,
    cls: ParamId,
    temporal_pos: ParamId,
    transformer: Transformer,
    ln_out: LayerNorm,
    proj: Linear,
}

/// Concatenates each frame's patch tokens with its object slots. `z_tap` is
/// `(clips·T·HW, h)`, `objects` is `(clips·T·K, h)` with `validity` per slot.
pub fn gather_action_context(
    g: &mut Graph<'_>,
    z_tap: Var,
    objects: Var,
    validity: &[bool],
    frames: usize,
    patches: usize,
    per_frame: usize,
) -> Result<ActionContext> {
    let (zr, zc) = g.shape(z_tap);
    let (or, oc) = g.shape(objects);
    if zc != oc {
        return Err(StoaError::Shape(format!(
            "patch width {zc} differs from object width {oc}"
        )));
    }
    if frames == 0 || zr % (frames * patches) != 0 {
        return Err(StoaError::Shape(format!(
            "{zr} patch rows are not a whole number of {frames}x{patches} clips"
        )));
    }
    let clips = zr / (frames * patches);
    if or != clips * frames * per_frame || validity.len() != or {
        return Err(StoaError::Shape(format!(
            "object rows {or} / validity {} do not match {clips} clips of {frames}x{per_frame}",
            validity.len()
        )));
    }
    let pool = g.concat_rows(&[z_tap, objects]);
    let per = patches + per_frame;
    let mut order = Vec::with_capacity(clips * frames * per);
    let mut visible = Vec::with_capacity(clips * frames * per);
    for f in 0..clips * frames {
        order.extend((0..patches).map(|p| f * patches + p));
        visible.extend(std::iter::repeat_n(true, patches));
        for k in 0..per_frame {
            order.push(zr + f * per_frame + k);
            visible.push(validity[f * per_frame + k]);
        }
    }
    let f = g.gather_rows(pool, &order);
    Ok(ActionContext {
        f,
        visible,
        clips,
        frames,
        tokens_per_frame: per,
    })
}

/// `x_i[τ] = softmax(q_i F_τᵀ / √h) F_τ` over visible tokens; returns traces
/// ordered clip, query, frame.
pub fn attend_queries(g: &mut Graph<'_>, q: Var, ctx: &ActionContext) -> Var {
    let m = g.shape(q).0;
    let blocks = ctx.clips * ctx.frames;
    let per = ctx.tokens_per_frame;
    let q_idx: Vec<usize> = (0..blocks).flat_map(|_| 0..m).collect();
    let queries = g.gather_rows(q, &q_idx);
    let mask = AttnMask::from_fn(blocks * m, per, |r, c| ctx.visible[(r / m) * per + c]);
    let layout = AttnLayout { heads: 1, blocks };
    let out = g.attention(queries, ctx.f, ctx.f, Some(&mask), layout);
    // (clip, frame, query) -> (clip, query, frame)
    let t = ctx.frames;
    let mut reorder = Vec::with_capacity(blocks * m);
    for b in 0..ctx.clips {
        for i in 0..m {
            for tau in 0..t {
                reorder.push((b * t + tau) * m + i);
            }
        }
    }
    g.gather_rows(out, &reorder)
}

impl ActionModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ActionConfig, rng: &mut R) -> Result<Self> {
        cfg.transformer.validate()?;
        if cfg.queries == 0 {
            return Err(StoaError::Config("need at least one action query".into()));
        }
        let h = cfg.transformer.width;
        Ok(Self {
            queries: embedding_table(store, "action.queries", cfg.queries, h, 1.0, rng),
            cls: embedding_table(store, "action.cls", 1, h, 0.02, rng),
            temporal_pos: embedding_table(store, "action.temporal_pos", cfg.frames + 1, h, 0.02, rng),
            transformer: Transformer::new(store, "action.encoder", cfg.transformer, rng)?,
            ln_out: LayerNorm::new(store, "action.ln_out", h),
            proj: Linear::new(store, "action.proj", h, cfg.out_width, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &ActionConfig {
        &self.cfg
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Prepends `[CLS]` to each trace, adds temporal positions, encodes and
    /// projects the `[CLS]` output to `d`.
    pub fn encode_actions(&self, g: &mut Graph<'_>, traces: Var, clips: usize) -> Result<Var> {
        let (m, t) = (self.cfg.queries, self.cfg.frames);
        let (rows, _) = g.shape(traces);
        if rows != clips * m * t {
            return Err(StoaError::Shape(format!("{rows} trace rows, expected {clips}x{m}x{t}")));
        }
        let seqs = clips * m;
        let seq = t + 1;
        let cls = g.param(self.cls);
        let pool = g.concat_rows(&[cls, traces]);
        let mut order = Vec::with_capacity(seqs * seq);
        let mut pos = Vec::with_capacity(seqs * seq);
        for s in 0..seqs {
            order.push(0);
            order.extend((0..t).map(|tau| 1 + s * t + tau));
            pos.extend(0..seq);
        }
        let x = g.gather_rows(pool, &order);
        let tp = g.param(self.temporal_pos);
        let tp = g.gather_rows(tp, &pos);
        let x = g.add(x, tp);
        let hidden = self.transformer.encode(g, x, None, seqs)?;
        let cls_rows: Vec<usize> = (0..seqs).map(|s| s * seq).collect();
        let out = g.gather_rows(hidden, &cls_rows);
        let out = self.ln_out.forward(g, out);
        Ok(self.proj.forward(g, out))
    }

    /// Full module: context gathering, query attention and trace encoding.
    pub fn forward(&self, g: &mut Graph<'_>, z_tap: Var, objects: Var, validity: &[bool]) -> Result<ActionFeatureSet> {
        let ctx = gather_action_context(
            g,
            z_tap,
            objects,
            validity,
            self.cfg.frames,
            self.cfg.patches,
            self.cfg.per_frame,
        )?;
        let q = g.param(self.queries);
        let traces = attend_queries(g, q, &ctx);
        let x = self.encode_actions(g, traces, ctx.clips)?;
        Ok(ActionFeatureSet {
            x,
            traces,
            clips: ctx.clips,
            queries: self.cfg.queries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::Tensor;

    #[test]
    fn context_shape_and_visibility() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(2 * 16, 5));
        let o = g.constant(Tensor::zeros(2 * 3, 5));
        let validity = [true, false, false, true, true, false];
        let ctx = gather_action_context(&mut g, z, o, &validity, 2, 16, 3).unwrap();
        assert_eq!(g.shape(ctx.f), (2 * 19, 5));
        assert_eq!(&ctx.visible[16..19], &[true, false, false]);
        assert_eq!(&ctx.visible[35..38], &[true, true, false]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(4, 5));
        let o = g.constant(Tensor::zeros(1, 6));
        assert!(matches!(
            gather_action_context(&mut g, z, o, &[true], 1, 4, 1),
            Err(StoaError::Shape(_))
        ));
    }
}
