//! Modality-agnostic encoder over the concatenation `[v, o, x, t]`.

use std::sync::Arc;

use rand::Rng;

use crate::encoders::TextAttention;
use crate::error::{Result, StoaError};
use crate::nn_core::{
    embedding_table, AttnMask, Graph, ParamId, ParamStore, Tensor, Transformer, TransformerConfig, Var,
};

/// Modality tag of a fusion position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Video = 0,
    Object = 1,
    Action = 2,
    Text = 3,
}

/// A list of rows of some graph value.
#[derive(Clone, Debug, PartialEq)]
pub struct RowRef {
    pub var: Var,
    pub rows: Vec<usize>,
}

impl RowRef {
    pub fn new(var: Var, rows: Vec<usize>) -> Self {
        Self { var, rows }
    }

    pub fn range(var: Var, start: usize, len: usize) -> Self {
        Self::new(var, (start..start + len).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One fusion sequence. `video` holds the `T` frame features; the pooled
/// `v_[CLS]` row is appended by [`FusionEncoder::fuse`].
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub video: RowRef,
    /// Present trajectories only.
    pub objects: Option<RowRef>,
    pub actions: Option<RowRef>,
    pub text: RowRef,
    /// Position of `[SEP]` inside `text`.
    pub text_sep: usize,
}

/// Where each segment of one sequence sits inside its block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionLayout {
    pub frames: usize,
    pub video_cls: usize,
    pub objects: (usize, usize),
    pub actions: (usize, usize),
    pub text: (usize, usize),
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `(batch·stride, d)`.
    pub h: Var,
    pub stride: usize,
    pub layouts: Vec<FusionLayout>,
    /// Output at each `v_[CLS]`, `(batch, d)`.
    pub v_o: Var,
    /// Output at each text `[SEP]`, `(batch, d)`.
    pub t_o: Var,
}

impl FusionOutput {
    /// Row in `h` of text token `pos` of sequence `b`.
    pub fn text_row(&self, b: usize, pos: usize) -> usize {
        b * self.stride + self.layouts[b].text.0 + pos
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub frames: usize,
    pub max_tokens: usize,
    pub transformer: TransformerConfig,
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    cfg: FusionConfig,
    segment: ParamId,
    frame_pos: ParamId,
    transformer: Transformer,
}

impl FusionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: FusionConfig, rng: &mut R) -> Result<Self> {
        cfg.transformer.validate()?;
        let d = cfg.transformer.width;
        Ok(Self {
            segment: store.add("fusion.segment", Tensor::zeros(4, d)),
            frame_pos: embedding_table(store, "fusion.frame_pos", cfg.frames, d, 0.02, rng),
            transformer: Transformer::new(store, "fusion.encoder", cfg.transformer, rng)?,
            cfg,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn fuse(&self, g: &mut Graph<'_>, inputs: &[FusionInput], mode: TextAttention) -> Result<FusionOutput> {
        if inputs.is_empty() {
            return Err(StoaError::Shape("empty fusion batch".into()));
        }
        let d = self.cfg.transformer.width;
        let t = self.cfg.frames;

        // Pool every referenced value once, followed by the pooled v_[CLS]
        // rows and a zero row for padding.
        let mut pool = SourcePool::default();
        let mut layouts = Vec::with_capacity(inputs.len());
        let mut sources: Vec<Vec<Source>> = Vec::new();
        for inp in inputs {
            if inp.video.len() != t {
                return Err(StoaError::Shape(format!(
                    "{} video rows, fusion expects {t}",
                    inp.video.len()
                )));
            }
            if inp.text_sep >= inp.text.len() {
                return Err(StoaError::Shape("text [SEP] index out of range".into()));
            }
            let mut src = Vec::new();
            pool.extend(g, d, Segment::Video, &inp.video, &mut src)?;
            for (tau, s) in src.iter_mut().enumerate() {
                s.frame = Some(tau);
            }
            src.push(Source {
                segment: Segment::Video,
                row: None,
                frame: None,
            });
            let objects = pool.extend_opt(g, d, Segment::Object, inp.objects.as_ref(), &mut src)?;
            let actions = pool.extend_opt(g, d, Segment::Action, inp.actions.as_ref(), &mut src)?;
            let text = pool.extend_opt(g, d, Segment::Text, Some(&inp.text), &mut src)?;
            if src.len() > self.cfg.max_tokens {
                return Err(StoaError::Shape(format!(
                    "fusion sequence of {} tokens exceeds {}",
                    src.len(),
                    self.cfg.max_tokens
                )));
            }
            layouts.push(FusionLayout {
                frames: t,
                video_cls: t,
                objects,
                actions,
                text,
                len: src.len(),
            });
            sources.push(src);
        }
        let stride = layouts.iter().map(|l| l.len).max().unwrap_or(0);
        let batch = inputs.len();

        let pool_rows = pool.rows;
        // Mean over each sequence's frame rows.
        let mut avg = Tensor::zeros(batch, pool_rows);
        for (b, src) in sources.iter().enumerate() {
            for s in &src[..t] {
                let r = s.row.expect("frame rows are pooled");
                avg.set(b, r, avg.get(b, r) + 1.0 / t as f64);
            }
        }
        let pooled_src = g.concat_rows(&pool.vars);
        let v_cls = g.const_left_mul(Arc::new(avg), pooled_src);
        let zero = g.constant(Tensor::zeros(1, d));
        let cls_base = pool_rows;
        let zero_row = pool_rows + batch;
        let pool = g.concat_rows(&[pooled_src, v_cls, zero]);

        let mut order = vec![zero_row; batch * stride];
        let mut seg_idx = vec![Segment::Text as usize; batch * stride];
        let mut frame_idx = vec![t; batch * stride];
        let mut valid = vec![false; batch * stride];
        let mut is_text = vec![false; batch * stride];
        for (b, src) in sources.iter().enumerate() {
            for (p, s) in src.iter().enumerate() {
                let row = b * stride + p;
                order[row] = s.row.unwrap_or(cls_base + b);
                seg_idx[row] = s.segment as usize;
                if let Some(tau) = s.frame {
                    frame_idx[row] = tau;
                }
                valid[row] = true;
                is_text[row] = s.segment == Segment::Text;
            }
        }
        let x = g.gather_rows(pool, &order);
        let seg_table = g.param(self.segment);
        let seg = g.gather_rows(seg_table, &seg_idx);
        let fp = g.param(self.frame_pos);
        let fp_zero = g.constant(Tensor::zeros(1, d));
        let fp_table = g.concat_rows(&[fp, fp_zero]);
        let fp = g.gather_rows(fp_table, &frame_idx);
        let x = g.add(x, seg);
        let x = g.add(x, fp);

        let mask = AttnMask::from_fn(batch * stride, stride, |r, c| {
            let b = r / stride;
            let key = b * stride + c;
            if !valid[key] || !valid[r] {
                return false;
            }
            match mode {
                TextAttention::Bidirectional => true,
                TextAttention::Causal => match (is_text[r], is_text[key]) {
                    (_, false) => true,
                    (true, true) => c <= r % stride,
                    (false, true) => false,
                },
            }
        });
        let h = self.transformer.encode(g, x, Some(&mask), batch)?;
        let v_rows: Vec<usize> = (0..batch).map(|b| b * stride + layouts[b].video_cls).collect();
        let t_rows: Vec<usize> = (0..batch)
            .map(|b| b * stride + layouts[b].text.0 + inputs[b].text_sep)
            .collect();
        let v_o = g.gather_rows(h, &v_rows);
        let t_o = g.gather_rows(h, &t_rows);
        Ok(FusionOutput {
            h,
            stride,
            layouts,
            v_o,
            t_o,
        })
    }
}

/// Origin of one fusion position: a pooled row, or the sequence's
/// `v_[CLS]` when `row` is `None`.
#[derive(Clone, Copy, Debug)]
struct Source {
    segment: Segment,
    row: Option<usize>,
    frame: Option<usize>,
}

#[derive(Default)]
struct SourcePool {
    vars: Vec<Var>,
    offsets: Vec<usize>,
    rows: usize,
}

impl SourcePool {
    fn offset(&mut self, g: &Graph<'_>, width: usize, v: Var) -> Result<usize> {
        if let Some(i) = self.vars.iter().position(|&x| x == v) {
            return Ok(self.offsets[i]);
        }
        let (r, c) = g.shape(v);
        if c != width {
            return Err(StoaError::Shape(format!("fusion input of width {c}, expected {width}")));
        }
        self.vars.push(v);
        self.offsets.push(self.rows);
        self.rows += r;
        Ok(self.rows - r)
    }

    fn extend(
        &mut self,
        g: &Graph<'_>,
        width: usize,
        segment: Segment,
        rr: &RowRef,
        out: &mut Vec<Source>,
    ) -> Result<()> {
        let base = self.offset(g, width, rr.var)?;
        let limit = g.shape(rr.var).0;
        for &r in &rr.rows {
            if r >= limit {
                return Err(StoaError::Shape(format!("row {r} outside a {limit}-row input")));
            }
            out.push(Source {
                segment,
                row: Some(base + r),
                frame: None,
            });
        }
        Ok(())
    }

    fn extend_opt(
        &mut self,
        g: &Graph<'_>,
        width: usize,
        segment: Segment,
        rr: Option<&RowRef>,
        out: &mut Vec<Source>,
    ) -> Result<(usize, usize)> {
        let start = out.len();
        if let Some(rr) = rr {
            self.extend(g, width, segment, rr, out)?;
        }
        Ok((start, out.len() - start))
    }
}
