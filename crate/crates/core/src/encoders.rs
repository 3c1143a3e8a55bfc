//! Per-frame patch transformer for video and a token transformer for text.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, StoaError};
use crate::nn_core::{
    embedding_table, AttnMask, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Transformer, TransformerConfig,
    Var,
};
use crate::synthetic_world::{Frames, PosTag};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoEncoderConfig {
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    pub transformer: TransformerConfig,
    /// Cross-modal width `d`.
    pub out_width: usize,
}

impl VideoEncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// 1-indexed layer feeding the trajectory module (`L − 2`).
    pub fn trajectory_tap(&self) -> usize {
        self.transformer.layers.saturating_sub(2)
    }

    /// 1-indexed layer feeding the action module (`L − 1`).
    pub fn action_tap(&self) -> usize {
        self.transformer.layers.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.frames == 0 {
            return Err(StoaError::Config("video needs at least one frame".into()));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(StoaError::Shape(format!(
                "frame side {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }
}

/// Video encoder outputs for a batch of clips, rows ordered clip-major then
/// frame then patch.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub clips: usize,
    pub frames: usize,
    pub patches: usize,
    /// Final-layer patch features, `(clips·T·HW, h)`.
    pub z: Var,
    /// Final-layer frame `[CLS]` features, `(clips·T, h)`.
    pub frame_cls: Var,
    /// Patch features after each tapped layer (1-indexed; 0 = embeddings).
    pub layer_taps: BTreeMap<usize, Var>,
    /// Frame features projected to `d`, `(clips·T, d)`.
    pub v: Var,
}

impl PatchGrid {
    pub fn tap(&self, layer: usize) -> Var {
        self.layer_taps[&layer]
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    cfg: VideoEncoderConfig,
    patch_embed: Linear,
    cls: ParamId,
    spatial_pos: ParamId,
    transformer: Transformer,
    ln_out: LayerNorm,
    proj: Linear,
}

impl VideoEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: VideoEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.transformer.width;
        Ok(Self {
            patch_embed: Linear::new(store, "video.patch_embed", 3 * cfg.patch * cfg.patch, h, rng),
            cls: embedding_table(store, "video.cls", 1, h, EMBED_STD, rng),
            spatial_pos: embedding_table(store, "video.spatial_pos", cfg.patches() + 1, h, EMBED_STD, rng),
            transformer: Transformer::new(store, "video.encoder", cfg.transformer, rng)?,
            ln_out: LayerNorm::new(store, "video.ln_out", h),
            proj: Linear::new(store, "video.proj", h, cfg.out_width, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &VideoEncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph<'_>, clips: &[&Frames]) -> Result<PatchGrid> {
        let cfg = &self.cfg;
        let (t, hw) = (cfg.frames, cfg.patches());
        let mut pixels = Vec::new();
        for clip in clips {
            if clip.num_frames() != t || clip.size() != cfg.image_size {
                return Err(StoaError::Shape(format!(
                    "clip is {}x{}px over {} frames, encoder expects {}px over {t}",
                    clip.size(),
                    clip.size(),
                    clip.num_frames(),
                    cfg.image_size
                )));
            }
            pixels.extend(patchify(clip, cfg.patch)?.into_data());
        }
        let n_frames = clips.len() * t;
        let seq = hw + 1;
        let pixels = g.constant(Tensor::from_vec(n_frames * hw, 3 * cfg.patch * cfg.patch, pixels));
        let patches = self.patch_embed.forward(g, pixels);

        // Interleave one [CLS] row ahead of every frame's patches.
        let cls = g.param(self.cls);
        let pool = g.concat_rows(&[cls, patches]);
        let mut order = Vec::with_capacity(n_frames * seq);
        let mut spatial = Vec::with_capacity(n_frames * seq);
        for f in 0..n_frames {
            order.push(0);
            order.extend((0..hw).map(|p| 1 + f * hw + p));
            spatial.extend(0..seq);
        }
        let x = g.gather_rows(pool, &order);
        let sp = g.param(self.spatial_pos);
        let sp = g.gather_rows(sp, &spatial);
        let x = g.add(x, sp);

        let taps = self.transformer.encode_with_taps(g, x, None, n_frames)?;
        let cls_rows: Vec<usize> = (0..n_frames).map(|f| f * seq).collect();
        let patch_rows: Vec<usize> = (0..n_frames).flat_map(|f| (1..seq).map(move |p| f * seq + p)).collect();
        let last = *taps.last().expect("taps include the input");
        let frame_cls = g.gather_rows(last, &cls_rows);
        let z = g.gather_rows(last, &patch_rows);
        let mut layer_taps = BTreeMap::new();
        for layer in [cfg.trajectory_tap(), cfg.action_tap()] {
            if let std::collections::btree_map::Entry::Vacant(e) = layer_taps.entry(layer) {
                e.insert(g.gather_rows(taps[layer], &patch_rows));
            }
        }
        let v = self.ln_out.forward(g, frame_cls);
        let v = self.proj.forward(g, v);
        Ok(PatchGrid {
            clips: clips.len(),
            frames: t,
            patches: hw,
            z,
            frame_cls,
            layer_taps,
            v,
        })
    }
}

/// Non-overlapping `patch × patch` tiles, one row per (frame, tile) with
/// tiles in raster order and features ordered channel, row, column.
pub fn patchify(frames: &Frames, patch: usize) -> Result<Tensor> {
    let s = frames.size();
    if patch == 0 || !s.is_multiple_of(patch) {
        return Err(StoaError::Shape(format!(
            "frame side {s} not divisible by patch {patch}"
        )));
    }
    let grid = s / patch;
    let t = frames.num_frames();
    let mut out = Tensor::zeros(t * grid * grid, 3 * patch * patch);
    for f in 0..t {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = out.row_mut((f * grid + gy) * grid + gx);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            row[k] = frames.pixel(f, c, gy * patch + dy, gx * patch + dx) as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextAttention {
    Bidirectional,
    /// Lower-triangular: position `i` sees positions `<= i`.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub transformer: TransformerConfig,
    pub out_width: usize,
    pub pad_id: u32,
}

/// Token features for a batch of sequences padded to a common stride.
#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `(batch·stride, d)`.
    pub t: Var,
    pub stride: usize,
    pub lengths: Vec<usize>,
    pub tags: Vec<Vec<PosTag>>,
    pub index_cls: Vec<usize>,
    pub index_sep: Vec<usize>,
}

impl TextFeatures {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Row of token `pos` of sequence `b` inside `t`.
    pub fn row_of(&self, b: usize, pos: usize) -> usize {
        b * self.stride + pos
    }

    /// Rows of sequence `b` without padding.
    pub fn rows_of(&self, b: usize) -> Vec<usize> {
        (0..self.lengths[b]).map(|p| self.row_of(b, p)).collect()
    }
}

/// One tokenised text: ids plus POS tags (tags may be all `Other` when the
/// caller does not need them).
#[derive(Clone, Copy, Debug)]
pub struct TextInput<'a> {
    pub tokens: &'a [u32],
    pub tags: &'a [PosTag],
    pub cls_id: u32,
    pub sep_id: u32,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    token_embed: ParamId,
    pos_embed: ParamId,
    transformer: Transformer,
    ln_out: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.transformer.validate()?;
        let h = cfg.transformer.width;
        Ok(Self {
            token_embed: embedding_table(store, "text.token_embed", cfg.vocab_size, h, EMBED_STD, rng),
            pos_embed: embedding_table(store, "text.pos_embed", cfg.max_len, h, EMBED_STD, rng),
            transformer: Transformer::new(store, "text.encoder", cfg.transformer, rng)?,
            ln_out: LayerNorm::new(store, "text.ln_out", h),
            proj: Linear::new(store, "text.proj", h, cfg.out_width, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph<'_>, texts: &[TextInput<'_>], attention: TextAttention) -> Result<TextFeatures> {
        if texts.is_empty() {
            return Err(StoaError::Shape("empty text batch".into()));
        }
        let stride = texts.iter().map(|t| t.tokens.len()).max().unwrap_or(0);
        if stride > self.cfg.max_len {
            return Err(StoaError::Shape(format!(
                "text of {stride} tokens exceeds maximum {}",
                self.cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(texts.len() * stride);
        let mut positions = Vec::with_capacity(texts.len() * stride);
        let mut index_cls = Vec::with_capacity(texts.len());
        let mut index_sep = Vec::with_capacity(texts.len());
        for text in texts {
            if text.tokens.len() != text.tags.len() {
                return Err(StoaError::Shape("tokens and tags differ in length".into()));
            }
            if let Some(&bad) = text.tokens.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(StoaError::Vocabulary(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            if text.tokens.is_empty() {
                return Err(StoaError::Shape("empty text".into()));
            }
            // Generation inputs end in [MASK] slots; their last position
            // stands in for [SEP].
            let cls = text.tokens.iter().position(|&id| id == text.cls_id);
            let sep = text.tokens.iter().rposition(|&id| id == text.sep_id);
            index_cls.push(cls.unwrap_or(0));
            index_sep.push(sep.unwrap_or(text.tokens.len() - 1));
            ids.extend(text.tokens.iter().map(|&id| id as usize));
            ids.extend(std::iter::repeat_n(
                self.cfg.pad_id as usize,
                stride - text.tokens.len(),
            ));
            positions.extend(0..stride);
        }
        let lengths: Vec<usize> = texts.iter().map(|t| t.tokens.len()).collect();
        let mask = AttnMask::from_fn(texts.len() * stride, stride, |r, c| {
            let len = lengths[r / stride];
            let i = r % stride;
            c < len && (attention == TextAttention::Bidirectional || c <= i)
        });
        let emb = g.param(self.token_embed);
        let x = g.gather_rows(emb, &ids);
        let pos = g.param(self.pos_embed);
        let pos = g.gather_rows(pos, &positions);
        let x = g.add(x, pos);
        let hidden = self.transformer.encode(g, x, Some(&mask), texts.len())?;
        let t = self.ln_out.forward(g, hidden);
        let t = self.proj.forward(g, t);
        Ok(TextFeatures {
            t,
            stride,
            lengths,
            tags: texts.iter().map(|t| t.tags.to_vec()).collect(),
            index_cls,
            index_sep,
        })
    }
}
