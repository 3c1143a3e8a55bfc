//! Object trajectory tokens: RoIAlign over patch features, confidence-ranked
//! class selection and a class-masked trajectory transformer.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, StoaError};
use crate::nn_core::{
    embedding_table, AttnMask, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Transformer,
    TransformerConfig, Var,
};
use crate::synthetic_world::Detection;

/// RoIAlign output cells per box side.
pub const ROI_GRID: usize = 2;

/// Detector slots of one clip, flattened frame-major to `T·K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSlots {
    pub frames: usize,
    pub per_frame: usize,
    pub boxes: Vec<[f64; 4]>,
    pub class_ids: Vec<usize>,
    pub confidences: Vec<f64>,
    pub validity: Vec<bool>,
}

impl ObjectSlots {
    /// Keeps the first `k` detections of every frame (already sorted by
    /// confidence) and marks the remaining slots invalid.
    pub fn from_detections(detections: &[Vec<Detection>], k: usize) -> Self {
        let frames = detections.len();
        let n = frames * k;
        let mut slots = Self {
            frames,
            per_frame: k,
            boxes: vec![[0.0; 4]; n],
            class_ids: vec![0; n],
            confidences: vec![0.0; n],
            validity: vec![false; n],
        };
        for (t, dets) in detections.iter().enumerate() {
            for (j, d) in dets.iter().take(k).enumerate() {
                let s = t * k + j;
                slots.boxes[s] = d.bbox;
                slots.class_ids[s] = d.class_id;
                slots.confidences[s] = d.confidence;
                slots.validity[s] = true;
            }
        }
        slots
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn valid_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&s| self.validity[s]).collect()
    }
}

/// Pooled object features for a batch, `(clips·T·K, h)`; invalid slots are
/// exact zero rows.
#[derive(Clone, Debug)]
pub struct ObjectFeatures {
    pub o: Var,
    pub slots: Vec<ObjectSlots>,
}

/// Clamps to `[0, 1]` and orders the corners.
fn normalize_box(b: [f64; 4]) -> [f64; 4] {
    let c = b.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
    [c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])]
}

/// Bilinear weights over a `grid × grid` feature map for one sample point
/// given in normalized image coordinates (pixel centers at `(i + 0.5)/grid`).
pub fn bilinear_weights(x: f64, y: f64, grid: usize) -> Vec<f64> {
    let axis = |u: f64| -> [(usize, f64); 2] {
        let p = (u * grid as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        let frac = p - lo as f64;
        [(lo, 1.0 - frac), (hi, frac)]
    };
    let mut w = vec![0.0; grid * grid];
    for (yi, wy) in axis(y) {
        for (xi, wx) in axis(x) {
            w[yi * grid + xi] += wy * wx;
        }
    }
    w
}

/// Sampling weights for the `ROI_GRID²` cells of one box, one row per cell
/// (raster order), each a distribution over the `grid²` feature positions.
/// A zero-area box collapses to its center point.
pub fn roi_align_weights(bbox: [f64; 4], grid: usize) -> Tensor {
    let [x1, y1, x2, y2] = normalize_box(bbox);
    let mut out = Tensor::zeros(ROI_GRID * ROI_GRID, grid * grid);
    for cy in 0..ROI_GRID {
        for cx in 0..ROI_GRID {
            let fx = (cx as f64 + 0.5) / ROI_GRID as f64;
            let fy = (cy as f64 + 0.5) / ROI_GRID as f64;
            let w = bilinear_weights(x1 + fx * (x2 - x1), y1 + fy * (y2 - y1), grid);
            out.row_mut(cy * ROI_GRID + cx).copy_from_slice(&w);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub per_frame: usize,
    pub grid: usize,
    pub trajectories: usize,
    pub transformer: TransformerConfig,
    pub out_width: usize,
}

#[derive(Clone, Debug)]
pub struct TrajectoryModule {
    cfg: TrajectoryConfig,
    roi_mlp: Mlp,
    frame_pos: ParamId,
    box_pos: Linear,
    cls: ParamId,
    transformer: Transformer,
    ln_out: LayerNorm,
    proj: Linear,
}

/// Ranked classes of one clip and their slot masks `M_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySelection {
    /// Present classes, descending summed confidence.
    pub classes: Vec<usize>,
    /// `N` rows over the `T·K` slots; rows past `classes.len()` are absent
    /// and all false.
    pub masks: Vec<Vec<bool>>,
}

impl TrajectorySelection {
    pub fn present(&self) -> usize {
        self.classes.len()
    }
}

/// Trajectory embeddings of one clip.
#[derive(Clone, Debug)]
pub struct TrajectorySet {
    /// `(present, d)`, `None` when no class was detected.
    pub o: Option<Var>,
    pub class_of_trajectory: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
}

impl TrajectorySet {
    pub fn present(&self) -> usize {
        self.class_of_trajectory.len()
    }

    pub fn absent(&self) -> usize {
        self.masks.len() - self.present()
    }
}

/// Top-`n` classes by confidence summed over every valid slot, ties to the
/// smaller class id.
pub fn select_trajectories(slots: &ObjectSlots, n: usize) -> Result<TrajectorySelection> {
    if n == 0 {
        return Err(StoaError::Config("need at least one trajectory".into()));
    }
    let mut sums: Vec<(usize, f64)> = Vec::new();
    for s in slots.valid_slots() {
        let c = slots.class_ids[s];
        match sums.iter_mut().find(|e| e.0 == c) {
            Some(e) => e.1 += slots.confidences[s],
            None => sums.push((c, slots.confidences[s])),
        }
    }
    sums.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let classes: Vec<usize> = sums.iter().take(n).map(|e| e.0).collect();
    let masks = (0..n)
        .map(|i| match classes.get(i) {
            Some(&c) => (0..slots.len())
                .map(|s| slots.validity[s] && slots.class_ids[s] == c)
                .collect(),
            None => vec![false; slots.len()],
        })
        .collect();
    Ok(TrajectorySelection { classes, masks })
}

impl TrajectoryModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: TrajectoryConfig, rng: &mut R) -> Result<Self> {
        cfg.transformer.validate()?;
        let h = cfg.transformer.width;
        Ok(Self {
            roi_mlp: Mlp::new(store, "trajectory.roi_mlp", h, h, h, rng),
            frame_pos: embedding_table(store, "trajectory.frame_pos", cfg.frames, h, 0.02, rng),
            box_pos: Linear::new(store, "trajectory.box_pos", 4, h, rng),
            cls: embedding_table(store, "trajectory.cls", 1, h, 0.02, rng),
            transformer: Transformer::new(store, "trajectory.encoder", cfg.transformer, rng)?,
            ln_out: LayerNorm::new(store, "trajectory.ln_out", h),
            proj: Linear::new(store, "trajectory.proj", h, cfg.out_width, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &TrajectoryConfig {
        &self.cfg
    }

    /// RoIAlign + max-pool + MLP + spatial-temporal position for every valid
    /// slot of every clip. `z_tap` rows are clip-major `(clips·T·HW, h)`.
    pub fn roi_align_pool(&self, g: &mut Graph<'_>, z_tap: Var, slots: Vec<ObjectSlots>) -> Result<ObjectFeatures> {
        let cfg = &self.cfg;
        let (t, k, hw) = (cfg.frames, cfg.per_frame, cfg.grid * cfg.grid);
        let h = cfg.transformer.width;
        let (rows, cols) = g.shape(z_tap);
        if cols != h || rows != slots.len() * t * hw {
            return Err(StoaError::Shape(format!(
                "patch tap is {rows}x{cols}, expected {}x{h}",
                slots.len() * t * hw
            )));
        }
        let mut pooled_parts = Vec::new();
        let mut frame_idx = Vec::new();
        let mut box_coords = Vec::new();
        // Destination row of each pooled feature in the (clips·T·K) layout.
        let mut scatter = Vec::new();
        for (b, s) in slots.iter().enumerate() {
            if s.frames != t || s.per_frame != k {
                return Err(StoaError::Shape(format!(
                    "slots are {}x{}, module expects {t}x{k}",
                    s.frames, s.per_frame
                )));
            }
            let valid = s.valid_slots();
            if valid.is_empty() {
                continue;
            }
            let cells = ROI_GRID * ROI_GRID;
            let mut w = Tensor::zeros(valid.len() * cells, t * hw);
            for (i, &slot) in valid.iter().enumerate() {
                let frame = slot / k;
                let bw = roi_align_weights(s.boxes[slot], cfg.grid);
                for c in 0..cells {
                    w.row_mut(i * cells + c)[frame * hw..(frame + 1) * hw].copy_from_slice(bw.row(c));
                }
                frame_idx.push(frame);
                box_coords.extend(normalize_box(s.boxes[slot]));
                scatter.push(b * t * k + slot);
            }
            let clip = g.slice_rows(z_tap, b * t * hw, t * hw);
            let samples = g.const_left_mul(Arc::new(w), clip);
            pooled_parts.push(g.max_pool_rows(samples, cells));
        }
        let total = slots.len() * t * k;
        let o = if pooled_parts.is_empty() {
            g.constant(Tensor::zeros(total, h))
        } else {
            let pooled = g.concat_rows(&pooled_parts);
            let feats = self.roi_mlp.forward(g, pooled);
            let fp = g.param(self.frame_pos);
            let fp = g.gather_rows(fp, &frame_idx);
            let coords = g.constant(Tensor::from_vec(scatter.len(), 4, box_coords));
            let bp = self.box_pos.forward(g, coords);
            let feats = g.add(feats, fp);
            let feats = g.add(feats, bp);
            let zero = g.constant(Tensor::zeros(1, h));
            let pool = g.concat_rows(&[feats, zero]);
            let mut idx = vec![scatter.len(); total];
            for (i, &dst) in scatter.iter().enumerate() {
                idx[dst] = i;
            }
            g.gather_rows(pool, &idx)
        };
        Ok(ObjectFeatures { o, slots })
    }

    /// Runs the trajectory transformer once per present class with
    /// `[CLS] ⊕ O_flatten` visible only at the class's slots.
    pub fn encode_trajectories(
        &self,
        g: &mut Graph<'_>,
        objects: &ObjectFeatures,
        selections: &[TrajectorySelection],
    ) -> Result<Vec<TrajectorySet>> {
        let tk = self.cfg.frames * self.cfg.per_frame;
        if selections.len() != objects.slots.len() {
            return Err(StoaError::Shape("one selection per clip required".into()));
        }
        let seq = tk + 1;
        let mut order = Vec::new();
        let mut block_masks: Vec<&Vec<bool>> = Vec::new();
        for (b, sel) in selections.iter().enumerate() {
            if sel.masks.iter().any(|m| m.len() != tk) {
                return Err(StoaError::Shape(format!("class masks must cover {tk} slots")));
            }
            for m in sel.masks.iter().take(sel.present()) {
                order.push(0);
                order.extend((0..tk).map(|s| 1 + b * tk + s));
                block_masks.push(m);
            }
        }
        let blocks = block_masks.len();
        let mut out: Vec<TrajectorySet> = selections
            .iter()
            .map(|s| TrajectorySet {
                o: None,
                class_of_trajectory: s.classes.clone(),
                masks: s.masks.clone(),
            })
            .collect();
        if blocks == 0 {
            return Ok(out);
        }
        let cls = g.param(self.cls);
        let pool = g.concat_rows(&[cls, objects.o]);
        let x = g.gather_rows(pool, &order);
        let visible = |m: &[bool], pos: usize| pos == 0 || m[pos - 1];
        let mask = AttnMask::from_fn(blocks * seq, seq, |r, c| {
            let m = block_masks[r / seq];
            visible(m, r % seq) && visible(m, c)
        });
        let hidden = self.transformer.encode(g, x, Some(&mask), blocks)?;
        let cls_rows: Vec<usize> = (0..blocks).map(|i| i * seq).collect();
        let cls_out = g.gather_rows(hidden, &cls_rows);
        let cls_out = self.ln_out.forward(g, cls_out);
        let all = self.proj.forward(g, cls_out);
        let mut start = 0;
        for set in out.iter_mut() {
            let n = set.present();
            if n > 0 {
                set.o = Some(g.slice_rows(all, start, n));
                start += n;
            }
        }
        Ok(out)
    }
}
