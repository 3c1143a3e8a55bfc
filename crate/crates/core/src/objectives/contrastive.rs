use rand::Rng;

use crate::error::{Result, StoaError};
use crate::nn_core::{Graph, Tensor, Var};

/// Cosine similarities scaled by `exp(log_scale)`, `(B, B)` with videos on
/// rows. Fails on zero-norm features.
pub fn similarity_matrix(g: &mut Graph<'_>, v: Var, t: Var, log_scale: Var) -> Result<Var> {
    let (bv, dv) = g.shape(v);
    let (bt, dt) = g.shape(t);
    if bv != bt || dv != dt {
        return Err(StoaError::Shape(format!(
            "video features {bv}x{dv} vs text features {bt}x{dt}"
        )));
    }
    for (name, x) in [("video", v), ("text", t)] {
        let xv = g.value(x);
        for r in 0..xv.rows() {
            let n: f64 = xv.row(r).iter().map(|a| a * a).sum();
            if !(n > 0.0 && n.is_finite()) {
                return Err(StoaError::Numeric(format!("{name} feature {r} has norm {}", n.sqrt())));
            }
        }
    }
    let vn = g.l2_normalize_rows(v);
    let tn = g.l2_normalize_rows(t);
    let cos = g.matmul_bt(vn, tn);
    let scale = g.exp(log_scale);
    Ok(g.scale_by(cos, scale))
}

/// Symmetric InfoNCE: mean of the video→text and text→video cross-entropies
/// against the diagonal.
pub fn vtc_loss(g: &mut Graph<'_>, v: Var, t: Var, log_scale: Var) -> Result<Var> {
    let b = g.shape(v).0;
    if b < 2 {
        return Err(StoaError::Shape("contrastive loss needs a batch of at least 2".into()));
    }
    let sim = similarity_matrix(g, v, t, log_scale)?;
    Ok(symmetric_infonce(g, sim))
}

pub fn symmetric_infonce(g: &mut Graph<'_>, sim: Var) -> Var {
    let b = g.shape(sim).0;
    let diag: Vec<usize> = (0..b).collect();
    let v2t = g.cross_entropy(sim, &diag);
    let sim_t = g.transpose(sim);
    let t2v = g.cross_entropy(sim_t, &diag);
    let both = g.add(v2t, t2v);
    g.scale(both, 0.5)
}

/// One mined negative per video and per text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// `text_for_video[i]`: negative text paired with video `i`.
    pub text_for_video: Vec<usize>,
    /// `video_for_text[j]`: negative video paired with text `j`.
    pub video_for_text: Vec<usize>,
}

/// Samples negatives ∝ softmax of the off-diagonal similarities of each row
/// (videos) and each column (texts).
pub fn mine_hard_negatives<R: Rng + ?Sized>(sim: &Tensor, rng: &mut R) -> Result<HardNegatives> {
    let b = sim.rows();
    if b < 2 || sim.cols() != b {
        return Err(StoaError::Shape(format!(
            "hard negative mining needs a square batch of at least 2, got {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    let draw = |rng: &mut R, scores: &dyn Fn(usize) -> f64, skip: usize| {
        let m = (0..b)
            .filter(|&j| j != skip)
            .map(scores)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..b)
            .map(|j| if j == skip { 0.0 } else { (scores(j) - m).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut last = usize::MAX;
        for (j, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last = j;
                if u < w {
                    return j;
                }
                u -= w;
            }
        }
        last
    };
    let text_for_video = (0..b).map(|i| draw(rng, &|j| sim.get(i, j), i)).collect();
    let video_for_text = (0..b).map(|j| draw(rng, &|i| sim.get(i, j), j)).collect();
    Ok(HardNegatives {
        text_for_video,
        video_for_text,
    })
}

/// Two-way cross-entropy: positives labelled 1, negatives 0.
pub fn vtm_loss(g: &mut Graph<'_>, positive_logits: Var, negative_logits: Var) -> Var {
    let np = g.shape(positive_logits).0;
    let nn = g.shape(negative_logits).0;
    let logits = g.concat_rows(&[positive_logits, negative_logits]);
    let labels: Vec<usize> = std::iter::repeat_n(1, np).chain(std::iter::repeat_n(0, nn)).collect();
    g.cross_entropy(logits, &labels)
}
