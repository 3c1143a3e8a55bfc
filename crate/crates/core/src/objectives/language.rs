use rand::seq::index::sample;
use rand::Rng;

use crate::nn_core::{Graph, Var};

/// Corrupted token sequence plus the positions whose original tokens are
/// predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub input: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

pub const MLM_RATE: f64 = 0.15;

/// Selects 15% of the non-special positions (at least one); selected tokens
/// become `[MASK]` (80%), a random token from `random_pool` (10%) or stay
/// unchanged (10%). `None` when nothing is maskable.
pub fn mlm_plan<R: Rng + ?Sized>(
    tokens: &[u32],
    is_special: impl Fn(u32) -> bool,
    mask_id: u32,
    random_pool: &[u32],
    rng: &mut R,
) -> Option<MaskPlan> {
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect();
    if candidates.is_empty() {
        return None;
    }
    let count = ((candidates.len() as f64 * MLM_RATE).round() as usize).clamp(1, candidates.len());
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let mut input = tokens.to_vec();
    for &p in &chosen {
        let u: f64 = rng.gen();
        if u < 0.8 {
            input[p] = mask_id;
        } else if u < 0.9 && !random_pool.is_empty() {
            input[p] = random_pool[rng.gen_range(0..random_pool.len())];
        }
    }
    Some(MaskPlan {
        input,
        targets: chosen.iter().map(|&p| tokens[p]).collect(),
        positions: chosen,
    })
}

/// Masks a suffix of the content tokens of length uniform in
/// `[1, L_content − 1]`. `None` when fewer than two content tokens exist.
pub fn plm_plan<R: Rng + ?Sized>(
    tokens: &[u32],
    is_special: impl Fn(u32) -> bool,
    mask_id: u32,
    rng: &mut R,
) -> Option<MaskPlan> {
    let content: Vec<usize> = (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect();
    if content.len() < 2 {
        return None;
    }
    let suffix = rng.gen_range(1..content.len());
    Some(suffix_plan(tokens, &content[content.len() - suffix..], mask_id))
}

/// Masks the given positions and predicts all of them.
pub fn suffix_plan(tokens: &[u32], positions: &[usize], mask_id: u32) -> MaskPlan {
    let mut input = tokens.to_vec();
    for &p in positions {
        input[p] = mask_id;
    }
    MaskPlan {
        input,
        positions: positions.to_vec(),
        targets: positions.iter().map(|&p| tokens[p]).collect(),
    }
}

/// Generation step `p`: positions `>= p` become `[MASK]` and only position
/// `p` is predicted, mirroring greedy left-to-right decoding.
pub fn next_token_plan(tokens: &[u32], p: usize, mask_id: u32) -> MaskPlan {
    let mut input = tokens.to_vec();
    for t in &mut input[p..] {
        *t = mask_id;
    }
    MaskPlan {
        input,
        positions: vec![p],
        targets: vec![tokens[p]],
    }
}

/// Mean cross-entropy of vocabulary logits against target ids.
pub fn token_loss(g: &mut Graph<'_>, logits: Var, targets: &[u32]) -> Var {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    g.cross_entropy(logits, &t)
}
