use crate::assignment::{solve_assignment, Assignment};
use crate::error::{Result, StoaError};
use crate::nn_core::{Graph, Tensor, Var};
use crate::synthetic_world::PosTag;

/// Token positions of the OTA and ASP target sets of one caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTargetSets {
    /// NOUN positions in caption order, then the `[CLS]` position.
    pub nouns: Vec<usize>,
    /// First occurrence of each distinct VERB token, then the `[CLS]`
    /// position standing for "no action".
    pub actions: Vec<usize>,
}

pub fn text_target_sets(tokens: &[u32], tags: &[PosTag], index_cls: usize) -> TextTargetSets {
    let mut nouns: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == PosTag::Noun).collect();
    nouns.push(index_cls);
    let mut seen = Vec::new();
    let mut actions = Vec::new();
    for i in 0..tags.len() {
        if tags[i] == PosTag::Verb && !seen.contains(&tokens[i]) {
            seen.push(tokens[i]);
            actions.push(i);
        }
    }
    actions.push(index_cls);
    TextTargetSets { nouns, actions }
}

/// Row-wise softmax of cosine similarities between `pred` rows and
/// `targets` rows.
pub fn matching_scores(pred: &Tensor, targets: &Tensor) -> Tensor {
    let norm = |t: &Tensor, r: usize| t.row(r).iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    let mut s = Tensor::zeros(pred.rows(), targets.rows());
    for i in 0..pred.rows() {
        let ni = norm(pred, i);
        for j in 0..targets.rows() {
            let dotp: f64 = pred.row(i).iter().zip(targets.row(j)).map(|(a, b)| a * b).sum();
            s.set(i, j, dotp / (ni * norm(targets, j)));
        }
        let m = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.row(i).iter().map(|v| (v - m).exp()).sum();
        for v in s.row_mut(i) {
            *v = (*v - m).exp() / z;
        }
    }
    s
}

/// A matched-MSE loss together with the matching that produced it.
#[derive(Clone, Debug)]
pub struct AlignmentOutcome {
    pub loss: Var,
    pub assignment: Assignment,
}

/// Matches `pred` rows to stop-gradient `target` rows by maximum total
/// softmax-cosine score and returns the MSE over matched pairs.
pub fn matched_mse(g: &mut Graph<'_>, pred: Var, targets: Var) -> Result<AlignmentOutcome> {
    if g.shape(pred).1 != g.shape(targets).1 {
        return Err(StoaError::Shape("prediction and target widths differ".into()));
    }
    let frozen = g.detach(targets);
    let scores = matching_scores(g.value(pred), g.value(frozen));
    let assignment = solve_assignment(&scores)?;
    let (rows, cols): (Vec<usize>, Vec<usize>) = assignment.pairs.iter().copied().unzip();
    let p = g.gather_rows(pred, &rows);
    let t = g.gather_rows(frozen, &cols);
    Ok(AlignmentOutcome {
        loss: g.mse(p, t),
        assignment,
    })
}

/// Object-text alignment for one clip: present trajectories against the
/// noun set (rows `noun_rows` of the text features `t`). `None` when no
/// trajectory is present.
pub fn ota_loss(
    g: &mut Graph<'_>,
    trajectories: Option<Var>,
    t: Var,
    noun_rows: &[usize],
) -> Result<Option<AlignmentOutcome>> {
    let Some(o) = trajectories else {
        return Ok(None);
    };
    let nouns = g.gather_rows(t, noun_rows);
    matched_mse(g, o, nouns).map(Some)
}

/// Action set prediction for one clip: action tokens against the
/// deduplicated verb set plus the `[CLS]` "no action" entry.
pub fn asp_loss(g: &mut Graph<'_>, actions: Var, t: Var, action_rows: &[usize]) -> Result<AlignmentOutcome> {
    let targets = g.gather_rows(t, action_rows);
    matched_mse(g, actions, targets)
}
