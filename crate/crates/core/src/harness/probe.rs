//! Downstream probes on a frozen checkpoint: two-stage retrieval, greedy
//! captioning and answer-token QA, plus optional task adaptation on a copy
//! of the weights.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::TextAttention;
use crate::error::{Result, StoaError};
use crate::harness::config::{AdaptConfig, Precision};
use crate::harness::optim::Adam;
use crate::harness::train::Trained;
use crate::model::{StoaModel, TextSeq, VisualTensors};
use crate::nn_core::{Graph, ParamStore, Tensor};
use crate::objectives::{next_token_plan, token_loss, MaskPlan};
use crate::synthetic_world::{build_qa, QaItem, QuestionKind, SampleRecord, Vocabulary};

/// Candidates reranked by the matching head.
pub const RERANK_TOP: usize = 32;
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    Retrieval,
    Caption,
    Qa,
}

impl ProbeTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(ProbeTask::Retrieval),
            "caption" => Ok(ProbeTask::Caption),
            "qa" => Ok(ProbeTask::Qa),
            _ => Err(StoaError::Config(format!("unknown probe task {s:?}"))),
        }
    }
}

/// R@1, R@5 and R@10 in both directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub text_to_video: [f64; 3],
    pub video_to_text: [f64; 3],
    pub queries: usize,
}

impl RetrievalReport {
    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.text_to_video[0] + self.video_to_text[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionReport {
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// Decoded content tokens per clip.
    pub captions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaReport {
    /// Argmax over the full vocabulary.
    pub accuracy: f64,
    /// Argmax restricted to the answer type's words (colors or verbs).
    pub restricted_accuracy: f64,
    pub items: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeReport {
    pub retrieval: Option<RetrievalReport>,
    pub caption: Option<CaptionReport>,
    pub qa: Option<QaReport>,
}

/// Detached visual features of every clip.
pub fn visual_features(model: &StoaModel, store: &ParamStore, samples: &[SampleRecord]) -> Result<Vec<VisualTensors>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut g = Graph::new(store);
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let enc = model.encode_visual(&mut g, &refs)?;
        out.extend(model.visual_tensors(&g, &enc.vars));
    }
    Ok(out)
}

/// `[SEP]` text features of every caption, one row each.
pub fn text_features(model: &StoaModel, store: &ParamStore, samples: &[SampleRecord]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut d = 0;
    for chunk in samples.chunks(CHUNK) {
        let mut g = Graph::new(store);
        let seqs: Vec<TextSeq> = chunk.iter().map(caption_seq).collect();
        let text = model.encode_text(&mut g, &seqs, TextAttention::Bidirectional)?;
        let t = model.text_summary(&mut g, &text);
        d = g.shape(t).1;
        rows.extend_from_slice(g.value(t).data());
    }
    Ok(Tensor::from_vec(samples.len(), d, rows))
}

fn caption_seq(s: &SampleRecord) -> TextSeq {
    TextSeq {
        tokens: s.caption.tokens.clone(),
        tags: s.caption.tags.clone(),
    }
}

/// Cosine similarities, videos on rows.
pub fn cosine_matrix(v: &Tensor, t: &Tensor) -> Tensor {
    let unit = |x: &Tensor| {
        let mut y = x.clone();
        for r in 0..y.rows() {
            let n = y.row(r).iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            y.row_mut(r).iter_mut().for_each(|a| *a /= n);
        }
        y
    };
    unit(v).matmul_bt(&unit(t))
}

/// Positive-class probability of the matching head for each
/// `(video, text)` pair.
pub fn vtm_probabilities(
    model: &StoaModel,
    store: &ParamStore,
    samples: &[SampleRecord],
    visual: &[VisualTensors],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let mut g = Graph::new(store);
        let videos: Vec<&VisualTensors> = chunk.iter().map(|&(v, _)| &visual[v]).collect();
        let vis = model.load_visual(&mut g, &videos);
        let seqs: Vec<TextSeq> = chunk.iter().map(|&(_, t)| caption_seq(&samples[t])).collect();
        let text = model.encode_text(&mut g, &seqs, TextAttention::Bidirectional)?;
        let inputs: Vec<_> = (0..chunk.len())
            .map(|i| model.fusion_input(&g, &vis, i, &text, i))
            .collect();
        let fused = model.fuse(&mut g, &inputs, TextAttention::Bidirectional)?;
        let logits = model.vtm_logits(&mut g, &fused);
        let l = g.value(logits);
        for r in 0..l.rows() {
            let (neg, pos) = (l.get(r, 0), l.get(r, 1));
            out.push(1.0 / (1.0 + (neg - pos).exp()));
        }
    }
    Ok(out)
}

/// Candidate order for one query: by stage-1 score (ties to the smaller
/// index), then the first `top` reordered by `rerank` (ties keep stage-1
/// order).
pub fn rerank_order(stage1: &[f64], top: usize, rerank: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stage1.len()).collect();
    order.sort_by(|&a, &b| stage1[b].total_cmp(&stage1[a]).then(a.cmp(&b)));
    let top = top.min(order.len());
    let scores: Vec<f64> = order[..top].iter().map(|&c| rerank(c)).collect();
    let mut head: Vec<usize> = (0..top).collect();
    head.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let reordered: Vec<usize> = head.iter().map(|&i| order[i]).collect();
    order[..top].copy_from_slice(&reordered);
    order
}

/// Two-stage retrieval from a video×text similarity matrix; `vtm` scores a
/// list of `(video, text)` pairs. Ground truth is the diagonal.
pub fn retrieval_from_scores(
    sim: &Tensor,
    top: usize,
    mut vtm: impl FnMut(&[(usize, usize)]) -> Result<Vec<f64>>,
) -> Result<RetrievalReport> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return Err(StoaError::Shape(format!(
            "retrieval needs a square score matrix, got {:?}",
            sim.shape()
        )));
    }
    let top = top.min(n);
    let stage1 = |order: &mut Vec<usize>, score: &dyn Fn(usize) -> f64| {
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        order.truncate(top);
    };
    let mut needed = Vec::new();
    for q in 0..n {
        let mut vids: Vec<usize> = (0..n).collect();
        stage1(&mut vids, &|v| sim.get(v, q));
        needed.extend(vids.into_iter().map(|v| (v, q)));
        let mut texts: Vec<usize> = (0..n).collect();
        stage1(&mut texts, &|t| sim.get(q, t));
        needed.extend(texts.into_iter().map(|t| (q, t)));
    }
    needed.sort_unstable();
    needed.dedup();
    let probs = vtm(&needed)?;
    let lookup: HashMap<(usize, usize), f64> = needed.into_iter().zip(probs).collect();

    let mut t2v = Vec::with_capacity(n);
    let mut v2t = Vec::with_capacity(n);
    for q in 0..n {
        let col: Vec<f64> = (0..n).map(|v| sim.get(v, q)).collect();
        let order = rerank_order(&col, top, |v| lookup[&(v, q)]);
        t2v.push(order.iter().position(|&v| v == q).expect("present"));
        let order = rerank_order(sim.row(q), top, |t| lookup[&(q, t)]);
        v2t.push(order.iter().position(|&t| t == q).expect("present"));
    }
    let recall = |ranks: &[usize]| [1, 5, 10].map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64);
    Ok(RetrievalReport {
        text_to_video: recall(&t2v),
        video_to_text: recall(&v2t),
        queries: n,
    })
}

pub fn retrieval_probe(model: &StoaModel, store: &ParamStore, samples: &[SampleRecord]) -> Result<RetrievalReport> {
    let visual = visual_features(model, store, samples)?;
    let v: Vec<f64> = visual.iter().flat_map(|x| x.pooled.data().to_vec()).collect();
    let d = visual.first().map_or(0, |x| x.pooled.cols());
    let v = Tensor::from_vec(samples.len(), d, v);
    let t = text_features(model, store, samples)?;
    let sim = cosine_matrix(&v, &t);
    retrieval_from_scores(&sim, RERANK_TOP, |pairs| {
        vtm_probabilities(model, store, samples, &visual, pairs)
    })
}

/// Caption content: tokens strictly between `[CLS]` and `[SEP]`.
pub fn caption_content(tokens: &[u32], cls: u32, sep: u32) -> Vec<u32> {
    let start = usize::from(tokens.first() == Some(&cls));
    let end = tokens.iter().position(|&t| t == sep).unwrap_or(tokens.len());
    tokens[start..end.max(start)].to_vec()
}

/// Greedy decoding: position `p` is filled with the argmax prediction
/// from `[CLS] w_1 … w_{p-1} [MASK] …` in causal mode, until `[SEP]` or
/// `max_len` positions.
pub fn decode_captions(
    model: &StoaModel,
    store: &ParamStore,
    visual: &[VisualTensors],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let ids = *model.token_ids();
    if max_len > model.config().max_text_len || max_len < 2 {
        return Err(StoaError::Config(format!(
            "caption length {max_len} outside [2, {}]",
            model.config().max_text_len
        )));
    }
    let mut done = vec![false; visual.len()];
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); visual.len()];
    for p in 1..max_len {
        let active: Vec<usize> = (0..visual.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(CHUNK) {
            let mut g = Graph::new(store);
            let vids: Vec<&VisualTensors> = chunk.iter().map(|&i| &visual[i]).collect();
            let vis = model.load_visual(&mut g, &vids);
            let plans: Vec<MaskPlan> = chunk
                .iter()
                .map(|&i| {
                    let mut tokens = vec![ids.cls];
                    tokens.extend(&out[i]);
                    tokens.resize(max_len, ids.mask);
                    MaskPlan {
                        input: tokens,
                        positions: vec![p],
                        targets: vec![ids.mask],
                    }
                })
                .collect();
            let refs: Vec<&MaskPlan> = plans.iter().collect();
            let clips: Vec<usize> = (0..chunk.len()).collect();
            let (logits, _, _) = model.masked_token_logits_rows(&mut g, &vis, &clips, &refs, TextAttention::Causal)?;
            let l = g.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                let next = argmax(l.row(r)) as u32;
                if next == ids.sep {
                    done[i] = true;
                } else {
                    out[i].push(next);
                }
            }
        }
        for d in done.iter_mut() {
            *d = *d || p + 1 == max_len;
        }
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Token accuracy (matching positions over the longer of the two) and
/// exact-match rate.
pub fn caption_scores(decoded: &[Vec<u32>], truth: &[Vec<u32>]) -> (f64, f64) {
    let mut acc = 0.0;
    let mut exact = 0usize;
    for (d, t) in decoded.iter().zip(truth) {
        let denom = d.len().max(t.len());
        let hits = d.iter().zip(t).filter(|(a, b)| a == b).count();
        acc += if denom == 0 { 1.0 } else { hits as f64 / denom as f64 };
        exact += usize::from(d == t);
    }
    let n = decoded.len().max(1) as f64;
    (acc / n, exact as f64 / n)
}

pub fn caption_probe(
    model: &StoaModel,
    store: &ParamStore,
    samples: &[SampleRecord],
    max_len: usize,
) -> Result<CaptionReport> {
    let ids = *model.token_ids();
    let visual = visual_features(model, store, samples)?;
    let captions = decode_captions(model, store, &visual, max_len)?;
    let truth: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| caption_content(&s.caption.tokens, ids.cls, ids.sep))
        .collect();
    let (token_accuracy, exact_match) = caption_scores(&captions, &truth);
    Ok(CaptionReport {
        token_accuracy,
        exact_match,
        captions,
    })
}

fn answer_position(item: &QaItem, ans: u32) -> Result<usize> {
    item.question
        .iter()
        .position(|&t| t == ans)
        .ok_or_else(|| StoaError::Contract(format!("question for clip {} has no [ANS] token", item.sample)))
}

/// Vocabulary logits at the `[ANS]` position of each item, `(items, V)`.
fn answer_logits(
    g: &mut Graph<'_>,
    model: &StoaModel,
    visual: &[VisualTensors],
    items: &[&QaItem],
) -> Result<crate::nn_core::Var> {
    let ans = model.token_ids().ans;
    let vids: Vec<&VisualTensors> = items.iter().map(|q| &visual[q.sample]).collect();
    let vis = model.load_visual(g, &vids);
    let seqs: Vec<TextSeq> = items.iter().map(|q| TextSeq::untagged(q.question.clone())).collect();
    let text = model.encode_text(g, &seqs, TextAttention::Bidirectional)?;
    let inputs: Vec<_> = (0..items.len())
        .map(|i| model.fusion_input(g, &vis, i, &text, i))
        .collect();
    let fused = model.fuse(g, &inputs, TextAttention::Bidirectional)?;
    let rows = items
        .iter()
        .enumerate()
        .map(|(i, q)| Ok(fused.text_row(i, answer_position(q, ans)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.lm_logits(g, &fused, &rows))
}

pub fn qa_probe(
    model: &StoaModel,
    store: &ParamStore,
    samples: &[SampleRecord],
    items: &[QaItem],
    vocab: &Vocabulary,
) -> Result<QaReport> {
    let visual = visual_features(model, store, samples)?;
    qa_probe_cached(model, store, &visual, items, vocab)
}

pub fn qa_probe_cached(
    model: &StoaModel,
    store: &ParamStore,
    visual: &[VisualTensors],
    items: &[QaItem],
    vocab: &Vocabulary,
) -> Result<QaReport> {
    let colors = vocab.color_ids();
    let verbs = vocab.verb_ids();
    let (mut hits, mut restricted) = (0usize, 0usize);
    for chunk in items.chunks(CHUNK) {
        let mut g = Graph::new(store);
        let refs: Vec<&QaItem> = chunk.iter().collect();
        let logits = answer_logits(&mut g, model, visual, &refs)?;
        let l = g.value(logits);
        for (r, item) in chunk.iter().enumerate() {
            let row = l.row(r);
            hits += usize::from(argmax(row) as u32 == item.answer);
            let pool = match item.kind {
                QuestionKind::Color => &colors,
                QuestionKind::Action => &verbs,
            };
            let best = pool
                .iter()
                .copied()
                .fold(pool[0], |b, c| if row[c as usize] > row[b as usize] { c } else { b });
            restricted += usize::from(best == item.answer);
        }
    }
    let n = items.len().max(1) as f64;
    Ok(QaReport {
        accuracy: hits as f64 / n,
        restricted_accuracy: restricted as f64 / n,
        items: items.len(),
    })
}

/// Trains caption generation on `samples` with the visual side frozen:
/// each example is one next-token step, `[SEP]` included as a target.
/// Returns the loss per step.
pub fn adapt_caption(
    model: &StoaModel,
    store: &mut ParamStore,
    samples: &[SampleRecord],
    visual: &[VisualTensors],
    cfg: &AdaptConfig,
    seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    let ids = *model.token_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00CA_9710);
    let mut optim = Adam::new(cfg.optim, store);
    let mut losses = Vec::with_capacity(cfg.caption_steps);
    for step in 1..=cfg.caption_steps {
        let mut clips = Vec::with_capacity(cfg.batch);
        let mut plans = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..samples.len());
            let tokens = &samples[i].caption.tokens;
            let last = tokens.iter().position(|&t| t == ids.sep).unwrap_or(tokens.len() - 1);
            if last == 0 {
                continue;
            }
            let p = rng.gen_range(1..=last);
            clips.push(i);
            plans.push(next_token_plan(tokens, p, ids.mask));
        }
        if plans.is_empty() {
            continue;
        }
        let loss = adapt_step(store, &mut optim, cfg, step, precision, |g| {
            let vids: Vec<&VisualTensors> = clips.iter().map(|&i| &visual[i]).collect();
            let vis = model.load_visual(g, &vids);
            let refs: Vec<&MaskPlan> = plans.iter().collect();
            let local: Vec<usize> = (0..clips.len()).collect();
            model.masked_token_loss(g, &vis, &local, &refs, TextAttention::Causal)
        })?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Trains answer prediction at `[ANS]` with the visual side frozen.
pub fn adapt_qa(
    model: &StoaModel,
    store: &mut ParamStore,
    items: &[QaItem],
    visual: &[VisualTensors],
    cfg: &AdaptConfig,
    seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0A5);
    let mut optim = Adam::new(cfg.optim, store);
    let mut losses = Vec::with_capacity(cfg.qa_steps);
    for step in 1..=cfg.qa_steps {
        let batch: Vec<&QaItem> = (0..cfg.batch.min(items.len()))
            .map(|_| &items[rng.gen_range(0..items.len())])
            .collect();
        let loss = adapt_step(store, &mut optim, cfg, step, precision, |g| {
            let logits = answer_logits(g, model, visual, &batch)?;
            let targets: Vec<u32> = batch.iter().map(|q| q.answer).collect();
            Ok(token_loss(g, logits, &targets))
        })?;
        losses.push(loss);
    }
    Ok(losses)
}

fn adapt_step(
    store: &mut ParamStore,
    optim: &mut Adam,
    cfg: &AdaptConfig,
    step: usize,
    precision: Precision,
    loss_fn: impl FnOnce(&mut Graph<'_>) -> Result<crate::nn_core::Var>,
) -> Result<f64> {
    let (value, mut grads) = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(StoaError::Numeric(format!("adaptation step {step}: loss is {value}")));
        }
        let grads = g.backward(loss).param_grads(&g);
        (value, grads)
    };
    let total = cfg.caption_steps.max(cfg.qa_steps);
    optim.step(store, &mut grads, cfg.optim.lr_at(step, total), precision);
    Ok(value)
}

/// Runs one probe against `samples`. Adaptation, when configured, works on
/// a copy of the weights; `trained` is never modified.
pub fn run_probe(trained: &Trained, task: ProbeTask, samples: &[SampleRecord]) -> Result<ProbeReport> {
    let model = &trained.model;
    let vocab = Vocabulary::builtin();
    let cfg = &trained.config;
    let precision = cfg.effective_precision();
    let mut report = ProbeReport::default();
    match task {
        ProbeTask::Retrieval => {
            report.retrieval = Some(retrieval_probe(model, &trained.store, samples)?);
        }
        ProbeTask::Caption => {
            let mut store = trained.store.clone();
            let visual = visual_features(model, &store, samples)?;
            if cfg.adapt.caption_steps > 0 {
                adapt_caption(model, &mut store, samples, &visual, &cfg.adapt, cfg.seed, precision)?;
            }
            let max_len = model.config().max_text_len;
            let captions = decode_captions(model, &store, &visual, max_len)?;
            let ids = *model.token_ids();
            let truth: Vec<Vec<u32>> = samples
                .iter()
                .map(|s| caption_content(&s.caption.tokens, ids.cls, ids.sep))
                .collect();
            let (token_accuracy, exact_match) = caption_scores(&captions, &truth);
            report.caption = Some(CaptionReport {
                token_accuracy,
                exact_match,
                captions,
            });
        }
        ProbeTask::Qa => {
            let items = build_qa(samples, &vocab);
            let mut store = trained.store.clone();
            let visual = visual_features(model, &store, samples)?;
            if cfg.adapt.qa_steps > 0 {
                adapt_qa(model, &mut store, &items, &visual, &cfg.adapt, cfg.seed, precision)?;
            }
            report.qa = Some(qa_probe_cached(model, &store, &visual, &items, &vocab)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerank_only_touches_the_head() {
        let stage1 = [0.9, 0.1, 0.5, 0.7];
        // Stage 1 order: 0, 3, 2, 1. Rerank the top 2 so that 3 wins.
        let order = rerank_order(&stage1, 2, |c| if c == 3 { 1.0 } else { 0.0 });
        assert_eq!(order, vec![3, 0, 2, 1]);
    }

    #[test]
    fn single_pair_corpus_has_perfect_recall() {
        let r = retrieval_from_scores(&Tensor::scalar(0.3), 32, |p| Ok(vec![0.5; p.len()])).unwrap();
        assert_eq!(r.text_to_video, [1.0; 3]);
        assert_eq!(r.video_to_text, [1.0; 3]);
    }

    #[test]
    fn caption_scoring() {
        let (acc, exact) = caption_scores(&[vec![5, 6, 7], vec![5]], &[vec![5, 6, 7], vec![5, 9]]);
        assert!((acc - 0.75).abs() < 1e-12);
        assert_eq!(exact, 0.5);
        assert_eq!(caption_content(&[1, 8, 9, 2, 0], 1, 2), vec![8, 9]);
        assert_eq!(caption_content(&[1, 2], 1, 2), Vec::<u32>::new());
    }
}
