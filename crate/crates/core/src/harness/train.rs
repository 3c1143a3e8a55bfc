//! Pre-training loop, batch order and checkpoint I/O.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StoaError};
use crate::harness::config::{Precision, RunConfig};
use crate::harness::optim::Adam;
use crate::kv;
use crate::model::{StoaModel, MAX_LOGIT_SCALE};
use crate::nn_core::{load_checkpoint, save_checkpoint, Graph, ParamStore};
use crate::objectives::{LossBundle, LossToggles};
use crate::synthetic_world::{read_corpus, SampleRecord, Vocabulary};

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A model together with its weights and the config that built it.
#[derive(Clone, Debug)]
pub struct Trained {
    pub config: RunConfig,
    pub model: StoaModel,
    pub store: ParamStore,
}

impl Trained {
    /// Freshly initialised weights drawn from `config.seed`.
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = StoaModel::build(config.model, &Vocabulary::builtin(), config.seed)?;
        Ok(Self {
            config: config.clone(),
            model,
            store,
        })
    }

    /// Writes the weights; the metadata block is the run config followed by
    /// a `[checkpoint]` section holding the step.
    pub fn save(&self, path: &Path, step: usize) -> Result<()> {
        let meta = format!("{}[checkpoint]\nstep={step}\n", self.config.to_kv());
        save_checkpoint(path, &self.store, &meta)
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads
    /// its weights. Returns the saved step too.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let ckpt = load_checkpoint(path)?;
        let sections = kv::parse(&ckpt.metadata)?;
        let mut config = RunConfig::desk();
        config.apply(&sections[0], Path::new(""))?;
        let step = sections
            .iter()
            .find(|s| s.name.as_deref() == Some("checkpoint"))
            .and_then(|s| s.get("step"))
            .ok_or_else(|| StoaError::format(path, "metadata lacks a [checkpoint] step"))?;
        let step = kv::parse_num("step", step)?;
        let mut trained = Self::init(&config)?;
        ckpt.assign_to(&mut trained.store)?;
        Ok((trained, step))
    }
}

/// Visits the corpus in shuffled epochs; a batch never holds the same clip
/// twice.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len < 2 {
            return Err(StoaError::Config(format!(
                "corpus of {len} clips is too small to train on"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0BA7_C4E5);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            batch: batch.min(len),
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Output of a pre-training run.
#[derive(Clone, Debug)]
pub struct PretrainSummary {
    /// Loss values of steps 1..=steps.
    pub history: Vec<LossBundle>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub elapsed: Duration,
}

fn at_step(step: usize, e: StoaError) -> StoaError {
    match e {
        StoaError::Numeric(m) => StoaError::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// One optimizer step on `batch`; returns the loss values before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &StoaModel,
    store: &mut ParamStore,
    optim: &mut Adam,
    batch: &[&SampleRecord],
    toggles: LossToggles,
    rng: &mut ChaCha8Rng,
    lr: f64,
    precision: Precision,
) -> Result<LossBundle> {
    let (bundle, mut grads) = {
        let mut g = Graph::new(store);
        if model.config().dropout > 0.0 {
            g = g.with_dropout_rng(ChaCha8Rng::seed_from_u64(rand::Rng::gen(rng)));
        }
        let out = model.pretrain_losses(&mut g, batch, toggles, rng)?;
        let total = out
            .total
            .ok_or_else(|| StoaError::Config("no pre-training loss is enabled".into()))?;
        let grads = g.backward(total).param_grads(&g);
        (out.bundle, grads)
    };
    if !grads.is_finite() {
        return Err(StoaError::Numeric("non-finite gradient".into()));
    }
    optim.step(store, &mut grads, lr, precision);
    let scale = store.value_mut(model.logit_scale_param());
    let cap = MAX_LOGIT_SCALE.ln();
    if scale.item() > cap {
        scale.data_mut()[0] = cap;
    }
    Ok(bundle)
}

/// Loads the training corpus named by the config and pre-trains, writing
/// the metrics log and checkpoints under `config.out_dir`.
pub fn pretrain(config: &RunConfig) -> Result<(Trained, PretrainSummary)> {
    let path = config
        .train_corpus
        .as_ref()
        .ok_or_else(|| StoaError::Config("train_corpus is required".into()))?;
    let corpus = read_corpus(path)?;
    pretrain_on(config, &corpus, Some(&config.out_dir))
}

/// Pre-trains on an in-memory corpus. With `out` set, writes
/// `metrics.log`, the initial checkpoint, one every `checkpoint_every`
/// steps and the final one.
pub fn pretrain_on(
    config: &RunConfig,
    corpus: &[SampleRecord],
    out: Option<&Path>,
) -> Result<(Trained, PretrainSummary)> {
    let start = Instant::now();
    let mut trained = Trained::init(config)?;
    check_corpus(config, corpus)?;
    let precision = config.effective_precision();
    let mut optim = Adam::new(config.optim, &trained.store);
    let mut sampler = BatchSampler::new(corpus.len(), config.batch_size, config.seed)?;

    let mut log = None;
    let mut checkpoints = Vec::new();
    let mut metrics_log = None;
    if let Some(dir) = out {
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt_dir).map_err(|e| StoaError::io(&ckpt_dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|e| StoaError::io(&path, e))?;
        log = Some((BufWriter::new(file), path.clone()));
        metrics_log = Some(path);
        let first = checkpoint_path(dir, 0);
        trained.save(&first, 0)?;
        checkpoints.push(first);
    }

    let mut history = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&SampleRecord> = idx.iter().map(|&i| &corpus[i]).collect();
        let mut rng = StoaModel::step_rng(config.seed, step as u64);
        let lr = config.optim.lr_at(step, config.steps);
        let bundle = train_step(
            &trained.model,
            &mut trained.store,
            &mut optim,
            &batch,
            config.losses,
            &mut rng,
            lr,
            precision,
        )
        .map_err(|e| at_step(step, e))?;
        if let Some((w, path)) = &mut log {
            writeln!(w, "{}", bundle.log_line(step)).map_err(|e| StoaError::io(path.as_path(), e))?;
        }
        history.push(bundle);
        let due = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if let Some(dir) = out {
            if due || step == config.steps {
                let p = checkpoint_path(dir, step);
                trained.save(&p, step)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| StoaError::io(path, e))?;
    }
    Ok((
        trained,
        PretrainSummary {
            history,
            checkpoints,
            metrics_log,
            elapsed: start.elapsed(),
        },
    ))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}.stoaw"))
}

/// Rejects corpora whose geometry differs from the model's.
pub fn check_corpus(config: &RunConfig, corpus: &[SampleRecord]) -> Result<()> {
    let m = &config.model;
    for s in corpus {
        if s.frames.num_frames() != m.frames || s.frames.size() != m.image_size {
            return Err(StoaError::Config(format!(
                "clip {} is {}x{}px with {} frames; model expects {}px and {} frames",
                s.id,
                s.frames.size(),
                s.frames.size(),
                s.frames.num_frames(),
                m.image_size,
                m.frames
            )));
        }
        if s.caption.len() > m.max_text_len {
            return Err(StoaError::Config(format!(
                "clip {} caption has {} tokens, L_max is {}",
                s.id,
                s.caption.len(),
                m.max_text_len
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_batches_are_distinct_and_cover_epochs() {
        let mut s = BatchSampler::new(10, 4, 3).unwrap();
        let mut seen = [0; 10];
        for _ in 0..2 {
            let b = s.next_batch();
            let mut d = b.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 4);
            for i in b {
                seen[i] += 1;
            }
        }
        assert_eq!(seen.iter().filter(|&&c| c == 1).count(), 8);
    }

    #[test]
    fn sampler_caps_batch_at_corpus_size() {
        let mut s = BatchSampler::new(3, 8, 0).unwrap();
        assert_eq!(s.next_batch().len(), 3);
        assert!(BatchSampler::new(1, 8, 0).is_err());
    }
}
