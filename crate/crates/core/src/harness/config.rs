//! Run configuration: flat `key=value` text, serialized verbatim into every
//! checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, StoaError};
use crate::kv::{self, parse_num, parse_switch, switch, KvSection};
use crate::model::ModelConfig;
use crate::nn_core::f64_test_mode;
use crate::objectives::{LossKind, LossToggles};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Parameters are rounded to f32 after every update.
    F32,
    /// Full 64-bit parameters; used by gradient checks and replay tests.
    F64,
}

impl Precision {
    fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn parse(v: &str) -> Result<Self> {
        match v {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(StoaError::Config(format!("precision: expected f32 or f64, got {v:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warm-up, then cosine decay to zero.
    Cosine,
    Constant,
}

impl Schedule {
    fn as_str(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        }
    }

    fn parse(v: &str) -> Result<Self> {
        match v {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            _ => Err(StoaError::Config(format!("optim.schedule: unknown {v:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    pub warmup: usize,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
}

impl OptimConfig {
    /// Full-scale settings: lr 1e-5, betas (0.9, 0.98), cosine decay.
    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup: 0,
            schedule: Schedule::Cosine,
            clip: 0.0,
        }
    }

    /// Same optimizer with a step size suited to a few hundred steps from
    /// scratch.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            warmup: 20,
            clip: 5.0,
            ..Self::paper()
        }
    }

    /// Step size at 1-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup).max(1) as f64;
                let done = (step.saturating_sub(self.warmup)) as f64;
                let frac = ((done - 1.0).max(0.0) / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |what: &str| Err(StoaError::Config(format!("{prefix}.{what}")));
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return bad("lr must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip >= 0.0) {
            return bad("weight_decay/clip must be non-negative");
        }
        Ok(())
    }
}

/// Optional task adaptation run by the caption and QA probes on a copy of
/// the weights. Zero steps (the default) evaluates the checkpoint as is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub caption_steps: usize,
    pub qa_steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            caption_steps: 0,
            qa_steps: 0,
            batch: 32,
            optim: OptimConfig {
                warmup: 0,
                ..OptimConfig::desk()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub losses: LossToggles,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Save every this many steps (0: only the initial and final ones).
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub adapt: AdaptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            train_corpus: None,
            eval_corpus: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::desk(),
            losses: LossToggles::all(),
            optim: OptimConfig::desk(),
            steps: 2000,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 500,
            precision: Precision::F32,
            adapt: AdaptConfig::default(),
        }
    }

    /// Full-scale dimensions and optimizer (15K steps).
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::paper_scale(),
            optim: OptimConfig::paper(),
            steps: 15_000,
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            steps: 10,
            batch_size: 4,
            ..Self::desk()
        }
    }

    /// Precision actually used: `STOA_TEST_F64=1` forces 64-bit.
    pub fn effective_precision(&self) -> Precision {
        if f64_test_mode() {
            Precision::F64
        } else {
            self.precision
        }
    }

    /// Applies one section of keys. `preset` is applied before every other
    /// key; relative paths resolve against `base_dir`.
    pub fn apply(&mut self, section: &KvSection, base_dir: &Path) -> Result<()> {
        if let Some(p) = section.get("preset") {
            let keep = (
                self.train_corpus.clone(),
                self.eval_corpus.clone(),
                self.out_dir.clone(),
            );
            *self = match p {
                "desk" => Self::desk(),
                "paper" => Self::paper_scale(),
                "tiny" => Self::tiny(),
                _ => return Err(StoaError::Config(format!("preset: unknown {p:?}"))),
            };
            (self.train_corpus, self.eval_corpus, self.out_dir) = keep;
        }
        for (key, value) in &section.entries {
            self.apply_key(key, value, base_dir)?;
        }
        self.validate()
    }

    fn apply_key(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let path = || base_dir.join(value);
        match key {
            "preset" => {}
            "train_corpus" => self.train_corpus = Some(path()),
            "eval_corpus" => self.eval_corpus = Some(path()),
            "out_dir" => self.out_dir = path(),
            "seed" => self.seed = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch_size = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "T" => m.frames = parse_num(key, value)?,
            "S" => m.image_size = parse_num(key, value)?,
            "patch" => m.patch = parse_num(key, value)?,
            "K" => m.objects_per_frame = parse_num(key, value)?,
            "L_max" => m.max_text_len = parse_num(key, value)?,
            "h" => m.video_width = parse_num(key, value)?,
            "d" => m.cross_width = parse_num(key, value)?,
            "text_width" => m.text_width = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "layers.video" => m.video_layers = parse_num(key, value)?,
            "layers.text" => m.text_layers = parse_num(key, value)?,
            "layers.trajectory" => m.trajectory_layers = parse_num(key, value)?,
            "layers.action" => m.action_layers = parse_num(key, value)?,
            "layers.fusion" => m.fusion_layers = parse_num(key, value)?,
            "N" => m.trajectories = parse_num(key, value)?,
            "M" => m.action_queries = parse_num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, value)?,
            "dropout" => m.dropout = parse_num(key, value)?,
            "obj" => m.use_objects = parse_switch(key, value)?,
            "act" => m.use_actions = parse_switch(key, value)?,
            "optim.lr" => o.lr = parse_num(key, value)?,
            "optim.beta1" => o.beta1 = parse_num(key, value)?,
            "optim.beta2" => o.beta2 = parse_num(key, value)?,
            "optim.eps" => o.eps = parse_num(key, value)?,
            "optim.weight_decay" => o.weight_decay = parse_num(key, value)?,
            "optim.warmup" => o.warmup = parse_num(key, value)?,
            "optim.schedule" => o.schedule = Schedule::parse(value)?,
            "optim.clip" => o.clip = parse_num(key, value)?,
            "adapt.caption_steps" => self.adapt.caption_steps = parse_num(key, value)?,
            "adapt.qa_steps" => self.adapt.qa_steps = parse_num(key, value)?,
            "adapt.batch" => self.adapt.batch = parse_num(key, value)?,
            "adapt.lr" => self.adapt.optim.lr = parse_num(key, value)?,
            _ => match key.strip_prefix("loss.").and_then(LossKind::parse) {
                Some(kind) => self.losses.set(kind, parse_switch(key, value)?),
                None => return Err(StoaError::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate("optim")?;
        self.adapt.optim.validate("adapt")?;
        if self.batch_size < 2 {
            return Err(StoaError::Config("batch must be at least 2".into()));
        }
        if self.adapt.batch == 0 {
            return Err(StoaError::Config("adapt.batch must be positive".into()));
        }
        if self.steps > 10_000_000 {
            return Err(StoaError::Config(format!("steps {} is out of range", self.steps)));
        }
        Ok(())
    }

    pub fn parse_text(text: &str, base_dir: &Path) -> Result<Self> {
        let sections = kv::parse(text)?;
        let mut cfg = Self::desk();
        cfg.apply(&sections[0], base_dir)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StoaError::io(path, e))?;
        Self::parse_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every field as `key=value` lines; `parse_text` of the result gives
    /// back an equal config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        if let Some(p) = &self.train_corpus {
            put("train_corpus", p.display().to_string());
        }
        if let Some(p) = &self.eval_corpus {
            put("eval_corpus", p.display().to_string());
        }
        put("out_dir", self.out_dir.display().to_string());
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        put("batch", self.batch_size.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("precision", self.precision.as_str().into());
        let m = &self.model;
        for (k, v) in [
            ("T", m.frames),
            ("S", m.image_size),
            ("patch", m.patch),
            ("K", m.objects_per_frame),
            ("L_max", m.max_text_len),
            ("h", m.video_width),
            ("d", m.cross_width),
            ("text_width", m.text_width),
            ("heads", m.heads),
            ("layers.video", m.video_layers),
            ("layers.text", m.text_layers),
            ("layers.trajectory", m.trajectory_layers),
            ("layers.action", m.action_layers),
            ("layers.fusion", m.fusion_layers),
            ("N", m.trajectories),
            ("M", m.action_queries),
        ] {
            put(k, v.to_string());
        }
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("dropout", m.dropout.to_string());
        put("obj", switch(m.use_objects).into());
        put("act", switch(m.use_actions).into());
        for k in LossKind::ALL {
            put(&format!("loss.{k}"), switch(self.losses.enabled(k)).into());
        }
        let o = &self.optim;
        put("optim.lr", o.lr.to_string());
        put("optim.beta1", o.beta1.to_string());
        put("optim.beta2", o.beta2.to_string());
        put("optim.eps", o.eps.to_string());
        put("optim.weight_decay", o.weight_decay.to_string());
        put("optim.warmup", o.warmup.to_string());
        put("optim.schedule", o.schedule.as_str().into());
        put("optim.clip", o.clip.to_string());
        put("adapt.caption_steps", self.adapt.caption_steps.to_string());
        put("adapt.qa_steps", self.adapt.qa_steps.to_string());
        put("adapt.batch", self.adapt.batch.to_string());
        put("adapt.lr", self.adapt.optim.lr.to_string());
        s
    }
}
