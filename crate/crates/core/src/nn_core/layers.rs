use rand::Rng;

use super::graph::{AttnLayout, AttnMask, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Result, StoaError};

/// Hyper-parameters of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn new(layers: usize, heads: usize, width: usize) -> Self {
        Self {
            layers,
            heads,
            width,
            mlp_ratio: 2.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(StoaError::Config(format!(
                "transformer width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(StoaError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(StoaError::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        ((self.width as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

fn init<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(rows, cols, std, rng);
    t.round_to_f32();
    t
}

/// Learned table initialised with N(0, std²).
pub fn embedding_table<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> ParamId {
    store.add(name, init(rows, cols, std, rng))
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init(input, output, std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm block: `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        let hidden = cfg.hidden();
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), w),
            query: Linear::new(store, &format!("{name}.attn.query"), w, w, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), w, w, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), w, w, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), w, w, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), w),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), w, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, w, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<&AttnMask>, layout: AttnLayout, dropout: f64) -> Var {
        let h = self.ln_attn.forward(g, x);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, h);
        let v = self.value.forward(g, h);
        let a = g.attention(q, k, v, mask, layout);
        let a = self.out.forward(g, a);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln_mlp.forward(g, x);
        let m = self.fc1.forward(g, h);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m);
        let m = g.dropout(m, dropout);
        g.add(x, m)
    }
}

/// Stack of pre-norm transformer blocks with no final normalisation, so a
/// zero-layer stack is the identity.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("{name}.layer{i}"), &cfg, rng))
            .collect();
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Encodes `blocks` independent sequences stacked along the rows of `x`.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var, mask: Option<&AttnMask>, blocks: usize) -> Result<Var> {
        Ok(*self
            .encode_with_taps(g, x, mask, blocks)?
            .last()
            .expect("taps always contain the input"))
    }

    /// Returns the input followed by the output of every layer.
    pub fn encode_with_taps(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mask: Option<&AttnMask>,
        blocks: usize,
    ) -> Result<Vec<Var>> {
        let (rows, cols) = g.shape(x);
        if cols != self.cfg.width {
            return Err(StoaError::Config(format!(
                "sequence width {cols} does not match transformer width {}",
                self.cfg.width
            )));
        }
        if blocks == 0 || rows % blocks != 0 {
            return Err(StoaError::Shape(format!(
                "{rows} rows cannot be split into {blocks} blocks"
            )));
        }
        if let Some(m) = mask {
            if m.shape() != (rows, rows / blocks) {
                return Err(StoaError::Shape(format!(
                    "mask shape {:?} does not match sequence ({rows}, {})",
                    m.shape(),
                    rows / blocks
                )));
            }
        }
        let layout = AttnLayout {
            heads: self.cfg.heads,
            blocks,
        };
        let mut taps = Vec::with_capacity(self.blocks.len() + 1);
        taps.push(x);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mask, layout, self.cfg.dropout);
            taps.push(h);
        }
        Ok(taps)
    }
}

/// Two-layer perceptron `W2 · GELU(W1 x)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}
