//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and records just enough state for its
//! backward pass. A graph lives for one forward/backward sweep; parameters are
//! borrowed from the [`ParamStore`] and never copied.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axpy, dot, matmul_into, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean visibility pattern for [`Graph::attention`]; `true` = visible.
///
/// Rows index query positions (all blocks stacked), columns index key
/// positions within the query's own block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all(rows: usize, cols: usize, visible: bool) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![visible; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    /// Lower-triangular visibility (position i sees j <= i).
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |r, c| c <= r)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, visible: bool) {
        self.allowed[r * self.cols + c] = visible;
    }
}

/// Shape of a fused attention call: `blocks` independent groups of
/// `q_block` queries attending over `k_block` keys each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub blocks: usize,
}

impl AttnLayout {
    pub fn single(heads: usize) -> Self {
        Self { heads, blocks: 1 }
    }
}

enum Op {
    Leaf,
    Param,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConstLeftMul {
        w: Arc<Tensor>,
        x: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Mse(Var, Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of evaluated operations.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables dropout sampling from `rng`; without it dropout is the identity.
    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient slot but never propagates further.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant that is excluded from differentiation entirely.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.shared(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Stop-gradient: same value, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · W + b` with `b` a 1×out row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.rows(), "affine: input width mismatch");
        assert_eq!(bv.shape(), (1, wv.cols()), "affine: bias shape");
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.row(0));
        }
        matmul_into(xv, wv, &mut out);
        self.push(out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Adds the 1×c row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row: broadcast shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            axpy(1.0, bv.row(0), out.row_mut(r));
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies `x` by the 1×1 value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalisation with learned gain and bias (1×c each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), (1, c));
        assert_eq!(bv.shape(), (1, c));
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xh[j] * gv.get(0, j) + bv.get(0, j);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Scaled dot-product attention split into `layout.heads` heads and
    /// `layout.blocks` independent row blocks.
    ///
    /// Scores at masked positions are treated as −∞; a query row with no
    /// visible key yields a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&AttnMask>, layout: AttnLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (out, probs) = attention_forward(qv, kv, vv, mask, layout);
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: width mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let c = xv.cols();
        let out = Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.slice_rows(x, r, 1)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < xv.rows(), "gather_rows index {i} out of range");
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        let inv = 1.0 / xv.rows() as f64;
        for r in 0..xv.rows() {
            axpy(inv, xv.row(r), out.row_mut(0));
        }
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Column-wise maximum over rows.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.rows() > 0);
        let mut out = Tensor::from_vec(1, xv.cols(), xv.row(0).to_vec());
        let mut argmax = vec![0; xv.cols()];
        for r in 1..xv.rows() {
            for (c, &val) in xv.row(r).iter().enumerate() {
                if val > out.get(0, c) {
                    out.set(0, c, val);
                    argmax[c] = r;
                }
            }
        }
        self.push(out, Op::MaxRows { x, argmax }, &[x])
    }

    /// Column-wise maximum within consecutive groups of `group` rows.
    pub fn max_pool_rows(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(
            group > 0 && xv.rows().is_multiple_of(group),
            "max_pool_rows: ragged groups"
        );
        let (n, c) = (xv.rows() / group, xv.cols());
        let mut out = Tensor::zeros(n, c);
        let mut argmax = vec![0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = i * group;
                for r in i * group + 1..(i + 1) * group {
                    if xv.get(r, j) > xv.get(best, j) {
                        best = r;
                    }
                }
                out.set(i, j, xv.get(best, j));
                argmax[i * c + j] = best;
            }
        }
        self.push(out, Op::MaxPoolRows { x, argmax }, &[x])
    }

    /// `W · x` for a constant matrix `W`.
    pub fn const_left_mul(&mut self, w: Arc<Tensor>, x: Var) -> Var {
        let out = w.matmul(self.value(x));
        self.push(out, Op::ConstLeftMul { w, x }, &[x])
    }

    /// Divides each row by its Euclidean norm. Callers must reject zero rows.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: one target per row");
        assert!(!targets.is_empty());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            let p = probs.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                p[j] = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse: shape mismatch");
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Inverted dropout; identity when `p == 0` or no rng was supplied.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let n = self.nodes[x.0].value.len();
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::Dropout { x, keep }, &[x])
    }

    /// Sum of 1×1 scalars.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    accumulate(grads, *x, gout.matmul_bt(wv));
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                    xv.matmul_at_acc(gout, &mut gw);
                    accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, col_sums(gout));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, gout.matmul_bt(bv));
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    av.matmul_at_acc(gout, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = gout · b, db = goutᵀ · a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, gout.matmul(bv));
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gout.matmul_at_acc(av, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gout.map(|v| -v));
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, col_sums(gout));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, gout.map(|v| v * s));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                if self.needs(*x) {
                    accumulate(grads, *x, gout.map(|v| v * sv));
                }
                if self.needs(*s) {
                    let d = dot(gout.data(), self.value(*x).data());
                    accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                let data = gout.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, Tensor::from_vec(y.rows(), y.cols(), data));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &a)| g * gelu_grad(a))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (n, c) = xhat.shape();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(n, c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..n {
                        let go = gout.row(r);
                        let xh = xhat.row(r);
                        for j in 0..c {
                            dxhat[j] = go[j] * gv.get(0, j);
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx = dot(&dxhat, xh);
                        let k = inv_std[r] / c as f64;
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            out[j] = k * (c as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gain) {
                    let mut gg = Tensor::zeros(1, c);
                    for r in 0..n {
                        let go = gout.row(r);
                        let xh = xhat.row(r);
                        let o = gg.row_mut(0);
                        for j in 0..c {
                            o[j] += go[j] * xh[j];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, col_sums(gout));
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, *layout, gout);
                if self.needs(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.needs(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.needs(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::ConcatRows(parts) => {
                let c = gout.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = gout.data()[offset * c..(offset + rows) * c].to_vec();
                        accumulate(grads, p, Tensor::from_vec(rows, c, slice));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data_mut()[start * c..(start + gout.rows()) * c].copy_from_slice(gout.data());
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, gout.row(r), gx.row_mut(i));
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = 1.0 / xv.rows() as f64;
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    axpy(inv, gout.row(0), gx.row_mut(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxRows { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    gx.set(r, c, gout.get(0, c));
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxPoolRows { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), c);
                for (k, &r) in argmax.iter().enumerate() {
                    let (i, j) = (k / c, k % c);
                    gx.set(r, j, gx.get(r, j) + gout.get(i, j));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConstLeftMul { w, x } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                w.matmul_at_acc(gout, &mut gx);
                accumulate(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = gout.row(r);
                    let proj = dot(yr, gr);
                    let out = gx.row_mut(r);
                    for j in 0..yr.len() {
                        out[j] = (gr[j] - yr[j] * proj) / norms[r];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, gout.transpose());
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = gout.item() / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, gl);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * gout.item() / av.len() as f64;
                let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| k * (x - y)).collect();
                let ga = Tensor::from_vec(av.rows(), av.cols(), data);
                if self.needs(*b) {
                    accumulate(grads, *b, ga.map(|v| -v));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, ga);
                }
            }
            Op::Dropout { x, keep } => {
                let data = gout.data().iter().zip(keep).map(|(g, k)| g * k).collect();
                accumulate(grads, *x, Tensor::from_vec(gout.rows(), gout.cols(), data));
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient reaching node `v`, if any path led there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `out`.
    pub fn accumulate_into(&self, graph: &Graph<'_>, out: &mut ParamGrads) {
        for (id, var) in &graph.param_nodes {
            if let Some(g) = &self.grads[var.0] {
                out.accumulate(*id, g);
            }
        }
    }

    /// Parameter gradients as a fresh zero-initialised table.
    pub fn param_grads(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(graph.store);
        self.accumulate_into(graph, &mut out);
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        axpy(1.0, t.row(r), out.row_mut(0));
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttnMask>,
    layout: AttnLayout,
) -> (Tensor, Vec<f64>) {
    let AttnLayout { heads, blocks } = layout;
    let w = q.cols();
    assert_eq!(k.cols(), w, "attention: query/key width mismatch");
    assert_eq!(v.rows(), k.rows(), "attention: key/value length mismatch");
    assert_eq!(v.cols(), w, "attention: value width mismatch");
    assert!(
        heads >= 1 && w.is_multiple_of(heads),
        "attention: width not divisible by heads"
    );
    assert!(blocks >= 1 && q.rows().is_multiple_of(blocks) && k.rows().is_multiple_of(blocks));
    let qb = q.rows() / blocks;
    let kb = k.rows() / blocks;
    if let Some(m) = mask {
        assert_eq!(m.shape(), (q.rows(), kb), "attention: mask shape");
    }
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), w);
    let mut probs = vec![0.0; blocks * heads * qb * kb];
    let mut scores = vec![0.0; kb];
    for b in 0..blocks {
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..qb {
                let qr = b * qb + i;
                let qrow = &q.row(qr)[hs.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..kb {
                    let visible = mask.is_none_or(|m| m.get(qr, j));
                    scores[j] = if visible {
                        let s = dot(qrow, &k.row(b * kb + j)[hs.clone()]) * scale;
                        max = max.max(s);
                        s
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let p = &mut probs[((b * heads + h) * qb + i) * kb..][..kb];
                let mut z = 0.0;
                for j in 0..kb {
                    let e = if scores[j] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (scores[j] - max).exp()
                    };
                    p[j] = e;
                    z += e;
                }
                let orow = &mut out.row_mut(qr)[hs.clone()];
                for j in 0..kb {
                    p[j] /= z;
                    if p[j] != 0.0 {
                        axpy(p[j], &v.row(b * kb + j)[hs.clone()], orow);
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    layout: AttnLayout,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttnLayout { heads, blocks } = layout;
    let w = q.cols();
    let qb = q.rows() / blocks;
    let kb = k.rows() / blocks;
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(q.rows(), w);
    let mut gk = Tensor::zeros(k.rows(), w);
    let mut gv = Tensor::zeros(v.rows(), w);
    let mut dp = vec![0.0; kb];
    for b in 0..blocks {
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..qb {
                let qr = b * qb + i;
                let p = &probs[((b * heads + h) * qb + i) * kb..][..kb];
                let go = &gout.row(qr)[hs.clone()];
                let mut s = 0.0;
                for j in 0..kb {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let kr = b * kb + j;
                    dp[j] = dot(go, &v.row(kr)[hs.clone()]);
                    s += p[j] * dp[j];
                    axpy(p[j], go, &mut gv.row_mut(kr)[hs.clone()]);
                }
                for j in 0..kb {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let kr = b * kb + j;
                    let ds = p[j] * (dp[j] - s) * scale;
                    axpy(ds, &k.row(kr)[hs.clone()], &mut gq.row_mut(qr)[hs.clone()]);
                    axpy(ds, &q.row(qr)[hs.clone()], &mut gk.row_mut(kr)[hs.clone()]);
                }
            }
        }
    }
    (gq, gk, gv)
}
