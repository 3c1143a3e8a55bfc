use crate::harness::config::{OptimConfig, Precision};
use crate::nn_core::{ParamGrads, ParamStore, Tensor};

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Clips `grads` to the configured global norm and applies one update
    /// with step size `lr`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads, lr: f64, precision: Precision) -> f64 {
        let norm = grads.global_norm();
        if self.cfg.clip > 0.0 && norm > self.cfg.clip {
            grads.scale(self.cfg.clip / norm);
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            for (((pw, &gw), mw), vw) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mw = b1 * *mw + (1.0 - b1) * gw;
                *vw = b2 * *vw + (1.0 - b2) * gw * gw;
                let update = (*mw / c1) / ((*vw / c2).sqrt() + self.cfg.eps);
                *pw -= lr * (update + self.cfg.weight_decay * *pw);
            }
            if precision == Precision::F32 {
                p.round_to_f32();
            }
        }
        norm
    }
}
