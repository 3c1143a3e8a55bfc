//! Pre-training losses and their unit-weight sum.

mod alignment;
mod contrastive;
mod language;

use std::fmt;

pub use alignment::{
    asp_loss, matched_mse, matching_scores, ota_loss, text_target_sets, AlignmentOutcome, TextTargetSets,
};
pub use contrastive::{mine_hard_negatives, similarity_matrix, symmetric_infonce, vtc_loss, vtm_loss, HardNegatives};
pub use language::{mlm_plan, next_token_plan, plm_plan, suffix_plan, token_loss, MaskPlan, MLM_RATE};

use crate::error::{Result, StoaError};
use crate::nn_core::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Vtc,
    Vtm,
    Mlm,
    Plm,
    Ota,
    Asp,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Vtc,
        LossKind::Vtm,
        LossKind::Mlm,
        LossKind::Plm,
        LossKind::Ota,
        LossKind::Asp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Vtc => "vtc",
            LossKind::Vtm => "vtm",
            LossKind::Mlm => "mlm",
            LossKind::Plm => "plm",
            LossKind::Ota => "ota",
            LossKind::Asp => "asp",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which losses enter the sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles([bool; 6]);

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self([true; 6])
    }

    pub fn none() -> Self {
        Self([false; 6])
    }

    /// Everything except the object and action alignment losses.
    pub fn base() -> Self {
        Self::all().with(LossKind::Ota, false).with(LossKind::Asp, false)
    }

    pub fn with(mut self, kind: LossKind, on: bool) -> Self {
        self.0[kind.index()] = on;
        self
    }

    pub fn set(&mut self, kind: LossKind, on: bool) {
        self.0[kind.index()] = on;
    }

    pub fn enabled(&self, kind: LossKind) -> bool {
        self.0[kind.index()]
    }
}

/// Scalar value of every loss and their sum; disabled or skipped components
/// read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub vtc: f64,
    pub vtm: f64,
    pub mlm: f64,
    pub plm: f64,
    pub ota: f64,
    pub asp: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Vtc => self.vtc,
            LossKind::Vtm => self.vtm,
            LossKind::Mlm => self.mlm,
            LossKind::Plm => self.plm,
            LossKind::Ota => self.ota,
            LossKind::Asp => self.asp,
        }
    }

    fn slot(&mut self, kind: LossKind) -> &mut f64 {
        match kind {
            LossKind::Vtc => &mut self.vtc,
            LossKind::Vtm => &mut self.vtm,
            LossKind::Mlm => &mut self.mlm,
            LossKind::Plm => &mut self.plm,
            LossKind::Ota => &mut self.ota,
            LossKind::Asp => &mut self.asp,
        }
    }

    /// Bundle from plain component values (missing ones are 0).
    pub fn from_components(parts: &[(LossKind, f64)]) -> Result<Self> {
        let mut b = Self::default();
        for &(kind, v) in parts {
            if !v.is_finite() {
                return Err(StoaError::Numeric(format!("{kind} loss is {v}")));
            }
            *b.slot(kind) = v;
        }
        b.total = LossKind::ALL.iter().fold(0.0, |acc, &k| acc + b.get(k));
        Ok(b)
    }

    /// `step=N vtc=… vtm=… mlm=… plm=… ota=… asp=… total=…`
    pub fn log_line(&self, step: usize) -> String {
        let mut s = format!("step={step}");
        for k in LossKind::ALL {
            s.push_str(&format!(" {}={:e}", k.name(), self.get(k)));
        }
        s.push_str(&format!(" total={:e}", self.total));
        s
    }
}

/// Sums the graph losses and reports each value; a non-finite component is
/// a numeric error naming it.
pub fn total_loss(g: &mut Graph<'_>, parts: &[(LossKind, Var)]) -> Result<(Option<Var>, LossBundle)> {
    let values: Vec<(LossKind, f64)> = parts.iter().map(|&(k, v)| (k, g.value(v).item())).collect();
    let bundle = LossBundle::from_components(&values)?;
    if parts.is_empty() {
        return Ok((None, bundle));
    }
    let vars: Vec<Var> = parts.iter().map(|p| p.1).collect();
    Ok((Some(g.sum_scalars(&vars)), bundle))
}
