//! Gated channel module: an L2 spatial embedding per channel, a
//! channel-competition normaliser and a `1 + tanh` gate that rescales the
//! input channel-wise.
//!
//! ```text
//! ed_c = α_c · sqrt(Σ_ij x_cij² + ε)
//! n_c  = γ_c / sqrt(mean_c(ed_c²) + ε)
//! g_c  = 1 + tanh(ed_c · n_c + β_c)
//! y    = x ⊙ g
//! ```
//!
//! Statistics are per batch element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore, Session};
use crate::profiler::ComplexityReport;
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

pub const GMM_EPS: f64 = 1e-5;

/// Reading of the normaliser's `mean(ed)²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormReading {
    /// `(1/C) Σ_c ed_c²`
    #[default]
    MeanOfSquares,
    /// `((1/C) Σ_c ed_c)²`
    SquareOfMean,
}

/// Gate factors `g` (shape `N×C×1×1`) for input `x`; `alpha`, `gamma`,
/// `beta` are `1×C×1×1`.
pub fn gate_factors<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    alpha: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    reading: NormReading,
) -> Result<Var> {
    let c = g.shape(x).c;
    for v in [alpha, gamma, beta] {
        if g.shape(v) != Shape::channels(c) {
            return Err(Error::shape("gmm", Shape::channels(c), g.shape(v)));
        }
    }
    let norm = g.l2_norm_spatial(x, eps)?;
    let ed = g.mul(norm, alpha)?;
    let m = match reading {
        NormReading::MeanOfSquares => {
            let sq = g.square(ed)?;
            g.mean_channels(sq)?
        }
        NormReading::SquareOfMean => {
            let mean = g.mean_channels(ed)?;
            g.square(mean)?
        }
    };
    let m = g.add_scalar(m, eps)?;
    let inv = g.powf(m, -0.5)?;
    let n = g.mul(gamma, inv)?;
    let z = g.mul(ed, n)?;
    let z = g.add(z, beta)?;
    let t = g.tanh(z)?;
    g.add_scalar(t, 1.0)
}

/// `x ⊙ g`.
pub fn gate<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    alpha: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    reading: NormReading,
) -> Result<Var> {
    let factors = gate_factors(g, x, alpha, gamma, beta, eps, reading)?;
    g.mul(x, factors)
}

/// One gating block with parameters `{prefix}.alpha/gamma/beta`.
#[derive(Debug, Clone)]
pub struct Gmm {
    prefix: String,
    pub channels: usize,
    pub eps: f64,
    pub reading: NormReading,
}

impl Gmm {
    pub fn new(prefix: impl Into<String>, channels: usize, eps: f64, reading: NormReading) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("gmm needs at least one channel".into()));
        }
        if !(0.0..=GMM_EPS).contains(&eps) {
            return Err(Error::Config(format!("gmm eps {eps} outside [0, {GMM_EPS}]")));
        }
        Ok(Gmm {
            prefix: prefix.into(),
            channels,
            eps,
            reading,
        })
    }

    /// Identity initialisation: α = 1, γ = 0, β = 0.
    pub fn build<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let s = Shape::channels(self.channels);
        let p = &self.prefix;
        store.insert(format!("{p}.alpha"), Tensor::ones(s), ParamKind::NoDecay)?;
        store.insert(format!("{p}.gamma"), Tensor::zeros(s), ParamKind::NoDecay)?;
        store.insert(format!("{p}.beta"), Tensor::zeros(s), ParamKind::NoDecay)?;
        Ok(())
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let c = s.graph.shape(x).c;
        if c != self.channels {
            return Err(Error::shape("gmm", format!("{} channels", self.channels), s.graph.shape(x)));
        }
        let p = &self.prefix;
        let alpha = s.param(&format!("{p}.alpha"))?;
        let gamma = s.param(&format!("{p}.gamma"))?;
        let beta = s.param(&format!("{p}.beta"))?;
        gate(&mut s.graph, x, alpha, gamma, beta, self.eps, self.reading)
    }

    pub fn profile(&self, r: &mut ComplexityReport, x: Shape) {
        r.gmm(&self.prefix, x, self.reading);
    }
}
