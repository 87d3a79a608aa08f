//! Multiplicative cross-stream fusion, applied once per pyramid level.
//!
//! ```text
//! a  = conv1(x1),  b = conv1(x2)        (conv1 shared)
//! s1 = relu(a) ⊙ b
//! s2 = conv2(s1) + b
//! d0 = relu(s2 ⊙ a)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::profiler::ComplexityReport;
use crate::tensor::{ConvSpec, Element, Graph, Shape, Var};

/// How the two streams are combined at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// The block described in the module docs.
    #[default]
    Ffm,
    /// Alternative form `relu(relu(relu(x1) ⊙ conv1(x2)) + x2) ⊙ x1`, no second conv.
    Listing,
    /// No fusion block: parameter-free `|x1 − x2|`.
    AbsDiff,
}

/// Graph variables of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FfmVars {
    pub w1: Var,
    pub b1: Var,
    pub conv2: Option<(Var, Var)>,
}

pub fn conv_spec(channels: usize) -> ConvSpec {
    ConvSpec::new(channels, channels, 1).bias(true)
}

/// Fuses two same-shaped features.
pub fn fuse<T: Element>(g: &mut Graph<T>, x1: Var, x2: Var, p: Option<FfmVars>, mode: FusionMode) -> Result<Var> {
    let s = g.shape(x1);
    if g.shape(x2) != s {
        return Err(Error::shape("ffm", s, g.shape(x2)));
    }
    let spec = conv_spec(s.c);
    let need = |what: &str| Error::Config(format!("ffm mode {mode:?} requires {what}"));
    match mode {
        FusionMode::AbsDiff => {
            let d = g.sub(x1, x2)?;
            g.abs(d)
        }
        FusionMode::Ffm => {
            let p = p.ok_or_else(|| need("conv1"))?;
            let (w2, b2) = p.conv2.ok_or_else(|| need("conv2"))?;
            let a = g.conv2d(x1, p.w1, Some(p.b1), &spec)?;
            let b = g.conv2d(x2, p.w1, Some(p.b1), &spec)?;
            let ra = g.relu(a)?;
            let s1 = g.mul(ra, b)?;
            let c = g.conv2d(s1, w2, Some(b2), &spec)?;
            let s2 = g.add(c, b)?;
            let d = g.mul(s2, a)?;
            g.relu(d)
        }
        FusionMode::Listing => {
            let p = p.ok_or_else(|| need("conv1"))?;
            let a = g.relu(x1)?;
            let b = g.conv2d(x2, p.w1, Some(p.b1), &spec)?;
            let s1 = g.mul(a, b)?;
            let s1 = g.relu(s1)?;
            let s2 = g.add(s1, x2)?;
            let d = g.mul(s2, x1)?;
            g.relu(d)
        }
    }
}

/// One fusion block with parameters under `{prefix}.conv1` / `.conv2`.
#[derive(Debug, Clone)]
pub struct Ffm {
    prefix: String,
    pub channels: usize,
    pub mode: FusionMode,
}

impl Ffm {
    pub fn new(prefix: impl Into<String>, channels: usize, mode: FusionMode) -> Self {
        Ffm {
            prefix: prefix.into(),
            channels,
            mode,
        }
    }

    pub fn build<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let spec = conv_spec(self.channels);
        if self.mode != FusionMode::AbsDiff {
            store.add_conv(&format!("{}.conv1", self.prefix), &spec, rng)?;
        }
        if self.mode == FusionMode::Ffm {
            store.add_conv(&format!("{}.conv2", self.prefix), &spec, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x1: Var, x2: Var) -> Result<Var> {
        let c = s.graph.shape(x1).c;
        if c != self.channels {
            return Err(Error::shape("ffm", format!("{} channels", self.channels), s.graph.shape(x1)));
        }
        let p = &self.prefix;
        let vars = match self.mode {
            FusionMode::AbsDiff => None,
            mode => Some(FfmVars {
                w1: s.param(&format!("{p}.conv1.weight"))?,
                b1: s.param(&format!("{p}.conv1.bias"))?,
                conv2: if mode == FusionMode::Ffm {
                    Some((s.param(&format!("{p}.conv2.weight"))?, s.param(&format!("{p}.conv2.bias"))?))
                } else {
                    None
                },
            }),
        };
        fuse(&mut s.graph, x1, x2, vars, self.mode)
    }

    /// `x` is the shape of one stream's feature.
    pub fn profile(&self, r: &mut ComplexityReport, x: Shape) {
        let p = &self.prefix;
        let spec = conv_spec(self.channels);
        match self.mode {
            FusionMode::AbsDiff => {
                r.elementwise(&format!("{p}.neg"), x, 1);
                r.elementwise(&format!("{p}.sub"), x, 1);
                r.elementwise(&format!("{p}.abs"), x, 1);
            }
            FusionMode::Ffm => {
                r.conv(&format!("{p}.conv1[x1]"), &spec, x);
                r.conv(&format!("{p}.conv1[x2]"), &spec, x);
                // the shared conv's parameters are counted once
                r.rows.last_mut().expect("row just pushed").params = 0;
                r.elementwise(&format!("{p}.relu1"), x, 1);
                r.elementwise(&format!("{p}.mul1"), x, 1);
                r.conv(&format!("{p}.conv2"), &spec, x);
                r.elementwise(&format!("{p}.add"), x, 1);
                r.elementwise(&format!("{p}.mul2"), x, 1);
                r.elementwise(&format!("{p}.relu2"), x, 1);
            }
            FusionMode::Listing => {
                r.elementwise(&format!("{p}.relu0"), x, 1);
                r.conv(&format!("{p}.conv1"), &spec, x);
                r.elementwise(&format!("{p}.mul1"), x, 1);
                r.elementwise(&format!("{p}.relu1"), x, 1);
                r.elementwise(&format!("{p}.add"), x, 1);
                r.elementwise(&format!("{p}.mul2"), x, 1);
                r.elementwise(&format!("{p}.relu2"), x, 1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn abs_diff_needs_no_params() {
        let mut g = Graph::<f64>::no_grad();
        let a = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[1.0, -2.0]).unwrap());
        let b = g.leaf(Tensor::from_f64s(Shape::new(1, 1, 1, 2), &[3.0, -5.0]).unwrap());
        let d = fuse(&mut g, a, b, None, FusionMode::AbsDiff).unwrap();
        assert_eq!(g.value(d).data(), &[2.0, 3.0]);
    }

    #[test]
    fn missing_params_rejected() {
        let mut g = Graph::<f64>::no_grad();
        let a = g.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(fuse(&mut g, a, a, None, FusionMode::Ffm).is_err());
    }
}
