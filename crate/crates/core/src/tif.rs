//! Parameter-free channel exchange between the two temporal streams.

use crate::error::{Error, Result};
use crate::profiler::ComplexityReport;
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

/// Stages after which the streams exchange channels.
pub const EXCHANGE_STAGES: [usize; 3] = [2, 3, 4];

pub const DEFAULT_FRACTION: f64 = 0.5;

/// Which channels swap streams. A pure function of the channel count and
/// the exchanged fraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeMask(Vec<bool>);

impl ExchangeMask {
    /// `ceil(C · fraction)` channels spread evenly along the channel axis;
    /// for a fraction of 1/2 these are the even channels.
    pub fn new(channels: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("exchange fraction {fraction} outside [0, 1]")));
        }
        let mark = |c: usize| (c as f64 * fraction).ceil();
        Ok(ExchangeMask((0..channels).map(|c| mark(c + 1) > mark(c)).collect()))
    }

    pub fn even(channels: usize) -> Self {
        ExchangeMask((0..channels).map(|c| c % 2 == 0).collect())
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn swapped(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// `(f1', f2')` with the masked channels swapped.
pub fn exchange<T: Element>(g: &mut Graph<T>, f1: Var, f2: Var, mask: &ExchangeMask) -> Result<(Var, Var)> {
    let (s1, s2) = (g.shape(f1), g.shape(f2));
    if s1 != s2 {
        return Err(Error::shape("exchange", s1, s2));
    }
    if mask.len() != s1.c {
        return Err(Error::shape("exchange", format!("{} channels", mask.len()), s1));
    }
    let a = g.channel_mix(f1, f2, mask.as_slice())?;
    let b = g.channel_mix(f2, f1, mask.as_slice())?;
    Ok((a, b))
}

/// Tensor-level convenience around [`exchange`].
pub fn exchange_tensors<T: Element>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    mask: &ExchangeMask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::no_grad();
    let a = g.leaf(f1.clone());
    let b = g.leaf(f2.clone());
    let (x, y) = exchange(&mut g, a, b, mask)?;
    Ok((g.value(x).clone(), g.value(y).clone()))
}

pub fn profile(r: &mut ComplexityReport, stage: usize, shape: Shape) {
    r.free(&format!("tif.s{stage}"), shape);
}
