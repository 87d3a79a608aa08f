//! Progressive decoder: one level per pyramid resolution, deepest first,
//! plus two full-resolution logit heads.
//!
//! Level `k` takes the fused feature of stage `k` (concatenated with the
//! ×2-upsampled output of level `k + 1` unless `k` is the deepest) and runs
//!
//! ```text
//! r   = relu(bn(conv1x1(input)))
//! m   = gmm(r)
//! out = m + relu(conv3x3(m))
//! ```
//!
//! Head 0 reads level 0 (H/2), head 1 reads level 1 (H/4); each is a 1×1
//! conv to one channel followed by bilinear ×2 upsampling to H. The conv
//! commutes with the upsampling, so it runs at the lower resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{Gmm, NormReading, GMM_EPS};
use crate::params::{ParamStore, Session};
use crate::profiler::ComplexityReport;
use crate::tensor::{ConvSpec, Element, Shape, Var};

/// Per-level channel widths, deepest (stage 4) first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderWidths(pub Vec<usize>);

impl Default for DecoderWidths {
    fn default() -> Self {
        DecoderWidths(vec![128, 96, 96, 80, 72])
    }
}

impl DecoderWidths {
    /// A narrow table (96, 64, 32, 24, 16); lands well below the target
    /// compute budget.
    pub fn narrow() -> Self {
        DecoderWidths(vec![96, 64, 32, 24, 16])
    }

    pub fn tiny() -> Self {
        DecoderWidths(vec![8, 6, 6, 4, 4])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != 5 {
            return Err(Error::Config(format!("decoder needs 5 widths, got {}", self.0.len())));
        }
        if self.0.contains(&0) {
            return Err(Error::Config(format!("decoder widths must be positive: {:?}", self.0)));
        }
        Ok(())
    }

    /// Width of the level at pyramid index `k` (0 = shallowest).
    pub fn at_level(&self, k: usize) -> usize {
        self.0[4 - k]
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    prefix: String,
    pub level: usize,
    pub in_channels: usize,
    pub width: usize,
    pub gmm: Option<Gmm>,
}

impl DecoderLevel {
    pub fn new(level: usize, in_channels: usize, width: usize, gmm: Option<(f64, NormReading)>) -> Result<Self> {
        let prefix = format!("decoder.l{level}");
        let gmm = match gmm {
            Some((eps, reading)) => Some(Gmm::new(format!("{prefix}.gmm"), width, eps, reading)?),
            None => None,
        };
        Ok(DecoderLevel {
            prefix,
            level,
            in_channels,
            width,
            gmm,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn reduce_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.width, 1)
    }

    pub fn spatial_spec(&self) -> ConvSpec {
        ConvSpec::new(self.width, self.width, 3).padding(1).bias(true)
    }

    pub fn build<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let p = &self.prefix;
        store.add_conv(&format!("{p}.reduce.conv"), &self.reduce_spec(), rng)?;
        store.add_batch_norm(&format!("{p}.reduce.bn"), self.width)?;
        if let Some(g) = &self.gmm {
            g.build(store)?;
        }
        store.add_conv(&format!("{p}.spatial.conv"), &self.spatial_spec(), rng)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let r = s.conv(&format!("{p}.reduce.conv"), x, &self.reduce_spec())?;
        let r = s.batch_norm(&format!("{p}.reduce.bn"), r)?;
        let r = s.graph.relu(r)?;
        let m = match &self.gmm {
            Some(g) => g.forward(s, r)?,
            None => r,
        };
        let c = s.conv(&format!("{p}.spatial.conv"), m, &self.spatial_spec())?;
        let c = s.graph.relu(c)?;
        s.graph.add(m, c)
    }

    pub fn profile(&self, r: &mut ComplexityReport, x: Shape) -> Shape {
        let p = &self.prefix;
        let h = r.conv(&format!("{p}.reduce.conv"), &self.reduce_spec(), x);
        r.batch_norm(&format!("{p}.reduce.bn"), h);
        r.elementwise(&format!("{p}.reduce.relu"), h, 1);
        if let Some(g) = &self.gmm {
            g.profile(r, h);
        }
        r.conv(&format!("{p}.spatial.conv"), &self.spatial_spec(), h);
        r.elementwise(&format!("{p}.spatial.relu"), h, 1);
        r.elementwise(&format!("{p}.add"), h, 1);
        h
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Indexed by pyramid level, 0 = shallowest.
    pub levels: Vec<DecoderLevel>,
}

fn head_spec(width: usize) -> ConvSpec {
    ConvSpec::new(width, 1, 1).bias(true)
}

impl Decoder {
    /// `pyramid_channels` are the fused feature widths of stages 0..=4.
    pub fn new(pyramid_channels: &[usize], widths: &DecoderWidths, gmm: Option<(f64, NormReading)>) -> Result<Self> {
        widths.validate()?;
        if pyramid_channels.len() != 5 {
            return Err(Error::Config("decoder needs a five-level pyramid".into()));
        }
        let mut levels = Vec::with_capacity(5);
        for k in 0..5 {
            let upper = if k == 4 { 0 } else { widths.at_level(k + 1) };
            levels.push(DecoderLevel::new(k, pyramid_channels[k] + upper, widths.at_level(k), gmm)?);
        }
        Ok(Decoder { levels })
    }

    pub fn default_gmm() -> Option<(f64, NormReading)> {
        Some((GMM_EPS, NormReading::MeanOfSquares))
    }

    pub fn build<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for l in self.levels.iter().rev() {
            l.build(store, rng)?;
        }
        store.add_conv("decoder.head0", &head_spec(self.levels[0].width), rng)?;
        store.add_conv("decoder.head1", &head_spec(self.levels[1].width), rng)?;
        Ok(())
    }

    /// Per-level outputs, shallowest first.
    pub fn levels_forward<T: Element>(&self, s: &mut Session<'_, T>, fused: &[Var]) -> Result<Vec<Var>> {
        if fused.len() != 5 {
            return Err(Error::Config("decoder needs a five-level pyramid".into()));
        }
        let mut outs = vec![None; 5];
        let mut prev: Option<Var> = None;
        for k in (0..5).rev() {
            let f = fused[k];
            let x = match prev {
                None => f,
                Some(p) => {
                    let up = s.graph.upsample2x(p)?;
                    let (su, sf) = (s.graph.shape(up), s.graph.shape(f));
                    if (su.n, su.h, su.w) != (sf.n, sf.h, sf.w) {
                        return Err(Error::shape("decode", su, sf));
                    }
                    s.graph.concat_channels(up, f)?
                }
            };
            let out = self.levels[k].forward(s, x)?;
            outs[k] = Some(out);
            prev = Some(out);
        }
        Ok(outs.into_iter().map(|o| o.expect("every level ran")).collect())
    }

    /// `(logits0, logits1)`, both `N×1×H×W`.
    pub fn decode<T: Element>(&self, s: &mut Session<'_, T>, fused: &[Var]) -> Result<(Var, Var)> {
        let outs = self.levels_forward(s, fused)?;
        let h0 = s.conv("decoder.head0", outs[0], &head_spec(self.levels[0].width))?;
        let logits0 = s.graph.upsample2x(h0)?;
        let h1 = s.conv("decoder.head1", outs[1], &head_spec(self.levels[1].width))?;
        let h1 = s.graph.upsample2x(h1)?;
        let logits1 = s.graph.upsample2x(h1)?;
        Ok((logits0, logits1))
    }

    /// `fused` are the per-level fused feature shapes, shallowest first.
    pub fn profile(&self, r: &mut ComplexityReport, fused: &[Shape]) {
        let mut prev: Option<Shape> = None;
        let mut outs = vec![Shape::scalar(); 5];
        for k in (0..5).rev() {
            let f = fused[k];
            let x = match prev {
                None => f,
                Some(p) => {
                    let up = r.upsample(&format!("decoder.l{k}.upsample"), p);
                    let cat = Shape::new(f.n, up.c + f.c, f.h, f.w);
                    r.free(&format!("decoder.l{k}.concat"), cat);
                    cat
                }
            };
            let out = self.levels[k].profile(r, x);
            outs[k] = out;
            prev = Some(out);
        }
        let h0 = r.conv("decoder.head0", &head_spec(self.levels[0].width), outs[0]);
        r.upsample("decoder.head0.upsample", h0);
        let h1 = r.conv("decoder.head1", &head_spec(self.levels[1].width), outs[1]);
        let h1 = r.upsample("decoder.head1.upsample1", h1);
        r.upsample("decoder.head1.upsample2", h1);
    }
}
