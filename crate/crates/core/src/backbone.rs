//! MobileNetV2-style encoder without its pooling/classifier head, split
//! into five stages that each halve the spatial resolution once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::profiler::ComplexityReport;
use crate::tensor::{ConvSpec, Element, Shape, Var};

/// Per-channel input standardisation applied after scaling pixels to [0, 1].
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.5;

/// Total downsampling of the encoder; inputs must be divisible by it.
pub const ENCODER_STRIDE: usize = 32;

/// One row of the bottleneck table: expansion `t`, output channels `c`,
/// repeats `n`, stride `s` of the first repeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSetting {
    pub expand: usize,
    pub out: usize,
    pub repeats: usize,
    pub stride: usize,
}

const fn row(expand: usize, out: usize, repeats: usize, stride: usize) -> BlockSetting {
    BlockSetting {
        expand,
        out,
        repeats,
        stride,
    }
}

/// Stage table of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Five stages; stage 0 is preceded by the stride-2 stem.
    pub stages: Vec<Vec<BlockSetting>>,
}

impl Default for EncoderConfig {
    /// Width multiplier 1.0 MobileNetV2, regrouped so each stage holds
    /// exactly one stride-2 layer.
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stem_channels: 32,
            stages: vec![
                vec![row(1, 16, 1, 1)],
                vec![row(6, 24, 2, 2)],
                vec![row(6, 32, 3, 2)],
                vec![row(6, 64, 4, 2), row(6, 96, 3, 1)],
                vec![row(6, 160, 3, 2), row(6, 320, 1, 1)],
            ],
        }
    }
}

impl EncoderConfig {
    /// A few-thousand-parameter table with the same topology, for gradient
    /// checks and fast tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            in_channels: 3,
            stem_channels: 4,
            stages: vec![
                vec![row(1, 4, 1, 1)],
                vec![row(2, 6, 2, 2)],
                vec![row(2, 6, 1, 2)],
                vec![row(2, 8, 1, 2)],
                vec![row(2, 8, 1, 2), row(2, 10, 1, 1)],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 5 {
            return Err(Error::Config(format!("encoder needs 5 stages, got {}", self.stages.len())));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        for (k, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Config(format!("stage {k} is empty")));
            }
            for b in stage {
                if b.out == 0 || b.expand == 0 || b.repeats == 0 {
                    return Err(Error::Config(format!("stage {k}: non-positive entry {b:?}")));
                }
                if b.stride != 1 && b.stride != 2 {
                    return Err(Error::Config(format!("stage {k}: stride {} unsupported", b.stride)));
                }
            }
            let halvings = stage.iter().filter(|b| b.stride == 2).count() + usize::from(k == 0);
            if halvings != 1 {
                return Err(Error::Config(format!(
                    "stage {k} must contain exactly one stride-2 layer, has {halvings}"
                )));
            }
        }
        Ok(())
    }

    /// Output channels of stages 0..=4.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.last().map(|b| b.out).unwrap_or(0))
            .collect()
    }
}

/// Expand (1×1) → depthwise 3×3 → linear project (1×1), each followed by
/// batch norm; ReLU6 after the first two only.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub expand: usize,
    pub stride: usize,
}

impl InvertedResidual {
    fn hidden(&self) -> usize {
        self.in_channels * self.expand
    }

    /// Skip connection iff stride 1 and matching widths.
    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn expand_spec(&self) -> Option<ConvSpec> {
        (self.expand != 1).then(|| ConvSpec::new(self.in_channels, self.hidden(), 1))
    }

    fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.hidden(), 3, self.stride)
    }

    fn project_spec(&self) -> ConvSpec {
        ConvSpec::new(self.hidden(), self.out_channels, 1)
    }

    fn build<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let p = &self.prefix;
        if let Some(spec) = self.expand_spec() {
            store.add_conv(&format!("{p}.expand.conv"), &spec, rng)?;
            store.add_batch_norm(&format!("{p}.expand.bn"), self.hidden())?;
        }
        store.add_conv(&format!("{p}.dw.conv"), &self.depthwise_spec(), rng)?;
        store.add_batch_norm(&format!("{p}.dw.bn"), self.hidden())?;
        store.add_conv(&format!("{p}.project.conv"), &self.project_spec(), rng)?;
        store.add_batch_norm(&format!("{p}.project.bn"), self.out_channels)?;
        Ok(())
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let mut h = x;
        if let Some(spec) = self.expand_spec() {
            h = s.conv(&format!("{p}.expand.conv"), h, &spec)?;
            h = s.batch_norm(&format!("{p}.expand.bn"), h)?;
            h = s.graph.relu6(h)?;
        }
        h = s.conv(&format!("{p}.dw.conv"), h, &self.depthwise_spec())?;
        h = s.batch_norm(&format!("{p}.dw.bn"), h)?;
        h = s.graph.relu6(h)?;
        h = s.conv(&format!("{p}.project.conv"), h, &self.project_spec())?;
        h = s.batch_norm(&format!("{p}.project.bn"), h)?;
        if self.has_skip() {
            h = s.graph.add(x, h)?;
        }
        Ok(h)
    }

    fn profile(&self, r: &mut ComplexityReport, x: Shape) -> Shape {
        let p = &self.prefix;
        let mut h = x;
        if let Some(spec) = self.expand_spec() {
            h = r.conv(&format!("{p}.expand.conv"), &spec, h);
            r.batch_norm(&format!("{p}.expand.bn"), h);
            r.elementwise(&format!("{p}.expand.relu6"), h, 1);
        }
        h = r.conv(&format!("{p}.dw.conv"), &self.depthwise_spec(), h);
        r.batch_norm(&format!("{p}.dw.bn"), h);
        r.elementwise(&format!("{p}.dw.relu6"), h, 1);
        h = r.conv(&format!("{p}.project.conv"), &self.project_spec(), h);
        r.batch_norm(&format!("{p}.project.bn"), h);
        if self.has_skip() {
            r.elementwise(&format!("{p}.add"), h, 1);
        }
        h
    }
}

#[derive(Debug, Clone)]
struct Stage {
    stem: Option<ConvSpec>,
    blocks: Vec<InvertedResidual>,
}

/// The shared encoder applied to both temporal images.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

/// Per-stage encoder outputs `F^0 … F^4` of one temporal stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Allocates and initialises all encoder parameters under `encoder.`.
pub fn build_encoder<T: Element, R: Rng + ?Sized>(
    config: &EncoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Encoder> {
    config.validate()?;
    let mut cin = config.in_channels;
    let mut stages = Vec::with_capacity(5);
    for (k, settings) in config.stages.iter().enumerate() {
        let stem = if k == 0 {
            let spec = ConvSpec::new(cin, config.stem_channels, 3).stride(2).padding(1);
            store.add_conv("encoder.s0.stem.conv", &spec, rng)?;
            store.add_batch_norm("encoder.s0.stem.bn", config.stem_channels)?;
            cin = config.stem_channels;
            Some(spec)
        } else {
            None
        };
        let mut blocks = Vec::new();
        for b in settings {
            for i in 0..b.repeats {
                let block = InvertedResidual {
                    prefix: format!("encoder.s{k}.b{}", blocks.len()),
                    in_channels: cin,
                    out_channels: b.out,
                    expand: b.expand,
                    stride: if i == 0 { b.stride } else { 1 },
                };
                block.build(store, rng)?;
                cin = b.out;
                blocks.push(block);
            }
        }
        stages.push(Stage { stem, blocks });
    }
    Ok(Encoder {
        config: config.clone(),
        stages,
    })
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self, stage: usize) -> &[InvertedResidual] {
        &self.stages[stage].blocks
    }

    pub fn check_input(shape: Shape) -> Result<()> {
        if shape.h == 0
            || shape.w == 0
            || shape.h % ENCODER_STRIDE != 0
            || shape.w % ENCODER_STRIDE != 0
        {
            return Err(Error::shape(
                "encode",
                format!("spatial size divisible by {ENCODER_STRIDE}"),
                shape,
            ));
        }
        Ok(())
    }

    /// Runs a single stage.
    pub fn stage<T: Element>(&self, s: &mut Session<'_, T>, k: usize, x: Var) -> Result<Var> {
        let stage = &self.stages[k];
        let mut h = x;
        if let Some(spec) = &stage.stem {
            h = s.conv("encoder.s0.stem.conv", h, spec)?;
            h = s.batch_norm("encoder.s0.stem.bn", h)?;
            h = s.graph.relu6(h)?;
        }
        for b in &stage.blocks {
            h = b.forward(s, h)?;
        }
        Ok(h)
    }

    /// All five stages on one normalised `N×3×H×W` image batch.
    pub fn encode<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<FeaturePyramid> {
        Self::check_input(s.graph.shape(image))?;
        let mut levels = Vec::with_capacity(5);
        let mut h = image;
        for k in 0..5 {
            h = self.stage(s, k, h)?;
            levels.push(h);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Profiles one stage; `x` carries both streams on its batch axis.
    pub fn profile_stage(&self, r: &mut ComplexityReport, k: usize, x: Shape) -> Shape {
        let stage = &self.stages[k];
        let mut h = x;
        if let Some(spec) = &stage.stem {
            h = r.conv("encoder.s0.stem.conv", spec, h);
            r.batch_norm("encoder.s0.stem.bn", h);
            r.elementwise("encoder.s0.stem.relu6", h, 1);
        }
        for b in &stage.blocks {
            h = b.profile(r, h);
        }
        h
    }
}
