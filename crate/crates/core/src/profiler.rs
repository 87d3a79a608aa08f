//! Static parameter and multiply-accumulate accounting.
//!
//! Counting rules, shared with the tape's own MAC counter:
//!
//! * convolution: `out_c · in_c/groups · kh · kw · N · Hout · Wout`
//! * batch norm, activations, residual adds, gating products: 1 per output element
//! * spatial L2 norm and channel means: 1 per input element
//! * bilinear ×2 upsampling: 4 per output element
//! * concatenation and channel exchange: 0

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::NormReading;
use crate::tensor::{ConvSpec, Shape};

/// Reference totals for the full network at 256×256.
pub const REFERENCE_PARAMS: f64 = 2.56e6;
pub const REFERENCE_GFLOPS: f64 = 4.45;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub out_n: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub macs: u64,
}

impl LayerRow {
    pub fn out(&self) -> Shape {
        Shape::new(self.out_n, self.out_c, self.out_h, self.out_w)
    }
}

/// How FLOPs relate to MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    /// One FLOP per multiply-accumulate.
    Single,
    /// Two FLOPs (multiply and add) per multiply-accumulate.
    Double,
}

impl FlopConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopConvention::Single => 1,
            FlopConvention::Double => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FlopConvention::Single => "FLOPs = MACs",
            FlopConvention::Double => "FLOPs = 2 x MACs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplexityReport {
    pub input_hw: (usize, usize),
    pub rows: Vec<LayerRow>,
    /// Non-trainable scalars (batch-norm running statistics).
    pub buffers: u64,
}

impl ComplexityReport {
    pub fn new(input_hw: (usize, usize)) -> Self {
        ComplexityReport {
            input_hw,
            ..Default::default()
        }
    }

    pub fn push(&mut self, layer: &str, out: Shape, params: u64, macs: u64) {
        self.rows.push(LayerRow {
            layer: layer.to_string(),
            out_n: out.n,
            out_c: out.c,
            out_h: out.h,
            out_w: out.w,
            params,
            macs,
        });
    }

    pub fn conv(&mut self, layer: &str, spec: &ConvSpec, input: Shape) -> Shape {
        let out = spec
            .output_shape(input)
            .unwrap_or_else(|e| panic!("profiling {layer}: {e}"));
        self.push(layer, out, spec.param_count() as u64, spec.macs(out));
        out
    }

    /// Affine terms count as parameters; running statistics as buffers.
    pub fn batch_norm(&mut self, layer: &str, shape: Shape) {
        self.push(layer, shape, 2 * shape.c as u64, shape.numel() as u64);
        self.buffers += 2 * shape.c as u64;
    }

    pub fn elementwise(&mut self, layer: &str, shape: Shape, per_element: u64) {
        self.push(layer, shape, 0, per_element * shape.numel() as u64);
    }

    /// Concatenation, channel exchange and other pure data movement.
    pub fn free(&mut self, layer: &str, shape: Shape) {
        self.push(layer, shape, 0, 0);
    }

    pub fn upsample(&mut self, layer: &str, input: Shape) -> Shape {
        let out = Shape::new(input.n, input.c, 2 * input.h, 2 * input.w);
        self.push(layer, out, 0, 4 * out.numel() as u64);
        out
    }

    /// A gating block on `shape`: the spatial norm and the final product
    /// touch every element, everything else is per channel.
    pub fn gmm(&mut self, layer: &str, shape: Shape, reading: NormReading) {
        let (n, c) = (shape.n as u64, shape.c as u64);
        let per_channel = match reading {
            // α·, square, channel mean, ·γ, ·ed, +β, tanh, +1
            NormReading::MeanOfSquares => 8 * n * c + 2 * n,
            // α·, channel mean, ·γ, ·ed, +β, tanh, +1; square on the mean
            NormReading::SquareOfMean => 7 * n * c + 3 * n,
        };
        self.push(layer, shape, 3 * c, 2 * shape.numel() as u64 + per_channel);
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn flops(&self, convention: FlopConvention) -> u64 {
        self.total_macs() * convention.factor()
    }

    /// The convention whose GFLOPs lies closer to `reference_gflops`.
    pub fn closer_convention(&self, reference_gflops: f64) -> FlopConvention {
        let dist = |c| (self.flops(c) as f64 / 1e9 - reference_gflops).abs();
        if dist(FlopConvention::Double) < dist(FlopConvention::Single) {
            FlopConvention::Double
        } else {
            FlopConvention::Single
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["layer", "out_n", "out_c", "out_h", "out_w", "params", "macs"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_csv(text: &str, input_hw: (usize, usize)) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<LayerRow>, _>>()?;
        Ok(ComplexityReport {
            input_hw,
            rows,
            buffers: 0,
        })
    }

    /// Aligned table with a closing totals row and a summary block.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<name_w$}  {:>18}  {:>10}  {:>14}", "layer", "output", "params", "macs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<name_w$}  {:>18}  {:>10}  {:>14}", r.layer, r.out().to_string(), r.params, r.macs);
        }
        let _ = writeln!(s, "{:<name_w$}  {:>18}  {:>10}  {:>14}", "TOTAL", "", self.total_params(), self.total_macs());
        s.push_str(&self.summary());
        s
    }

    /// Headline numbers against the reference totals.
    pub fn summary(&self) -> String {
        let p = self.total_params() as f64;
        let conv = self.closer_convention(REFERENCE_GFLOPS);
        let mut s = String::new();
        let _ = writeln!(s, "input: {}x{}", self.input_hw.0, self.input_hw.1);
        let _ = writeln!(
            s,
            "trainable params: {} ({:.3} M, reference {:.2} M, {:+.1}%)",
            self.total_params(),
            p / 1e6,
            REFERENCE_PARAMS / 1e6,
            100.0 * (p / REFERENCE_PARAMS - 1.0)
        );
        let _ = writeln!(s, "non-trainable buffers: {}", self.buffers);
        let _ = writeln!(s, "MACs: {} ({:.3} G)", self.total_macs(), self.total_macs() as f64 / 1e9);
        for c in [FlopConvention::Single, FlopConvention::Double] {
            let g = self.flops(c) as f64 / 1e9;
            let _ = writeln!(
                s,
                "GFLOPs [{}]: {:.3} (reference {:.2}, {:+.1}%){}",
                c.label(),
                g,
                REFERENCE_GFLOPS,
                100.0 * (g / REFERENCE_GFLOPS - 1.0),
                if c == conv { "  <- closer" } else { "" }
            );
        }
        s
    }

    pub fn emit(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let body = match format {
            ReportFormat::Csv => self.to_csv()?,
            ReportFormat::Text => self.to_text(),
        };
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}
