//! The assembled network: a shared encoder over both dates with channel
//! exchange after stages 2–4, per-level fusion, and the decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_encoder, Encoder, EncoderConfig};
use crate::decoder::{Decoder, DecoderWidths};
use crate::error::{Error, Result};
use crate::ffm::{Ffm, FusionMode};
use crate::gmm::{NormReading, GMM_EPS};
use crate::params::{ParamStore, Session, SessionMode};
use crate::profiler::ComplexityReport;
use crate::tensor::archive::Archive;
use crate::tensor::{sigmoid, Element, Shape, Tensor, Var};
use crate::tif::{self, ExchangeMask, EXCHANGE_STAGES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_widths: DecoderWidths,
    /// Channel exchange after stages 2–4.
    pub tif: bool,
    pub exchange_fraction: f64,
    pub fusion: FusionMode,
    pub gmm: bool,
    pub gmm_norm: NormReading,
    pub eps: f64,
    /// Encoder batch norms keep their running statistics during training.
    pub freeze_encoder_bn: bool,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_widths: DecoderWidths::default(),
            tif: true,
            exchange_fraction: tif::DEFAULT_FRACTION,
            fusion: FusionMode::Ffm,
            gmm: true,
            gmm_norm: NormReading::MeanOfSquares,
            eps: GMM_EPS,
            freeze_encoder_bn: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Same topology at a few thousand parameters.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            decoder_widths: DecoderWidths::tiny(),
            ..Default::default()
        }
    }

    /// Short stable digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Network structure, independent of parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub masks: Vec<Option<ExchangeMask>>,
    pub fusers: Vec<Ffm>,
    pub decoder: Decoder,
}

/// Network plus its parameters.
#[derive(Debug, Clone)]
pub struct LcdNet<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl Network {
    fn new<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = build_encoder(&config.encoder, store, &mut rng)?;
        let chans = config.encoder.stage_channels();
        let masks = (0..5)
            .map(|k| {
                (config.tif && EXCHANGE_STAGES.contains(&k))
                    .then(|| ExchangeMask::new(chans[k], config.exchange_fraction))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let fusers: Vec<Ffm> = (0..5).map(|k| Ffm::new(format!("ffm.l{k}"), chans[k], config.fusion)).collect();
        for f in &fusers {
            f.build(store, &mut rng)?;
        }
        let gmm = config.gmm.then_some((config.eps, config.gmm_norm));
        let decoder = Decoder::new(&chans, &config.decoder_widths, gmm)?;
        decoder.build(store, &mut rng)?;
        Ok(Network {
            config: config.clone(),
            encoder,
            masks,
            fusers,
            decoder,
        })
    }

    /// Encoder streams with interleaved exchange; returns both pyramids.
    pub fn encode_pair<T: Element>(&self, s: &mut Session<'_, T>, x1: Var, x2: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let (s1, s2) = (s.graph.shape(x1), s.graph.shape(x2));
        if s1 != s2 {
            return Err(Error::shape("forward", s1, s2));
        }
        if s1.c != self.config.encoder.in_channels {
            return Err(Error::shape("forward", format!("{} input channels", self.config.encoder.in_channels), s1));
        }
        Encoder::check_input(s1)?;
        let (mut a, mut b) = (x1, x2);
        let (mut p1, mut p2) = (Vec::with_capacity(5), Vec::with_capacity(5));
        for k in 0..5 {
            a = self.encoder.stage(s, k, a)?;
            b = self.encoder.stage(s, k, b)?;
            if let Some(mask) = &self.masks[k] {
                (a, b) = tif::exchange(&mut s.graph, a, b, mask)?;
            }
            p1.push(a);
            p2.push(b);
        }
        Ok((p1, p2))
    }

    /// `(logits0, logits1)` for an image pair already on the tape.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x1: Var, x2: Var) -> Result<(Var, Var)> {
        if self.config.freeze_encoder_bn {
            s.freeze_batch_norm("encoder.");
        }
        let (p1, p2) = self.encode_pair(s, x1, x2)?;
        let fused = (0..5)
            .map(|k| self.fusers[k].forward(s, p1[k], p2[k]))
            .collect::<Result<Vec<_>>>()?;
        self.decoder.decode(s, &fused)
    }

    /// Static accounting at `N = 1`; both encoder streams are profiled as a
    /// batch of two.
    pub fn profile(&self, input_hw: (usize, usize)) -> Result<ComplexityReport> {
        let x = Shape::new(1, self.config.encoder.in_channels, input_hw.0, input_hw.1);
        Encoder::check_input(x)?;
        let mut r = ComplexityReport::new(input_hw);
        let mut h = Shape::new(2, x.c, x.h, x.w);
        let mut stream = Vec::with_capacity(5);
        for k in 0..5 {
            h = self.encoder.profile_stage(&mut r, k, h);
            if self.masks[k].is_some() {
                tif::profile(&mut r, k, h);
            }
            stream.push(Shape::new(1, h.c, h.h, h.w));
        }
        for (f, &s) in self.fusers.iter().zip(&stream) {
            f.profile(&mut r, s);
        }
        self.decoder.profile(&mut r, &stream);
        Ok(r)
    }
}

/// Strict `sigmoid(z) > threshold`, as 0/1 bytes.
pub fn threshold_logits<T: Element>(logits: &Tensor<T>, threshold: f64) -> Vec<u8> {
    logits
        .data()
        .iter()
        .map(|&z| u8::from(sigmoid(z).as_f64() > threshold))
        .collect()
}

impl<T: Element> LcdNet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(config, &mut params)?;
        Ok(LcdNet { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Forward pass on tensors; batch norms use running statistics.
    pub fn forward(&mut self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.forward_mode(t1, t2, SessionMode::EVAL)
    }

    pub fn forward_mode(&mut self, t1: &Tensor<T>, t2: &Tensor<T>, mode: SessionMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut s = Session::new(&mut self.params, mode);
        let x1 = s.input(t1.clone());
        let x2 = s.input(t2.clone());
        let (l0, l1) = self.net.forward(&mut s, x1, x2)?;
        let a = s.graph.take_leaf(l0);
        let b = s.graph.take_leaf(l1);
        Ok((a, b))
    }

    /// Binary change masks `N×H×W` (row-major per sample).
    pub fn predict(&mut self, t1: &Tensor<T>, t2: &Tensor<T>, threshold: f64) -> Result<Vec<u8>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let (l0, _) = self.forward(t1, t2)?;
        Ok(threshold_logits(&l0, threshold))
    }

    pub fn profile(&self, input_hw: (usize, usize)) -> Result<ComplexityReport> {
        let mut r = self.net.profile(input_hw)?;
        r.buffers = self.params.num_buffers() as u64;
        Ok(r)
    }

    /// Loads encoder (or any matching) weights; names absent from the
    /// archive keep their initial values.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<Vec<String>> {
        let archive = Archive::load(path)?;
        self.params.load_archive(&archive)
    }

    pub fn to_checkpoint(&self, epoch: usize, best_iou: Option<f64>) -> Result<Archive> {
        let mut a = self.params.to_archive();
        a.metadata.insert("epoch".into(), epoch.to_string());
        a.metadata.insert(
            "best_iou".into(),
            best_iou.map(|v| format!("{v:.17e}")).unwrap_or_else(|| "none".into()),
        );
        a.metadata.insert("config_hash".into(), self.config().hash());
        a.metadata.insert("config".into(), serde_json::to_string(self.config())?);
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: usize, best_iou: Option<f64>) -> Result<()> {
        self.to_checkpoint(epoch, best_iou)?.save(path)
    }

    /// Rebuilds the network from the embedded configuration and loads every
    /// tensor; a missing tensor is an error.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let json = archive
            .metadata
            .get("config")
            .ok_or_else(|| Error::Archive("checkpoint has no config metadata".into()))?;
        let config: ModelConfig = serde_json::from_str(json)?;
        let mut model = LcdNet::new(&config)?;
        let missing = model.params.load_archive(archive)?;
        if let Some(name) = missing.first() {
            return Err(Error::Archive(format!("checkpoint lacks tensor `{name}`")));
        }
        Ok(model)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
