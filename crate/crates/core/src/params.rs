//! Named parameter sets and the per-forward binding of parameters onto a
//! gradient tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::archive::Archive;
use crate::tensor::{BatchNormMode, ConvSpec, Element, Graph, Shape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Role of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, excluded from weight decay (normalization affine terms,
    /// gate parameters).
    NoDecay,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named parameter set (the network's `ModuleParams`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Number of non-trainable buffer scalars.
    pub fn num_buffers(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.kind.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.take_grad();
        }
    }

    /// Copies every parameter into an archive, preserving order.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, p) in &self.entries {
            a.insert(name.clone(), &p.tensor);
        }
        a
    }

    /// Replaces values of every stored name present in the archive. Names in
    /// the archive that this store lacks are ignored; a present name with a
    /// different shape is an error naming that tensor. Returns the names of
    /// store entries the archive did not provide.
    pub fn load_archive(&mut self, archive: &Archive) -> Result<Vec<String>> {
        // validate everything before mutating anything
        for (name, p) in &self.entries {
            if let Some(stored) = archive.tensors.get(name) {
                let shape = stored.shape()?;
                if shape != p.tensor.shape() {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: p.tensor.shape().to_string(),
                        got: shape.to_string(),
                    });
                }
            }
        }
        let mut missing = Vec::new();
        for (name, p) in self.entries.iter_mut() {
            match archive.tensors.get(name) {
                Some(stored) => {
                    let t = stored.to_tensor::<T>()?;
                    p.tensor = t;
                }
                None => missing.push(name.clone()),
            }
        }
        Ok(missing)
    }

    /// Same parameters at another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers a convolution's weight (Kaiming-uniform, gain √2) and
    /// optional zero bias under `prefix.weight` / `prefix.bias`.
    pub fn add_conv<R: Rng + ?Sized>(&mut self, prefix: &str, spec: &ConvSpec, rng: &mut R) -> Result<()> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws.c * ws.h * ws.w;
        let bound = (6.0 / fan_in as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::uniform(ws, -bound, bound, rng), ParamKind::Weight)?;
        if spec.has_bias {
            self.insert(
                format!("{prefix}.bias"),
                Tensor::zeros(Shape::channels(spec.out_channels)),
                ParamKind::Weight,
            )?;
        }
        Ok(())
    }

    /// Registers batch-norm affine terms `(1, 0)` and running statistics
    /// `(0, 1)`.
    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let s = Shape::channels(channels);
        self.insert(format!("{prefix}.weight"), Tensor::ones(s), ParamKind::NoDecay)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(s), ParamKind::NoDecay)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(s), ParamKind::Buffer)?;
        self.insert(format!("{prefix}.running_var"), Tensor::ones(s), ParamKind::Buffer)?;
        Ok(())
    }
}

/// What a forward pass is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionMode {
    /// Record the tape and track parameter gradients.
    pub grad: bool,
    /// Batch norm uses batch statistics and updates running statistics.
    pub bn_batch_stats: bool,
}

impl SessionMode {
    pub const TRAIN: SessionMode = SessionMode {
        grad: true,
        bn_batch_stats: true,
    };
    pub const EVAL: SessionMode = SessionMode {
        grad: false,
        bn_batch_stats: false,
    };
}

/// One forward pass: a tape plus lazily bound parameter leaves. A name is
/// bound once per session, so a block applied to both temporal streams
/// reads the same leaf and receives the sum of both streams' gradients.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: HashMap<String, Var>,
    mode: SessionMode,
    frozen_bn: Option<String>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: SessionMode) -> Self {
        Session {
            graph: if mode.grad { Graph::new() } else { Graph::no_grad() },
            store,
            bound: HashMap::new(),
            mode,
            frozen_bn: None,
        }
    }

    /// Batch norms whose name starts with `prefix` always normalise with
    /// their running statistics and never update them.
    pub fn freeze_batch_norm(&mut self, prefix: impl Into<String>) {
        self.frozen_bn = Some(prefix.into());
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.leaf(t)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let t = p.tensor.clone().with_requires_grad(self.mode.grad && p.kind.trainable());
        let v = self.graph.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, spec)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let placeholder = || Tensor::zeros(Shape::new(0, 0, 0, 0));
        let mut rm = std::mem::replace(&mut self.store.get_mut(&mean_name)?.tensor, placeholder());
        let mut rv = std::mem::replace(&mut self.store.get_mut(&var_name)?.tensor, placeholder());
        let frozen = self.frozen_bn.as_deref().is_some_and(|f| prefix.starts_with(f));
        let mode = if self.mode.bn_batch_stats && !frozen {
            BatchNormMode::Train { momentum: BN_MOMENTUM }
        } else {
            BatchNormMode::Eval
        };
        let out = self.graph.batch_norm(x, gamma, beta, &mut rm, &mut rv, mode, BN_EPS);
        self.store.get_mut(&mean_name)?.tensor = rm;
        self.store.get_mut(&var_name)?.tensor = rv;
        out
    }

    /// Runs backward from `loss` and accumulates each bound parameter's
    /// gradient into its slot in the store. The tape is handed back so that
    /// input gradients stay readable.
    pub fn backward(mut self, loss: Var) -> Result<Graph<T>> {
        self.graph.backward(loss)?;
        for (name, v) in self.bound.drain() {
            let Some(g) = self.graph.grad(v) else { continue };
            let p = self.store.get_mut(&name)?;
            if p.kind.trainable() {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(self.graph)
    }
}
