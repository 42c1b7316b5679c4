//! Network definitions: mapping and synthesis networks, the discriminator
//! backbone with detachable heads, the attribute adaptor and classifier.
//!
//! Parameters live in plain [`Tensor`] fields. A forward pass binds each
//! parameter onto a [`Tape`] through a [`Binder`], which decides per parameter
//! name whether it is trainable and remembers the resulting [`Var`]s so their
//! gradients can be collected by name afterwards.

mod discriminator;
mod generator;
mod heads;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{AdamState, Gradients, Scalar, Tape, Tensor, TensorError, Var};
use crate::rng::Rng;

pub use discriminator::{Backbone, DiscDims, Discriminator, RealFakeHead};
pub use generator::{Generator, GeneratorDims, MappingNetwork, StyleLayer, SynthesisNetwork};
pub use heads::{Adaptor, AdaptorKind, AttributeClassifier, ClassifierKind};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown partition mode {0:?}")]
    UnknownMode(String),
}

/// Named-parameter traversal, in a fixed order.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Overwrites every parameter from `source`, checking names and shapes.
    fn load_from(&mut self, source: &BTreeMap<String, Tensor<T>>) -> Result<(), NetError> {
        let mut err = None;
        self.visit_mut(&mut |n, t| {
            if err.is_some() {
                return;
            }
            match source.get(n) {
                None => err = Some(NetError::MissingParam(n.to_string())),
                Some(s) if s.shape() != t.shape() => {
                    err = Some(NetError::ParamShape {
                        name: n.to_string(),
                        expected: t.shape().to_vec(),
                        found: s.shape().to_vec(),
                    })
                }
                Some(s) => *t = s.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Binds parameters onto a tape and tracks the trainable ones by name.
pub struct Binder<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    trainable: Box<dyn Fn(&str) -> bool + 't>,
    bound: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> Binder<'t, T> {
    pub fn new(tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool + 't) -> Self {
        Binder {
            tape,
            trainable: Box::new(trainable),
            bound: Vec::new(),
        }
    }

    /// Every parameter bound as a constant.
    pub fn frozen(tape: &'t Tape<T>) -> Self {
        Self::new(tape, |_| false)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn bind(&mut self, name: &str, value: &Tensor<T>) -> Result<Var<'t, T>, TensorError> {
        let trainable = (self.trainable)(name);
        let v = self.tape.leaf(value.clone(), trainable)?;
        if trainable {
            self.bound.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn bound_names(&self) -> BTreeSet<String> {
        self.bound.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Gradients per parameter name, summed over every binding of that name.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, var) in &self.bound {
            let g = grads.get_or_zeros(*var);
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights `N(0, 1) / sqrt(fan_in)`, bias filled with `bias_init`.
    pub fn init(fan_in: usize, fan_out: usize, bias_init: f64, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
            bias: Tensor::full(&[1, fan_out], T::from_f64(bias_init)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let w = b.bind(&format!("{prefix}.weight"), &self.weight)?;
        let bias = b.bind(&format!("{prefix}.bias"), &self.bias)?;
        x.matmul(w)?.broadcast_add(bias)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Which parameters an adaptation run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Genda,
    FullFinetune,
    FreezeD,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Genda => "genda",
            Mode::FullFinetune => "full_finetune",
            Mode::FreezeD => "freeze_d",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "genda" => Ok(Mode::Genda),
            "full_finetune" => Ok(Mode::FullFinetune),
            "freeze_d" => Ok(Mode::FreezeD),
            other => Err(NetError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of backbone layers frozen by `freeze_d`: the lower half, rounded up.
pub fn freeze_d_split(depth: usize) -> usize {
    depth.div_ceil(2)
}

/// Whether parameter `name` is trainable under `mode`. `backbone_depth` sets the
/// `freeze_d` split.
pub fn is_trainable(mode: Mode, name: &str, backbone_depth: usize) -> bool {
    match mode {
        Mode::Genda => {
            name.starts_with("adaptor.")
                || name.starts_with("classifier.")
                || name.starts_with("synthesis.to_rgb.")
        }
        Mode::FullFinetune => true,
        Mode::FreezeD => match backbone_layer(name) {
            Some(layer) => layer >= freeze_d_split(backbone_depth),
            None => true,
        },
    }
}

fn backbone_layer(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("disc.backbone.")?;
    rest.split('.').next()?.parse().ok()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl Partition {
    pub fn trainable_count<T: Scalar>(&self, modules: &[&dyn Module<T>]) -> usize {
        let mut n = 0;
        for m in modules {
            m.visit(&mut |name, t| {
                if self.trainable.contains(name) {
                    n += t.numel()
                }
            });
        }
        n
    }
}

/// Splits every parameter of `modules` into trainable and frozen sets for `mode`.
pub fn parameter_partition<T: Scalar>(
    mode: Mode,
    modules: &[&dyn Module<T>],
    backbone_depth: usize,
) -> Partition {
    let mut p = Partition::default();
    for m in modules {
        m.visit(&mut |name, _| {
            if is_trainable(mode, name, backbone_depth) {
                p.trainable.insert(name.to_string());
            } else {
                p.frozen.insert(name.to_string());
            }
        });
    }
    p
}

/// Applies `adam` to every parameter of `module` that has a gradient. Call
/// [`AdamState::begin_step`] once per optimizer step before updating one or
/// more modules.
pub fn adam_update<M: Module<f32> + ?Sized>(
    adam: &mut AdamState,
    module: &mut M,
    grads: &BTreeMap<String, Tensor<f32>>,
) -> Result<(), TensorError> {
    let mut result = Ok(());
    module.visit_mut(&mut |name, t| {
        if result.is_ok() {
            if let Some(g) = grads.get(name) {
                result = adam.update(name, t, g);
            }
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn fan_in_scaled_init_std() {
        let mut rng = stream(3, Stream::Init);
        let l = Linear::<f32>::init(64, 64, 0.0, &mut rng);
        let n = l.weight.numel() as f64;
        let mean: f64 = l.weight.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = l
            .weight
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.125).abs() < 0.2 * 0.125, "std {std}");
    }

    #[test]
    fn freeze_d_split_is_lower_half() {
        assert_eq!(freeze_d_split(4), 2);
        assert_eq!(freeze_d_split(5), 3);
        assert!(!is_trainable(Mode::FreezeD, "disc.backbone.0.weight", 4));
        assert!(!is_trainable(Mode::FreezeD, "disc.backbone.1.bias", 4));
        assert!(is_trainable(Mode::FreezeD, "disc.backbone.2.weight", 4));
        assert!(is_trainable(Mode::FreezeD, "disc.head.weight", 4));
        assert!(is_trainable(Mode::FreezeD, "mapping.0.weight", 4));
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("tgan".parse::<Mode>().is_err());
        assert_eq!("freeze_d".parse::<Mode>().unwrap(), Mode::FreezeD);
    }
}
