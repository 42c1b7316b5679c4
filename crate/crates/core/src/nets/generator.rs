use serde::{Deserialize, Serialize};

use super::{Binder, Linear, Module, NetError};
use crate::engine::{Scalar, Tensor, TensorError, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDims {
    /// Dimension shared by Z and W.
    pub latent_dim: usize,
    pub mapping_depth: usize,
    /// `hidden[0]` is the learned constant input; each style layer maps
    /// `hidden[i] -> hidden[i + 1]`.
    pub hidden: Vec<usize>,
    /// Flattened output size (`3 * R * R` for images, 2 for planar points).
    pub out_dim: usize,
}

impl GeneratorDims {
    pub fn image(resolution: usize) -> Self {
        GeneratorDims {
            latent_dim: 64,
            mapping_depth: 3,
            hidden: vec![64, 128, 256, 256, 256],
            out_dim: 3 * resolution * resolution,
        }
    }

    pub fn points(dim: usize) -> Self {
        GeneratorDims {
            latent_dim: 64,
            mapping_depth: 3,
            hidden: vec![64, 64, 64, 64, 64],
            out_dim: dim,
        }
    }

    pub fn style_layers(&self) -> usize {
        self.hidden.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.latent_dim == 0 || self.mapping_depth == 0 || self.out_dim == 0 {
            return Err(NetError::InvalidDims(format!("{self:?}")));
        }
        if self.hidden.len() < 2 || self.hidden.contains(&0) {
            return Err(NetError::InvalidDims(format!(
                "need a constant input and at least one style layer, got hidden {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork<T: Scalar = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> MappingNetwork<T> {
    /// `z -> z / |z| * sqrt(D)`, then `depth` leaky-ReLU layers of width D.
    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let d = self.layers[0].fan_in();
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "map_latent",
                left: shape,
                right: vec![d],
            });
        }
        let mut h = z.l2_normalize((d as f64).sqrt())?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, &format!("mapping.{i}"), h)?.leaky_relu()?;
        }
        Ok(h)
    }
}

/// `h' = leaky_relu((h ⊙ s) W + b)` with `s = affine(w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLayer<T: Scalar = f32> {
    pub affine: Linear<T>,
    pub linear: Linear<T>,
}

impl<T: Scalar> StyleLayer<T> {
    pub fn forward<'t>(
        &self,
        b: &mut Binder<'t, T>,
        prefix: &str,
        h: Var<'t, T>,
        w: Var<'t, T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let s = self.affine.forward(b, &format!("{prefix}.affine"), w)?;
        let modulated = s.mul(h)?;
        self.linear.forward(b, prefix, modulated)?.leaky_relu()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNetwork<T: Scalar = f32> {
    /// `[1, hidden[0]]`
    pub const_input: Tensor<T>,
    pub layers: Vec<StyleLayer<T>>,
    pub to_rgb: Linear<T>,
}

impl<T: Scalar> SynthesisNetwork<T> {
    /// Every style layer consumes the same `w`; output goes through `to_rgb` and tanh.
    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let d = self.layers[0].affine.fan_in();
        let shape = w.shape();
        if shape.len() != 2 || shape[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "synthesize",
                left: shape,
                right: vec![d],
            });
        }
        let mut h = b.bind("synthesis.const", &self.const_input)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, &format!("synthesis.style.{i}"), h, w)?;
        }
        self.to_rgb.forward(b, "synthesis.to_rgb", h)?.tanh()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub dims: GeneratorDims,
    pub mapping: MappingNetwork<T>,
    pub synthesis: SynthesisNetwork<T>,
}

impl<T: Scalar> Generator<T> {
    /// Weights from the caller's `init` stream; style affines start with bias 1 so
    /// the initial modulation is near identity.
    pub fn init(dims: &GeneratorDims, rng: &mut Rng) -> Result<Self, NetError> {
        dims.validate()?;
        let d = dims.latent_dim;
        let mapping = MappingNetwork {
            layers: (0..dims.mapping_depth).map(|_| Linear::init(d, d, 0.0, rng)).collect(),
        };
        let const_input = {
            let l = Linear::<T>::init(1, dims.hidden[0], 0.0, rng);
            l.weight
        };
        let layers = dims
            .hidden
            .windows(2)
            .map(|io| StyleLayer {
                affine: Linear::init(d, io[0], 1.0, rng),
                linear: Linear::init(io[0], io[1], 0.0, rng),
            })
            .collect();
        let to_rgb = Linear::init(*dims.hidden.last().expect("validated"), dims.out_dim, 0.0, rng);
        Ok(Generator {
            dims: dims.clone(),
            mapping,
            synthesis: SynthesisNetwork {
                const_input,
                layers,
                to_rgb,
            },
        })
    }

    /// All-zero parameters with the right shapes; fill with [`Module::load_from`].
    pub fn zeros(dims: &GeneratorDims) -> Result<Self, NetError> {
        dims.validate()?;
        let d = dims.latent_dim;
        Ok(Generator {
            dims: dims.clone(),
            mapping: MappingNetwork {
                layers: (0..dims.mapping_depth).map(|_| Linear::zeros(d, d)).collect(),
            },
            synthesis: SynthesisNetwork {
                const_input: Tensor::zeros(&[1, dims.hidden[0]]),
                layers: dims
                    .hidden
                    .windows(2)
                    .map(|io| StyleLayer {
                        affine: Linear::zeros(d, io[0]),
                        linear: Linear::zeros(io[0], io[1]),
                    })
                    .collect(),
                to_rgb: Linear::zeros(*dims.hidden.last().expect("validated"), dims.out_dim),
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        let mut out = Generator::<U>::zeros(&self.dims).expect("dims already validated");
        let src: std::collections::BTreeMap<_, _> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        out.load_from(&src).expect("same architecture");
        out
    }

    pub fn map_latent<'t>(&self, b: &mut Binder<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.mapping.forward(b, z)
    }

    pub fn synthesize<'t>(&self, b: &mut Binder<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.synthesis.forward(b, w)
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.mapping.layers.iter().enumerate() {
            l.visit(&format!("mapping.{i}"), f);
        }
        f("synthesis.const", &self.synthesis.const_input);
        for (i, l) in self.synthesis.layers.iter().enumerate() {
            l.affine.visit(&format!("synthesis.style.{i}.affine"), f);
            l.linear.visit(&format!("synthesis.style.{i}"), f);
        }
        self.synthesis.to_rgb.visit("synthesis.to_rgb", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.mapping.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("mapping.{i}"), f);
        }
        f("synthesis.const", &mut self.synthesis.const_input);
        for (i, l) in self.synthesis.layers.iter_mut().enumerate() {
            l.affine.visit_mut(&format!("synthesis.style.{i}.affine"), f);
            l.linear.visit_mut(&format!("synthesis.style.{i}"), f);
        }
        self.synthesis.to_rgb.visit_mut("synthesis.to_rgb", f);
    }
}
