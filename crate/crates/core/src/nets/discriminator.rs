use serde::{Deserialize, Serialize};

use super::{Binder, Linear, Module, NetError};
use crate::engine::{Scalar, Tensor, TensorError, Var, LEAKY_SLOPE};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscDims {
    pub in_dim: usize,
    pub depth: usize,
    pub feature_dim: usize,
    /// Output widths of layers `0..depth-1`; empty means every layer is
    /// `feature_dim` wide. The last layer always outputs `feature_dim`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden: Vec<usize>,
}

impl DiscDims {
    /// The first layer is wider than the image: a narrower one leaves most
    /// pixel directions invisible, and the generator fills them with speckle.
    pub fn image(resolution: usize) -> Self {
        DiscDims {
            in_dim: 3 * resolution * resolution,
            depth: 4,
            feature_dim: 128,
            hidden: vec![1024, 256, 128],
        }
    }

    /// One hidden layer: deeper critics on planar data drop modes late in training.
    pub fn points(dim: usize) -> Self {
        DiscDims {
            in_dim: dim,
            depth: 1,
            feature_dim: 128,
            hidden: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad_hidden = !self.hidden.is_empty() && self.hidden.len() + 1 != self.depth;
        if self.in_dim == 0 || self.depth == 0 || self.feature_dim == 0 || bad_hidden || self.hidden.contains(&0) {
            return Err(NetError::InvalidDims(format!("{self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every backbone layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let outs: Vec<usize> = (0..self.depth)
            .map(|i| if i + 1 == self.depth { self.feature_dim } else { self.hidden.get(i).copied().unwrap_or(self.feature_dim) })
            .collect();
        (0..self.depth)
            .map(|i| (if i == 0 { self.in_dim } else { outs[i - 1] }, outs[i]))
            .collect()
    }
}

/// MLP on the flattened input; outputs features, not a logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(dims: &DiscDims, rng: &mut Rng) -> Result<Self, NetError> {
        dims.validate()?;
        let layers = dims
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Linear::init(fan_in, fan_out, 0.0, rng))
            .collect();
        Ok(Backbone { layers })
    }

    pub fn zeros(dims: &DiscDims) -> Result<Self, NetError> {
        dims.validate()?;
        let layers = dims
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Linear::zeros(fan_in, fan_out))
            .collect();
        Ok(Backbone { layers })
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let shape = x.shape();
        let in_dim = self.layers[0].fan_in();
        if shape.len() != 2 || shape[1] != in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "backbone",
                left: shape,
                right: vec![in_dim],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, &format!("disc.backbone.{i}"), h)?.leaky_relu()?;
        }
        Ok(h)
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("disc.backbone.{i}"), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("disc.backbone.{i}"), f);
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        Backbone::visit(self, f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        Backbone::visit_mut(self, f)
    }
}

/// Linear map from backbone features to a real/fake logit.
#[derive(Clone, Debug, PartialEq)]
pub struct RealFakeHead<T: Scalar = f32> {
    pub linear: Linear<T>,
}

impl<T: Scalar> RealFakeHead<T> {
    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.linear.forward(b, "disc.head", features)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub dims: DiscDims,
    pub backbone: Backbone<T>,
    pub head: RealFakeHead<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(dims: &DiscDims, rng: &mut Rng) -> Result<Self, NetError> {
        let backbone = Backbone::init(dims, rng)?;
        let head = RealFakeHead {
            linear: Linear::init(dims.feature_dim, 1, 0.0, rng),
        };
        Ok(Discriminator {
            dims: dims.clone(),
            backbone,
            head,
        })
    }

    pub fn zeros(dims: &DiscDims) -> Result<Self, NetError> {
        Ok(Discriminator {
            dims: dims.clone(),
            backbone: Backbone::zeros(dims)?,
            head: RealFakeHead {
                linear: Linear::zeros(dims.feature_dim, 1),
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        let mut out = Discriminator::<U>::zeros(&self.dims).expect("dims already validated");
        let src: std::collections::BTreeMap<_, _> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        out.load_from(&src).expect("same architecture");
        out
    }

    pub fn features<'t>(&self, b: &mut Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.backbone.forward(b, x)
    }

    /// Real/fake logit; `D(x) = sigmoid(logit)`.
    pub fn discriminate<'t>(&self, b: &mut Binder<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let f = self.backbone.forward(b, x)?;
        self.head.forward(b, f)
    }

    /// Logit and its gradient with respect to the input, `[n, in_dim]`, built as
    /// an ordinary tape expression of the weights so that penalties on it can
    /// be differentiated. Exact because the network is piecewise linear: the
    /// leaky-ReLU slopes are locally constant in the input.
    pub fn logit_with_input_grad<'t>(
        &self,
        b: &mut Binder<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        let tape = b.tape();
        let n = x.shape()[0];
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = x;
        let mut chain = Vec::with_capacity(self.backbone.layers.len());
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            let w = b.bind(&format!("disc.backbone.{i}.weight"), &layer.weight)?;
            let bias = b.bind(&format!("disc.backbone.{i}.bias"), &layer.bias)?;
            let z = h.matmul(w)?.broadcast_add(bias)?;
            let zv = z.value();
            let mask = zv.data().iter().map(|&v| if v > T::zero() { T::one() } else { slope }).collect();
            chain.push((w, tape.constant(Tensor::new(zv.shape().to_vec(), mask)?)?));
            h = z.leaky_relu()?;
        }
        let hw = b.bind("disc.head.weight", &self.head.linear.weight)?;
        let hb = b.bind("disc.head.bias", &self.head.linear.bias)?;
        let logit = h.matmul(hw)?.broadcast_add(hb)?;
        let mut g = tape.constant(Tensor::ones(&[n, 1]))?.matmul_t(hw)?;
        for (w, mask) in chain.into_iter().rev() {
            g = g.mul(mask)?.matmul_t(w)?;
        }
        Ok((logit, g))
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.backbone.visit(f);
        self.head.linear.visit("disc.head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_mut(f);
        self.head.linear.visit_mut("disc.head", f);
    }
}
