use serde::{Deserialize, Serialize};

use super::{Binder, Linear, Module, NetError};
use crate::engine::{Scalar, Tensor, TensorError, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    /// `w' = a ⊙ w + b`
    #[default]
    Light,
    /// Residual two-layer MLP, `w' = w + W2 lrelu(W1 w + b1) + b2`; only for the
    /// architecture ablation.
    Heavy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// One linear layer `F -> 1`.
    #[default]
    Light,
    /// `F -> F -> 1` with a leaky ReLU in between; only for the architecture ablation.
    Heavy,
}

/// Latent transform applied in W. Both kinds start as the exact identity.
#[derive(Clone, Debug, PartialEq)]
pub enum Adaptor<T: Scalar = f32> {
    Light { a: Tensor<T>, b: Tensor<T> },
    Heavy { fc1: Linear<T>, fc2: Linear<T> },
}

impl<T: Scalar> Adaptor<T> {
    /// `a = 1`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Adaptor::Light {
            a: Tensor::ones(&[1, dim]),
            b: Tensor::zeros(&[1, dim]),
        }
    }

    /// The heavy variant; the second layer is zero so the residual branch vanishes.
    pub fn heavy(dim: usize, rng: &mut Rng) -> Self {
        Adaptor::Heavy {
            fc1: Linear::init(dim, dim, 0.0, rng),
            fc2: Linear::zeros(dim, dim),
        }
    }

    pub fn new(kind: AdaptorKind, dim: usize, rng: &mut Rng) -> Self {
        match kind {
            AdaptorKind::Light => Self::identity(dim),
            AdaptorKind::Heavy => Self::heavy(dim, rng),
        }
    }

    pub fn from_vectors(a: &[f64], b: &[f64]) -> Result<Self, NetError> {
        if a.len() != b.len() || a.is_empty() {
            return Err(NetError::InvalidDims(format!(
                "adaptor vectors of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        Ok(Adaptor::Light {
            a: Tensor::from_f64_slice(&[1, a.len()], a)?,
            b: Tensor::from_f64_slice(&[1, b.len()], b)?,
        })
    }

    pub fn kind(&self) -> AdaptorKind {
        match self {
            Adaptor::Light { .. } => AdaptorKind::Light,
            Adaptor::Heavy { .. } => AdaptorKind::Heavy,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Adaptor::Light { a, .. } => a.numel(),
            Adaptor::Heavy { fc1, .. } => fc1.fan_in(),
        }
    }

    pub fn forward<'t>(&self, bind: &mut Binder<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let shape = w.shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "apply_adaptor",
                left: shape,
                right: vec![self.dim()],
            });
        }
        match self {
            Adaptor::Light { a, b } => {
                let a = bind.bind("adaptor.a", a)?;
                let b = bind.bind("adaptor.b", b)?;
                w.mul(a)?.broadcast_add(b)
            }
            Adaptor::Heavy { fc1, fc2 } => {
                let h = fc1.forward(bind, "adaptor.fc1", w)?.leaky_relu()?;
                let r = fc2.forward(bind, "adaptor.fc2", h)?;
                w.add(r)
            }
        }
    }

    /// Applies the adaptor to a plain tensor, outside any training graph.
    pub fn apply(&self, w: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let tape = crate::engine::Tape::new();
        let mut b = Binder::frozen(&tape);
        let v = tape.constant(w.clone())?;
        let out = self.forward(&mut b, v)?.value();
        Ok((*out).clone())
    }
}

impl<T: Scalar> Module<T> for Adaptor<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Adaptor::Light { a, b } => {
                f("adaptor.a", a);
                f("adaptor.b", b);
            }
            Adaptor::Heavy { fc1, fc2 } => {
                fc1.visit("adaptor.fc1", f);
                fc2.visit("adaptor.fc2", f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Adaptor::Light { a, b } => {
                f("adaptor.a", a);
                f("adaptor.b", b);
            }
            Adaptor::Heavy { fc1, fc2 } => {
                fc1.visit_mut("adaptor.fc1", f);
                fc2.visit_mut("adaptor.fc2", f);
            }
        }
    }
}

/// Head on the frozen backbone that scores whether an image carries the target
/// attribute. `forward` returns the logit; `p = sigmoid(logit)`.
#[derive(Clone, Debug, PartialEq)]
pub enum AttributeClassifier<T: Scalar = f32> {
    Light(Linear<T>),
    Heavy { fc1: Linear<T>, fc2: Linear<T> },
}

impl<T: Scalar> AttributeClassifier<T> {
    pub fn new(kind: ClassifierKind, feature_dim: usize, rng: &mut Rng) -> Self {
        match kind {
            ClassifierKind::Light => AttributeClassifier::Light(Linear::init(feature_dim, 1, 0.0, rng)),
            ClassifierKind::Heavy => AttributeClassifier::Heavy {
                fc1: Linear::init(feature_dim, feature_dim, 0.0, rng),
                fc2: Linear::init(feature_dim, 1, 0.0, rng),
            },
        }
    }

    pub fn zeros(kind: ClassifierKind, feature_dim: usize) -> Self {
        match kind {
            ClassifierKind::Light => AttributeClassifier::Light(Linear::zeros(feature_dim, 1)),
            ClassifierKind::Heavy => AttributeClassifier::Heavy {
                fc1: Linear::zeros(feature_dim, feature_dim),
                fc2: Linear::zeros(feature_dim, 1),
            },
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            AttributeClassifier::Light(_) => ClassifierKind::Light,
            AttributeClassifier::Heavy { .. } => ClassifierKind::Heavy,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            AttributeClassifier::Light(l) => l.fan_in(),
            AttributeClassifier::Heavy { fc1, .. } => fc1.fan_in(),
        }
    }

    pub fn forward<'t>(&self, b: &mut Binder<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        match self {
            AttributeClassifier::Light(l) => l.forward(b, "classifier", features),
            AttributeClassifier::Heavy { fc1, fc2 } => {
                let h = fc1.forward(b, "classifier.fc1", features)?.leaky_relu()?;
                fc2.forward(b, "classifier.fc2", h)
            }
        }
    }
}

impl<T: Scalar> Module<T> for AttributeClassifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            AttributeClassifier::Light(l) => l.visit("classifier", f),
            AttributeClassifier::Heavy { fc1, fc2 } => {
                fc1.visit("classifier.fc1", f);
                fc2.visit("classifier.fc2", f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            AttributeClassifier::Light(l) => l.visit_mut("classifier", f),
            AttributeClassifier::Heavy { fc1, fc2 } => {
                fc1.visit_mut("classifier.fc1", f);
                fc2.visit_mut("classifier.fc2", f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::nets::{DiscDims, Discriminator};
    use crate::rng::{stream, Stream};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn adaptor_definition_examples() {
        let w = t(&[1, 2], &[1.0, 1.0]);
        let id = Adaptor::<f64>::identity(2);
        assert_eq!(id.apply(&w).unwrap(), w);

        let ad = Adaptor::<f64>::from_vectors(&[2.0, 1.0], &[0.0, 3.0]).unwrap();
        assert_eq!(ad.apply(&w).unwrap().data(), &[2.0, 4.0]);

        let c = Adaptor::<f64>::from_vectors(&[0.0, 0.0], &[5.0, -1.0]).unwrap();
        let many = t(&[3, 2], &[1.0, 2.0, -4.0, 0.5, 9.0, 9.0]);
        for r in c.apply(&many).unwrap().data().chunks(2) {
            assert_eq!(r, &[5.0, -1.0]);
        }
    }

    #[test]
    fn heavy_adaptor_starts_as_identity() {
        let ad = Adaptor::<f64>::heavy(3, &mut stream(2, Stream::Init));
        let w = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 4.0, -0.5]);
        assert_eq!(ad.apply(&w).unwrap(), w);
    }

    #[test]
    fn adaptor_rejects_dim_mismatch() {
        let ad = Adaptor::<f64>::identity(3);
        assert!(ad.apply(&t(&[1, 2], &[1.0, 2.0])).is_err());
        assert!(Adaptor::<f64>::from_vectors(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adaptor_gradients_reach_a_b_and_w() {
        let ad = Adaptor::<f64>::from_vectors(&[2.0, -1.0], &[0.5, 0.5]).unwrap();
        let tape = Tape::new();
        let mut b = Binder::new(&tape, |_| true);
        let w = tape.param(t(&[1, 2], &[3.0, 4.0])).unwrap();
        let out = ad.forward(&mut b, w).unwrap().sum().unwrap();
        let g = tape.backward(out).unwrap();
        let named = b.collect(&g);
        assert_eq!(named["adaptor.a"].data(), &[3.0, 4.0]);
        assert_eq!(named["adaptor.b"].data(), &[1.0, 1.0]);
        assert_eq!(g.get(w).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn zero_classifier_gives_half() {
        let dims = DiscDims {
            in_dim: 6,
            depth: 2,
            feature_dim: 4,
            hidden: vec![],
        };
        let d = Discriminator::<f64>::init(&dims, &mut stream(1, Stream::Init)).unwrap();
        let phi = AttributeClassifier::<f64>::zeros(ClassifierKind::Light, 4);
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let x = tape.constant(Tensor::full(&[3, 6], 0.2)).unwrap();
        let f = d.features(&mut b, x).unwrap();
        let p = phi.forward(&mut b, f).unwrap().sigmoid().unwrap();
        assert!(p.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classifier_probability_in_open_interval_and_deterministic() {
        let dims = DiscDims {
            in_dim: 6,
            depth: 2,
            feature_dim: 4,
            hidden: vec![],
        };
        let d = Discriminator::<f64>::init(&dims, &mut stream(1, Stream::Init)).unwrap();
        let phi = AttributeClassifier::<f64>::new(ClassifierKind::Light, 4, &mut stream(3, Stream::Init));
        let img = t(&[1, 6], &[0.9, -0.4, 0.1, 0.0, -1.0, 0.5]);
        let run = || {
            let tape = Tape::new();
            let mut b = Binder::frozen(&tape);
            let x = tape.constant(img.clone()).unwrap();
            let f = d.features(&mut b, x).unwrap();
            phi.forward(&mut b, f).unwrap().sigmoid().unwrap().value().item()
        };
        let p = run();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, run());
    }

    #[test]
    fn heavy_classifier_param_names() {
        let phi = AttributeClassifier::<f32>::new(ClassifierKind::Heavy, 4, &mut stream(3, Stream::Init));
        assert_eq!(
            phi.param_names(),
            vec![
                "classifier.fc1.weight",
                "classifier.fc1.bias",
                "classifier.fc2.weight",
                "classifier.fc2.bias"
            ]
        );
    }
}
