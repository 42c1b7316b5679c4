//! Gradient-check cases shared by the proptest suite and the acceptance run.
//! Each case takes a flat input vector and a seed and returns the relative error
//! of the tape gradient against central differences, in f64.

use std::rc::Rc;

use genda_core::adapt::{loss_adaptor, loss_classifier};
use genda_core::engine::{grad_check, Tensor, TensorError, Var};
use genda_core::nets::{Adaptor, AttributeClassifier, Binder, ClassifierKind, DiscDims, Discriminator, Generator, GeneratorDims};
use genda_core::pretrain::{loss_d, loss_g};
use genda_core::rng::{stream, Stream};

pub const TOL: f64 = 1e-6;
const EPS: f64 = 1e-6;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: usize,
    pub check: fn(&[f64], u64) -> f64,
}

/// Moves values within 1e-2 of 0 or ±0.5 (the kinks used below) off the breakpoint.
pub fn away_from_kinks(v: Vec<f64>) -> Vec<f64> {
    v.into_iter()
        .map(|mut x| {
            for k in [0.0, 0.5, -0.5] {
                if (x - k).abs() < 1e-2 {
                    x = k + 2e-2;
                }
            }
            x
        })
        .collect()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(shape, v).unwrap()
}

/// Weighted sum so every output coordinate contributes a distinct slope.
fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = y.tape().constant(t(&y.shape(), &w))?;
    y.mul(w)?.sum()
}

/// Elements `lo..lo+n` of the flat input as a `shape` tensor.
fn slice<'t>(v: Var<'t, f64>, lo: usize, shape: &[usize]) -> Result<Var<'t, f64>, TensorError> {
    let n: usize = shape.iter().product();
    v.gather(Rc::from((lo..lo + n).collect::<Vec<_>>()), shape.to_vec())
}

fn worst(errs: &[f64]) -> f64 {
    errs.iter().fold(0.0, |m, e| m.max(*e))
}

fn matmul(x: &[f64], _: u64) -> f64 {
    grad_check(|v| project(slice(v, 0, &[2, 3])?.matmul(slice(v, 6, &[3, 2])?)?), &t(&[12], x), EPS)
}

fn matmul_t(x: &[f64], _: u64) -> f64 {
    grad_check(|v| project(slice(v, 0, &[2, 3])?.matmul_t(slice(v, 6, &[2, 3])?)?), &t(&[12], x), EPS)
}

fn add_sub_mul(x: &[f64], _: u64) -> f64 {
    let c = x[6..12].to_vec();
    grad_check(
        |v| {
            let k = v.tape().constant(t(&[2, 3], &c))?;
            let v = slice(v, 0, &[2, 3])?;
            project(v.add(k)?.mul(v)?.sub(k.mul(v)?)?)
        },
        &t(&[6], &x[..6]),
        EPS,
    )
}

fn broadcast_add(x: &[f64], _: u64) -> f64 {
    grad_check(
        |v| {
            let m = slice(v, 0, &[2, 3])?;
            project(m.broadcast_add(slice(v, 6, &[1, 3])?)?.mul(m)?)
        },
        &t(&[9], x),
        EPS,
    )
}

fn scale_neg(x: &[f64], _: u64) -> f64 {
    let c = 1.5 * x[5];
    grad_check(|v| project(v.scale(c)?.neg()?.mul(v)?), &t(&[1, 5], &x[..5]), EPS)
}

fn leaky_relu(x: &[f64], _: u64) -> f64 {
    grad_check(|v| project(v.leaky_relu()?), &t(&[2, 4], x), EPS)
}

fn tanh_sigmoid(x: &[f64], _: u64) -> f64 {
    let x = t(&[2, 3], x);
    worst(&[
        grad_check(|v| project(v.tanh()?), &x, EPS),
        grad_check(|v| project(v.sigmoid()?), &x, EPS),
        grad_check(|v| project(v.scale(4.0)?.log_sigmoid()?), &x, EPS),
    ])
}

fn clamp(x: &[f64], _: u64) -> f64 {
    grad_check(|v| project(v.clamp(-0.5, 0.5)?), &t(&[2, 4], x), EPS)
}

fn mean_sum(x: &[f64], _: u64) -> f64 {
    grad_check(|v| v.mul(v)?.mean()?.add(v.sum()?), &t(&[2, 3], x), EPS)
}

fn l2_normalize(x: &[f64], _: u64) -> f64 {
    let s = 0.5 + 1.75 * x[8].abs();
    grad_check(|v| project(v.l2_normalize(s)?), &t(&[2, 4], &x[..8]), EPS)
}

fn gather(x: &[f64], _: u64) -> f64 {
    let idx: Rc<[usize]> = Rc::from(vec![4, 0, 0, 2, 3, 4]);
    grad_check(|v| project(v.gather(idx.clone(), vec![2, 3])?), &t(&[5], x), EPS)
}

/// Real logits are the first four inputs, fake logits the last four.
fn losses(x: &[f64], _: u64) -> f64 {
    let x = t(&[8], x);
    worst(&[
        grad_check(|v| loss_d(slice(v, 0, &[4, 1])?, slice(v, 4, &[4, 1])?), &x, EPS),
        grad_check(|v| loss_g(slice(v, 4, &[4, 1])?), &x, EPS),
        grad_check(|v| loss_adaptor(slice(v, 4, &[4, 1])?), &x, EPS),
        grad_check(|v| loss_classifier(slice(v, 0, &[4, 1])?, slice(v, 4, &[4, 1])?), &x, EPS),
    ])
}

fn tiny_nets(seed: u64) -> (Generator<f64>, Discriminator<f64>) {
    let mut rng = stream(seed, Stream::Init);
    let gd = GeneratorDims {
        latent_dim: 4,
        mapping_depth: 2,
        hidden: vec![3, 5, 5],
        out_dim: 12,
    };
    let dd = DiscDims {
        in_dim: 12,
        depth: 2,
        feature_dim: 6,
        hidden: vec![7],
    };
    (
        Generator::<f32>::init(&gd, &mut rng).unwrap().cast(),
        Discriminator::<f32>::init(&dd, &mut rng).unwrap().cast(),
    )
}

fn critic_of_latent<'t>(g: &Generator<f64>, d: &Discriminator<f64>, z: Var<'t, f64>) -> Result<Var<'t, f64>, TensorError> {
    let mut b = Binder::frozen(z.tape());
    let w = g.map_latent(&mut b, z)?;
    let x = g.synthesize(&mut b, w)?;
    d.discriminate(&mut b, x)
}

fn class_logit<'t>(
    d: &Discriminator<f64>,
    c: &AttributeClassifier<f64>,
    b: &mut Binder<'t, f64>,
    x: Var<'t, f64>,
) -> Result<Var<'t, f64>, TensorError> {
    let f = d.features(b, x)?;
    c.forward(b, f)
}

/// Pretraining losses through the full tiny generator and critic, as a function of z.
fn network_losses(x: &[f64], seed: u64) -> f64 {
    let (g, d) = tiny_nets(seed);
    let z = t(&[2, 4], &x[..8]);
    worst(&[
        grad_check(|v| loss_g(critic_of_latent(&g, &d, v)?), &z, EPS),
        grad_check(
            |v| {
                let fake = critic_of_latent(&g, &d, v)?;
                loss_d(fake.scale(-0.5)?, fake)
            },
            &z,
            EPS,
        ),
    ])
}

/// Adaptor objective: truncation, heavy adaptor, frozen synthesis and critic, as a function of w.
fn adaptor_objective(x: &[f64], seed: u64) -> f64 {
    let (g, d) = tiny_nets(seed);
    let mut rng = stream(seed, Stream::Latent);
    let adaptor = Adaptor::<f64>::heavy(4, &mut rng);
    let classifier = AttributeClassifier::<f64>::new(ClassifierKind::Light, 6, &mut rng);
    let beta = 0.5 + x[8].abs() / 4.0;
    let pull: Vec<f64> = [0.1, -0.2, 0.3, 0.05].iter().map(|a| (1.0 - beta) * a).collect();
    grad_check(
        |v| {
            let mut b = Binder::frozen(v.tape());
            let wt = v.scale(beta)?.broadcast_add(v.tape().constant(t(&[1, 4], &pull))?)?;
            let wa = adaptor.forward(&mut b, wt)?;
            let img = g.synthesize(&mut b, wa)?;
            let f = d.features(&mut b, img)?;
            loss_adaptor(classifier.forward(&mut b, f)?)
        },
        &t(&[2, 4], &x[..8]),
        EPS,
    )
}

/// Classifier objective: heavy head on frozen features, reference and fake images from one input.
fn classifier_objective(x: &[f64], seed: u64) -> f64 {
    let (_, d) = tiny_nets(seed);
    let mut rng = stream(seed, Stream::Latent);
    let classifier = AttributeClassifier::<f64>::new(ClassifierKind::Heavy, 6, &mut rng);
    grad_check(
        |v| {
            let mut b = Binder::frozen(v.tape());
            let r = class_logit(&d, &classifier, &mut b, slice(v, 0, &[1, 12])?)?;
            let f = class_logit(&d, &classifier, &mut b, slice(v, 12, &[1, 12])?)?;
            loss_classifier(r, f)
        },
        &t(&[24], x),
        EPS,
    )
}

pub fn cases() -> Vec<GradCase> {
    let c = |name, inputs, check| GradCase { name, inputs, check };
    vec![
        c("matmul", 12, matmul as fn(&[f64], u64) -> f64),
        c("matmul_t", 12, matmul_t),
        c("add_sub_mul", 12, add_sub_mul),
        c("broadcast_add", 9, broadcast_add),
        c("scale_neg", 6, scale_neg),
        c("leaky_relu", 8, leaky_relu),
        c("tanh_sigmoid_log_sigmoid", 6, tanh_sigmoid),
        c("clamp", 8, clamp),
        c("mean_sum", 6, mean_sum),
        c("l2_normalize", 9, l2_normalize),
        c("gather", 5, gather),
        c("gan_adaptor_classifier_losses", 8, losses),
        c("network_losses_in_latent", 8, network_losses),
        c("adaptor_objective_in_w", 9, adaptor_objective),
        c("classifier_objective_in_images", 24, classifier_objective),
    ]
}
