//! One-shot adaptation of a pretrained generator.
//!
//! In `genda` mode everything pretrained stays frozen. A latent adaptor in W,
//! the generator's output projection, and an attribute classifier on the
//! frozen discriminator backbone are trained against each other: the
//! classifier separates augmented references from augmented adapted samples,
//! the adaptor tries to make samples the classifier accepts. Latents are
//! pulled toward `w_avg` by `β` before the adaptor, in training and sampling.
//!
//! `full_finetune` and `freeze_d` instead continue the real/fake game against
//! the references over the corresponding parameter partitions.

pub mod augment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{AdamState, Scalar, Tape, Tensor, TensorError, Var};
use crate::io::{sha256_hex, Container, IoError};
use crate::nets::{
    adam_update, is_trainable, Adaptor, AdaptorKind, AttributeClassifier, Binder, ClassifierKind, Generator, Linear,
    Mode, Module, NetError,
};
use crate::pretrain::{loss_d, loss_g, sample_latents, Checkpoint, DIVERGENCE_LIMIT};
use crate::rng::{stream, Stream};

pub use augment::{augment, augment_tensor, AugmentDraw};

pub const DEFAULT_BETA: f64 = 0.7;
/// Below this, adaptation tends to diverge; such values are allowed but warned about.
pub const BETA_WARN_BELOW: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("at least one reference image is required")]
    NoReferences,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("adaptation diverged at step {step}: {what} = {value}")]
    Diverged { step: u64, what: &'static str, value: f64 },
    #[error("malformed artifacts: {0}")]
    Artifacts(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub beta: f64,
    pub lr_adaptor: f64,
    pub lr_classifier: f64,
    /// Augmentation strength reached on the last step, ramped linearly from 0.
    pub aug_max: f64,
    pub total_real_samples: u64,
    pub batch_size: usize,
    pub mode: Mode,
    pub adaptor: AdaptorKind,
    pub classifier: ClassifierKind,
    /// Reference specs: a GDAC/raw image path or domain overrides such as
    /// `"glasses=true,seed=7"`. Command-line references replace these.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            beta: DEFAULT_BETA,
            lr_adaptor: 1.25e-4,
            lr_classifier: 2.5e-4,
            aug_max: 0.6,
            total_real_samples: 20_000,
            batch_size: 16,
            mode: Mode::Genda,
            adaptor: AdaptorKind::Light,
            classifier: ClassifierKind::Light,
            references: Vec::new(),
        }
    }
}

impl AdaptConfig {
    pub fn steps(&self) -> u64 {
        self.total_real_samples.div_ceil(self.batch_size.max(1) as u64)
    }

    /// Checks ranges; `β < 0.5` is logged, not rejected.
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: String| Err(AdaptError::Config(m));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("adapt.beta must be in (0, 1], got {}", self.beta));
        }
        if self.beta < BETA_WARN_BELOW {
            log::warn!(
                "adapt.beta = {} is below {BETA_WARN_BELOW}; training is expected to diverge",
                self.beta
            );
        }
        for (name, v) in [("adapt.lr_adaptor", self.lr_adaptor), ("adapt.lr_classifier", self.lr_classifier)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a nonnegative real, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.aug_max) {
            return bad(format!("adapt.aug_max must be in [0, 1], got {}", self.aug_max));
        }
        if self.batch_size == 0 {
            return bad("adapt.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Augmentation strength at `step`: 0 on the first step, `aug_max` on the last.
    pub fn strength(&self, step: u64) -> f64 {
        let n = self.steps();
        if n <= 1 {
            return 0.0;
        }
        self.aug_max * step as f64 / (n - 1) as f64
    }
}

/// What gets trained and against which objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Recipe {
    /// Adaptor, output projection and attribute classifier on the frozen
    /// backbone; `truncate` toggles the `β` pull toward `w_avg`.
    Genda { truncate: bool },
    /// Real/fake game against the references over `partition`. With
    /// `adaptor_only` the generator side is limited to the adaptor and output
    /// projection, and the discriminator follows `partition`.
    Adversarial { partition: Mode, adaptor_only: bool },
}

impl Recipe {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Genda => Recipe::Genda { truncate: true },
            other => Recipe::Adversarial {
                partition: other,
                adaptor_only: false,
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Recipe::Genda { truncate: true } => "genda".into(),
            Recipe::Genda { truncate: false } => "genda_untruncated".into(),
            Recipe::Adversarial {
                partition,
                adaptor_only: false,
            } => partition.to_string(),
            Recipe::Adversarial {
                partition,
                adaptor_only: true,
            } => format!("{partition}_adaptor"),
        }
    }
}

/// `β·w + (1 − β)·w_avg`, row-wise.
pub fn truncate_latent(w: &Tensor<f32>, w_avg: &Tensor<f32>, beta: f64) -> Result<Tensor<f32>, AdaptError> {
    let tape = Tape::new();
    let wv = tape.constant(w.clone())?;
    Ok((*truncate_var(wv, w_avg, beta)?.value()).clone())
}

fn truncate_var<'t, T: Scalar>(w: Var<'t, T>, w_avg: &Tensor<f32>, beta: f64) -> Result<Var<'t, T>, AdaptError> {
    let shape = w.shape();
    if shape.len() != 2 || shape[1] != w_avg.numel() {
        return Err(AdaptError::Shape(format!(
            "latents {shape:?} vs w_avg of {} values",
            w_avg.numel()
        )));
    }
    if beta == 1.0 {
        return Ok(w);
    }
    let pull: Vec<f64> = w_avg.data().iter().map(|&v| (1.0 - beta) * v as f64).collect();
    let pull = w.tape().constant(Tensor::from_f64_slice(&[1, pull.len()], &pull)?)?;
    Ok(w.scale(beta)?.broadcast_add(pull)?)
}

/// `mean(−log σ(logit))` over adapted samples.
pub fn loss_adaptor<'t, T: Scalar>(fake_logits: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    loss_g(fake_logits)
}

/// `mean(−log σ(ref)) + mean(−log σ(−fake))`.
pub fn loss_classifier<'t, T: Scalar>(
    reference_logits: Var<'t, T>,
    fake_logits: Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    loss_d(reference_logits, fake_logits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_fingerprint: String,
    pub recipe: Recipe,
    pub seed: u64,
    pub config: AdaptConfig,
    pub reference_hashes: Vec<String>,
}

/// Everything adaptation trained. Frozen weights are not copied; they are
/// identified by `provenance.source_fingerprint`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedArtifacts {
    pub adaptor: Adaptor,
    /// Absent for the adversarial recipes, which use the real/fake head instead.
    pub classifier: Option<AttributeClassifier>,
    pub output_projection: Linear,
    /// Further tuned generator parameters; empty in `genda`.
    pub tuned: BTreeMap<String, Tensor<f32>>,
    pub provenance: Provenance,
}

const TO_RGB: &str = "synthesis.to_rgb";

impl AdaptedArtifacts {
    /// Identity adaptor and the source output projection: generates exactly
    /// what the checkpoint generates.
    pub fn identity(ck: &Checkpoint, provenance: Provenance) -> Self {
        AdaptedArtifacts {
            adaptor: Adaptor::identity(ck.latent_dim()),
            classifier: None,
            output_projection: ck.generator.synthesis.to_rgb.clone(),
            tuned: BTreeMap::new(),
            provenance,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "adapted",
            "provenance": self.provenance,
            "adaptor_kind": self.adaptor.kind(),
            "classifier_kind": self.classifier.as_ref().map(|c| c.kind()),
        }));
        for (n, t) in self.adaptor.named_params() {
            c.insert(n, t);
        }
        if let Some(cl) = &self.classifier {
            for (n, t) in cl.named_params() {
                c.insert(n, t);
            }
        }
        c.insert(format!("{TO_RGB}.weight"), self.output_projection.weight.clone());
        c.insert(format!("{TO_RGB}.bias"), self.output_projection.bias.clone());
        for (n, t) in &self.tuned {
            c.insert(n.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, AdaptError> {
        let bad = |m: String| AdaptError::Artifacts(m);
        let meta = &c.metadata;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("adapted") {
            return Err(bad("not an adaptation artifact".into()));
        }
        let provenance: Provenance = serde_json::from_value(meta.get("provenance").cloned().unwrap_or_default())
            .map_err(|e| bad(format!("provenance: {e}")))?;
        let adaptor_kind: AdaptorKind = serde_json::from_value(meta.get("adaptor_kind").cloned().unwrap_or_default())
            .map_err(|e| bad(format!("adaptor_kind: {e}")))?;
        let classifier_kind: Option<ClassifierKind> =
            serde_json::from_value(meta.get("classifier_kind").cloned().unwrap_or_default())
                .map_err(|e| bad(format!("classifier_kind: {e}")))?;
        let get = |n: &str| c.tensors.get(n).cloned().ok_or_else(|| bad(format!("missing {n}")));

        let mut adaptor = match adaptor_kind {
            AdaptorKind::Light => Adaptor::identity(get("adaptor.a")?.numel()),
            AdaptorKind::Heavy => {
                let d = get("adaptor.fc1.weight")?.shape()[0];
                Adaptor::Heavy {
                    fc1: Linear::zeros(d, d),
                    fc2: Linear::zeros(d, d),
                }
            }
        };
        adaptor.load_from(&c.tensors)?;
        let classifier = match classifier_kind {
            None => None,
            Some(kind) => {
                let first = match kind {
                    ClassifierKind::Light => "classifier.weight",
                    ClassifierKind::Heavy => "classifier.fc1.weight",
                };
                let mut cl = AttributeClassifier::zeros(kind, get(first)?.shape()[0]);
                cl.load_from(&c.tensors)?;
                Some(cl)
            }
        };
        let output_projection = Linear {
            weight: get(&format!("{TO_RGB}.weight"))?,
            bias: get(&format!("{TO_RGB}.bias"))?,
        };
        let tuned = c
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adaptor.") && !n.starts_with("classifier.") && !n.starts_with(TO_RGB))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Ok(AdaptedArtifacts {
            adaptor,
            classifier,
            output_projection,
            tuned,
            provenance,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.to_container().fingerprint()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), AdaptError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AdaptError> {
        Self::from_container(&Container::load(path)?)
    }

    /// Verifies the artifacts were trained from `ck` and fit its shapes.
    pub fn check_source(&self, ck: &Checkpoint) -> Result<(), AdaptError> {
        let mismatch = |m: String| Err(AdaptError::Shape(m));
        if self.adaptor.dim() != ck.latent_dim() {
            return mismatch(format!(
                "adaptor of width {} for latent dim {}",
                self.adaptor.dim(),
                ck.latent_dim()
            ));
        }
        let rgb = &ck.generator.synthesis.to_rgb;
        if self.output_projection.weight.shape() != rgb.weight.shape()
            || self.output_projection.bias.shape() != rgb.bias.shape()
        {
            return mismatch("output projection shape differs from the checkpoint".into());
        }
        if let Some(cl) = &self.classifier {
            if cl.feature_dim() != ck.discriminator.dims.feature_dim {
                return mismatch("classifier width differs from the backbone features".into());
            }
        }
        let params: BTreeMap<_, _> = ck.generator.named_params().into_iter().collect();
        for (n, t) in &self.tuned {
            match params.get(n) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return mismatch(format!("tuned parameter {n} does not fit the generator")),
            }
        }
        if self.provenance.source_fingerprint != ck.fingerprint() {
            return mismatch(format!(
                "artifacts were trained from checkpoint {}, not {}",
                short(&self.provenance.source_fingerprint),
                short(&ck.fingerprint())
            ));
        }
        Ok(())
    }

    /// The checkpoint generator with the tuned parameters swapped in; fails
    /// unless `ck` is the source checkpoint.
    pub fn generator(&self, ck: &Checkpoint) -> Result<Generator, AdaptError> {
        self.check_source(ck)?;
        let mut g = ck.generator.clone();
        let mut params = self.tuned.clone();
        params.insert(format!("{TO_RGB}.weight"), self.output_projection.weight.clone());
        params.insert(format!("{TO_RGB}.bias"), self.output_projection.bias.clone());
        let mut err = None;
        g.visit_mut(&mut |n, t| {
            if let Some(p) = params.get(n) {
                if p.shape() == t.shape() {
                    *t = p.clone();
                } else {
                    err = Some(n.to_string());
                }
            }
        });
        match err {
            Some(n) => Err(AdaptError::Shape(format!("tuned parameter {n}"))),
            None => Ok(g),
        }
    }

    /// `β` of the pipeline: the configured value when the recipe trains with
    /// truncation, 1 otherwise.
    pub fn beta(&self) -> f64 {
        match self.provenance.recipe {
            Recipe::Genda { truncate: true } => self.provenance.config.beta,
            _ => 1.0,
        }
    }

    /// Transformed latents `A(β·map(z) + (1 − β)·w_avg)`.
    pub fn latents(&self, ck: &Checkpoint, z: &Tensor<f32>) -> Result<Tensor<f32>, AdaptError> {
        let g = self.generator(ck)?;
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let zv = tape.constant(z.clone())?;
        let w = truncate_var(g.map_latent(&mut b, zv)?, &ck.w_avg, self.beta())?;
        Ok((*self.adaptor.forward(&mut b, w)?.value()).clone())
    }

    /// Adapted samples for latents `z` through the full pipeline.
    pub fn generate(&self, ck: &Checkpoint, z: &Tensor<f32>) -> Result<Tensor<f32>, AdaptError> {
        let g = self.generator(ck)?;
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let x = adapted_images(&g, &self.adaptor, &mut b, z, Some((&ck.w_avg, self.beta())))?;
        Ok((*x.value()).clone())
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn adapted_images<'t>(
    g: &Generator,
    adaptor: &Adaptor,
    b: &mut Binder<'t, f32>,
    z: &Tensor<f32>,
    truncation: Option<(&Tensor<f32>, f64)>,
) -> Result<Var<'t, f32>, AdaptError> {
    let zv = b.tape().constant(z.clone())?;
    let mut w = g.map_latent(b, zv)?;
    if let Some((w_avg, beta)) = truncation {
        w = truncate_var(w, w_avg, beta)?;
    }
    let w = adaptor.forward(b, w)?;
    Ok(g.synthesize(b, w)?)
}

/// Hash of a reference image's values, for provenance.
pub fn reference_hash(x: &Tensor<f32>) -> String {
    sha256_hex(&x.le_bytes())
}

/// Flattens references to rows of `dim` values.
fn reference_rows(refs: &[Tensor<f32>], dim: usize) -> Result<Vec<Tensor<f32>>, AdaptError> {
    if refs.is_empty() {
        return Err(AdaptError::NoReferences);
    }
    refs.iter()
        .map(|r| {
            if r.numel() != dim {
                return Err(AdaptError::Shape(format!(
                    "reference of shape {:?} for samples of {dim} values",
                    r.shape()
                )));
            }
            Ok(r.clone().reshape(vec![1, dim])?)
        })
        .collect()
}

/// Positive batch for `step`: references cycled round-robin.
fn positive_batch(rows: &[Tensor<f32>], step: u64, batch: usize) -> Result<Tensor<f32>, TensorError> {
    let k = rows.len() as u64;
    let picked: Vec<Tensor<f32>> = (0..batch as u64)
        .map(|i| rows[((step * batch as u64 + i) % k) as usize].clone())
        .collect();
    Tensor::stack_rows(&picked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptStepLog {
    pub step: u64,
    pub strength: f64,
    /// Classifier loss in `genda`, discriminator loss otherwise.
    pub loss_critic: f64,
    /// Adaptor loss in `genda`, generator loss otherwise.
    pub loss_generator: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub mode: Mode,
    pub recipe: String,
    pub multi_reference: bool,
    pub references: usize,
    pub steps: u64,
    pub log: Vec<AdaptStepLog>,
    pub artifacts_fingerprint: String,
    pub provenance: Provenance,
    pub wall_seconds: f64,
}

fn check(step: u64, what: &'static str, v: f64) -> Result<(), AdaptError> {
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(AdaptError::Diverged { step, what, value: v });
    }
    Ok(())
}

fn diverged(step: u64, what: &'static str) -> impl Fn(AdaptError) -> AdaptError {
    move |e| match e {
        AdaptError::Tensor(TensorError::NonFinite { .. }) => AdaptError::Diverged {
            step,
            what,
            value: f64::NAN,
        },
        other => other,
    }
}

/// Mutable training state for the `genda` recipe.
pub struct GendaState {
    pub adaptor: Adaptor,
    pub classifier: AttributeClassifier,
    /// Copy of the source generator; only its output projection is updated.
    pub generator: Generator,
    pub adam_adaptor: AdamState,
    pub adam_classifier: AdamState,
}

impl GendaState {
    pub fn new(ck: &Checkpoint, config: &AdaptConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        GendaState {
            adaptor: Adaptor::new(config.adaptor, ck.latent_dim(), &mut rng),
            classifier: AttributeClassifier::new(config.classifier, ck.discriminator.dims.feature_dim, &mut rng),
            generator: ck.generator.clone(),
            adam_adaptor: AdamState::new(config.lr_adaptor),
            adam_classifier: AdamState::new(config.lr_classifier),
        }
    }
}

/// One `genda` iteration: a classifier update on augmented references versus
/// augmented (detached) adapted samples, then an adaptor and output
/// projection update through the frozen backbone and the updated classifier.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step(
    ck: &Checkpoint,
    state: &mut GendaState,
    positives: &Tensor<f32>,
    truncation: Option<f64>,
    strength: f64,
    latent: &mut crate::rng::Rng,
    aug: &mut crate::rng::Rng,
) -> Result<(f64, f64), AdaptError> {
    let r = ck.resolution();
    let n = positives.rows();
    let dim = ck.latent_dim();
    let trunc = truncation.map(|beta| (&ck.w_avg, beta));
    let d = &ck.discriminator;

    let z = sample_latents(n, dim, latent);
    let loss_c = {
        let tape = Tape::new();
        let mut gb = Binder::frozen(&tape);
        let fake = adapted_images(&state.generator, &state.adaptor, &mut gb, &z, trunc)?;
        let fake = tape.constant((*fake.value()).clone())?;
        let pos = tape.constant(positives.clone())?;
        let pos = augment(pos, strength, r, aug)?;
        let fake = augment(fake, strength, r, aug)?;
        let mut cb = Binder::new(&tape, |name| name.starts_with("classifier."));
        let fp = d.features(&mut cb, pos)?;
        let lp = state.classifier.forward(&mut cb, fp)?;
        let ff = d.features(&mut cb, fake)?;
        let lf = state.classifier.forward(&mut cb, ff)?;
        let loss = loss_classifier(lp, lf)?;
        let grads = cb.collect(&tape.backward(loss)?);
        state.adam_classifier.begin_step();
        adam_update(&mut state.adam_classifier, &mut state.classifier, &grads)?;
        loss.value().item() as f64
    };

    let z = sample_latents(n, dim, latent);
    let loss_a = {
        let tape = Tape::new();
        let mut gb = Binder::new(&tape, |name| {
            is_trainable(Mode::Genda, name, d.dims.depth) && !name.starts_with("classifier.")
        });
        let fake = adapted_images(&state.generator, &state.adaptor, &mut gb, &z, trunc)?;
        let fake = augment(fake, strength, r, aug)?;
        let mut fb = Binder::frozen(&tape);
        let f = d.features(&mut fb, fake)?;
        let logit = state.classifier.forward(&mut fb, f)?;
        let loss = loss_adaptor(logit)?;
        let grads = gb.collect(&tape.backward(loss)?);
        state.adam_adaptor.begin_step();
        adam_update(&mut state.adam_adaptor, &mut state.adaptor, &grads)?;
        adam_update(&mut state.adam_adaptor, &mut state.generator, &grads)?;
        loss.value().item() as f64
    };
    Ok((loss_c, loss_a))
}

/// Mutable training state for the adversarial recipes.
pub struct AdversarialState {
    pub adaptor: Adaptor,
    pub generator: Generator,
    pub discriminator: crate::nets::Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

fn generator_trainable(recipe: Recipe, depth: usize) -> impl Fn(&str) -> bool {
    move |name: &str| match recipe {
        Recipe::Adversarial { adaptor_only: true, .. } => {
            name.starts_with("adaptor.") || name.starts_with(TO_RGB)
        }
        Recipe::Adversarial { partition, .. } => {
            !name.starts_with("adaptor.") && is_trainable(partition, name, depth)
        }
        Recipe::Genda { .. } => is_trainable(Mode::Genda, name, depth) && !name.starts_with("classifier."),
    }
}

/// One real/fake iteration against the references: a discriminator update on
/// the trainable part of `partition`, then a generator update.
pub fn adversarial_step(
    recipe: Recipe,
    r: usize,
    state: &mut AdversarialState,
    positives: &Tensor<f32>,
    strength: f64,
    latent: &mut crate::rng::Rng,
    aug: &mut crate::rng::Rng,
) -> Result<(f64, f64), AdaptError> {
    let Recipe::Adversarial { partition, .. } = recipe else {
        return Err(AdaptError::Config("adversarial_step needs an adversarial recipe".into()));
    };
    let n = positives.rows();
    let dim = state.generator.dims.latent_dim;
    let depth = state.discriminator.dims.depth;

    let z = sample_latents(n, dim, latent);
    let ld = {
        let tape = Tape::new();
        let mut gb = Binder::frozen(&tape);
        let fake = adapted_images(&state.generator, &state.adaptor, &mut gb, &z, None)?;
        let fake = tape.constant((*fake.value()).clone())?;
        let pos = tape.constant(positives.clone())?;
        let pos = augment(pos, strength, r, aug)?;
        let fake = augment(fake, strength, r, aug)?;
        let mut db = Binder::new(&tape, |name| is_trainable(partition, name, depth));
        let lr = state.discriminator.discriminate(&mut db, pos)?;
        let lf = state.discriminator.discriminate(&mut db, fake)?;
        let loss = loss_d(lr, lf)?;
        let grads = db.collect(&tape.backward(loss)?);
        state.adam_d.begin_step();
        adam_update(&mut state.adam_d, &mut state.discriminator, &grads)?;
        loss.value().item() as f64
    };

    let z = sample_latents(n, dim, latent);
    let lg = {
        let tape = Tape::new();
        let mut gb = Binder::new(&tape, generator_trainable(recipe, depth));
        let fake = adapted_images(&state.generator, &state.adaptor, &mut gb, &z, None)?;
        let fake = augment(fake, strength, r, aug)?;
        let mut db = Binder::frozen(&tape);
        let lf = state.discriminator.discriminate(&mut db, fake)?;
        let loss = loss_g(lf)?;
        let grads = gb.collect(&tape.backward(loss)?);
        state.adam_g.begin_step();
        adam_update(&mut state.adam_g, &mut state.adaptor, &grads)?;
        adam_update(&mut state.adam_g, &mut state.generator, &grads)?;
        loss.value().item() as f64
    };
    Ok((ld, lg))
}

/// Adapts `ck` to `references` with the recipe `config.mode` selects.
pub fn run_adaptation(
    ck: &Checkpoint,
    references: &[Tensor<f32>],
    config: &AdaptConfig,
    seed: u64,
) -> Result<(AdaptedArtifacts, AdaptReport), AdaptError> {
    run_recipe(ck, references, config, seed, Recipe::for_mode(config.mode))
}

/// Adapts with an explicit recipe; used directly by the ablation grids.
pub fn run_recipe(
    ck: &Checkpoint,
    references: &[Tensor<f32>],
    config: &AdaptConfig,
    seed: u64,
    recipe: Recipe,
) -> Result<(AdaptedArtifacts, AdaptReport), AdaptError> {
    let started = std::time::Instant::now();
    config.validate()?;
    let dim = ck.generator.dims.out_dim;
    let rows = reference_rows(references, dim)?;
    let r = ck.resolution();
    if 3 * r * r != dim {
        return Err(AdaptError::Config(format!(
            "adaptation needs an image checkpoint, got samples of {dim} values"
        )));
    }
    let provenance = Provenance {
        source_fingerprint: ck.fingerprint(),
        recipe,
        seed,
        config: config.clone(),
        reference_hashes: references.iter().map(reference_hash).collect(),
    };
    if references.len() > 1 {
        log::info!("multi-reference mode: {} references, cycled round-robin", references.len());
    }
    log::info!("adapting with recipe {} ({} steps)", recipe.label(), config.steps());

    let mut latent = stream(seed, Stream::Latent);
    let mut aug = stream(seed, Stream::Augment);
    let mut log = Vec::with_capacity(config.steps() as usize);
    let b = config.batch_size;

    let artifacts = match recipe {
        Recipe::Genda { truncate } => {
            let mut state = GendaState::new(ck, config, seed);
            let trunc = truncate.then_some(config.beta);
            for step in 0..config.steps() {
                let s = config.strength(step);
                let pos = positive_batch(&rows, step, b)?;
                let (lc, la) = adapt_step(ck, &mut state, &pos, trunc, s, &mut latent, &mut aug)
                    .map_err(diverged(step, "loss_classifier"))?;
                check(step, "loss_classifier", lc)?;
                check(step, "loss_adaptor", la)?;
                log.push(AdaptStepLog {
                    step,
                    strength: s,
                    loss_critic: lc,
                    loss_generator: la,
                });
            }
            AdaptedArtifacts {
                adaptor: state.adaptor,
                classifier: Some(state.classifier),
                output_projection: state.generator.synthesis.to_rgb.clone(),
                tuned: BTreeMap::new(),
                provenance,
            }
        }
        Recipe::Adversarial { .. } => {
            let mut rng = stream(seed, Stream::Init);
            let mut state = AdversarialState {
                adaptor: Adaptor::new(config.adaptor, ck.latent_dim(), &mut rng),
                generator: ck.generator.clone(),
                discriminator: ck.discriminator.clone(),
                adam_g: AdamState::new(config.lr_adaptor),
                adam_d: AdamState::new(config.lr_classifier),
            };
            for step in 0..config.steps() {
                let s = config.strength(step);
                let pos = positive_batch(&rows, step, b)?;
                let (ld, lg) = adversarial_step(recipe, r, &mut state, &pos, s, &mut latent, &mut aug)
                    .map_err(diverged(step, "loss_d"))?;
                check(step, "loss_d", ld)?;
                check(step, "loss_g", lg)?;
                log.push(AdaptStepLog {
                    step,
                    strength: s,
                    loss_critic: ld,
                    loss_generator: lg,
                });
            }
            let source: BTreeMap<_, _> = ck.generator.named_params().into_iter().collect();
            let trainable = generator_trainable(recipe, ck.discriminator.dims.depth);
            let tuned = state
                .generator
                .named_params()
                .into_iter()
                .filter(|(n, t)| trainable(n) && !n.starts_with(TO_RGB) && source.get(n) != Some(t))
                .collect();
            AdaptedArtifacts {
                adaptor: state.adaptor,
                classifier: None,
                output_projection: state.generator.synthesis.to_rgb.clone(),
                tuned,
                provenance,
            }
        }
    };
    let report = AdaptReport {
        mode: config.mode,
        recipe: recipe.label(),
        multi_reference: references.len() > 1,
        references: references.len(),
        steps: config.steps(),
        log,
        artifacts_fingerprint: artifacts.fingerprint(),
        provenance: artifacts.provenance.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((artifacts, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f32> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    fn scalar_loss(f: impl for<'t> Fn(&'t Tape<f64>) -> Var<'t, f64>) -> f64 {
        let tape = Tape::new();
        f(&tape).value().item()
    }

    #[test]
    fn truncation_examples() {
        let w = t(&[1, 2], &[1.0, 1.0]);
        let avg = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(truncate_latent(&w, &avg, 1.0).unwrap(), w);
        assert_eq!(truncate_latent(&w, &avg, 0.7).unwrap().data(), &[0.7f32, 0.7]);
        let avg = t(&[1, 2], &[0.25, -3.0]);
        let w = t(&[2, 2], &[5.0, 6.0, -1.0, 2.0]);
        assert_eq!(truncate_latent(&w, &avg, 0.0).unwrap().data(), &[0.25f32, -3.0, 0.25, -3.0]);
        assert!(truncate_latent(&w, &t(&[1, 3], &[0.0; 3]), 0.5).is_err());
    }

    #[test]
    fn adaptor_loss_examples() {
        let v = |x: &[f64]| {
            let x = x.to_vec();
            scalar_loss(move |tape| loss_adaptor(tape.constant(Tensor::from_vec(x.clone())).unwrap()).unwrap())
        };
        assert!((v(&[0.0]) - 0.693147).abs() < 1e-6);
        assert!((v(&[0.0, 0.0]) - 0.693147).abs() < 1e-6);
        assert!(v(&[40.0]) < 1e-15);
    }

    #[test]
    fn classifier_loss_examples() {
        let v = |r: &[f64], f: &[f64]| {
            let (r, f) = (r.to_vec(), f.to_vec());
            scalar_loss(move |tape| {
                let a = tape.constant(Tensor::from_vec(r.clone())).unwrap();
                let b = tape.constant(Tensor::from_vec(f.clone())).unwrap();
                loss_classifier(a, b).unwrap()
            })
        };
        assert!((v(&[0.0], &[0.0]) - 1.386294).abs() < 1e-6);
        assert!(v(&[40.0], &[-40.0]) < 1e-15);
        assert_eq!(v(&[0.3], &[-0.2]), v(&[0.3; 16], &[-0.2]));
    }

    #[test]
    fn ramp_endpoints() {
        let c = AdaptConfig::default();
        assert_eq!(c.steps(), 1250);
        assert_eq!(c.strength(0), 0.0);
        assert_eq!(c.strength(c.steps() - 1), 0.6);
    }

    #[test]
    fn beta_range() {
        let mut c = AdaptConfig {
            beta: 1.5,
            ..Default::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("adapt.beta"), "{e}");
        c.beta = 0.0;
        assert!(c.validate().is_err());
        // below 0.5 is only a warning
        c.beta = 0.3;
        assert!(c.validate().is_ok());
        c.beta = 1.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn round_robin_positives() {
        let rows = vec![t(&[1, 2], &[0.0, 0.0]), t(&[1, 2], &[1.0, 1.0])];
        let b = positive_batch(&rows, 1, 3).unwrap();
        // step 1 starts at index 3, i.e. the second reference
        assert_eq!(b.data(), &[1.0f32, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn eq5_order_matters() {
        let adaptor = Adaptor::<f32>::from_vectors(&[2.0, 0.5], &[1.0, -1.0]).unwrap();
        let w = t(&[1, 2], &[0.3, -0.8]);
        let avg = t(&[1, 2], &[0.1, 0.4]);
        let a_then_t = truncate_latent(&adaptor.apply(&w).unwrap(), &avg, 0.7).unwrap();
        let t_then_a = adaptor.apply(&truncate_latent(&w, &avg, 0.7).unwrap()).unwrap();
        assert_ne!(a_then_t, t_then_a);
    }
}
