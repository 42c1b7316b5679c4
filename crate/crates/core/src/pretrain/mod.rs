//! Source-domain GAN pretraining with the non-saturating losses, plus the
//! checkpoint that every later stage starts from.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domains::{Domain, DomainError, DEFAULT_RESOLUTION};
use crate::engine::{AdamState, Scalar, Tape, Tensor, TensorError, Var};
use crate::io::{Container, IoError};
use crate::nets::{adam_update, Binder, DiscDims, Discriminator, Generator, GeneratorDims, Module, NetError};
use crate::rng::{stream, Rng, Stream};

/// Either loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 100.0;
pub const DEFAULT_IMAGE_R1: f64 = 1.0;
pub const DEFAULT_LR: f64 = 2.5e-3;
/// Images collapse to a few positions at [`DEFAULT_LR`]; they train at this rate.
pub const DEFAULT_IMAGE_LR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what} = {value}")]
    Diverged { step: u64, what: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub domain: String,
    pub resolution: usize,
    pub batch_size: usize,
    pub total_real_samples: u64,
    /// Learning rates; `None` picks the default for the domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_d: Option<f64>,
    pub w_avg_decay: f64,
    /// Weight of the `γ/2·‖∇_x D(x)‖²` penalty on real samples; `None` picks
    /// the default for the domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1_gamma: Option<f64>,
    /// Architecture overrides; `None` picks the default for the domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorDims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscDims>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            domain: "shapes".into(),
            resolution: DEFAULT_RESOLUTION,
            batch_size: 16,
            total_real_samples: 200_000,
            lr_g: None,
            lr_d: None,
            w_avg_decay: 0.995,
            r1_gamma: None,
            generator: None,
            discriminator: None,
        }
    }
}

impl PretrainConfig {
    pub fn steps(&self) -> u64 {
        self.total_real_samples.div_ceil(self.batch_size.max(1) as u64)
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: String| Err(PretrainError::Config(m));
        if self.batch_size == 0 {
            return bad("pretrain.batch_size must be positive".into());
        }
        for (name, v) in [("pretrain.lr_g", self.lr_g), ("pretrain.lr_d", self.lr_d)] {
            if let Some(v) = v.filter(|v| !(v.is_finite() && *v > 0.0)) {
                return bad(format!("{name} must be a positive real, got {v}"));
            }
        }
        if !(self.w_avg_decay > 0.0 && self.w_avg_decay < 1.0) {
            return bad(format!("pretrain.w_avg_decay must be in (0, 1), got {}", self.w_avg_decay));
        }
        if let Some(g) = self.r1_gamma.filter(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad(format!("pretrain.r1_gamma must be a nonnegative real, got {g}"));
        }
        let domain = Domain::by_name(&self.domain)
            .map_err(|e| PretrainError::Config(format!("pretrain.domain: {e}")))?;
        if matches!(domain, Domain::Shapes(_))
            && !(crate::domains::MIN_RESOLUTION..=crate::domains::MAX_RESOLUTION).contains(&self.resolution)
        {
            return bad(format!("pretrain.resolution {} out of range", self.resolution));
        }
        let (g, d) = self.dims(&domain);
        g.validate()
            .and_then(|_| d.validate())
            .map_err(|e| PretrainError::Config(e.to_string()))?;
        if g.out_dim != d.in_dim || g.out_dim != domain.sample_dim(self.resolution) {
            return bad(format!(
                "generator output {} / discriminator input {} do not match samples of size {}",
                g.out_dim,
                d.in_dim,
                domain.sample_dim(self.resolution)
            ));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain, PretrainError> {
        Ok(Domain::by_name(&self.domain)?)
    }

    /// Images need the gradient penalty to train stably; the planar domain
    /// trains without one.
    pub fn r1(&self, domain: &Domain) -> f64 {
        self.r1_gamma.unwrap_or(match domain {
            Domain::Shapes(_) => DEFAULT_IMAGE_R1,
            Domain::Gauss2D(_) => 0.0,
        })
    }

    /// `(lr_g, lr_d)` with domain defaults filled in.
    pub fn lrs(&self, domain: &Domain) -> (f64, f64) {
        let default = match domain {
            Domain::Shapes(_) => DEFAULT_IMAGE_LR,
            Domain::Gauss2D(_) => DEFAULT_LR,
        };
        (self.lr_g.unwrap_or(default), self.lr_d.unwrap_or(default))
    }

    pub fn dims(&self, domain: &Domain) -> (GeneratorDims, DiscDims) {
        let (g, d) = match domain {
            Domain::Shapes(_) => (GeneratorDims::image(self.resolution), DiscDims::image(self.resolution)),
            Domain::Gauss2D(_) => (GeneratorDims::points(2), DiscDims::points(2)),
        };
        (
            self.generator.clone().unwrap_or(g),
            self.discriminator.clone().unwrap_or(d),
        )
    }
}

/// Exponential moving average of the mapped latents.
#[derive(Clone, Debug, PartialEq)]
pub struct WAvgTracker {
    pub w_avg: Vec<f32>,
    pub decay: f64,
}

impl WAvgTracker {
    pub fn new(dim: usize, decay: f64) -> Self {
        WAvgTracker {
            w_avg: vec![0.0; dim],
            decay,
        }
    }

    /// `w_avg ← decay · w_avg + (1 − decay) · batch_mean`.
    pub fn update(&mut self, batch_mean: &[f32]) {
        for (a, &m) in self.w_avg.iter_mut().zip(batch_mean) {
            *a = (self.decay * *a as f64 + (1.0 - self.decay) * m as f64) as f32;
        }
    }

    pub fn norm(&self) -> f64 {
        self.w_avg.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Column means of a `[B, D]` tensor, accumulated in `f64`.
pub fn batch_mean(w: &Tensor<f32>) -> Vec<f32> {
    let (b, d) = (w.rows(), w.cols());
    (0..d)
        .map(|j| ((0..b).map(|i| w.data()[i * d + j] as f64).sum::<f64>() / b as f64) as f32)
        .collect()
}

/// `mean(−log σ(fake))`, the non-saturating generator loss.
pub fn loss_g<'t, T: Scalar>(fake_logits: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    fake_logits.log_sigmoid()?.mean()?.neg()
}

/// `mean(−log σ(real)) + mean(−log σ(−fake))`.
pub fn loss_d<'t, T: Scalar>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
    let real = real_logits.log_sigmoid()?.mean()?.neg()?;
    let fake = fake_logits.neg()?.log_sigmoid()?.mean()?.neg()?;
    real.add(fake)
}

/// `[n, dim]` standard normal latents.
pub fn sample_latents(n: usize, dim: usize, rng: &mut Rng) -> Tensor<f32> {
    let data = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![n, dim], data).expect("sized")
}

/// Everything a later stage needs from pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    pub seed: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub w_avg: Tensor<f32>,
}

impl Checkpoint {
    /// Freshly initialized networks from the `init` stream, `w_avg = 0`.
    pub fn init(config: &PretrainConfig, seed: u64) -> Result<Self, PretrainError> {
        config.validate()?;
        let domain = config.domain()?;
        let (gd, dd) = config.dims(&domain);
        let mut rng = stream(seed, Stream::Init);
        let generator = Generator::init(&gd, &mut rng)?;
        let discriminator = Discriminator::init(&dd, &mut rng)?;
        Ok(Checkpoint {
            config: config.clone(),
            seed,
            w_avg: Tensor::zeros(&[1, gd.latent_dim]),
            generator,
            discriminator,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.dims.latent_dim
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn to_container(&self) -> Container {
        let meta = json!({
            "kind": "checkpoint",
            "seed": self.seed,
            "domain": self.config.domain,
            "w_avg_decay": self.config.w_avg_decay,
            "config": self.config,
            "generator_dims": self.generator.dims,
            "discriminator_dims": self.discriminator.dims,
        });
        let mut c = Container::new(meta);
        for (n, t) in self.generator.named_params() {
            c.insert(n, t);
        }
        for (n, t) in self.discriminator.named_params() {
            c.insert(n, t);
        }
        c.insert("w_avg", self.w_avg.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, PretrainError> {
        let bad = |m: &str| PretrainError::Checkpoint(m.to_string());
        if c.metadata.get("kind").and_then(|v| v.as_str()) != Some("checkpoint") {
            return Err(bad("not a checkpoint"));
        }
        let field = |k: &str| c.metadata.get(k).cloned().ok_or_else(|| bad(k));
        let config: PretrainConfig =
            serde_json::from_value(field("config")?).map_err(|e| PretrainError::Checkpoint(e.to_string()))?;
        let seed = field("seed")?.as_u64().ok_or_else(|| bad("seed"))?;
        let gd: GeneratorDims =
            serde_json::from_value(field("generator_dims")?).map_err(|e| PretrainError::Checkpoint(e.to_string()))?;
        let dd: DiscDims = serde_json::from_value(field("discriminator_dims")?)
            .map_err(|e| PretrainError::Checkpoint(e.to_string()))?;
        let mut generator = Generator::zeros(&gd)?;
        generator.load_from(&c.tensors)?;
        let mut discriminator = Discriminator::zeros(&dd)?;
        discriminator.load_from(&c.tensors)?;
        let w_avg = c.tensors.get("w_avg").cloned().ok_or_else(|| bad("w_avg"))?;
        if w_avg.shape() != [1, gd.latent_dim] {
            return Err(bad("w_avg shape"));
        }
        Ok(Checkpoint {
            config,
            seed,
            generator,
            discriminator,
            w_avg,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.to_container().fingerprint()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PretrainError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PretrainError> {
        Self::from_container(&Container::load(path)?)
    }

    /// Images (or points) for latents `z` through the unadapted generator.
    pub fn generate(&self, z: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let zv = tape.constant(z.clone())?;
        let w = self.generator.map_latent(&mut b, zv)?;
        let x = self.generator.synthesize(&mut b, w)?;
        Ok((*x.value()).clone())
    }

    /// `map(z)` for a batch of latents.
    pub fn map(&self, z: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let zv = tape.constant(z.clone())?;
        Ok((*self.generator.map_latent(&mut b, zv)?.value()).clone())
    }

    /// Synthesis from W codes.
    pub fn synthesize(&self, w: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let tape = Tape::new();
        let mut b = Binder::frozen(&tape);
        let wv = tape.constant(w.clone())?;
        Ok((*self.generator.synthesize(&mut b, wv)?.value()).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Gradient penalty added to `loss_d` for the update (not included in it).
    pub r1: f64,
    pub w_avg_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub steps: Vec<StepLog>,
    pub checkpoint_fingerprint: String,
    pub wall_seconds: f64,
}

/// Per-step view handed to observers; `batch_w_mean` is the batch mean that
/// went into the `w_avg` update of this step.
pub struct StepInfo<'a> {
    pub log: &'a StepLog,
    pub batch_w_mean: &'a [f32],
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
}

fn check(step: u64, what: &'static str, v: f64) -> Result<(), PretrainError> {
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(PretrainError::Diverged { step, what, value: v });
    }
    Ok(())
}

fn diverged(step: u64, what: &'static str, e: TensorError) -> PretrainError {
    match e {
        TensorError::NonFinite { .. } => PretrainError::Diverged {
            step,
            what,
            value: f64::NAN,
        },
        other => other.into(),
    }
}

/// One discriminator update (generator constant); returns `L_D` and the
/// gradient penalty on the real batch, which is optimized alongside it when
/// `r1_gamma > 0`.
pub fn d_step(
    g: &Generator,
    d: &mut Discriminator,
    adam: &mut AdamState,
    real: &Tensor<f32>,
    z: &Tensor<f32>,
    r1_gamma: f64,
) -> Result<(f64, f64), TensorError> {
    let tape = Tape::new();
    let (loss, r1, grads) = {
        let mut gb = Binder::frozen(&tape);
        let zv = tape.constant(z.clone())?;
        let w = g.map_latent(&mut gb, zv)?;
        let fake = g.synthesize(&mut gb, w)?;
        // detach: the D step must not see generator parameters as leaves
        let fake = tape.constant((*fake.value()).clone())?;
        let mut db = Binder::new(&tape, |_| true);
        let rv = tape.constant(real.clone())?;
        let (lr, penalty) = if r1_gamma > 0.0 {
            let (lr, gx) = d.logit_with_input_grad(&mut db, rv)?;
            // mean over the batch of the squared norm per sample
            let sq = gx.mul(gx)?.mean()?.scale(real.cols() as f64)?;
            (lr, Some(sq))
        } else {
            (d.discriminate(&mut db, rv)?, None)
        };
        let lf = d.discriminate(&mut db, fake)?;
        let loss = loss_d(lr, lf)?;
        let (total, r1) = match penalty {
            Some(sq) => (loss.add(sq.scale(0.5 * r1_gamma)?)?, sq.value().item().as_f64()),
            None => (loss, 0.0),
        };
        let grads = tape.backward(total)?;
        (loss.value().item().as_f64(), r1, db.collect(&grads))
    };
    adam.begin_step();
    adam_update(adam, d, &grads)?;
    Ok((loss, r1))
}

/// One generator update (discriminator constant); returns `L_G` and the mapped
/// latents of the batch.
pub fn g_step(
    g: &mut Generator,
    d: &Discriminator,
    adam: &mut AdamState,
    z: &Tensor<f32>,
) -> Result<(f64, Tensor<f32>), TensorError> {
    let tape = Tape::new();
    let (loss, w, grads) = {
        let mut gb = Binder::new(&tape, |_| true);
        let zv = tape.constant(z.clone())?;
        let w = g.map_latent(&mut gb, zv)?;
        let fake = g.synthesize(&mut gb, w)?;
        let mut db = Binder::frozen(&tape);
        let lf = d.discriminate(&mut db, fake)?;
        let loss = loss_g(lf)?;
        let grads = tape.backward(loss)?;
        (loss.value().item().as_f64(), (*w.value()).clone(), gb.collect(&grads))
    };
    adam.begin_step();
    adam_update(adam, g, &grads)?;
    Ok((loss, w))
}

/// Alternates one D step and one G step until the discriminator has seen
/// `total_real_samples` real samples. `observe` sees every step.
pub fn pretrain_with(
    config: &PretrainConfig,
    seed: u64,
    observe: &mut dyn FnMut(&StepInfo<'_>),
) -> Result<(Checkpoint, PretrainLog), PretrainError> {
    let started = std::time::Instant::now();
    let mut ck = Checkpoint::init(config, seed)?;
    let domain = config.domain()?;
    let mut data = stream(seed, Stream::Data);
    let mut latent = stream(seed, Stream::Latent);
    let (lr_g, lr_d) = config.lrs(&domain);
    let mut adam_g = AdamState::new(lr_g);
    let mut adam_d = AdamState::new(lr_d);
    let mut tracker = WAvgTracker::new(ck.latent_dim(), config.w_avg_decay);
    let dim = ck.latent_dim();
    let b = config.batch_size;
    let r1_gamma = config.r1(&domain);
    let mut log = PretrainLog::default();

    for step in 0..config.steps() {
        let real = domain.sample(b, config.resolution, &mut data)?;
        let z = sample_latents(b, dim, &mut latent);
        let (ld, r1) = d_step(&ck.generator, &mut ck.discriminator, &mut adam_d, &real, &z, r1_gamma)
            .map_err(|e| diverged(step, "loss_d", e))?;
        check(step, "loss_d", ld)?;

        let z = sample_latents(b, dim, &mut latent);
        let (lg, w) =
            g_step(&mut ck.generator, &ck.discriminator, &mut adam_g, &z).map_err(|e| diverged(step, "loss_g", e))?;
        check(step, "loss_g", lg)?;
        let mean = batch_mean(&w);
        tracker.update(&mean);

        let entry = StepLog {
            step,
            loss_d: ld,
            loss_g: lg,
            r1,
            w_avg_norm: tracker.norm(),
        };
        observe(&StepInfo {
            log: &entry,
            batch_w_mean: &mean,
            generator: &ck.generator,
            discriminator: &ck.discriminator,
        });
        if step % 500 == 0 {
            log::debug!("pretrain step {step}: loss_d {ld:.4} loss_g {lg:.4}");
        }
        log.steps.push(entry);
    }
    ck.w_avg = Tensor::new(vec![1, dim], tracker.w_avg)?;
    log.checkpoint_fingerprint = ck.fingerprint();
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok((ck, log))
}

pub fn pretrain(config: &PretrainConfig, seed: u64) -> Result<(Checkpoint, PretrainLog), PretrainError> {
    pretrain_with(config, seed, &mut |_| {})
}

/// Parameter snapshot keyed by name, for bitwise comparisons.
pub fn snapshot<M: Module<f32> + ?Sized>(m: &M) -> BTreeMap<String, Tensor<f32>> {
    m.named_params().into_iter().collect()
}
