//! The `genda` command line: run configuration, exit codes, and one function
//! per subcommand.
//!
//! Exit codes: 0 ok, 1 I/O, 2 config, 3 divergence, 4 shape mismatch,
//! 5 embedder fingerprint mismatch. The run seed comes from `--seed`, else
//! `GENDA_SEED`, else the config file.

pub mod ablate;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapt::{run_adaptation, AdaptConfig, AdaptError, AdaptedArtifacts};
use crate::analysis::{self, AnalysisError};
use crate::domains::{make_reference, parse_overrides, Domain, DomainError, DomainSpec};
use crate::engine::{Tensor, TensorError};
use crate::io::{read_file, write_json, Container, IoError};
use crate::metrics::{self, Embedder, MetricsError, MetricsReport, DEFAULT_K, DEFAULT_SAMPLES};
use crate::nets::{Mode, NetError};
use crate::pretrain::{pretrain, sample_latents, Checkpoint, PretrainConfig, PretrainError};
use crate::rng::{stream, Stream};

pub const SEED_ENV: &str = "GENDA_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per evaluation.
    pub n_samples: usize,
    /// Real samples; `None` uses `n_samples`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_real: Option<usize>,
    pub k: usize,
    pub embedder_seed: u64,
    /// When set, evaluation refuses an embedder with a different fingerprint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder_fingerprint: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: DEFAULT_SAMPLES,
            n_real: None,
            k: DEFAULT_K,
            embedder_seed: 0,
            embedder_fingerprint: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.k == 0 {
            return Err(CliError::Config("eval.k must be positive".into()));
        }
        let n_real = self.n_real.unwrap_or(self.n_samples);
        if self.n_samples <= self.k || n_real <= self.k {
            return Err(CliError::Config(format!(
                "eval.n_samples and eval.n_real must exceed eval.k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{}: not UTF-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    /// A file that was read but is not a valid checkpoint or artifact.
    #[error("{0}")]
    Malformed(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Fingerprint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Malformed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Shape(_) => 4,
            CliError::Fingerprint(_) => 5,
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        let msg = e.to_string();
        match e {
            PretrainError::Config(_) | PretrainError::Domain(_) => CliError::Config(msg),
            PretrainError::Diverged { .. } => CliError::Diverged(msg),
            PretrainError::Io(io) => CliError::Io(io),
            PretrainError::Checkpoint(_) => CliError::Malformed(msg),
            PretrainError::Tensor(_) | PretrainError::Net(_) => CliError::Shape(msg),
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        let msg = e.to_string();
        match e {
            AdaptError::Config(_) | AdaptError::NoReferences => CliError::Config(msg),
            AdaptError::Diverged { .. } => CliError::Diverged(msg),
            AdaptError::Io(io) => CliError::Io(io),
            AdaptError::Artifacts(_) => CliError::Malformed(msg),
            AdaptError::Shape(_) | AdaptError::Tensor(_) | AdaptError::Net(_) => CliError::Shape(msg),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let msg = e.to_string();
        match e {
            MetricsError::Fingerprint { .. } => CliError::Fingerprint(msg),
            MetricsError::Insufficient { .. } => CliError::Config(msg),
            _ => CliError::Shape(msg),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Adapt(a) => a.into(),
            AnalysisError::Metrics(m) => m.into(),
            AnalysisError::Io(io) => CliError::Io(io),
            AnalysisError::Input(m) => CliError::Config(m),
        }
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Shape(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Shape(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "genda", version, about = "One-shot generative domain adaptation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain a source GAN and write its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.json`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a checkpoint to one or more reference images.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Image file (GDAC) or domain overrides such as `glasses=true,seed=7`.
        /// Repeat for multi-reference adaptation.
        #[arg(long = "reference")]
        references: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Run report; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the source or adapted generator against a domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Domain name (`shapes`, `shapes-glasses`, `ring8`, ...) or shapes overrides.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the component, β and architecture ablation grids.
    Ablate(AblateArgs),
    #[command(subcommand)]
    Analyze(Analyze),
    /// Render samples of a domain to a GDAC file.
    RenderDomain {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = crate::domains::DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Source checkpoint; pretrained from the config when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reference for every cell; defaults to the config's first reference.
    #[arg(long)]
    pub reference: Option<String>,
    /// Run cells on separate threads.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Analyze {
    /// PCA of adaptor vectors `[a − 1; b]` from several runs.
    Pca {
        /// `LABEL=PATH` of an artifacts file; repeat per run.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        /// Output prefix for `.svg`, `.csv` and `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint PCA of adapted latents from several runs.
    Latents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long, default_value_t = analysis::DEFAULT_N_CODES)]
        n_codes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Frames interpolated linearly in Z between two random latents.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// `--seed`, else `GENDA_SEED`, else the config value.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

/// A domain by name, or the shapes domain with `key=value` overrides.
pub fn target_domain(s: &str) -> Result<Domain, CliError> {
    if let Ok(d) = Domain::by_name(s) {
        return Ok(d);
    }
    let (o, _) = parse_overrides(s)?;
    Ok(Domain::Shapes(DomainSpec::shapes().with_overrides(s, &o)))
}

/// Loads a reference image from a GDAC file, or renders one from overrides.
pub fn load_reference(spec: &str, resolution: usize) -> Result<Tensor<f32>, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        let c = Container::load(path)?;
        let t = c
            .tensors
            .get("image")
            .or_else(|| c.tensors.values().next())
            .cloned()
            .ok_or_else(|| CliError::Config(format!("{spec}: no image tensor")))?;
        let t = if t.rows() == 1 || t.shape().len() != 2 { t } else { t.row_tensor(0) };
        if t.numel() != 3 * resolution * resolution {
            return Err(CliError::Shape(format!(
                "{spec}: reference of {} values for a {resolution}×{resolution} generator",
                t.numel()
            )));
        }
        return Ok(t);
    }
    let (o, seed) = parse_overrides(spec)?;
    Ok(make_reference(&DomainSpec::shapes(), &o, seed.unwrap_or(0), resolution)?.0)
}

/// Overrides part of the first reference spec, for picking an evaluation domain.
pub fn reference_domain(spec: &str) -> Option<Domain> {
    if Path::new(spec).is_file() {
        return None;
    }
    let (o, _) = parse_overrides(spec).ok()?;
    let name: String = spec.split(',').filter(|p| !p.trim_start().starts_with("seed")).collect::<Vec<_>>().join(",");
    Some(Domain::Shapes(DomainSpec::shapes().with_overrides(&name, &o)))
}

pub fn cmd_pretrain(config_path: &Path, out: &Path, log_path: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    config.validate()?;
    let seed = resolve_seed(seed, config.seed)?;
    let (ck, log) = pretrain(&config.pretrain, seed)?;
    ck.save(out)?;
    let log_path = log_path.map_or_else(|| sidecar(out, ".log.json"), Path::to_path_buf);
    write_json(&log_path, &log)?;
    log::info!("wrote {} ({})", out.display(), &log.checkpoint_fingerprint[..12]);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_adapt(
    checkpoint: &Path,
    config_path: &Path,
    references: &[String],
    out: &Path,
    report: Option<&Path>,
    mode: Option<Mode>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    if !references.is_empty() {
        config.adapt.references = references.to_vec();
    }
    if let Some(m) = mode {
        config.adapt.mode = m;
    }
    config.validate()?;
    let seed = resolve_seed(seed, config.seed)?;
    let ck = load_checkpoint(checkpoint)?;
    let refs = config
        .adapt
        .references
        .iter()
        .map(|s| load_reference(s, ck.resolution()))
        .collect::<Result<Vec<_>, _>>()?;
    if refs.is_empty() {
        return Err(CliError::Config("adapt.references: at least one reference is required".into()));
    }
    log::info!("partition: {}", config.adapt.mode);
    let (art, rep) = run_adaptation(&ck, &refs, &config.adapt, seed)?;
    art.save(out)?;
    write_json(&report.map_or_else(|| sidecar(out, ".report.json"), Path::to_path_buf), &rep)?;
    Ok(())
}

/// Samples `n` images from the source or adapted generator with the latent
/// stream of `seed`.
pub fn sample_model(
    ck: &Checkpoint,
    art: Option<&AdaptedArtifacts>,
    n: usize,
    seed: u64,
) -> Result<Tensor<f32>, CliError> {
    let z = sample_latents(n, ck.latent_dim(), &mut stream(seed, Stream::Latent));
    Ok(match art {
        Some(a) => a.generate(ck, &z)?,
        None => ck.generate(&z)?,
    })
}

/// Metrics of `ck` (adapted by `art` if given) against `domain`.
pub fn evaluate_model(
    ck: &Checkpoint,
    art: Option<&AdaptedArtifacts>,
    domain: &Domain,
    eval: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport, CliError> {
    if let Some(a) = art {
        a.check_source(ck)?;
    }
    if let Some(want) = &eval.embedder_fingerprint {
        let got = Embedder::new(ck.generator.dims.out_dim, eval.embedder_seed)?;
        if got.fingerprint() != want {
            return Err(CliError::Fingerprint(format!(
                "embedder fingerprint {} does not match the pinned {want}",
                got.fingerprint()
            )));
        }
    }
    let fake = sample_model(ck, art, eval.n_samples, seed)?;
    let real = domain.sample(eval.n_real.unwrap_or(eval.n_samples), ck.resolution(), &mut stream(seed, Stream::Data))?;
    if real.cols() != fake.cols() {
        return Err(CliError::Shape(format!(
            "domain {} has samples of {} values, the generator {}",
            domain.name(),
            real.cols(),
            fake.cols()
        )));
    }
    Ok(metrics::evaluate(&real, &fake, eval.embedder_seed, eval.k)?)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    artifacts: Option<&Path>,
    domain: &str,
    out: &Path,
    config_path: Option<&Path>,
    n_samples: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = n_samples {
        config.eval.n_samples = n;
    }
    config.validate()?;
    let domain = target_domain(domain)?;
    let seed = resolve_seed(seed, config.seed)?;
    let ck = load_checkpoint(checkpoint)?;
    let art = artifacts.map(AdaptedArtifacts::load).transpose()?;
    let report = evaluate_model(&ck, art.as_ref(), &domain, &config.eval, seed)?;
    write_json(out, &report)?;
    Ok(())
}

fn parse_runs(runs: &[String]) -> Result<Vec<(String, AdaptedArtifacts)>, CliError> {
    runs.iter()
        .map(|r| {
            let (label, path) = r
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--run expects LABEL=PATH, got {r:?}")))?;
            Ok((label.to_string(), AdaptedArtifacts::load(Path::new(path))?))
        })
        .collect()
}

pub fn cmd_analyze(cmd: &Analyze) -> Result<(), CliError> {
    match cmd {
        Analyze::Pca { runs, out } => {
            let runs = parse_runs(runs)?;
            let rows = runs
                .iter()
                .map(|(_, a)| analysis::adaptor_vector(a))
                .collect::<Result<Vec<_>, _>>()?;
            let mut result = analysis::pca(&rows, 2)?;
            result.labels = runs.iter().map(|(l, _)| l.clone()).collect();
            let silhouette = analysis::silhouette(&result.projections, &result.labels).ok();
            analysis::emit_scatter(&result, out)?;
            write_json(&out.with_extension("json"), &json!({ "pca": result, "silhouette": silhouette }))?;
        }
        Analyze::Latents {
            checkpoint,
            runs,
            n_codes,
            out,
            seed,
        } => {
            let seed = resolve_seed(*seed, 0)?;
            let ck = load_checkpoint(checkpoint)?;
            let runs = parse_runs(runs)?;
            let models: Vec<(String, &AdaptedArtifacts)> = runs.iter().map(|(l, a)| (l.clone(), a)).collect();
            let result = analysis::latent_pca(&ck, &models, *n_codes, seed)?;
            analysis::emit_scatter(&result, out)?;
            write_json(
                &out.with_extension("json"),
                &json!({ "components": result.components, "explained_variance_ratio": result.explained_variance_ratio }),
            )?;
        }
        Analyze::Interp {
            checkpoint,
            artifacts,
            steps,
            out,
            seed,
        } => {
            let seed = resolve_seed(*seed, 0)?;
            let ck = load_checkpoint(checkpoint)?;
            let art = artifacts.as_deref().map(AdaptedArtifacts::load).transpose()?;
            let z = sample_latents(2, ck.latent_dim(), &mut stream(seed, Stream::Latent));
            let frames = analysis::interpolate(&ck, art.as_ref(), z.row(0), z.row(1), *steps)?;
            let mut c = Container::new(json!({ "kind": "frames", "steps": steps, "seed": seed }));
            c.insert("frames", Tensor::stack_rows(&frames)?);
            c.save(out)?;
        }
    }
    Ok(())
}

pub fn cmd_render_domain(domain: &str, n: usize, resolution: usize, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let seed = resolve_seed(seed, 0)?;
    let d = target_domain(domain)?;
    let x = d.sample(n, resolution, &mut stream(seed, Stream::Data))?;
    let mut c = Container::new(json!({ "kind": "samples", "domain": d.name(), "seed": seed, "resolution": resolution }));
    c.insert("images", x);
    c.save(out)?;
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { config, out, log, seed } => cmd_pretrain(&config, &out, log.as_deref(), seed),
        Command::Adapt {
            checkpoint,
            config,
            references,
            out,
            report,
            mode,
            seed,
        } => cmd_adapt(&checkpoint, &config, &references, &out, report.as_deref(), mode, seed),
        Command::Eval {
            checkpoint,
            artifacts,
            domain,
            out,
            config,
            n_samples,
            seed,
        } => cmd_eval(&checkpoint, artifacts.as_deref(), &domain, &out, config.as_deref(), n_samples, seed),
        Command::Ablate(args) => ablate::cmd_ablate(&args),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::RenderDomain {
            domain,
            n,
            resolution,
            out,
            seed,
        } => cmd_render_domain(&domain, n, resolution, &out, seed),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "extra": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"adapt": {"beta": 0.7, "gamma": 1}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 4, "adapt": {"mode": "freeze_d"}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.adapt.mode, Mode::FreezeD);
    }

    #[test]
    fn exit_codes_are_fixed() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Diverged(String::new()).exit_code(), 3);
        assert_eq!(CliError::Shape(String::new()).exit_code(), 4);
        assert_eq!(CliError::Fingerprint(String::new()).exit_code(), 5);
    }

    #[test]
    fn override_domains() {
        let d = target_domain("glasses=true").unwrap();
        let Domain::Shapes(s) = d else { panic!("shapes expected") };
        assert_eq!(s.overrides.glasses, Some(true));
        assert!(target_domain("nonsense").is_err());
        assert_eq!(reference_domain("glasses=true,seed=7").unwrap().name(), "glasses=true");
    }
}
