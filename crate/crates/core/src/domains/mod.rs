//! Procedural synthetic domains with exact attribute oracles.
//!
//! Images are flat-colored shapes on a colored background, optionally with a
//! dark "glasses" band and/or a desaturated "sketch" style. Every factor is
//! drawn independently, so the oracle in [`extract_attributes`] can measure
//! both the transferred attribute and the diversity that survives adaptation.

mod oracle;
mod render;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{Tensor, TensorError};
use crate::rng::{stream, Rng, Stream};

pub use oracle::{extract_attributes, resolution_of, Attributes};
pub use render::{hsv_to_rgb, luminance, palette, render, MAX_RESOLUTION, MIN_RESOLUTION};

pub const MIN_SIZE: f64 = 0.15;
pub const MAX_SIZE: f64 = 0.3;
pub const MIN_CENTER: f64 = 0.25;
pub const MAX_CENTER: f64 = 0.75;
pub const DEFAULT_RESOLUTION: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("invalid shape parameters: {0}")]
    InvalidParams(String),
    #[error("resolution {0} outside {MIN_RESOLUTION}..={MAX_RESOLUTION}")]
    Resolution(usize),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("bad override {0:?}")]
    BadOverride(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub bg_hue: f64,
    pub shape_kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Radius (half side for squares), as a fraction of the image width.
    pub size: f64,
    pub glasses: bool,
    pub sketch: bool,
}

impl ShapeParams {
    pub fn validate(&self) -> Result<(), DomainError> {
        let finite = [self.bg_hue, self.cx, self.cy, self.size].iter().all(|v| v.is_finite());
        if !finite {
            return Err(DomainError::InvalidParams(format!("non-finite field in {self:?}")));
        }
        if !(0.0..1.0).contains(&self.bg_hue) {
            return Err(DomainError::InvalidParams(format!("bg_hue {} not in [0, 1)", self.bg_hue)));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(DomainError::InvalidParams(format!(
                "center ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        if self.size < 0.0 {
            return Err(DomainError::InvalidParams(format!("negative size {}", self.size)));
        }
        Ok(())
    }
}

/// Pins individual fields of [`ShapeParams`]; unset fields follow the spec's laws.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bg_hue: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_kind: Option<ShapeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glasses: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<bool>,
}

impl Overrides {
    pub fn glasses() -> Self {
        Overrides {
            glasses: Some(true),
            ..Default::default()
        }
    }

    pub fn sketch() -> Self {
        Overrides {
            sketch: Some(true),
            ..Default::default()
        }
    }

    /// Fields set in `other` win.
    pub fn merged(&self, other: &Overrides) -> Overrides {
        Overrides {
            bg_hue: other.bg_hue.or(self.bg_hue),
            shape_kind: other.shape_kind.or(self.shape_kind),
            cx: other.cx.or(self.cx),
            cy: other.cy.or(self.cy),
            size: other.size.or(self.size),
            glasses: other.glasses.or(self.glasses),
            sketch: other.sketch.or(self.sketch),
        }
    }

    fn apply(&self, p: &mut ShapeParams) {
        if let Some(v) = self.bg_hue {
            p.bg_hue = v;
        }
        if let Some(v) = self.shape_kind {
            p.shape_kind = v;
        }
        if let Some(v) = self.cx {
            p.cx = v;
        }
        if let Some(v) = self.cy {
            p.cy = v;
        }
        if let Some(v) = self.size {
            p.size = v;
        }
        if let Some(v) = self.glasses {
            p.glasses = v;
        }
        if let Some(v) = self.sketch {
            p.sketch = v;
        }
    }
}

/// Parses `key=value` pairs separated by commas, e.g. `glasses=true,seed=7`.
/// The optional `seed` key is returned separately.
pub fn parse_overrides(s: &str) -> Result<(Overrides, Option<u64>), DomainError> {
    let mut o = Overrides::default();
    let mut seed = None;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || DomainError::BadOverride(part.to_string());
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        let (k, v) = (k.trim(), v.trim());
        let real = || v.parse::<f64>().map_err(|_| bad());
        let flag = || v.parse::<bool>().map_err(|_| bad());
        match k {
            "glasses" => o.glasses = Some(flag()?),
            "sketch" => o.sketch = Some(flag()?),
            "bg_hue" | "hue" => o.bg_hue = Some(real()?),
            "cx" => o.cx = Some(real()?),
            "cy" => o.cy = Some(real()?),
            "size" => o.size = Some(real()?),
            "shape" | "shape_kind" => {
                o.shape_kind = Some(match v {
                    "circle" => ShapeKind::Circle,
                    "square" => ShapeKind::Square,
                    _ => return Err(bad()),
                })
            }
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok((o, seed))
}

/// Independent laws over every [`ShapeParams`] field: hue, center and size
/// uniform, kind/glasses/sketch Bernoulli, optionally pinned by overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub circle_prob: f64,
    pub glasses_prob: f64,
    pub sketch_prob: f64,
    #[serde(default)]
    pub overrides: Overrides,
}

impl DomainSpec {
    /// The source domain: a minority of images carry glasses or the sketch style.
    pub fn shapes() -> Self {
        DomainSpec {
            name: "shapes".into(),
            circle_prob: 0.5,
            glasses_prob: 0.3,
            sketch_prob: 0.2,
            overrides: Overrides::default(),
        }
    }

    pub fn with_overrides(&self, name: &str, overrides: &Overrides) -> Self {
        DomainSpec {
            name: name.into(),
            overrides: self.overrides.merged(overrides),
            ..self.clone()
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DomainError> {
        let base = Self::shapes();
        match name {
            "shapes" => Ok(base),
            "shapes-glasses" => Ok(base.with_overrides(name, &Overrides::glasses())),
            "shapes-sketch" => Ok(base.with_overrides(name, &Overrides::sketch())),
            "shapes-plain" => Ok(base.with_overrides(
                name,
                &Overrides {
                    glasses: Some(false),
                    sketch: Some(false),
                    ..Default::default()
                },
            )),
            other => Err(DomainError::UnknownDomain(other.to_string())),
        }
    }
}

/// I.i.d. draws from `spec`. Every sample consumes the same number of draws
/// whatever the overrides, so pinning a field leaves the others unchanged.
pub fn sample_params(spec: &DomainSpec, n: usize, rng: &mut Rng) -> Vec<ShapeParams> {
    (0..n)
        .map(|_| {
            let bg_hue: f64 = rng.random();
            let circle = rng.random_bool(spec.circle_prob.clamp(0.0, 1.0));
            let cx = rng.random_range(MIN_CENTER..MAX_CENTER);
            let cy = rng.random_range(MIN_CENTER..MAX_CENTER);
            let size = rng.random_range(MIN_SIZE..MAX_SIZE);
            let glasses = rng.random_bool(spec.glasses_prob.clamp(0.0, 1.0));
            let sketch = rng.random_bool(spec.sketch_prob.clamp(0.0, 1.0));
            let mut p = ShapeParams {
                bg_hue,
                shape_kind: if circle { ShapeKind::Circle } else { ShapeKind::Square },
                cx,
                cy,
                size,
                glasses,
                sketch,
            };
            spec.overrides.apply(&mut p);
            p
        })
        .collect()
}

/// Renders a batch as `[n, 3 R²]`.
pub fn render_batch(params: &[ShapeParams], r: usize) -> Result<Tensor<f32>, DomainError> {
    let imgs = params
        .iter()
        .map(|p| Ok(render(p, r)?.reshape(vec![1, 3 * r * r])?))
        .collect::<Result<Vec<_>, DomainError>>()?;
    if imgs.is_empty() {
        return Ok(Tensor::new(vec![0, 3 * r * r], vec![])?);
    }
    Ok(Tensor::stack_rows(&imgs)?)
}

/// One rendered target image with its ground truth, drawn from `spec` with
/// `overrides` pinned, using the `data` stream of `seed`.
pub fn make_reference(
    spec: &DomainSpec,
    overrides: &Overrides,
    seed: u64,
    r: usize,
) -> Result<(Tensor<f32>, ShapeParams), DomainError> {
    let spec = spec.with_overrides(&spec.name, overrides);
    let mut rng = stream(seed, Stream::Data);
    let p = sample_params(&spec, 1, &mut rng).remove(0);
    Ok((render(&p, r)?, p))
}

/// Equal-weight isotropic Gaussian mixture in the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gauss2DSpec {
    pub name: String,
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl Gauss2DSpec {
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Self {
        let centers = (0..modes)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / modes as f64;
                [radius * t.cos(), radius * t.sin()]
            })
            .collect();
        Gauss2DSpec {
            name: format!("ring{modes}"),
            centers,
            sigma,
        }
    }

    /// Eight modes on a circle of radius 0.75, `sigma = 0.08`.
    pub fn ring8() -> Self {
        Self::ring(8, 0.75, 0.08)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.centers.is_empty() {
            return Err(DomainError::InvalidMixture("no centers".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DomainError::InvalidMixture(format!("sigma {}", self.sigma)));
        }
        for (i, a) in self.centers.iter().enumerate() {
            if self.centers[..i].contains(a) {
                return Err(DomainError::InvalidMixture(format!("duplicate center {a:?}")));
            }
        }
        Ok(())
    }

    /// Index of the nearest center and its distance.
    pub fn nearest(&self, x: [f64; 2]) -> (usize, f64) {
        self.centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("validated nonempty")
    }
}

/// `[n, 2]` points drawn from the mixture.
pub fn sample_2d(spec: &Gauss2DSpec, n: usize, rng: &mut Rng) -> Result<Tensor<f32>, DomainError> {
    spec.validate()?;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = spec.centers[rng.random_range(0..spec.centers.len())];
        for v in c {
            let e: f64 = rng.sample(StandardNormal);
            data.push((v + spec.sigma * e) as f32);
        }
    }
    Ok(Tensor::new(vec![n, 2], data)?)
}

/// Either image domain or planar mixture, selected by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Shapes(DomainSpec),
    Gauss2D(Gauss2DSpec),
}

impl Domain {
    pub fn by_name(name: &str) -> Result<Self, DomainError> {
        match name {
            "ring8" => Ok(Domain::Gauss2D(Gauss2DSpec::ring8())),
            other => Ok(Domain::Shapes(DomainSpec::by_name(other)?)),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Domain::Shapes(s) => &s.name,
            Domain::Gauss2D(g) => &g.name,
        }
    }

    /// Flattened sample dimension: `3 R²` for images, 2 for points.
    pub fn sample_dim(&self, r: usize) -> usize {
        match self {
            Domain::Shapes(_) => 3 * r * r,
            Domain::Gauss2D(_) => 2,
        }
    }

    /// `[n, sample_dim]` real samples.
    pub fn sample(&self, n: usize, r: usize, rng: &mut Rng) -> Result<Tensor<f32>, DomainError> {
        match self {
            Domain::Shapes(s) => render_batch(&sample_params(s, n, rng), r),
            Domain::Gauss2D(g) => sample_2d(g, n, rng),
        }
    }
}
