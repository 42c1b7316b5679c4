//! Evaluation: random-network embeddings, Fréchet distance, kNN
//! precision/recall and oracle-based attribute statistics.

pub mod linalg;

use serde::{Deserialize, Serialize};

use crate::domains::{extract_attributes, resolution_of, ShapeKind, MAX_CENTER, MIN_CENTER};
use crate::engine::{Tape, Tensor, TensorError};
use crate::nets::{Backbone, Binder, DiscDims, NetError};
use crate::rng::{stream, Stream};

pub use linalg::{sqrtm_psd, sym_eigen, SymEigen};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_SAMPLES: usize = 5000;
/// Position histogram is `POSITION_BINS × POSITION_BINS` over the center range.
pub const POSITION_BINS: usize = 4;
const EMBED_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("feature sets come from different embedders ({0} vs {1})")]
    Fingerprint(String, String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need more than {need} points per set, got {got}")]
    Insufficient { need: usize, got: usize },
    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Row-major `n × dim` features tagged with the embedder that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub fingerprint: String,
}

impl FeatureSet {
    /// Features produced outside any embedder (tests, raw points).
    pub fn raw(rows: &[Vec<f64>], fingerprint: &str) -> Result<Self, MetricsError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MetricsError::Shape("ragged rows".into()));
        }
        Ok(FeatureSet {
            n: rows.len(),
            dim,
            data: rows.concat(),
            fingerprint: fingerprint.to_string(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_compatible(&self, other: &FeatureSet) -> Result<(), MetricsError> {
        if self.fingerprint != other.fingerprint {
            return Err(MetricsError::Fingerprint(self.fingerprint.clone(), other.fingerprint.clone()));
        }
        if self.dim != other.dim {
            return Err(MetricsError::Shape(format!("feature dims {} vs {}", self.dim, other.dim)));
        }
        Ok(())
    }
}

/// Architecture of the fixed embedder for inputs of width `in_dim`: the image
/// discriminator backbone when `in_dim = 3R²`, the planar one otherwise.
pub fn embedder_dims(in_dim: usize) -> DiscDims {
    let as_image = Tensor::<f32>::zeros(&[in_dim]);
    match resolution_of(&as_image) {
        Some(r) if in_dim > 3 => DiscDims::image(r),
        _ => DiscDims::points(in_dim),
    }
}

/// A never-trained discriminator backbone used as a fixed feature map.
#[derive(Clone, Debug)]
pub struct Embedder {
    backbone: Backbone,
    fingerprint: String,
}

impl Embedder {
    pub fn new(in_dim: usize, seed: u64) -> Result<Self, MetricsError> {
        let dims = embedder_dims(in_dim);
        let backbone = Backbone::init(&dims, &mut stream(seed, Stream::Init))?;
        let mut bytes = serde_json::to_vec(&dims).expect("dims serialize");
        bytes.extend_from_slice(&seed.to_le_bytes());
        backbone.visit(&mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&t.le_bytes());
        });
        Ok(Embedder {
            backbone,
            fingerprint: crate::io::sha256_hex(&bytes),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn embed(&self, x: &Tensor<f32>) -> Result<FeatureSet, MetricsError> {
        let in_dim = self.backbone.layers[0].fan_in();
        if x.shape().len() != 2 || x.cols() != in_dim {
            return Err(MetricsError::Shape(format!("expected [n, {in_dim}], got {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * self.backbone.feature_dim());
        for start in (0..x.rows()).step_by(EMBED_CHUNK) {
            let end = (start + EMBED_CHUNK).min(x.rows());
            let rows: Vec<Tensor<f32>> = (start..end).map(|i| x.row_tensor(i)).collect();
            let tape = Tape::new();
            let mut b = Binder::frozen(&tape);
            let f = self.backbone.forward(&mut b, tape.constant(Tensor::stack_rows(&rows)?)?)?;
            data.extend(f.value().data().iter().map(|&v| v as f64));
        }
        Ok(FeatureSet {
            n: x.rows(),
            dim: self.backbone.feature_dim(),
            data,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

pub fn embed(x: &Tensor<f32>, embedder_seed: u64) -> Result<FeatureSet, MetricsError> {
    if x.shape().len() != 2 {
        return Err(MetricsError::Shape(format!("expected [n, d], got {:?}", x.shape())));
    }
    Embedder::new(x.cols(), embedder_seed)?.embed(x)
}

/// Mean and covariance of a Gaussian fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl Moments {
    pub fn fit(f: &FeatureSet) -> Self {
        if f.n < f.dim + 1 {
            log::warn!("fitting a {}-d Gaussian to only {} points; covariance is singular", f.dim, f.n);
        }
        let (mean, cov) = linalg::mean_cov(&f.data, f.n, f.dim);
        Moments { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2})`.
pub fn frechet_from_moments(a: &Moments, b: &Moments) -> Result<f64, MetricsError> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(MetricsError::Shape(format!("moment dims {} vs {}", d, b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = sqrtm_psd(&a.cov, d)?;
    let inner = linalg::matmul(&linalg::matmul(&sa, &b.cov, d), &sa, d);
    let cross = sym_eigen(&inner, d)?.values.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>();
    let value = mean_term + linalg::trace(&a.cov, d) + linalg::trace(&b.cov, d) - 2.0 * cross;
    Ok(value.max(0.0))
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    a.check_compatible(b)?;
    frechet_from_moments(&Moments::fit(a), &Moments::fit(b))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest neighbour in the same set.
pub fn knn_radii(f: &FeatureSet, k: usize) -> Vec<f64> {
    (0..f.n)
        .map(|i| {
            let mut d: Vec<f64> = (0..f.n).filter(|&j| j != i).map(|j| sq_dist(f.row(i), f.row(j))).collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &FeatureSet, radii: &[f64], probe: &FeatureSet) -> f64 {
    let inside = (0..probe.n)
        .filter(|&i| (0..manifold.n).any(|j| sq_dist(probe.row(i), manifold.row(j)) <= radii[j]))
        .count();
    inside as f64 / probe.n as f64
}

/// kNN-manifold precision (fakes inside the real manifold) and recall (reals
/// inside the fake manifold).
pub fn precision_recall(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64), MetricsError> {
    real.check_compatible(fake)?;
    if k == 0 {
        return Err(MetricsError::Insufficient { need: 1, got: 0 });
    }
    for n in [real.n, fake.n] {
        if n <= k {
            return Err(MetricsError::Insufficient { need: k, got: n });
        }
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}

/// Oracle readout over a batch of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub n: usize,
    pub glasses: f64,
    pub sketch: f64,
    pub square: f64,
    pub circle: f64,
    pub undefined: f64,
    pub mean_confidence: f64,
    /// Counts over the row-major position grid, defined shapes only.
    pub position_hist: Vec<usize>,
    pub position_entropy: f64,
    pub max_position_entropy: f64,
    pub shape_entropy: f64,
}

pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn position_bin(cx: f64, cy: f64) -> usize {
    let bin = |v: f64| {
        let t = (v - MIN_CENTER) / (MAX_CENTER - MIN_CENTER) * POSITION_BINS as f64;
        (t.floor().max(0.0) as usize).min(POSITION_BINS - 1)
    };
    bin(cy) * POSITION_BINS + bin(cx)
}

/// `images` is `[n, 3R²]`.
pub fn attribute_report(images: &Tensor<f32>) -> AttributeStats {
    let n = if images.shape().len() == 2 { images.rows() } else { 0 };
    let (mut glasses, mut sketch, mut square, mut circle, mut conf) = (0, 0, 0, 0, 0.0);
    let mut hist = vec![0usize; POSITION_BINS * POSITION_BINS];
    for i in 0..n {
        let a = extract_attributes(&images.row_tensor(i));
        glasses += a.glasses as usize;
        sketch += a.sketch as usize;
        conf += a.confidence;
        match a.shape_kind {
            Some(kind) => {
                if kind == ShapeKind::Square {
                    square += 1;
                } else {
                    circle += 1;
                }
                hist[position_bin(a.cx, a.cy)] += 1;
            }
            None => {}
        }
    }
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    AttributeStats {
        n,
        glasses: frac(glasses),
        sketch: frac(sketch),
        square: frac(square),
        circle: frac(circle),
        undefined: frac(n - square - circle),
        mean_confidence: if n == 0 { 0.0 } else { conf / n as f64 },
        position_entropy: entropy(&hist),
        max_position_entropy: ((POSITION_BINS * POSITION_BINS) as f64).ln(),
        shape_entropy: entropy(&[square, circle]),
        position_hist: hist,
    }
}

/// Fixed field names of the `eval` JSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub attribute_stats: Option<AttributeStats>,
}

/// Full report of `fake` against `real`, both `[n, d]`. Attribute statistics
/// are included when the rows are images.
pub fn evaluate(real: &Tensor<f32>, fake: &Tensor<f32>, embedder_seed: u64, k: usize) -> Result<MetricsReport, MetricsError> {
    if real.shape().len() != 2 || fake.shape().len() != 2 || real.cols() != fake.cols() {
        return Err(MetricsError::Shape(format!("{:?} vs {:?}", real.shape(), fake.shape())));
    }
    let embedder = Embedder::new(real.cols(), embedder_seed)?;
    let (fr, ff) = (embedder.embed(real)?, embedder.embed(fake)?);
    let (precision, recall) = precision_recall(&fr, &ff, k)?;
    let is_image = resolution_of(&fake.row_tensor(0)).is_some_and(|r| r > 1);
    Ok(MetricsReport {
        frechet: frechet_distance(&fr, &ff)?,
        precision,
        recall,
        k,
        n_real: real.rows(),
        n_fake: fake.rows(),
        attribute_stats: is_image.then(|| attribute_report(fake)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{render_batch, sample_params, DomainSpec, Overrides};
    use rand::Rng as _;

    fn fs(rows: &[Vec<f64>]) -> FeatureSet {
        FeatureSet::raw(rows, "t").unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_fingerprinted() {
        let x = render_batch(&sample_params(&DomainSpec::shapes(), 3, &mut stream(1, Stream::Data)), 8).unwrap();
        let a = embed(&x, 5).unwrap();
        assert_eq!(a, embed(&x, 5).unwrap());
        assert_eq!((a.n, a.dim), (3, 128));
        let b = embed(&x, 6).unwrap();
        assert_ne!(a.fingerprint, b.fingerprint);
        assert!(matches!(frechet_distance(&a, &b), Err(MetricsError::Fingerprint(..))));
        let one = embed(&Tensor::stack_rows(&[x.row_tensor(0)]).unwrap(), 5).unwrap();
        assert_eq!((one.n, one.dim), (1, 128));
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let mut rng = stream(3, Stream::Data);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        assert!(frechet_distance(&fs(&rows), &fs(&rows)).unwrap() < 1e-8);
    }

    #[test]
    fn frechet_closed_forms() {
        let eye = Moments { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0] };
        let shifted = Moments { mean: vec![1.0, 0.0], ..eye.clone() };
        assert!((frechet_from_moments(&eye, &shifted).unwrap() - 1.0).abs() < 1e-12);
        // diag(1,1) vs diag(4,1): (1 + 4 − 2·2) + (1 + 1 − 2·1) = 1
        let wide = Moments { mean: vec![0.0, 0.0], cov: vec![4.0, 0.0, 0.0, 1.0] };
        assert!((frechet_from_moments(&eye, &wide).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_edge_cases() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert_eq!(precision_recall(&fs(&rows), &fs(&rows), 3).unwrap(), (1.0, 1.0));
        let far: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] + 1e5, r[1]]).collect();
        assert_eq!(precision_recall(&fs(&rows), &fs(&far), 3).unwrap(), (0.0, 0.0));
        assert!(matches!(
            precision_recall(&fs(&rows[..3]), &fs(&rows), 3),
            Err(MetricsError::Insufficient { .. })
        ));
    }

    #[test]
    fn attribute_report_on_rendered_sets() {
        let spec = DomainSpec::shapes().with_overrides("g", &Overrides::glasses());
        let x = render_batch(&sample_params(&spec, 50, &mut stream(2, Stream::Data)), 16).unwrap();
        let s = attribute_report(&x);
        assert_eq!(s.glasses, 1.0);
        assert_eq!(s.undefined, 0.0);

        let same = Tensor::stack_rows(&vec![x.row_tensor(0); 20]).unwrap();
        let s = attribute_report(&same);
        assert_eq!(s.position_entropy, 0.0);
        assert_eq!(s.shape_entropy, 0.0);
    }

    #[test]
    fn position_bins_cover_the_center_range() {
        assert_eq!(position_bin(0.25, 0.25), 0);
        assert_eq!(position_bin(0.75, 0.75), 15);
        assert_eq!(position_bin(0.3, 0.6), 2 * 4);
        assert_eq!(position_bin(0.0, 1.0), 12);
    }
}
