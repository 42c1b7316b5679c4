//! PCA of learned adaptor vectors and of adapted latents, latent
//! interpolation, silhouette scores, and SVG/CSV scatter output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptError, AdaptedArtifacts};
use crate::engine::Tensor;
use crate::io::{write_file, IoError};
use crate::metrics::linalg::{mean_cov, sym_eigen};
use crate::metrics::MetricsError;
use crate::nets::Adaptor;
use crate::pretrain::{sample_latents, Checkpoint};
use crate::rng::{stream, Stream};

pub const DEFAULT_N_CODES: usize = 2000;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit rows, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// `n × c` coordinates of the centered data.
    pub projections: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
    /// One label per row; empty when unlabeled.
    #[serde(default)]
    pub labels: Vec<String>,
}

/// `[a − 1; b]`, the adaptor's deviation from the identity.
pub fn adaptor_vector(artifacts: &AdaptedArtifacts) -> Result<Vec<f64>, AnalysisError> {
    match &artifacts.adaptor {
        Adaptor::Light { a, b } => Ok(a
            .data()
            .iter()
            .map(|&v| v as f64 - 1.0)
            .chain(b.data().iter().map(|&v| v as f64))
            .collect()),
        Adaptor::Heavy { .. } => Err(AnalysisError::Input(
            "adaptor vectors exist only for the light adaptor".into(),
        )),
    }
}

/// Top-`c` principal components of the rows (centered, not standardized).
pub fn pca(rows: &[Vec<f64>], c: usize) -> Result<PcaResult, AnalysisError> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(AnalysisError::Input(format!("pca needs at least 2 rows, got {n}")));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Input("rows of unequal length".into()));
    }
    if c == 0 || c > d.min(n - 1) {
        return Err(AnalysisError::Input(format!(
            "{c} components requested for {n} rows of dimension {d}"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let (mean, cov) = mean_cov(&flat, n, d);
    let eig = sym_eigen(&cov, d)?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let components: Vec<Vec<f64>> = eig.vectors[..c].to_vec();
    let explained_variance_ratio = eig.values[..c]
        .iter()
        .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
        .collect();
    let projections = rows
        .iter()
        .map(|r| {
            components
                .iter()
                .map(|u| u.iter().zip(r).zip(&mean).map(|((ui, x), m)| ui * (x - m)).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult {
        components,
        projections,
        explained_variance_ratio,
        mean,
        labels: Vec::new(),
    })
}

/// Adapted latents of every model for the same `n_codes` draws of `z`,
/// jointly projected; labels name the model each row came from.
pub fn latent_pca(
    ck: &Checkpoint,
    models: &[(String, &AdaptedArtifacts)],
    n_codes: usize,
    seed: u64,
) -> Result<PcaResult, AnalysisError> {
    if models.is_empty() {
        return Err(AnalysisError::Input("no models given".into()));
    }
    let z = sample_latents(n_codes, ck.latent_dim(), &mut stream(seed, Stream::Latent));
    let mut rows = Vec::with_capacity(n_codes * models.len());
    let mut labels = Vec::with_capacity(rows.capacity());
    for (label, art) in models {
        art.check_source(ck)?;
        let w = art.latents(ck, &z)?;
        for i in 0..w.rows() {
            rows.push(w.row(i).iter().map(|&v| v as f64).collect());
            labels.push(label.clone());
        }
    }
    let mut out = pca(&rows, 2.min(ck.latent_dim()))?;
    out.labels = labels;
    Ok(out)
}

/// Frames along the straight line from `z1` to `z2` in Z, each synthesized
/// through the full adapted pipeline (or the source generator when
/// `artifacts` is `None`). Endpoints use `z1` and `z2` themselves.
pub fn interpolate(
    ck: &Checkpoint,
    artifacts: Option<&AdaptedArtifacts>,
    z1: &[f32],
    z2: &[f32],
    steps: usize,
) -> Result<Vec<Tensor<f32>>, AnalysisError> {
    let d = ck.latent_dim();
    if z1.len() != d || z2.len() != d {
        return Err(AnalysisError::Input(format!(
            "latents of length {} and {} for dimension {d}",
            z1.len(),
            z2.len()
        )));
    }
    if steps < 2 {
        return Err(AnalysisError::Input("interpolation needs at least 2 steps".into()));
    }
    let mut data = Vec::with_capacity(steps * d);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        if i == 0 {
            data.extend_from_slice(z1);
        } else if i == steps - 1 {
            data.extend_from_slice(z2);
        } else {
            data.extend(
                z1.iter()
                    .zip(z2)
                    .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32),
            );
        }
    }
    let z = Tensor::new(vec![steps, d], data).map_err(AdaptError::from)?;
    let x = match artifacts {
        Some(art) => {
            art.check_source(ck)?;
            art.generate(ck, &z)?
        }
        None => ck.generate(&z).map_err(AdaptError::from)?,
    };
    Ok((0..steps).map(|i| x.row_tensor(i)).collect())
}

/// Mean silhouette coefficient over all points; points in singleton
/// clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[String]) -> Result<f64, AnalysisError> {
    let n = points.len();
    if n != labels.len() || n < 2 {
        return Err(AnalysisError::Input("silhouette needs ≥ 2 labeled points".into()));
    }
    let mut names: Vec<&String> = labels.iter().collect();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(AnalysisError::Input("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![(0.0, 0usize); names.len()];
        for j in 0..n {
            if i != j {
                let k = names.binary_search(&&labels[j]).expect("collected");
                sums[k].0 += dist(&points[i], &points[j]);
                sums[k].1 += 1;
            }
        }
        let own = names.binary_search(&&labels[i]).expect("collected");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|(k, s)| *k != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// CSV with columns `label,pc1,pc2`.
pub fn scatter_csv(result: &PcaResult) -> Result<String, AnalysisError> {
    let mut s = String::from("label,pc1,pc2\n");
    for (i, p) in result.projections.iter().enumerate() {
        if p.len() < 2 {
            return Err(AnalysisError::Input("scatter needs 2 components".into()));
        }
        let label = result.labels.get(i).map_or("", String::as_str);
        writeln!(s, "{label},{},{}", p[0], p[1]).expect("string write");
    }
    Ok(s)
}

/// Self-contained SVG scatter of the first two components, one color per label.
pub fn scatter_svg(result: &PcaResult) -> Result<String, AnalysisError> {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 30.0;
    let pts: Vec<(f64, f64)> = result
        .projections
        .iter()
        .map(|p| match p.as_slice() {
            [x, y, ..] => Ok((*x, *y)),
            _ => Err(AnalysisError::Input("scatter needs 2 components".into())),
        })
        .collect::<Result<_, _>>()?;
    let mut labels: Vec<&str> = Vec::new();
    for i in 0..pts.len() {
        let l = result.labels.get(i).map_or("", String::as_str);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#).expect("string write");
    for (i, &(x, y)) in pts.iter().enumerate() {
        let l = result.labels.get(i).map_or("", String::as_str);
        let color = PALETTE[labels.iter().position(|&m| m == l).expect("collected") % PALETTE.len()];
        let px = PAD + (x - x0) / sx * (SIZE - 2.0 * PAD);
        let py = SIZE - PAD - (y - y0) / sy * (SIZE - 2.0 * PAD);
        writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#)
            .expect("string write");
    }
    for (k, l) in labels.iter().enumerate() {
        let y = 16.0 + 14.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        writeln!(s, r#"<rect x="6" y="{}" width="8" height="8" fill="{color}"/>"#, y - 8.0).expect("string write");
        writeln!(s, r#"<text x="18" y="{y}" font-size="11" font-family="sans-serif">{}</text>"#, xml_escape(l))
            .expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<path>.svg` and `<path>.csv`.
pub fn emit_scatter(result: &PcaResult, path: &Path) -> Result<(), AnalysisError> {
    write_file(&path.with_extension("svg"), scatter_svg(result)?.as_bytes())?;
    write_file(&path.with_extension("csv"), scatter_csv(result)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(pts: &[(f64, f64)], labels: &[&str]) -> PcaResult {
        PcaResult {
            components: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            projections: pts.iter().map(|&(x, y)| vec![x, y]).collect(),
            explained_variance_ratio: vec![0.5, 0.5],
            mean: vec![0.0, 0.0],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn collinear_points() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        let p = pca(&rows, 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.components[0][0].abs() - h).abs() < 1e-9);
        assert!((p.components[0][0] - p.components[0][1]).abs() < 1e-9);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_point_hand_example() {
        // covariance [[4/3, −1/3], [−1/3, 1/3]]; eigenvalues (5 ± √13)/6
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let p = pca(&rows, 2).unwrap();
        let l1 = (5.0 + 13f64.sqrt()) / 6.0;
        let l2 = (5.0 - 13f64.sqrt()) / 6.0;
        assert!((p.explained_variance_ratio[0] - l1 / (l1 + l2)).abs() < 1e-12);
        // eigenvector of l1 solves (4/3 − l1) x − y/3 = 0
        let (x, y) = (p.components[0][0], p.components[0][1]);
        assert!(((4.0 / 3.0 - l1) * x - y / 3.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_input_has_zero_ratios() {
        let rows = vec![vec![1.0, 2.0]; 4];
        let p = pca(&rows, 1).unwrap();
        assert_eq!(p.explained_variance_ratio, vec![0.0]);
    }

    #[test]
    fn rejects_too_many_components() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(pca(&rows, 2).is_err());
        assert!(pca(&rows[..1], 1).is_err());
    }

    #[test]
    fn adaptor_vector_definition() {
        let a = Adaptor::from_vectors(&[2.0, 1.0], &[0.0, 3.0]).unwrap();
        let art = test_artifacts(a);
        assert_eq!(adaptor_vector(&art).unwrap(), vec![1.0, 0.0, 0.0, 3.0]);
        let art = test_artifacts(Adaptor::identity(3));
        assert_eq!(adaptor_vector(&art).unwrap(), vec![0.0; 6]);
    }

    fn test_artifacts(adaptor: Adaptor) -> AdaptedArtifacts {
        use crate::adapt::{AdaptConfig, Provenance, Recipe};
        AdaptedArtifacts {
            adaptor,
            classifier: None,
            output_projection: crate::nets::Linear::zeros(1, 1),
            tuned: Default::default(),
            provenance: Provenance {
                source_fingerprint: String::new(),
                recipe: Recipe::Genda { truncate: true },
                seed: 0,
                config: AdaptConfig::default(),
                reference_hashes: vec![],
            },
        }
    }

    #[test]
    fn silhouette_by_hand() {
        // clusters {0, 1} and {10}: a(0)=1, b(0)=10 → 0.9; a(1)=1, b(1)=9 → 8/9;
        // the singleton scores 0
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let labels: Vec<String> = ["x", "x", "y"].iter().map(|s| s.to_string()).collect();
        let s = silhouette(&pts, &labels).unwrap();
        assert!((s - (0.9 + 8.0 / 9.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_and_header() {
        let r = labeled(&[(0.0, 1.0), (2.0, 3.0), (4.5, -1.0)], &["a", "a", "b"]);
        let csv = scatter_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next(), Some("label,pc1,pc2"));
        assert_eq!(csv.lines().nth(3), Some("b,4.5,-1"));
    }

    #[test]
    fn empty_scatter() {
        let r = labeled(&[], &[]);
        assert_eq!(scatter_csv(&r).unwrap(), "label,pc1,pc2\n");
        let svg = scatter_svg(&r).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn svg_is_deterministic() {
        let r = labeled(&[(0.0, 1.0), (2.0, 3.0)], &["a", "b"]);
        assert_eq!(scatter_svg(&r).unwrap(), scatter_svg(&r).unwrap());
        assert_eq!(scatter_svg(&r).unwrap().matches("<circle").count(), 2);
    }
}
