use serde::{Deserialize, Serialize};

use super::render::{palette, GLASSES_LEVEL, SKETCH_BOUNDARY_LEVEL};
use super::ShapeKind;
use crate::engine::Tensor;

/// A pixel whose brightest channel is below this (in `[-1, 1]`) counts as glasses.
const DARK_MAX: f64 = -0.8;
/// Max-abs channel distance from the background beyond which a pixel is foreground.
const FG_DIST: f64 = 0.3;
const SKETCH_CHROMA: f64 = 0.3;
const SQUARE_FILL: f64 = 0.95;
const COLOR_TOL: f64 = 0.2;
const MIN_BAND_RUN: usize = 3;

/// What the oracle reads back from an image. `shape_kind == None` means no
/// foreground structure was found; geometry is then meaningless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape_kind: Option<ShapeKind>,
    pub glasses: bool,
    pub sketch: bool,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    /// `None` for sketches, whose colors no longer carry hue.
    pub bg_hue: Option<f64>,
    /// Fraction of pixels explained by one of the renderer's color rules.
    pub confidence: f64,
}

fn rgb_to_hue(c: [f64; 3]) -> f64 {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        (c[2] - c[0]) / d + 2.0
    } else {
        (c[0] - c[1]) / d + 4.0
    };
    h / 6.0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

fn to_signed(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| 2.0 * v - 1.0)
}

/// Side of the square image held in a tensor of `3 R²` elements.
pub fn resolution_of(image: &Tensor<f32>) -> Option<usize> {
    let n = image.numel();
    if n % 3 != 0 {
        return None;
    }
    let r = ((n / 3) as f64).sqrt().round() as usize;
    (r * r * 3 == n && r > 0).then_some(r)
}

/// Axis extent of the foreground in pixel-center units, aware of clipping at the
/// image border: a side touching the border is not trusted.
struct Extent {
    lo: f64,
    hi: f64,
    clipped_lo: bool,
    clipped_hi: bool,
}

impl Extent {
    fn new(first: usize, last: usize, r: usize) -> Self {
        let rf = r as f64;
        Extent {
            lo: first as f64 / rf,
            hi: (last + 1) as f64 / rf,
            clipped_lo: first == 0,
            clipped_hi: last + 1 == r,
        }
    }
    fn half(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
    fn clipped(&self) -> bool {
        self.clipped_lo || self.clipped_hi
    }
    fn center(&self, size: f64) -> f64 {
        match (self.clipped_lo, self.clipped_hi) {
            (true, false) => self.hi - size,
            (false, true) => self.lo + size,
            _ => 0.5 * (self.lo + self.hi),
        }
    }
}

/// Largest 4-connected component of `mask` (first in scan order on ties). A
/// rendered scene has a single foreground component, so this only drops
/// stray pixels on generated images.
fn largest_component(mask: &[bool], r: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = start;
        stack.push(start);
        while let Some(k) = stack.pop() {
            size += 1;
            let (i, j) = (k / r, k % r);
            let nb = [
                (i > 0).then(|| k - r),
                (i + 1 < r).then(|| k + r),
                (j > 0).then(|| k - 1),
                (j + 1 < r).then(|| k + 1),
            ];
            for n in nb.into_iter().flatten() {
                if mask[n] && label[n] == usize::MAX {
                    label[n] = start;
                    stack.push(n);
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((start, size));
        }
    }
    match best {
        Some((id, _)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; mask.len()],
    }
}

/// Reads shape kind, position, size, glasses and sketch off an image by the
/// same per-pixel rules the renderer uses. Exact on rendered images; on
/// generated images it returns the nearest-rule reading plus a confidence.
pub fn extract_attributes(image: &Tensor<f32>) -> Attributes {
    let undefined = |sketch, bg_hue, glasses| Attributes {
        shape_kind: None,
        glasses,
        sketch,
        cx: 0.5,
        cy: 0.5,
        size: 0.0,
        bg_hue,
        confidence: 0.0,
    };
    let Some(r) = resolution_of(image) else {
        return undefined(false, None, false);
    };
    let rr = r * r;
    let d = image.data();
    let px: Vec<[f64; 3]> = (0..rr)
        .map(|k| [d[k] as f64, d[rr + k] as f64, d[2 * rr + k] as f64])
        .collect();

    let border: Vec<usize> = (0..rr)
        .filter(|&k| {
            let (i, j) = (k / r, k % r);
            i == 0 || j == 0 || i + 1 == r || j + 1 == r
        })
        .collect();
    let bg = [0, 1, 2].map(|c| median(border.iter().map(|&k| px[k][c]).collect()));

    let dark: Vec<bool> = px.iter().map(|p| p[0].max(p[1]).max(p[2]) < DARK_MAX).collect();
    let fg: Vec<bool> = (0..rr).map(|k| dark[k] || dist(px[k], bg) > FG_DIST).collect();

    let chroma: Vec<f64> = (0..rr)
        .filter(|&k| !dark[k])
        .map(|k| {
            let p = px[k];
            p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2])
        })
        .collect();
    let sketch = chroma.is_empty() || chroma.iter().sum::<f64>() / (chroma.len() as f64) < SKETCH_CHROMA;

    let dark_rows: Vec<bool> = (0..r)
        .map(|i| (0..r).filter(|&j| dark[i * r + j]).count() >= MIN_BAND_RUN)
        .collect();
    let glasses = dark_rows.iter().any(|&b| b);

    let bg01 = bg.map(|v| 0.5 * (v + 1.0));
    let bg_hue = (!sketch).then(|| rgb_to_hue(bg01));

    let fg = largest_component(&fg, r);
    let fg_idx: Vec<usize> = (0..rr).filter(|&k| fg[k]).collect();
    if fg_idx.len() < 2 {
        return undefined(sketch, bg_hue, glasses);
    }
    let rows = fg_idx.iter().map(|k| k / r);
    let cols = fg_idx.iter().map(|k| k % r);
    let ey = Extent::new(rows.clone().min().unwrap(), rows.max().unwrap(), r);
    let ex = Extent::new(cols.clone().min().unwrap(), cols.max().unwrap(), r);
    let size = match (ex.clipped(), ey.clipped()) {
        (false, true) => ex.half(),
        (true, false) => ey.half(),
        _ => ex.half().max(ey.half()),
    };
    let cx = ex.center(size);
    let cy = ey.center(size);

    // fill ratio of the bounding box, ignoring glasses rows
    let (i0, i1) = ((ey.lo * r as f64).round() as usize, (ey.hi * r as f64).round() as usize);
    let (j0, j1) = ((ex.lo * r as f64).round() as usize, (ex.hi * r as f64).round() as usize);
    let use_rows: Vec<usize> = {
        let clean: Vec<usize> = (i0..i1).filter(|&i| !dark_rows[i]).collect();
        if clean.is_empty() {
            (i0..i1).collect()
        } else {
            clean
        }
    };
    let filled = use_rows
        .iter()
        .flat_map(|&i| (j0..j1).map(move |j| i * r + j))
        .filter(|&k| fg[k])
        .count();
    let fill = filled as f64 / (use_rows.len() * (j1 - j0)) as f64;
    let shape_kind = Some(if fill >= SQUARE_FILL {
        ShapeKind::Square
    } else {
        ShapeKind::Circle
    });

    let dark_color = to_signed([GLASSES_LEVEL; 3]);
    let explained = |p: [f64; 3]| -> bool {
        if dist(p, bg) <= COLOR_TOL || dist(p, dark_color) <= COLOR_TOL {
            return true;
        }
        if sketch {
            let gray = dist(p, [p[0]; 3]) <= COLOR_TOL;
            let boundary = dist(p, to_signed([SKETCH_BOUNDARY_LEVEL; 3])) <= COLOR_TOL;
            // interior levels span 0.30 + 0.25·Y for Y in [0, 1]
            let interior = (-0.4 - COLOR_TOL..=0.1 + COLOR_TOL).contains(&p[0]);
            gray && (boundary || interior)
        } else {
            let shape = to_signed(palette(bg_hue.unwrap_or(0.0)).1);
            dist(p, shape) <= COLOR_TOL
        }
    };
    let confidence = px.iter().filter(|&&p| explained(p)).count() as f64 / rr as f64;

    Attributes {
        shape_kind,
        glasses,
        sketch,
        cx,
        cy,
        size,
        bg_hue,
        confidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{render, sample_params, DomainSpec, ShapeParams};
    use crate::rng::{stream, Stream};

    #[test]
    fn round_trip_over_random_draws() {
        let spec = DomainSpec::shapes();
        let mut rng = stream(11, Stream::Data);
        let r = 16;
        let tol = 1.0 / r as f64;
        let mut spec = spec;
        spec.glasses_prob = 0.5;
        spec.sketch_prob = 0.5;
        for p in sample_params(&spec, 1000, &mut rng) {
            let a = extract_attributes(&render(&p, r).unwrap());
            assert_eq!(a.shape_kind, Some(p.shape_kind), "{p:?} -> {a:?}");
            assert_eq!(a.glasses, p.glasses, "{p:?} -> {a:?}");
            assert_eq!(a.sketch, p.sketch, "{p:?} -> {a:?}");
            assert!((a.cx - p.cx).abs() <= tol, "{p:?} -> {a:?}");
            assert!((a.cy - p.cy).abs() <= tol, "{p:?} -> {a:?}");
            assert!((a.size - p.size).abs() <= tol, "{p:?} -> {a:?}");
            assert!(a.confidence > 0.99, "{p:?} -> {a:?}");
        }
    }

    #[test]
    fn uniform_gray_has_no_structure() {
        let img = Tensor::full(&[3, 16, 16], 0.1f32);
        let a = extract_attributes(&img);
        assert_eq!(a.shape_kind, None);
        assert!(a.confidence < 0.5);
        assert!(!a.glasses);
    }

    #[test]
    fn painted_band_reads_as_glasses() {
        let p = ShapeParams {
            bg_hue: 0.2,
            shape_kind: ShapeKind::Square,
            cx: 0.5,
            cy: 0.5,
            size: 0.25,
            glasses: false,
            sketch: false,
        };
        let mut img = render(&p, 16).unwrap();
        assert!(!extract_attributes(&img).glasses);
        // row 5 (center y = 0.34) across columns 4..12, near-black in all channels
        let d = img.data_mut();
        for c in 0..3 {
            for j in 4..12 {
                d[c * 256 + 5 * 16 + j] = -0.96;
            }
        }
        assert!(extract_attributes(&img).glasses);
    }

    #[test]
    fn hue_recovered_from_background() {
        for h in [0.05, 0.3, 0.55, 0.9] {
            let (bg, _) = palette(h);
            assert!((rgb_to_hue(bg) - h).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_size_tensor_is_undefined() {
        let a = extract_attributes(&Tensor::zeros(&[5]));
        assert_eq!(a.shape_kind, None);
        assert_eq!(a.confidence, 0.0);
    }
}
