use super::{DomainError, ShapeKind, ShapeParams, MAX_SIZE, MIN_SIZE};
use crate::engine::Tensor;

pub const MIN_RESOLUTION: usize = 4;
pub const MAX_RESOLUTION: usize = 64;

/// Glasses pixels, in `[0, 1]` units before mapping to `[-1, 1]`.
pub const GLASSES_LEVEL: f64 = 0.02;
pub const SKETCH_BOUNDARY_LEVEL: f64 = 0.15;

pub(crate) const BG_SATURATION: f64 = 0.6;
pub(crate) const SHAPE_SATURATION: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pixel {
    Background,
    Interior,
    Boundary,
    Glasses,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Background and shape colors in `[0, 1]` before any sketch mapping.
pub fn palette(bg_hue: f64) -> ([f64; 3], [f64; 3]) {
    (
        hsv_to_rgb(bg_hue, BG_SATURATION, 1.0),
        hsv_to_rgb(bg_hue + 0.5, SHAPE_SATURATION, 1.0),
    )
}

fn inside(kind: ShapeKind, cx: f64, cy: f64, size: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= size * size,
        ShapeKind::Square => dx.abs() <= size && dy.abs() <= size,
    }
}

pub(crate) fn pixel_center(idx: usize, r: usize) -> f64 {
    (idx as f64 + 0.5) / r as f64
}

/// Pixel-center inside test. Circles at least three pixels across additionally
/// drop the four corners of their footprint's bounding box: a disc only a few
/// pixels wide would otherwise rasterize to a filled square.
fn shape_mask(p: &ShapeParams, size: f64, r: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..r * r)
        .map(|k| {
            let (i, j) = (k / r, k % r);
            inside(p.shape_kind, p.cx, p.cy, size, pixel_center(j, r), pixel_center(i, r))
        })
        .collect();
    if p.shape_kind == ShapeKind::Circle {
        let on: Vec<usize> = (0..r * r).filter(|&k| mask[k]).collect();
        if let (Some(i0), Some(i1)) = (on.iter().map(|k| k / r).min(), on.iter().map(|k| k / r).max()) {
            let j0 = on.iter().map(|k| k % r).min().expect("nonempty");
            let j1 = on.iter().map(|k| k % r).max().expect("nonempty");
            if i1 - i0 < 2 || j1 - j0 < 2 {
                return mask;
            }
            for (i, j) in [(i0, j0), (i0, j1), (i1, j0), (i1, j1)] {
                mask[i * r + j] = false;
            }
        }
    }
    mask
}

/// Per-pixel class map, row-major `[R, R]`.
pub(crate) fn classify_pixels(p: &ShapeParams, r: usize) -> Vec<Pixel> {
    let size = p.size.clamp(MIN_SIZE, MAX_SIZE);
    let mask = shape_mask(p, size, r);
    let band_y = p.cy - size / 3.0;
    let half_px = 1.0 / r as f64;
    (0..r * r)
        .map(|k| {
            let (i, j) = (k / r, k % r);
            let (x, y) = (pixel_center(j, r), pixel_center(i, r));
            if p.glasses && (y - band_y).abs() < half_px && (x - p.cx).abs() <= size {
                return Pixel::Glasses;
            }
            if !mask[k] {
                return Pixel::Background;
            }
            let neighbors = [
                (i > 0).then(|| k - r),
                (i + 1 < r).then(|| k + r),
                (j > 0).then(|| k - 1),
                (j + 1 < r).then(|| k + 1),
            ];
            if p.sketch && neighbors.iter().flatten().any(|&n| !mask[n]) {
                Pixel::Boundary
            } else {
                Pixel::Interior
            }
        })
        .collect()
}

/// Rasterizes `p` as a `[3, R, R]` image in `[-1, 1]`. No anti-aliasing and no
/// randomness: identical parameters always give identical bits.
pub fn render(p: &ShapeParams, r: usize) -> Result<Tensor<f32>, DomainError> {
    p.validate()?;
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&r) {
        return Err(DomainError::Resolution(r));
    }
    let (bg, fg) = palette(p.bg_hue);
    let (bg, fg) = if p.sketch {
        let gray = |c: [f64; 3], base: f64| [base + 0.25 * luminance(c); 3];
        (gray(bg, 0.75), gray(fg, 0.30))
    } else {
        (bg, fg)
    };
    let classes = classify_pixels(p, r);
    let mut data = vec![0f32; 3 * r * r];
    for (k, class) in classes.iter().enumerate() {
        let rgb = match class {
            Pixel::Background => bg,
            Pixel::Interior => fg,
            Pixel::Boundary => [SKETCH_BOUNDARY_LEVEL; 3],
            Pixel::Glasses => [GLASSES_LEVEL; 3],
        };
        for c in 0..3 {
            data[c * r * r + k] = (2.0 * rgb[c] - 1.0) as f32;
        }
    }
    Ok(Tensor::new(vec![3, r, r], data)?)
}
