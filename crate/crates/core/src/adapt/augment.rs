//! Differentiable augmentation of image batches: flip, translate, brightness,
//! cutout, in that order. Spatial transforms are index remaps (a gather), so
//! gradients flow back to the source pixels.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tensor, TensorError, Var};
use crate::rng::Rng;

/// Brightness shifts are drawn from `±BRIGHTNESS_RANGE · strength`.
pub const BRIGHTNESS_RANGE: f64 = 0.2;

/// Transform decisions for one image. Every field is drawn on every call so
/// that the stream position does not depend on the strength.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Pixel offsets, `None` when translation was not applied.
    pub translate: Option<(i64, i64)>,
    pub brightness: Option<f64>,
    /// Top-left corner and side of the zeroed square.
    pub cutout: Option<(usize, usize, usize)>,
}

impl AugmentDraw {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.translate.is_none() && self.brightness.is_none() && self.cutout.is_none()
    }

    /// Decisions for an `R×R` image at `strength ∈ [0, 1]`; each transform
    /// fires independently with probability `strength`.
    pub fn sample(strength: f64, r: usize, rng: &mut Rng) -> Self {
        let s = strength.clamp(0.0, 1.0);
        let u: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        let (tx, ty): (f64, f64) = (rng.random(), rng.random());
        let shift: f64 = rng.random();
        let (cx, cy): (f64, f64) = (rng.random(), rng.random());

        let max_t = (s * r as f64 / 4.0).floor() as i64;
        let offset = |v: f64| ((v * (2 * max_t + 1) as f64).floor() as i64).min(2 * max_t) - max_t;
        let side = (s * r as f64 / 2.0).floor() as usize;
        let corner = |v: f64| ((v * (r - side + 1) as f64).floor() as usize).min(r - side);
        AugmentDraw {
            flip: u[0] < s,
            translate: (u[1] < s && max_t > 0).then(|| (offset(tx), offset(ty))),
            brightness: (u[2] < s).then(|| (2.0 * shift - 1.0) * BRIGHTNESS_RANGE * s),
            cutout: (u[3] < s && side > 0).then(|| (corner(cx), corner(cy), side)),
        }
    }

    /// Source pixel (row, col) for output pixel (y, x): translation with edge
    /// padding, then horizontal flip.
    fn source(&self, y: usize, x: usize, r: usize) -> (usize, usize) {
        let (dx, dy) = self.translate.unwrap_or((0, 0));
        let clamp = |v: i64| v.clamp(0, r as i64 - 1) as usize;
        let sy = clamp(y as i64 - dy);
        let sx = clamp(x as i64 - dx);
        let sx = if self.flip { r - 1 - sx } else { sx };
        (sy, sx)
    }
}

pub fn sample_draws(n: usize, strength: f64, r: usize, rng: &mut Rng) -> Vec<AugmentDraw> {
    (0..n).map(|_| AugmentDraw::sample(strength, r, rng)).collect()
}

/// Applies per-row decisions to a `[n, 3R²]` batch; the output is clamped to
/// `[-1, 1]`. Transforms no row uses are skipped, so an all-identity draw
/// returns `x` itself.
pub fn apply<'t, T: Scalar>(x: Var<'t, T>, draws: &[AugmentDraw], r: usize) -> Result<Var<'t, T>, TensorError> {
    let shape = x.shape();
    let plane = r * r;
    if shape.len() != 2 || shape[0] != draws.len() || shape[1] != 3 * plane {
        return Err(TensorError::ShapeMismatch {
            op: "augment",
            left: shape,
            right: vec![draws.len(), 3 * plane],
        });
    }
    if draws.iter().all(AugmentDraw::is_identity) {
        return Ok(x);
    }
    let (n, cols) = (shape[0], shape[1]);
    let tape = x.tape();
    let mut out = x;

    if draws.iter().any(|d| d.flip || d.translate.is_some()) {
        let mut index = Vec::with_capacity(n * cols);
        for (i, d) in draws.iter().enumerate() {
            for c in 0..3 {
                for y in 0..r {
                    for xx in 0..r {
                        let (sy, sx) = d.source(y, xx, r);
                        index.push(i * cols + c * plane + sy * r + sx);
                    }
                }
            }
        }
        out = out.gather(Rc::from(index), vec![n, cols])?;
    }
    if draws.iter().any(|d| d.brightness.is_some()) {
        let mut add = vec![T::zero(); n * cols];
        for (i, d) in draws.iter().enumerate() {
            if let Some(s) = d.brightness {
                add[i * cols..(i + 1) * cols].fill(T::from_f64(s));
            }
        }
        out = out.add(tape.constant(Tensor::new(vec![n, cols], add)?)?)?;
    }
    if draws.iter().any(|d| d.cutout.is_some()) {
        let mut mask = vec![T::one(); n * cols];
        for (i, d) in draws.iter().enumerate() {
            if let Some((x0, y0, side)) = d.cutout {
                for c in 0..3 {
                    for y in y0..y0 + side {
                        for xx in x0..x0 + side {
                            mask[i * cols + c * plane + y * r + xx] = T::zero();
                        }
                    }
                }
            }
        }
        out = out.mul(tape.constant(Tensor::new(vec![n, cols], mask)?)?)?;
    }
    out.clamp(-1.0, 1.0)
}

/// Draws decisions for every row and applies them.
pub fn augment<'t, T: Scalar>(x: Var<'t, T>, strength: f64, r: usize, rng: &mut Rng) -> Result<Var<'t, T>, TensorError> {
    let n = x.shape().first().copied().unwrap_or(0);
    let draws = sample_draws(n, strength, r, rng);
    apply(x, &draws, r)
}

/// Plain-tensor convenience wrapper around [`augment`].
pub fn augment_tensor(x: &Tensor<f32>, strength: f64, r: usize, rng: &mut Rng) -> Result<Tensor<f32>, TensorError> {
    let tape = crate::engine::Tape::new();
    let v = tape.constant(x.clone())?;
    Ok((*augment(v, strength, r, rng)?.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::rng::{stream, Stream};

    fn batch(n: usize, r: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream(seed, Stream::Data);
        let data = (0..n * 3 * r * r).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![n, 3 * r * r], data).unwrap()
    }

    fn run(x: &Tensor<f32>, draws: &[AugmentDraw], r: usize) -> Tensor<f32> {
        let tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        (*apply(v, draws, r).unwrap().value()).clone()
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = batch(4, 8, 1);
        let mut rng = stream(2, Stream::Augment);
        let draws = sample_draws(4, 0.0, 8, &mut rng);
        assert!(draws.iter().all(AugmentDraw::is_identity));
        assert_eq!(augment_tensor(&x, 0.0, 8, &mut rng).unwrap(), x);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = batch(2, 6, 3);
        let d = AugmentDraw {
            flip: true,
            ..Default::default()
        };
        let once = run(&x, &[d; 2], 6);
        assert_ne!(once, x);
        assert_eq!(run(&once, &[d; 2], 6), x);
    }

    #[test]
    fn flip_mirrors_columns() {
        let r = 4;
        let x = batch(1, r, 4);
        let d = AugmentDraw {
            flip: true,
            ..Default::default()
        };
        let y = run(&x, &[d], r);
        for c in 0..3 {
            for row in 0..r {
                for col in 0..r {
                    let k = c * r * r + row * r;
                    assert_eq!(y.data()[k + col], x.data()[k + r - 1 - col]);
                }
            }
        }
    }

    #[test]
    fn brightness_on_zeros() {
        let x = Tensor::<f32>::zeros(&[1, 3 * 16]);
        let d = AugmentDraw {
            brightness: Some(0.1),
            ..Default::default()
        };
        assert!(run(&x, &[d], 4).data().iter().all(|&v| v == 0.1f32));
    }

    #[test]
    fn translation_pads_with_edge() {
        let r = 4;
        // column index as the value in every channel
        let data: Vec<f32> = (0..3 * r * r).map(|k| (k % r) as f32 / 10.0).collect();
        let x = Tensor::new(vec![1, 3 * r * r], data).unwrap();
        let d = AugmentDraw {
            translate: Some((2, 0)),
            ..Default::default()
        };
        let y = run(&x, &[d], r);
        // shifted right by two: columns read 0,0,0,1
        assert_eq!(&y.data()[..r], &[0.0, 0.0, 0.0, 0.1]);
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let r = 4;
        let x = Tensor::<f32>::full(&[1, 3 * r * r], 0.5);
        let d = AugmentDraw {
            cutout: Some((1, 2, 2)),
            ..Default::default()
        };
        let y = run(&x, &[d], r);
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 3 * 4);
        assert_eq!(y.data()[2 * r + 1], 0.0);
        assert_eq!(y.data()[r + 1], 0.5);
    }

    #[test]
    fn output_is_clamped() {
        let x = Tensor::<f32>::full(&[1, 12], 0.95);
        let d = AugmentDraw {
            brightness: Some(0.2),
            ..Default::default()
        };
        assert!(run(&x, &[d], 2).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn magnitudes_scale_with_strength() {
        let mut rng = stream(5, Stream::Augment);
        for d in sample_draws(2000, 0.5, 16, &mut rng) {
            if let Some((dx, dy)) = d.translate {
                assert!(dx.abs() <= 2 && dy.abs() <= 2);
            }
            if let Some(b) = d.brightness {
                assert!(b.abs() <= 0.1);
            }
            if let Some((x0, y0, side)) = d.cutout {
                assert_eq!(side, 4);
                assert!(x0 + side <= 16 && y0 + side <= 16);
            }
        }
    }
}
