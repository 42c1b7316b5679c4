use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central differences,
/// entirely in `f64`. Returns the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`; any non-finite value or
/// evaluation error yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> f64
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let Some(analytic) = analytic_grad(&f, x) else {
        return f64::INFINITY;
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe);
        probe.data_mut()[i] = orig;
        let (Some(p), Some(m)) = (plus, minus) else {
            return f64::INFINITY;
        };
        let numeric = (p - m) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    worst
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Option<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone()).ok()?;
    let out = f(v).ok()?;
    let val = out.value();
    (val.numel() == 1).then(|| val.item())
}

/// Gradient of `f` at `x` from the tape.
pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Option<Tensor<f64>>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let v = tape.param(x.clone()).ok()?;
    let out = f(v).ok()?;
    if out.value().numel() != 1 {
        return None;
    }
    if !out.requires_grad() {
        return Some(Tensor::zeros(x.shape()));
    }
    let grads = tape.backward(out).ok()?;
    Some(grads.get_or_zeros(v))
}
