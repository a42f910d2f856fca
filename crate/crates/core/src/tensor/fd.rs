//! Central finite-difference reference gradients.
//!
//! An independent numerical oracle for the reverse-mode sweep: the test
//! suites and the `grad-check` CLI command compare every op's analytic
//! gradient against these values. Relative error is measured against the
//! largest gradient magnitude present, so uniformly tiny gradients do not
//! inflate the ratio.

use super::Tensor;
use crate::error::Result;

/// Step size that balances truncation against rounding error in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of the scalar function `f` with respect to
/// `inputs[which]`, holding the other inputs fixed.
pub fn numerical_grad<F>(f: &F, inputs: &[Tensor], which: usize, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let shape = inputs[which].shape().to_vec();
    let x0 = inputs[which].to_vec();
    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut args = base.clone();
        args[which] = Tensor::new(&shape, vals)?;
        f(&args)?.item()
    };
    let mut grad = vec![0.0; x0.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let mut plus = x0.clone();
        plus[i] += h;
        let mut minus = x0.clone();
        minus[i] -= h;
        *g = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Reverse-mode gradients of `f` with respect to every input, computed by
/// rebuilding the inputs as leaves and running one backward sweep. Inputs
/// the output does not depend on get zero gradients.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.shape(), t.to_vec()))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;
    Ok(leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect())
}

/// Max elementwise difference normalized by the largest magnitude present
/// (floored at 1e-12 so zero gradients compare exactly).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

/// Worst relative error between analytic and numerical gradients across
/// all inputs of `f` at the given point.
pub fn check_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = analytic_grads(f, inputs)?;
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let numeric = numerical_grad(f, inputs, which, h)?;
        worst = worst.max(max_rel_err(&analytic[which], &numeric));
    }
    Ok(worst)
}
