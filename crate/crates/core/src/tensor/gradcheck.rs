//! Central-difference verification of reverse-mode gradients (64-bit).

use super::Tensor;
use crate::error::{Result, ScnError};

/// Denominator floor for relative errors, so that components whose true
/// gradient is zero compare on an absolute scale instead of dividing noise by
/// noise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the gradients of the scalar function `f` at `inputs` against
/// `(f(x + h) - f(x - h)) / 2h`, componentwise for every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.requiring_grad()).collect();
    let out = f(&leaves)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let v = f(probe)?.item()?;
        if !v.is_finite() {
            return Err(ScnError::Training("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
    let mut checks = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let base = input.to_vec();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..base.len() {
            let mut shifted = base.clone();
            shifted[j] = base[j] + h;
            probe[idx] = Tensor::from_vec(input.dims(), shifted.clone())?;
            let up = eval(&probe)?;
            shifted[j] = base[j] - h;
            probe[idx] = Tensor::from_vec(input.dims(), shifted)?;
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx][j];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        probe[idx] = input.detach();
        checks.push(InputCheck {
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tol,
        });
    }
    Ok(GradCheckReport { inputs: checks, tol })
}
