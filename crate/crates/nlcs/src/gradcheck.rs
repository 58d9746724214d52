//! Central finite-difference verification of analytic gradients.
//!
//! The analytic side runs the production `f32` path; the numeric side
//! re-evaluates the forward in `f64` to keep cancellation error below the
//! tolerance being checked.

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic gradients of `forward32` against central differences of
/// `forward64` for every listed leaf. `params32` and `params64` must hold the
/// same values; the two closures must compute the same scalar function.
/// `max_probes_per_param` caps how many elements of each leaf are perturbed.
pub fn check_gradients<F32F, F64F>(
    name: &str,
    params32: &[Tensor<f32>],
    params64: &[Tensor<f64>],
    forward32: F32F,
    forward64: F64F,
    step: f64,
    tolerance: f64,
    max_probes_per_param: usize,
) -> Result<GradCheckReport>
where
    F32F: Fn(&[Tensor<f32>]) -> Result<Tensor<f32>>,
    F64F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    assert_eq!(params32.len(), params64.len());
    for p in params32 {
        p.zero_grad();
    }
    let loss = forward32(params32)?;
    loss.backward()?;

    let mut max_rel = 0.0f64;
    let mut probes = 0;
    for (p32, p64) in params32.iter().zip(params64) {
        let analytic = p32
            .grad()
            .unwrap_or_else(|| vec![0.0; p32.numel()]);
        let n = p64.numel();
        let stride = (n / max_probes_per_param).max(1);
        let base = p64.to_vec();
        for i in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus[i] += step;
            p64.set_data(&plus)?;
            let f_plus = forward64(params64)?.item();
            let mut minus = base.clone();
            minus[i] -= step;
            p64.set_data(&minus)?;
            let f_minus = forward64(params64)?.item();
            p64.set_data(&base)?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let e = rel_err(analytic[i] as f64, numeric);
            if e > max_rel {
                max_rel = e;
            }
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        probes,
    })
}

/// Convenience wrapper: casts the `f32` leaves to `f64` and instantiates the
/// same generic forward at both precisions.
#[macro_export]
macro_rules! gradcheck {
    ($name:expr, $params:expr, $tol:expr, |$xs:ident| $body:expr) => {{
        let params32: Vec<$crate::tensor::Tensor<f32>> = $params.to_vec();
        let params64: Vec<$crate::tensor::Tensor<f64>> =
            params32.iter().map(|p| p.cast::<f64>()).collect();
        $crate::gradcheck::check_gradients(
            $name,
            &params32,
            &params64,
            |$xs: &[$crate::tensor::Tensor<f32>]| $body,
            |$xs: &[$crate::tensor::Tensor<f64>]| $body,
            $crate::gradcheck::DEFAULT_STEP,
            $tol,
            64,
        )
    }};
}
