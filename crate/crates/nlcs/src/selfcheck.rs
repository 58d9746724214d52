//! Built-in diagnostic suite: re-runs the core numerical oracles on small
//! fixtures and reports the worst error of each, for field debugging of a
//! build or platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck;
use crate::sampling::{SamplingMode, SamplingOperator};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn result(name: &str, max_err: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_err,
        tolerance,
        passed: max_err < tolerance,
    }
}

fn rand_param(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check_gradients_elementwise() -> Result<CheckResult> {
    let x = rand_param(&[3, 4], 11);
    let y = rand_param(&[3, 4], 12);
    let r = gradcheck!("elementwise", [x, y], 1e-3, |xs| {
        Ok(xs[0].mul(&xs[1])?.relu().add(&xs[0].exp())?.frobenius_sq())
    })?;
    Ok(result("gradients/elementwise", r.max_rel_err, r.tolerance))
}

fn check_gradients_attention() -> Result<CheckResult> {
    let q = rand_param(&[4, 3], 13);
    let k = rand_param(&[3, 4], 14);
    let v = rand_param(&[4, 3], 15);
    let r = gradcheck!("attention", [q, k, v], 1e-3, |xs| {
        Ok(xs[0]
            .matmul(&xs[1])?
            .softmax_rows()?
            .matmul(&xs[2])?
            .frobenius_sq())
    })?;
    Ok(result("gradients/attention", r.max_rel_err, r.tolerance))
}

fn check_gradients_conv() -> Result<CheckResult> {
    let x = rand_param(&[1, 2, 4, 4], 16);
    let w = rand_param(&[4, 2, 3, 3], 17);
    let b = rand_param(&[4], 18);
    let r = gradcheck!("conv", [x, w, b], 1e-3, |xs| {
        Ok(xs[0]
            .conv2d(&xs[1], Some(&xs[2]), 1, 1)?
            .pixel_shuffle(2)?
            .avg_pool2d(2)?
            .frobenius_sq())
    })?;
    Ok(result("gradients/conv", r.max_rel_err, r.tolerance))
}

fn check_sampling_oracle() -> Result<CheckResult> {
    let op = SamplingOperator::<f32>::new(0.25, 8, SamplingMode::FixedRandom, 19)?;
    let x = rand_param(&[1, 1, 16, 16], 20);
    let y = op.sample_image(&x)?;
    let xv = x.to_vec();
    let phi = op.phi.to_vec();
    let yv = y.to_vec();
    let mut max_err = 0f64;
    for by in 0..2 {
        for bx in 0..2 {
            for m in 0..op.n_b {
                let mut want = 0f64;
                for u in 0..8 {
                    for v in 0..8 {
                        want += phi[(m * 8 + u) * 8 + v] as f64
                            * xv[(by * 8 + u) * 16 + bx * 8 + v] as f64;
                    }
                }
                let got = yv[(m * 2 + by) * 2 + bx] as f64;
                max_err = max_err.max((got - want).abs());
            }
        }
    }
    Ok(result("sampling/conv-vs-matmul", max_err, 1e-5))
}

fn check_phi_orthonormal() -> Result<CheckResult> {
    let op = SamplingOperator::<f32>::new(0.25, 8, SamplingMode::FixedRandom, 21)?;
    let phi = op.phi.to_vec();
    let dim = 64;
    let mut max_err = 0f64;
    for i in 0..op.n_b {
        for j in 0..op.n_b {
            let dot: f64 = (0..dim)
                .map(|k| phi[i * dim + k] as f64 * phi[j * dim + k] as f64)
                .sum();
            let want = if i == j { 1.0 } else { 0.0 };
            max_err = max_err.max((dot - want).abs());
        }
    }
    Ok(result("sampling/phi-orthonormal", max_err, 1e-4))
}

fn check_softmax_stochastic() -> Result<CheckResult> {
    let logits = rand_param(&[8, 8], 22).scalar_mul(30.0);
    let r = logits.softmax_rows()?;
    let v = r.to_vec();
    let mut max_err = 0f64;
    for row in v.chunks(8) {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        max_err = max_err.max((s - 1.0).abs());
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            max_err = f64::INFINITY;
        }
    }
    Ok(result("softmax/row-stochastic", max_err, 1e-5))
}

fn check_pixel_shuffle_inverse() -> Result<CheckResult> {
    let x = rand_param(&[1, 4, 3, 3], 23);
    let back = x.pixel_shuffle(2)?.space_to_depth(2)?;
    let max_err = x
        .to_vec()
        .iter()
        .zip(back.to_vec())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok(result("pixel-shuffle/inverse", max_err, 1e-12))
}

/// Environment variable that deliberately breaks the named check, to exercise
/// failure reporting end to end.
pub const CORRUPT_ENV: &str = "NLCS_SELFCHECK_CORRUPT";

/// Run every check. Order and names are stable.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut results = vec![
        check_gradients_elementwise()?,
        check_gradients_attention()?,
        check_gradients_conv()?,
        check_sampling_oracle()?,
        check_phi_orthonormal()?,
        check_softmax_stochastic()?,
        check_pixel_shuffle_inverse()?,
    ];
    if let Ok(target) = std::env::var(CORRUPT_ENV) {
        for r in &mut results {
            if r.name == target {
                r.max_err = r.tolerance * 10.0 + 1.0;
                r.passed = false;
            }
        }
    }
    Ok(results)
}
