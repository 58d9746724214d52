//! Training objective: Frobenius reconstruction error plus a coupling term
//! that pushes every attention affinity matrix toward symmetry.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{Element, Tensor};

/// Scalar summary of one batch; `total` stays attached to the graph.
pub struct LossReport<E: Element = f32> {
    pub total: Tensor<E>,
    pub reconstruction: f64,
    pub measurement_coupling: f64,
    pub feature_coupling: f64,
    pub total_value: f64,
}

/// ‖r − rᵀ‖_F² for a square affinity matrix.
pub fn asymmetry_penalty<E: Element>(r: &Tensor<E>) -> Result<Tensor<E>> {
    let s = r.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim(
            "asymmetry_penalty",
            format!("expected a square matrix, got {:?}", s),
        ));
    }
    Ok(r.sub(&r.transpose2d()?)?.frobenius_sq())
}

/// Collapse a rectangular `[H·W, H·W/pool²]` affinity to a square key-grid
/// matrix by average-pooling the query axis, so the symmetry penalty is
/// well-posed. `pool == 1` matrices pass through unchanged.
pub fn pooled_square_affinity<E: Element>(
    r: &Tensor<E>,
    height: usize,
    width: usize,
    pool: usize,
) -> Result<Tensor<E>> {
    let s = r.shape();
    if s.len() != 2 || s[0] != height * width {
        return Err(Error::dim(
            "pooled_square_affinity",
            format!("matrix {:?} does not match a {height}x{width} query grid", s),
        ));
    }
    if pool == 1 {
        if s[0] != s[1] {
            return Err(Error::dim(
                "pooled_square_affinity",
                format!("unpooled matrix must be square, got {:?}", s),
            ));
        }
        return Ok(r.clone());
    }
    let n_k = (height / pool) * (width / pool);
    if s[1] != n_k {
        return Err(Error::dim(
            "pooled_square_affinity",
            format!("expected {n_k} key columns, got {}", s[1]),
        ));
    }
    r.transpose2d()?
        .reshape(&[1, n_k, height, width])?
        .avg_pool2d(pool)?
        .reshape(&[n_k, n_k])?
        .transpose2d()
}

/// L_rec = (1/2K) Σ_k ‖x̃_k − x_k‖_F²
pub fn reconstruction_loss<E: Element>(
    reconstructions: &[Tensor<E>],
    targets: &[Tensor<E>],
) -> Result<Tensor<E>> {
    if reconstructions.is_empty() || reconstructions.len() != targets.len() {
        return Err(Error::dim(
            "reconstruction_loss",
            format!(
                "need equal non-empty batches, got {} and {}",
                reconstructions.len(),
                targets.len()
            ),
        ));
    }
    let k = reconstructions.len();
    let mut acc: Option<Tensor<E>> = None;
    for (x_hat, x) in reconstructions.iter().zip(targets) {
        let term = x_hat.sub(x)?.frobenius_sq();
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty batch").scalar_mul(E::from_f64_lossy(0.5 / k as f64)))
}

/// Mean symmetry penalty of the measurement-domain affinities, halved like
/// the reconstruction term.
pub fn measurement_coupling_loss<E: Element>(outputs: &[ForwardOutput<E>]) -> Result<Tensor<E>> {
    let k = outputs.len().max(1);
    let mut acc = Tensor::scalar(E::zero());
    for out in outputs {
        if let Some(r) = &out.measurement_affinity {
            acc = acc.add(&asymmetry_penalty(&r.weights)?)?;
        }
    }
    Ok(acc.scalar_mul(E::from_f64_lossy(0.5 / k as f64)))
}

/// Mean symmetry penalty over every feature-domain affinity (all scales and
/// submodules), query-pooled to square where keys were pooled.
pub fn feature_coupling_loss<E: Element>(outputs: &[ForwardOutput<E>]) -> Result<Tensor<E>> {
    let k = outputs.len().max(1);
    let mut acc = Tensor::scalar(E::zero());
    for out in outputs {
        for fa in &out.feature_affinities {
            let square =
                pooled_square_affinity(&fa.matrix.weights, fa.height, fa.width, fa.pool)?;
            acc = acc.add(&asymmetry_penalty(&square)?)?;
        }
    }
    Ok(acc.scalar_mul(E::from_f64_lossy(0.5 / k as f64)))
}

/// L = L_rec + γ·(γ_u·L_meas + γ_v·L_feat); the coupling terms drop out
/// entirely when disabled.
pub fn total_loss<E: Element>(
    config: &ModelConfig,
    outputs: &[ForwardOutput<E>],
    targets: &[Tensor<E>],
) -> Result<LossReport<E>> {
    let recons: Vec<Tensor<E>> = outputs.iter().map(|o| o.reconstruction.clone()).collect();
    let l_rec = reconstruction_loss(&recons, targets)?;
    let mut report = LossReport {
        reconstruction: l_rec.item().as_f64(),
        measurement_coupling: 0.0,
        feature_coupling: 0.0,
        total_value: 0.0,
        total: l_rec,
    };
    if config.enable_coupling {
        let l_meas = measurement_coupling_loss(outputs)?;
        let l_feat = feature_coupling_loss(outputs)?;
        report.measurement_coupling = l_meas.item().as_f64();
        report.feature_coupling = l_feat.item().as_f64();
        let coupled = l_meas
            .scalar_mul(E::from_f64_lossy(config.gamma_u))
            .add(&l_feat.scalar_mul(E::from_f64_lossy(config.gamma_v)))?
            .scalar_mul(E::from_f64_lossy(config.gamma));
        report.total = report.total.add(&coupled)?;
    }
    report.total_value = report.total.item().as_f64();
    if !report.total_value.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NlCsNet;
    use crate::sampling::SamplingMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, 1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_loss_hand_case() {
        // one pair differing by 2 everywhere on a 2x2 grid: (1/2)·(4·4) = 8
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![3.0f32; 4]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32; 4]).unwrap();
        let l = reconstruction_loss(&[a], &[b]).unwrap().item();
        assert!((l - 8.0).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_loss_averages_over_batch() {
        let a = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32; 4]).unwrap();
        let b = Tensor::zeros(&[1, 1, 2, 2]);
        let l = reconstruction_loss(&[a.clone(), b.clone()], &[b.clone(), b]).unwrap();
        // (1/4)·(4 + 0) = 1
        assert!((l.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn asymmetry_penalty_cases() {
        let sym = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(asymmetry_penalty(&sym).unwrap().item(), 0.0);
        let asym = Tensor::from_vec(&[2, 2], vec![0.0f32, 1.0, 0.0, 0.0]).unwrap();
        // r - rᵀ = [[0,1],[-1,0]], Frobenius² = 2
        assert!((asymmetry_penalty(&asym).unwrap().item() - 2.0).abs() < 1e-6);
        assert!(asymmetry_penalty(&Tensor::<f32>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pooled_square_affinity_reduces_query_axis() {
        // 2x2 grid pooled by 2 -> single key; pooled matrix is the mean of
        // the (only) column
        let r = Tensor::from_vec(&[4, 1], vec![1.0f32, 1.0, 1.0, 1.0]).unwrap();
        let sq = pooled_square_affinity(&r, 2, 2, 2).unwrap();
        assert_eq!(sq.shape(), &[1, 1]);
        assert!((sq.item() - 1.0).abs() < 1e-6);

        // pool == 1 passes through
        let r = Tensor::from_vec(&[4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let sq = pooled_square_affinity(&r, 2, 2, 1).unwrap();
        assert_eq!(sq.to_vec(), r.to_vec());
    }

    #[test]
    fn pooled_affinity_preserves_row_stochasticity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits =
            Tensor::param(&[16, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = logits.softmax_rows().unwrap();
        let sq = pooled_square_affinity(&r, 4, 4, 2).unwrap();
        assert_eq!(sq.shape(), &[4, 4]);
        for row in sq.to_vec().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn total_loss_invariant() {
        let cfg = ModelConfig::tiny();
        let net = NlCsNet::<f32>::new(&cfg, 0.25, 8, SamplingMode::FixedRandom, 5).unwrap();
        let targets = vec![rand_image(16, 16, 6), rand_image(16, 16, 7)];
        let outputs: Vec<_> = targets.iter().map(|t| net.forward(t).unwrap()).collect();
        let report = total_loss(&cfg, &outputs, &targets).unwrap();
        let want = report.reconstruction
            + cfg.gamma
                * (cfg.gamma_u * report.measurement_coupling
                    + cfg.gamma_v * report.feature_coupling);
        let rel = (report.total_value - want).abs() / want.abs().max(1.0);
        assert!(rel < 1e-6, "relative error {rel}");
        assert!(report.reconstruction > 0.0);
    }

    #[test]
    fn coupling_disabled_drops_to_reconstruction_only() {
        let cfg = ModelConfig {
            enable_coupling: false,
            ..ModelConfig::tiny()
        };
        let net = NlCsNet::<f32>::new(&cfg, 0.25, 8, SamplingMode::FixedRandom, 8).unwrap();
        let target = rand_image(16, 16, 9);
        let out = net.forward(&target).unwrap();
        let report = total_loss(&cfg, &[out], &[target]).unwrap();
        assert_eq!(report.measurement_coupling, 0.0);
        assert_eq!(report.feature_coupling, 0.0);
        assert!((report.total_value - report.reconstruction).abs() < 1e-9);
    }

    #[test]
    fn coupling_gradient_flows_into_attention_weights() {
        let cfg = ModelConfig::tiny();
        let net = NlCsNet::<f32>::new(&cfg, 0.25, 8, SamplingMode::FixedRandom, 10).unwrap();
        let target = rand_image(16, 16, 11);
        let out = net.forward(&target).unwrap();
        // coupling-only objective: reconstruction contributes nothing
        let l = measurement_coupling_loss(&[out]).unwrap();
        l.backward().unwrap();
        let nlm = net.nlm.as_ref().unwrap();
        let g = nlm.w_theta.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
