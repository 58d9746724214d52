//! Non-local refinement over per-block measurement vectors, followed by the
//! learned per-block upsampling that forms the initial reconstruction.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Element, Tensor};

/// Pairwise attention weights of one non-local module. `weights` is the
/// row-stochastic softmax of `logits`; both stay connected to the graph so
/// the coupling loss can differentiate through them.
pub struct AffinityMatrix<E: Element = f32> {
    pub logits: Tensor<E>,
    pub weights: Tensor<E>,
}

impl<E: Element> AffinityMatrix<E> {
    pub fn from_logits(logits: Tensor<E>) -> Result<Self> {
        let weights = logits.softmax_rows()?;
        Ok(AffinityMatrix { logits, weights })
    }

    pub fn rows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// 1×1-convolution embeddings over the measurement grid. Channel counts equal
/// n_B on both sides of every kernel.
pub struct MeasurementNonLocal<E: Element = f32> {
    pub w_theta: Tensor<E>,
    pub w_phi: Tensor<E>,
    pub w_g: Tensor<E>,
    n_b: usize,
}

impl<E: Element> MeasurementNonLocal<E> {
    /// Embedding kernels get fan-in-scaled noise; `w_g` starts at zero so the
    /// residual path is the identity at init.
    pub fn new(n_b: usize, rng: &mut ChaCha8Rng) -> Self {
        MeasurementNonLocal {
            w_theta: init::kaiming_uniform(rng, &[n_b, n_b, 1, 1]),
            w_phi: init::kaiming_uniform(rng, &[n_b, n_b, 1, 1]),
            w_g: init::zeros_param(&[n_b, n_b, 1, 1]),
            n_b,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        vec![
            ("nlm.theta".into(), self.w_theta.clone()),
            ("nlm.phi".into(), self.w_phi.clone()),
            ("nlm.g".into(), self.w_g.clone()),
        ]
    }

    /// `y` is `[1, n_B, h_B, w_B]`; returns the residual-refined measurements
    /// and the h_B·w_B affinity matrix.
    pub fn forward(&self, y: &Tensor<E>) -> Result<(Tensor<E>, AffinityMatrix<E>)> {
        let s = y.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.n_b {
            return Err(Error::dim(
                "measurement_nonlocal",
                format!("expected [1,{},h_B,w_B], got {:?}", self.n_b, s),
            ));
        }
        let (c, hb, wb) = (s[1], s[2], s[3]);
        let n = hb * wb;
        let as_positions = |t: &Tensor<E>| -> Result<Tensor<E>> {
            t.reshape(&[c, n])?.transpose2d()
        };
        let theta = as_positions(&y.conv2d(&self.w_theta, None, 1, 0)?)?;
        let phi = as_positions(&y.conv2d(&self.w_phi, None, 1, 0)?)?;
        let g = as_positions(&y.conv2d(&self.w_g, None, 1, 0)?)?;
        let logits = theta.matmul(&phi.transpose2d()?)?;
        let affinity = AffinityMatrix::from_logits(logits)?;
        let aggregated = affinity
            .weights
            .matmul(&g)?
            .transpose2d()?
            .reshape(&[1, c, hb, wb])?;
        let y_tilde = y.add(&aggregated)?;
        Ok((y_tilde, affinity))
    }
}

/// Learned per-block upsampling Φ_B followed by block reassembly.
pub struct InitialReconstructor<E: Element = f32> {
    pub phi_b: Tensor<E>,
    block_size: usize,
}

impl<E: Element> InitialReconstructor<E> {
    /// `phi_b_init` is `[B², n_B, 1, 1]`; pass the sampling operator's
    /// adjoint for a well-conditioned start.
    pub fn new(phi_b_init: Tensor<E>, block_size: usize) -> Self {
        phi_b_init.set_requires_grad(true);
        InitialReconstructor {
            phi_b: phi_b_init,
            block_size,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        vec![("init_recon.phi_b".into(), self.phi_b.clone())]
    }

    /// `[1, n_B, h_B, w_B]` -> `[1, 1, h_B·B, w_B·B]`: each grid cell becomes
    /// the B×B block Φ_B·ỹ, tiled in raster order.
    pub fn forward(&self, y_tilde: &Tensor<E>) -> Result<Tensor<E>> {
        y_tilde
            .conv2d(&self.phi_b, None, 1, 0)?
            .pixel_shuffle(self.block_size)
    }
}

/// Write an affinity matrix as CSV (6 significant digits) and as an 8-bit PGM
/// heatmap with each row scaled so its maximum maps to 255.
pub fn export_affinity<E: Element>(
    matrix: &AffinityMatrix<E>,
    csv_path: &Path,
    pgm_path: &Path,
) -> Result<()> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let w = matrix.weights.data();

    let mut csv = String::new();
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{:.5e}", w[i * cols + j].as_f64()));
        }
        csv.push('\n');
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    let mut pgm = Vec::with_capacity(64 + rows * cols);
    write!(pgm, "P5\n{} {}\n255\n", cols, rows).expect("in-memory write");
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mx = row.iter().fold(E::zero(), |a, &b| if b > a { b } else { a });
        for &v in row {
            let byte = if mx > E::zero() {
                ((v / mx).as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            pgm.push(byte);
        }
    }
    fs::write(pgm_path, pgm).map_err(|e| Error::io(pgm_path, e))
}

/// Read back a CSV written by [`export_affinity`].
pub fn read_affinity_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        out.push(row.map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    use crate::sampling::{SamplingMode, SamplingOperator};

    fn rand_measurements(c: usize, hb: usize, wb: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, c, hb, wb],
            (0..c * hb * wb).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_g_weights_make_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let module = MeasurementNonLocal::<f32>::new(6, &mut rng);
        let y = rand_measurements(6, 2, 2, 2);
        let (y_tilde, r) = module.forward(&y).unwrap();
        assert_eq!(y_tilde.to_vec(), y.to_vec());
        assert_eq!(r.rows(), 4);
    }

    #[test]
    fn single_block_affinity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let module = MeasurementNonLocal::<f32>::new(4, &mut rng);
        module.w_g.set_data(&[0.5; 16]).unwrap();
        let y = rand_measurements(4, 1, 1, 3);
        let (y_tilde, r) = module.forward(&y).unwrap();
        assert_eq!(r.weights.to_vec(), vec![1.0]);
        // y_tilde = y + g(y) with r = [[1]]
        let g = y.conv2d(&module.w_g, None, 1, 0).unwrap();
        let want = y.add(&g).unwrap();
        for (a, b) in y_tilde.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_matches_bruteforce_nonlocal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 5;
        let module = MeasurementNonLocal::<f32>::new(c, &mut rng);
        // give g nonzero weights
        let gw: Vec<f32> = (0..c * c).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect();
        module.w_g.set_data(&gw).unwrap();
        let y = rand_measurements(c, 2, 2, 4);
        let (y_tilde, r) = module.forward(&y).unwrap();

        // brute force in f64 over the 4 positions
        let yv: Vec<f64> = y.to_vec().iter().map(|&v| v as f64).collect();
        let get = |v: &[f64], ch: usize, pos: usize| v[ch * 4 + pos];
        let wt: Vec<f64> = module.w_theta.to_vec().iter().map(|&v| v as f64).collect();
        let wp: Vec<f64> = module.w_phi.to_vec().iter().map(|&v| v as f64).collect();
        let wg: Vec<f64> = gw.iter().map(|&v| v as f64).collect();
        let embed = |w: &[f64], pos: usize| -> Vec<f64> {
            (0..c)
                .map(|o| (0..c).map(|i| w[o * c + i] * get(&yv, i, pos)).sum())
                .collect()
        };
        for pos in 0..4 {
            let th = embed(&wt, pos);
            let mut weights = [0f64; 4];
            let mut denom = 0.0;
            for q in 0..4 {
                let ph = embed(&wp, q);
                let dot: f64 = th.iter().zip(&ph).map(|(a, b)| a * b).sum();
                weights[q] = dot.exp();
                denom += weights[q];
            }
            let rv = r.weights.to_vec();
            for q in 0..4 {
                assert!((rv[pos * 4 + q] as f64 - weights[q] / denom).abs() < 1e-5);
            }
            for ch in 0..c {
                let mut agg = 0.0;
                for q in 0..4 {
                    let gq: f64 = (0..c).map(|i| wg[ch * c + i] * get(&yv, i, q)).sum();
                    agg += weights[q] / denom * gq;
                }
                let want = get(&yv, ch, pos) + agg;
                let got = y_tilde.to_vec()[ch * 4 + pos] as f64;
                assert!((got - want).abs() < 1e-5, "ch {ch} pos {pos}");
            }
        }
    }

    #[test]
    fn affinity_rows_are_stochastic_and_symmetric_embeddings_give_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let module = MeasurementNonLocal::<f32>::new(4, &mut rng);
        // tie theta and phi: logits become symmetric
        module.w_phi.set_data(&module.w_theta.to_vec()).unwrap();
        let y = rand_measurements(4, 2, 2, 6);
        let (_, r) = module.forward(&y).unwrap();
        let v = r.weights.to_vec();
        for i in 0..4 {
            let s: f32 = v[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let lv = r.logits.to_vec();
        for i in 0..4 {
            for j in 0..4 {
                assert!((lv[i * 4 + j] - lv[j * 4 + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn block_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 3;
        let module = MeasurementNonLocal::<f32>::new(c, &mut rng);
        let gw: Vec<f32> = (0..c * c).map(|i| (i as f32) * 0.05 - 0.2).collect();
        module.w_g.set_data(&gw).unwrap();
        let y = rand_measurements(c, 2, 2, 12);
        let (yt, r) = module.forward(&y).unwrap();

        // swap positions 0 and 3 (a permutation of the block grid)
        let perm = [3usize, 1, 2, 0];
        let yv = y.to_vec();
        let mut pv = vec![0f32; yv.len()];
        for ch in 0..c {
            for p in 0..4 {
                pv[ch * 4 + p] = yv[ch * 4 + perm[p]];
            }
        }
        let yp = Tensor::from_vec(&[1, c, 2, 2], pv).unwrap();
        let (ytp, rp) = module.forward(&yp).unwrap();

        let (ytv, ytpv) = (yt.to_vec(), ytp.to_vec());
        for ch in 0..c {
            for p in 0..4 {
                assert!((ytpv[ch * 4 + p] - ytv[ch * 4 + perm[p]]).abs() < 1e-5);
            }
        }
        let (rv, rpv) = (r.weights.to_vec(), rp.weights.to_vec());
        for i in 0..4 {
            for j in 0..4 {
                assert!((rpv[i * 4 + j] - rv[perm[i] * 4 + perm[j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gradients_reach_all_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let module = MeasurementNonLocal::<f32>::new(3, &mut rng);
        let gw: Vec<f32> = (0..9).map(|i| (i as f32) * 0.1 - 0.4).collect();
        module.w_g.set_data(&gw).unwrap();
        let op = SamplingOperator::<f32>::new(0.75, 2, SamplingMode::FixedRandom, 1).unwrap();
        let recon = InitialReconstructor::new(op.adjoint_kernel(), 2);
        let y = rand_measurements(3, 2, 2, 8);
        let (yt, _) = module.forward(&y).unwrap();
        let x0 = recon.forward(&yt).unwrap();
        x0.frobenius_sq().backward().unwrap();
        for (name, p) in module
            .named_params()
            .into_iter()
            .chain(recon.named_params())
        {
            let g = p.grad().unwrap_or_default();
            assert!(g.iter().any(|&v| v != 0.0), "no gradient reached {name}");
        }
    }

    #[test]
    fn initial_reconstruction_roundtrip_and_shapes() {
        let op = SamplingOperator::<f32>::new(1.0, 32, SamplingMode::FixedRandom, 2).unwrap();
        let recon = InitialReconstructor::new(op.adjoint_kernel(), 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_vec(
            &[1, 1, 64, 64],
            (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let y = op.sample_image(&img).unwrap();
        let x0 = recon.forward(&y).unwrap();
        assert_eq!(x0.shape(), &[1, 1, 64, 64]);
        for (a, b) in img.to_vec().iter().zip(x0.to_vec()) {
            assert!((a - b).abs() < 1e-4);
        }

        // zero measurements -> zero image, and the 102-channel shape case
        let op102 = SamplingOperator::<f32>::new(0.10, 32, SamplingMode::FixedRandom, 3).unwrap();
        let recon102 = InitialReconstructor::new(op102.adjoint_kernel(), 32);
        let zero = Tensor::zeros(&[1, 102, 2, 2]);
        let x0 = recon102.forward(&zero).unwrap();
        assert_eq!(x0.shape(), &[1, 1, 64, 64]);
        assert!(x0.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affinity_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let logits = Tensor::from_vec(&[2, 2], vec![0.1, 1.4, -0.3, 0.9]).unwrap();
        let m = AffinityMatrix::from_logits(logits).unwrap();
        let csv = dir.path().join("r.csv");
        let pgm = dir.path().join("r.pgm");
        export_affinity(&m, &csv, &pgm).unwrap();

        let back = read_affinity_csv(&csv).unwrap();
        let w = m.weights.to_vec();
        for i in 0..2 {
            for j in 0..2 {
                assert!((back[i][j] - w[i * 2 + j] as f64).abs() < 1e-6);
            }
        }
        let img = crate::pgm::read_pgm(&pgm).unwrap();
        let v = img.to_vec();
        for i in 0..2 {
            let mx = v[i * 2..(i + 1) * 2].iter().cloned().fold(0.0f32, f32::max);
            assert!((mx - 1.0).abs() < 1e-6, "row max must be 255");
        }

        // 1x1 matrix degenerates to "1.0"
        let one = AffinityMatrix::from_logits(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap()).unwrap();
        let csv1 = dir.path().join("one.csv");
        export_affinity(&one, &csv1, &dir.path().join("one.pgm")).unwrap();
        assert_eq!(read_affinity_csv(&csv1).unwrap(), vec![vec![1.0]]);
    }
}
