//! Block-based compressed sampling: non-overlapping B×B blocks, each measured
//! by the same n_B×B² matrix Φ, realized as a stride-B convolution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// n_B = floor(rate · B²), at least one measurement per block.
pub fn measurement_count(rate: f64, block_size: usize) -> Result<usize> {
    if rate <= 0.0 || rate > 1.0 {
        return Err(Error::Parameter(format!(
            "sampling rate must be in (0, 1], got {rate}"
        )));
    }
    if block_size < 1 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    let n = (rate * (block_size * block_size) as f64).floor() as usize;
    Ok(n.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Φ stays at its orthogonalized Gaussian init and never receives
    /// gradient updates.
    FixedRandom,
    /// Φ is trained jointly with the reconstruction network.
    Learned,
}

/// Block-grid geometry of a padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGrid {
    pub w: usize,
    pub h: usize,
    pub w_b: usize,
    pub h_b: usize,
    pub original_w: usize,
    pub original_h: usize,
}

pub struct SamplingOperator<E: Element = f32> {
    pub block_size: usize,
    pub rate: f64,
    pub n_b: usize,
    pub mode: SamplingMode,
    pub seed: u64,
    /// `[n_B, 1, B, B]`; each filter is one row of Φ laid out as a block.
    pub phi: Tensor<E>,
}

/// Rows drawn i.i.d. standard normal, then row-orthonormalized by modified
/// Gram-Schmidt in f64.
fn orthogonal_gaussian_rows(n_b: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_b > dim {
        return Err(Error::Parameter(format!(
            "cannot orthonormalize {n_b} rows in dimension {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_b);
    for _ in 0..n_b {
        let mut r: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        for q in &rows {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, &qv) in r.iter_mut().zip(q) {
                *x -= dot * qv;
            }
        }
        let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Parameter(
                "degenerate Gaussian draw during orthogonalization".into(),
            ));
        }
        for x in &mut r {
            *x /= norm;
        }
        rows.push(r);
    }
    Ok(rows)
}

impl<E: Element> SamplingOperator<E> {
    pub fn new(rate: f64, block_size: usize, mode: SamplingMode, seed: u64) -> Result<Self> {
        let n_b = measurement_count(rate, block_size)?;
        let dim = block_size * block_size;
        let rows = orthogonal_gaussian_rows(n_b, dim, seed)?;
        let data: Vec<E> = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| E::from_f64_lossy(v)))
            .collect();
        let phi = Tensor::from_vec(&[n_b, 1, block_size, block_size], data)?;
        phi.set_requires_grad(mode == SamplingMode::Learned);
        Ok(SamplingOperator {
            block_size,
            rate,
            n_b,
            mode,
            seed,
            phi,
        })
    }

    /// `[1,1,h,w]` (block-divisible) -> `[1,n_B,h_B,w_B]`.
    pub fn sample_image(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::dim(
                "sample_image",
                format!("expected [1,1,H,W] image, got {:?}", s),
            ));
        }
        let b = self.block_size;
        if s[2] % b != 0 || s[3] % b != 0 {
            return Err(Error::dim(
                "sample_image",
                format!("{}x{} image not divisible into {}x{} blocks", s[2], s[3], b, b),
            ));
        }
        image.conv2d(&self.phi, None, b, 0)
    }

    /// Φᵀ as a `[B², n_B, 1, 1]` kernel; with orthonormal rows this is the
    /// per-block least-squares inverse and makes a good Φ_B init.
    pub fn adjoint_kernel(&self) -> Tensor<E> {
        let b2 = self.block_size * self.block_size;
        let phi = self.phi.data();
        let mut data = vec![E::zero(); b2 * self.n_b];
        for r in 0..self.n_b {
            for c in 0..b2 {
                data[c * self.n_b + r] = phi[r * b2 + c];
            }
        }
        Tensor::from_vec(&[b2, self.n_b, 1, 1], data).expect("consistent shape")
    }
}

/// Reflection-pad right/bottom to the next multiple of B, remembering the
/// original size for final cropping.
pub fn pad_to_block_grid<E: Element>(
    image: &Tensor<E>,
    block_size: usize,
) -> Result<(Tensor<E>, ImageGrid)> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::dim(
            "pad_to_block_grid",
            format!("expected [1,1,H,W] image, got {:?}", s),
        ));
    }
    let (h, w) = (s[2], s[3]);
    let b = block_size;
    let ph = h.div_ceil(b) * b;
    let pw = w.div_ceil(b) * b;
    let padded = if ph == h && pw == w {
        image.reshape(s)? // keep graph connectivity without copying semantics
    } else {
        image.reflect_pad2d(0, pw - w, 0, ph - h)?
    };
    Ok((
        padded,
        ImageGrid {
            w: pw,
            h: ph,
            w_b: pw / b,
            h_b: ph / b,
            original_w: w,
            original_h: h,
        },
    ))
}

/// Undo [`pad_to_block_grid`].
pub fn crop_to_original<E: Element>(image: &Tensor<E>, grid: &ImageGrid) -> Result<Tensor<E>> {
    image.crop2d(0, 0, grid.original_h, grid.original_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, 1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn measurement_counts_at_paper_rates() {
        for (rate, want) in [(0.01, 10), (0.04, 40), (0.10, 102), (0.20, 204), (0.30, 307)] {
            assert_eq!(measurement_count(rate, 32).unwrap(), want);
        }
        assert_eq!(measurement_count(1.0, 32).unwrap(), 1024);
        assert!(measurement_count(0.0, 32).is_err());
        assert!(measurement_count(-0.5, 32).is_err());
    }

    #[test]
    fn phi_rows_are_orthonormal() {
        let op = SamplingOperator::<f32>::new(0.10, 32, SamplingMode::FixedRandom, 9).unwrap();
        assert_eq!(op.n_b, 102);
        let phi = op.phi.to_vec();
        let b2 = 1024;
        for i in 0..op.n_b {
            for j in 0..op.n_b {
                let dot: f32 = (0..b2).map(|k| phi[i * b2 + k] * phi[j * b2 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-4, "({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_phi() {
        let a = SamplingOperator::<f32>::new(0.10, 16, SamplingMode::FixedRandom, 4).unwrap();
        let b = SamplingOperator::<f32>::new(0.10, 16, SamplingMode::FixedRandom, 4).unwrap();
        assert_eq!(a.phi.to_vec(), b.phi.to_vec());
    }

    #[test]
    fn full_rate_roundtrip_recovers_block() {
        let op = SamplingOperator::<f32>::new(1.0, 8, SamplingMode::FixedRandom, 5).unwrap();
        let x = rand_image(8, 8, 77);
        let y = op.sample_image(&x).unwrap();
        // adjoint applied per block: x_rec = Φᵀ y
        let adj = op.adjoint_kernel();
        let rec = y.conv2d(&adj, None, 1, 0).unwrap().pixel_shuffle(8).unwrap();
        for (a, b) in x.to_vec().iter().zip(rec.to_vec()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_sampling_matches_blockwise_matmul_oracle() {
        let op = SamplingOperator::<f32>::new(0.10, 32, SamplingMode::FixedRandom, 3).unwrap();
        let x = rand_image(64, 64, 8);
        let y = op.sample_image(&x).unwrap();
        assert_eq!(y.shape(), &[1, 102, 2, 2]);
        let xv = x.to_vec();
        let phi = op.phi.to_vec();
        let yv = y.to_vec();
        for by in 0..2 {
            for bx in 0..2 {
                for m in 0..102 {
                    let mut want = 0f32;
                    for u in 0..32 {
                        for v in 0..32 {
                            want += phi[(m * 32 + u) * 32 + v] * xv[(by * 32 + u) * 64 + bx * 32 + v];
                        }
                    }
                    let got = yv[(m * 2 + by) * 2 + bx];
                    assert!((got - want).abs() < 1e-5, "block ({by},{bx}) m={m}");
                }
            }
        }
    }

    #[test]
    fn sampling_is_linear() {
        let op = SamplingOperator::<f32>::new(0.25, 8, SamplingMode::FixedRandom, 6).unwrap();
        let x = rand_image(16, 16, 1);
        let y = rand_image(16, 16, 2);
        let combo = x.scalar_mul(2.0).add(&y.scalar_mul(-0.5)).unwrap();
        let lhs = op.sample_image(&combo).unwrap().to_vec();
        let sx = op.sample_image(&x).unwrap();
        let sy = op.sample_image(&y).unwrap();
        let rhs = sx.scalar_mul(2.0).add(&sy.scalar_mul(-0.5)).unwrap().to_vec();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-5);
        }
        // zero image -> zero measurements
        let z = op.sample_image(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(z.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_to_block_grid_geometry() {
        let x = rand_image(64, 64, 3);
        let (p, g) = pad_to_block_grid(&x, 32).unwrap();
        assert_eq!(p.shape(), &[1, 1, 64, 64]);
        assert_eq!((g.h_b, g.w_b), (2, 2));

        let x = rand_image(65, 64, 4);
        let (p, g) = pad_to_block_grid(&x, 32).unwrap();
        assert_eq!(p.shape(), &[1, 1, 96, 64]);
        assert_eq!((g.h_b, g.w_b), (3, 2));
        let back = crop_to_original(&p, &g).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn non_divisible_image_is_rejected_by_sampler() {
        let op = SamplingOperator::<f32>::new(0.25, 8, SamplingMode::FixedRandom, 6).unwrap();
        assert!(op.sample_image(&rand_image(12, 16, 5)).is_err());
    }
}
