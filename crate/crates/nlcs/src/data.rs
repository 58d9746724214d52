//! Training data: directories of 8-bit PGM images, served as random
//! augmented grayscale patches in `[0, 1]`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pgm::read_pgm;
use crate::tensor::Tensor;

pub struct Dataset {
    pub images: Vec<(PathBuf, Tensor<f32>)>,
}

impl Dataset {
    /// Load every `.pgm` file in `dir`, sorted by name for reproducibility.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map_or(false, |x| x == "pgm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "no .pgm images found in {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            images.push((p.clone(), read_pgm(&p)?));
        }
        Ok(Dataset { images })
    }

    /// Images large enough to yield a `patch`×`patch` crop.
    fn usable(&self, patch: usize) -> Vec<&(PathBuf, Tensor<f32>)> {
        self.images
            .iter()
            .filter(|(_, t)| t.shape()[2] >= patch && t.shape()[3] >= patch)
            .collect()
    }

    /// Uniform random crop from a uniform random (large-enough) image.
    pub fn random_patch(&self, patch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let usable = self.usable(patch);
        if usable.is_empty() {
            return Err(Error::Data(format!(
                "no image is at least {patch}x{patch}"
            )));
        }
        let (_, img) = usable[rng.gen_range(0..usable.len())];
        let (h, w) = (img.shape()[2], img.shape()[3]);
        let top = rng.gen_range(0..=h - patch);
        let left = rng.gen_range(0..=w - patch);
        let src = img.data();
        let mut out = Vec::with_capacity(patch * patch);
        for r in 0..patch {
            let row = (top + r) * w + left;
            out.extend_from_slice(&src[row..row + patch]);
        }
        Tensor::from_vec(&[1, 1, patch, patch], out)
    }
}

/// Random 0/90/180/270° rotation plus a coin-flip horizontal mirror.
/// Square input only; operates on raw data, outside the autodiff graph.
pub fn augment(patch: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let s = patch.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::dim(
            "augment",
            format!("expected a square [1,1,P,P] patch, got {:?}", s),
        ));
    }
    let n = s[2];
    let src = patch.to_vec();
    let quarter_turns = rng.gen_range(0..4u8);
    let mirror = rng.gen_bool(0.5);
    let mut out = vec![0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let (mut rr, mut cc) = (r, c);
            for _ in 0..quarter_turns {
                // 90° clockwise: (r, c) -> (c, n-1-r)
                let t = rr;
                rr = cc;
                cc = n - 1 - t;
            }
            if mirror {
                cc = n - 1 - cc;
            }
            out[rr * n + cc] = src[r * n + c];
        }
    }
    Tensor::from_vec(s, out)
}
