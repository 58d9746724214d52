//! End-to-end pipeline: sample -> measurement-domain non-local refinement ->
//! initial reconstruction -> multi-scale deep reconstruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::measurement::{AffinityMatrix, InitialReconstructor, MeasurementNonLocal};
use crate::msnl::{FeatureAffinity, MsNlNet};
use crate::sampling::{crop_to_original, pad_to_block_grid, SamplingMode, SamplingOperator};
use crate::tensor::{Element, Tensor};

pub struct ForwardOutput<E: Element = f32> {
    /// Final reconstruction, cropped to the input size.
    pub reconstruction: Tensor<E>,
    /// Linear initial reconstruction, cropped to the input size.
    pub initial: Tensor<E>,
    pub measurement_affinity: Option<AffinityMatrix<E>>,
    pub feature_affinities: Vec<FeatureAffinity<E>>,
    /// Block-grid height/width the measurement affinity ranged over.
    pub grid_h: usize,
    pub grid_w: usize,
}

pub struct NlCsNet<E: Element = f32> {
    pub config: ModelConfig,
    pub sampler: SamplingOperator<E>,
    pub nlm: Option<MeasurementNonLocal<E>>,
    pub init_recon: InitialReconstructor<E>,
    pub msnl: MsNlNet<E>,
}

impl<E: Element> NlCsNet<E> {
    pub fn new(
        config: &ModelConfig,
        rate: f64,
        block_size: usize,
        mode: SamplingMode,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let sampler = SamplingOperator::new(rate, block_size, mode, seed)?;
        let nlm = if config.enable_nlm {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6d65_6173));
            Some(MeasurementNonLocal::new(sampler.n_b, &mut rng))
        } else {
            None
        };
        let init_recon = InitialReconstructor::new(sampler.adjoint_kernel(), block_size);
        let msnl = MsNlNet::new(config, seed.wrapping_add(0x6d73_6e6c))?;
        Ok(NlCsNet {
            config: config.clone(),
            sampler,
            nlm,
            init_recon,
            msnl,
        })
    }

    /// Full differentiable pass over one `[1,1,H,W]` image.
    pub fn forward(&self, image: &Tensor<E>) -> Result<ForwardOutput<E>> {
        let (padded, grid) = pad_to_block_grid(image, self.sampler.block_size)?;
        let y = self.sampler.sample_image(&padded)?;
        let (y_refined, measurement_affinity) = match &self.nlm {
            Some(nlm) => {
                let (y2, r) = nlm.forward(&y)?;
                (y2, Some(r))
            }
            None => (y, None),
        };
        let x0 = self.init_recon.forward(&y_refined)?;
        let (refined, feature_affinities) = self.msnl.forward(&x0)?;
        Ok(ForwardOutput {
            reconstruction: crop_to_original(&refined, &grid)?,
            initial: crop_to_original(&x0, &grid)?,
            measurement_affinity,
            feature_affinities,
            grid_h: grid.h_b,
            grid_w: grid.w_b,
        })
    }

    /// Trainable leaves. Φ appears only in learned-matrix mode; disabled
    /// modules contribute nothing.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        if self.sampler.mode == SamplingMode::Learned {
            out.push(("sampling.phi".to_string(), self.sampler.phi.clone()));
        }
        if let Some(nlm) = &self.nlm {
            out.extend(nlm.named_params());
        }
        out.extend(self.init_recon.named_params());
        out.extend(self.msnl.named_params());
        out
    }
}

/// Copy parameter values between two models of possibly different element
/// types, matching by name. Every destination name must exist in the source.
pub fn copy_params_by_name<A: Element, B: Element>(
    src: &[(String, Tensor<A>)],
    dst: &[(String, Tensor<B>)],
) -> Result<()> {
    let map: std::collections::HashMap<&str, &Tensor<A>> =
        src.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, d) in dst {
        let s = map
            .get(name.as_str())
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing from source")))?;
        let cast: Vec<B> = s.to_vec().iter().map(|v| B::from_f64_lossy(v.as_f64())).collect();
        d.set_data(&cast)?;
    }
    Ok(())
}
