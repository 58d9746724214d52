//! Architecture and training hyperparameters.

use crate::error::{Error, Result};

/// Multi-scale reconstruction-network hyperparameters plus the ablation
/// toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of scale rows (S_B).
    pub scales: usize,
    /// Non-local submodules per row (S_N).
    pub nonlocal_per_scale: usize,
    /// Channel width of each row.
    pub channels: Vec<usize>,
    /// Total downsampling branches (d_u).
    pub down_branches: usize,
    /// Total upsampling branches (d_v).
    pub up_branches: usize,
    /// Residual blocks in each downsample submodule (d_l).
    pub down_blocks: usize,
    /// Residual blocks in each upsample submodule (d_r).
    pub up_blocks: usize,
    /// Residual blocks inside the non-local submodules, per row (d_t).
    pub nonlocal_blocks: Vec<usize>,
    /// Key/value spatial pooling per row; the highest-resolution row pools
    /// hardest.
    pub pool_factors: Vec<usize>,
    pub gamma: f64,
    pub gamma_u: f64,
    pub gamma_v: f64,
    pub enable_coupling: bool,
    pub enable_nlm: bool,
    pub enable_msn: bool,
    pub enable_nlf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 3,
            nonlocal_per_scale: 3,
            channels: vec![16, 32, 64],
            down_branches: 3,
            up_branches: 3,
            down_blocks: 3,
            up_blocks: 3,
            nonlocal_blocks: vec![1, 2, 3],
            pool_factors: vec![16, 4, 1],
            gamma: 0.001,
            gamma_u: 1.0,
            gamma_v: 1.0,
            enable_coupling: true,
            enable_nlm: true,
            enable_msn: true,
            enable_nlf: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths that train in minutes on a workstation.
    pub fn desk() -> Self {
        ModelConfig {
            channels: vec![8, 16, 32],
            ..Default::default()
        }
    }

    /// Even smaller configuration for test harnesses.
    pub fn tiny() -> Self {
        ModelConfig {
            scales: 2,
            nonlocal_per_scale: 2,
            channels: vec![4, 8],
            down_branches: 1,
            up_branches: 1,
            down_blocks: 1,
            up_blocks: 1,
            nonlocal_blocks: vec![1, 1],
            pool_factors: vec![4, 1],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.nonlocal_per_scale == 0 {
            return Err(Error::Config("scales and submodule counts must be >= 1".into()));
        }
        if self.channels.len() != self.scales
            || self.nonlocal_blocks.len() != self.scales
            || self.pool_factors.len() != self.scales
        {
            return Err(Error::Config(format!(
                "channels/nonlocal_blocks/pool_factors must each have {} entries",
                self.scales
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.pool_factors.iter().any(|&p| p == 0) {
            return Err(Error::Config("channel widths and pool factors must be >= 1".into()));
        }
        let min_branches = self.effective_scales().saturating_sub(1);
        if self.enable_msn && (self.down_branches < min_branches || self.up_branches < min_branches)
        {
            return Err(Error::Config(format!(
                "need at least {} down and up branches to span {} scales",
                min_branches, self.scales
            )));
        }
        Ok(())
    }

    /// Disabling the multi-scale network leaves only the first row.
    pub fn effective_scales(&self) -> usize {
        if self.enable_msn {
            self.scales
        } else {
            1
        }
    }

    /// Spatial divisor the network input is padded to: every row must pool
    /// evenly after its stride-2 descents.
    pub fn alignment(&self) -> usize {
        fn lcm(a: usize, b: usize) -> usize {
            fn gcd(a: usize, b: usize) -> usize {
                if b == 0 { a } else { gcd(b, a % b) }
            }
            a / gcd(a, b) * b
        }
        (0..self.effective_scales())
            .map(|s| (1usize << s) * self.pool_factors[s])
            .fold(1, lcm)
    }
}

/// Training-run parameters. Desk-scale defaults; the paper-scale protocol
/// (128×128 patches, batch 8, 200×1000 iterations) stays selectable.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_dir: std::path::PathBuf,
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub rate: f64,
    pub block_size: usize,
    pub learned_matrix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: std::path::PathBuf::from("data"),
            patch_size: 64,
            batch_size: 4,
            epochs: 2,
            iterations_per_epoch: 100,
            base_lr: 1e-4,
            lr_decay_factor: 2.0,
            lr_decay_every: 30,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 1,
            rate: 0.10,
            block_size: 32,
            learned_matrix: false,
        }
    }
}

impl TrainConfig {
    /// lr(epoch) = base_lr / decay_factor^floor(epoch / decay_every)
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.base_lr / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("patch and batch sizes must be >= 1".into()));
        }
        if self.rate <= 0.0 || self.rate > 1.0 {
            return Err(Error::Config(format!(
                "sampling rate must be in (0, 1], got {}",
                self.rate
            )));
        }
        if self.base_lr <= 0.0 || self.lr_decay_factor < 1.0 || self.lr_decay_every == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        Ok(())
    }
}
