//! Training loop: Adam with decoupled weight decay, a halving learning-rate
//! schedule, per-epoch checkpoints, and a CSV loss log.
//!
//! Every iteration derives its RNG from `(seed, epoch, iteration)` rather
//! than consuming a shared stream, so resuming from a checkpoint replays the
//! exact remaining schedule.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_training_state, save_training_state};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::model::NlCsNet;
use crate::optim::{Adam, AdamConfig};
use crate::sampling::SamplingMode;

/// One optimizer step, as reported to the log and to callers.
#[derive(Debug, Clone)]
pub struct IterationLog {
    pub epoch: usize,
    pub iteration: usize,
    pub global_step: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub reconstruction: f64,
    pub measurement_coupling: f64,
    pub feature_coupling: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless per-iteration seed so resume needs no stored RNG position.
pub fn iteration_seed(seed: u64, epoch: usize, iteration: usize) -> u64 {
    splitmix64(seed ^ splitmix64(epoch as u64) ^ splitmix64((iteration as u64) << 20))
}

pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&IterationLog)>,
) -> Result<TrainReport> {
    model_config.validate()?;
    train_config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dataset = Dataset::load(&train_config.data_dir)?;

    let (model, mut optimizer, start_epoch) = match resume {
        Some(path) => {
            let state = load_training_state(path)?;
            if state.model.config != *model_config {
                return Err(Error::Checkpoint(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
            (state.model, state.optimizer, state.epoch)
        }
        None => {
            let mode = if train_config.learned_matrix {
                SamplingMode::Learned
            } else {
                SamplingMode::FixedRandom
            };
            let model = NlCsNet::new(
                model_config,
                train_config.rate,
                train_config.block_size,
                mode,
                train_config.seed,
            )?;
            let optimizer = Adam::new(
                model.named_params(),
                AdamConfig {
                    learning_rate: train_config.base_lr,
                    beta1: train_config.beta1,
                    beta2: train_config.beta2,
                    epsilon: train_config.epsilon,
                    weight_decay: train_config.weight_decay,
                },
            );
            (model, optimizer, 0)
        }
    };

    let log_path = out_dir.join("loss.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if log.metadata().map(|m| m.len()).unwrap_or(0) == 0 {
        writeln!(
            log,
            "global_step,epoch,iteration,learning_rate,total,reconstruction,measurement_coupling,feature_coupling"
        )
        .map_err(|e| Error::io(&log_path, e))?;
    }

    let mut final_loss = f64::NAN;
    let mut final_checkpoint = out_dir.join("latest.ckpt");
    for epoch in start_epoch..train_config.epochs {
        optimizer.set_learning_rate(train_config.learning_rate_at(epoch));
        for iteration in 0..train_config.iterations_per_epoch {
            let mut rng =
                ChaCha8Rng::seed_from_u64(iteration_seed(train_config.seed, epoch, iteration));
            let mut targets = Vec::with_capacity(train_config.batch_size);
            for _ in 0..train_config.batch_size {
                let patch = dataset.random_patch(train_config.patch_size, &mut rng)?;
                targets.push(augment(&patch, &mut rng)?);
            }
            let mut outputs = Vec::with_capacity(targets.len());
            for t in &targets {
                outputs.push(model.forward(t)?);
            }
            let report = total_loss(&model.config, &outputs, &targets).map_err(|e| {
                Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, iteration {iteration}: {e}"
                ))
            })?;
            optimizer.zero_grad();
            report.total.backward()?;
            optimizer.step().map_err(|e| {
                Error::NonFinite(format!(
                    "update rejected at epoch {epoch}, iteration {iteration}: {e}"
                ))
            })?;

            let entry = IterationLog {
                epoch,
                iteration,
                global_step: epoch * train_config.iterations_per_epoch + iteration,
                learning_rate: train_config.learning_rate_at(epoch),
                total: report.total_value,
                reconstruction: report.reconstruction,
                measurement_coupling: report.measurement_coupling,
                feature_coupling: report.feature_coupling,
            };
            writeln!(
                log,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                entry.global_step,
                entry.epoch,
                entry.iteration,
                entry.learning_rate,
                entry.total,
                entry.reconstruction,
                entry.measurement_coupling,
                entry.feature_coupling
            )
            .map_err(|e| Error::io(&log_path, e))?;
            final_loss = entry.total;
            if let Some(cb) = progress.as_deref_mut() {
                cb(&entry);
            }
        }
        let epoch_path = out_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
        save_training_state(&epoch_path, &model, &optimizer, epoch + 1, train_config.seed)?;
        save_training_state(
            &final_checkpoint,
            &model,
            &optimizer,
            epoch + 1,
            train_config.seed,
        )?;
        final_checkpoint = out_dir.join("latest.ckpt");
    }

    Ok(TrainReport {
        epochs_run: train_config.epochs.saturating_sub(start_epoch),
        final_loss,
        final_checkpoint,
        loss_log: log_path,
    })
}
