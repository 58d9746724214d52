//! Binary checkpoints: a `NLCS` magic, a format version, then a flat list of
//! named f32 records holding parameters, optimizer moments, and scalar
//! metadata. Saving the same state twice yields identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::NlCsNet;
use crate::optim::{Adam, AdamConfig};
use crate::sampling::SamplingMode;

pub const MAGIC: [u8; 4] = *b"NLCS";
pub const VERSION: u32 = 1;

/// Flat record store; the unit every checkpoint is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint { records: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.records.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn insert_scalar(&mut self, name: &str, value: f32) {
        self.insert(name, &[1], vec![value]);
    }

    /// f64 stored losslessly as two bit-cast f32 halves.
    pub fn insert_f64(&mut self, name: &str, value: f64) {
        let bits = value.to_bits();
        self.insert(
            name,
            &[2],
            vec![
                f32::from_bits((bits >> 32) as u32),
                f32::from_bits(bits as u32),
            ],
        );
    }

    /// u64 stored losslessly as two bit-cast f32 halves.
    pub fn insert_u64(&mut self, name: &str, value: u64) {
        self.insert(
            name,
            &[2],
            vec![
                f32::from_bits((value >> 32) as u32),
                f32::from_bits(value as u32),
            ],
        );
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.records
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing record '{name}'")))
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let (_, d) = self.get(name)?;
        if d.len() != 1 {
            return Err(Error::Checkpoint(format!("record '{name}' is not scalar")));
        }
        Ok(d[0])
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        Ok(f64::from_bits(self.get_u64(name)?))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let (_, d) = self.get(name)?;
        if d.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "record '{name}' is not a 64-bit value"
            )));
        }
        Ok(((d[0].to_bits() as u64) << 32) | d[1].to_bits() as u64)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.records {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated checkpoint: wanted {} bytes at offset {}, file has {}",
                    n,
                    pos,
                    bytes.len()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, shape, data));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last record",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint { records })
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint::new()
    }
}

fn bool_flag(v: f32) -> bool {
    v != 0.0
}

fn push_usize_vec(ckpt: &mut Checkpoint, name: &str, values: &[usize]) {
    ckpt.insert(
        name,
        &[values.len()],
        values.iter().map(|&v| v as f32).collect(),
    );
}

fn read_usize_vec(ckpt: &Checkpoint, name: &str) -> Result<Vec<usize>> {
    let (_, d) = ckpt.get(name)?;
    Ok(d.iter().map(|&v| v as usize).collect())
}

/// Everything needed to resume: model, optimizer state, epoch counter.
pub struct TrainingState {
    pub model: NlCsNet<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub seed: u64,
}

/// Serialize a full training state.
pub fn save_training_state(
    path: &Path,
    model: &NlCsNet<f32>,
    optimizer: &Adam<f32>,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    let cfg = &model.config;
    let mut ckpt = Checkpoint::new();
    ckpt.insert_scalar("meta/epoch", epoch as f32);
    ckpt.insert_u64("meta/seed", seed);

    ckpt.insert_scalar("cfg/scales", cfg.scales as f32);
    ckpt.insert_scalar("cfg/nonlocal_per_scale", cfg.nonlocal_per_scale as f32);
    push_usize_vec(&mut ckpt, "cfg/channels", &cfg.channels);
    ckpt.insert_scalar("cfg/down_branches", cfg.down_branches as f32);
    ckpt.insert_scalar("cfg/up_branches", cfg.up_branches as f32);
    ckpt.insert_scalar("cfg/down_blocks", cfg.down_blocks as f32);
    ckpt.insert_scalar("cfg/up_blocks", cfg.up_blocks as f32);
    push_usize_vec(&mut ckpt, "cfg/nonlocal_blocks", &cfg.nonlocal_blocks);
    push_usize_vec(&mut ckpt, "cfg/pool_factors", &cfg.pool_factors);
    ckpt.insert_f64("cfg/gamma", cfg.gamma);
    ckpt.insert_f64("cfg/gamma_u", cfg.gamma_u);
    ckpt.insert_f64("cfg/gamma_v", cfg.gamma_v);
    ckpt.insert_scalar("cfg/enable_coupling", cfg.enable_coupling as u8 as f32);
    ckpt.insert_scalar("cfg/enable_nlm", cfg.enable_nlm as u8 as f32);
    ckpt.insert_scalar("cfg/enable_msn", cfg.enable_msn as u8 as f32);
    ckpt.insert_scalar("cfg/enable_nlf", cfg.enable_nlf as u8 as f32);

    ckpt.insert_f64("cfg/rate", model.sampler.rate);
    ckpt.insert_scalar("cfg/block_size", model.sampler.block_size as f32);
    ckpt.insert_scalar(
        "cfg/learned_matrix",
        (model.sampler.mode == SamplingMode::Learned) as u8 as f32,
    );

    let oc = optimizer.config();
    ckpt.insert_f64("opt/lr", oc.learning_rate);
    ckpt.insert_f64("opt/beta1", oc.beta1);
    ckpt.insert_f64("opt/beta2", oc.beta2);
    ckpt.insert_f64("opt/epsilon", oc.epsilon);
    ckpt.insert_f64("opt/weight_decay", oc.weight_decay);
    let (steps, moments) = optimizer.state();
    ckpt.insert_u64("opt/steps", steps);

    for (name, p) in model.named_params() {
        ckpt.insert(&format!("param/{name}"), p.shape(), p.to_vec());
    }
    for (name, m, v) in &moments {
        let shape = [m.len()];
        ckpt.insert(&format!("opt/m/{name}"), &shape, m.clone());
        ckpt.insert(&format!("opt/v/{name}"), &shape, v.clone());
    }
    ckpt.write(path)
}

/// Rebuild model and optimizer from a checkpoint.
pub fn load_training_state(path: &Path) -> Result<TrainingState> {
    let ckpt = Checkpoint::read(path)?;
    let config = ModelConfig {
        scales: ckpt.scalar("cfg/scales")? as usize,
        nonlocal_per_scale: ckpt.scalar("cfg/nonlocal_per_scale")? as usize,
        channels: read_usize_vec(&ckpt, "cfg/channels")?,
        down_branches: ckpt.scalar("cfg/down_branches")? as usize,
        up_branches: ckpt.scalar("cfg/up_branches")? as usize,
        down_blocks: ckpt.scalar("cfg/down_blocks")? as usize,
        up_blocks: ckpt.scalar("cfg/up_blocks")? as usize,
        nonlocal_blocks: read_usize_vec(&ckpt, "cfg/nonlocal_blocks")?,
        pool_factors: read_usize_vec(&ckpt, "cfg/pool_factors")?,
        gamma: ckpt.get_f64("cfg/gamma")?,
        gamma_u: ckpt.get_f64("cfg/gamma_u")?,
        gamma_v: ckpt.get_f64("cfg/gamma_v")?,
        enable_coupling: bool_flag(ckpt.scalar("cfg/enable_coupling")?),
        enable_nlm: bool_flag(ckpt.scalar("cfg/enable_nlm")?),
        enable_msn: bool_flag(ckpt.scalar("cfg/enable_msn")?),
        enable_nlf: bool_flag(ckpt.scalar("cfg/enable_nlf")?),
    };
    let seed = ckpt.get_u64("meta/seed")?;
    let mode = if bool_flag(ckpt.scalar("cfg/learned_matrix")?) {
        SamplingMode::Learned
    } else {
        SamplingMode::FixedRandom
    };
    let model = NlCsNet::new(
        &config,
        ckpt.get_f64("cfg/rate")?,
        ckpt.scalar("cfg/block_size")? as usize,
        mode,
        seed,
    )?;
    for (name, p) in model.named_params() {
        let (shape, data) = ckpt.get(&format!("param/{name}"))?;
        if shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?} in checkpoint, model expects {:?}",
                shape,
                p.shape()
            )));
        }
        p.set_data(data)?;
    }

    let adam_cfg = AdamConfig {
        learning_rate: ckpt.get_f64("opt/lr")?,
        beta1: ckpt.get_f64("opt/beta1")?,
        beta2: ckpt.get_f64("opt/beta2")?,
        epsilon: ckpt.get_f64("opt/epsilon")?,
        weight_decay: ckpt.get_f64("opt/weight_decay")?,
    };
    let mut optimizer = Adam::new(model.named_params(), adam_cfg);
    let steps = ckpt.get_u64("opt/steps")?;
    let mut moments = Vec::new();
    for (name, _) in model.named_params() {
        let (_, m) = ckpt.get(&format!("opt/m/{name}"))?;
        let (_, v) = ckpt.get(&format!("opt/v/{name}"))?;
        moments.push((name, m.to_vec(), v.to_vec()));
    }
    optimizer.restore_state(steps, &moments)?;

    Ok(TrainingState {
        model,
        optimizer,
        epoch: ckpt.scalar("meta/epoch")? as usize,
        seed,
    })
}
