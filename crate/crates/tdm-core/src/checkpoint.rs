//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TDM1"
//! version u32      1
//! count   u64      number of named arrays
//! arrays  repeated: name_len u64, name UTF-8, rank u64, dims u64 x rank,
//!                   data f64 x prod(dims) (row-major)
//! cfg_len u64, config UTF-8 (key=value lines)
//! rng_len u64, rng state bytes
//! ```
//!
//! Save/load round-trips bit-exactly, including optimizer moments and the
//! counters that make resumed training replay the uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffusion::NoiseSchedule;
use crate::dts::{GlobalValue, LocalValue};
use crate::error::{Result, TdmError};
use crate::model::ModelParams;
use crate::trainer::{AdamState, TrainConfig};

const MAGIC: &[u8; 4] = b"TDM1";
const VERSION: u32 = 1;

/// Complete training state: parameters, optimizer moments, configuration,
/// schedule, counters, and metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub item_count: u32,
    pub schedule: NoiseSchedule,
    pub epochs_done: usize,
    pub global_step: u64,
    pub train_loss: Vec<f64>,
    pub val_hr: Vec<f64>,
}

impl Checkpoint {
    pub fn model_config(&self) -> crate::model::ModelConfig {
        self.config.model_config(self.item_count)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for a in self.params.named_arrays() {
            arrays.push((a.name.clone(), a.dims.clone(), a.data.to_vec()));
        }
        for a in self.adam.m.named_arrays() {
            arrays.push((format!("adam.m.{}", a.name), a.dims.clone(), a.data.to_vec()));
        }
        for a in self.adam.v.named_arrays() {
            arrays.push((format!("adam.v.{}", a.name), a.dims.clone(), a.data.to_vec()));
        }
        arrays.push((
            "schedule.betas".into(),
            vec![self.schedule.betas().len()],
            self.schedule.betas().to_vec(),
        ));
        arrays.push((
            "history.train_loss".into(),
            vec![self.train_loss.len()],
            self.train_loss.clone(),
        ));
        arrays.push((
            "history.val_hr".into(),
            vec![self.val_hr.len()],
            self.val_hr.clone(),
        ));

        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, dims, data) in &arrays {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let config = self.config_text();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        let rng = self.rng_state_bytes();
        out.extend_from_slice(&(rng.len() as u64).to_le_bytes());
        out.extend_from_slice(&rng);
        out
    }

    /// The run's randomness is fully determined by the master seed and the
    /// counters; these 24 bytes are the entire RNG state.
    fn rng_state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out
    }

    fn config_text(&self) -> String {
        let c = &self.config;
        let mut lines: Vec<String> = Vec::new();
        let mut kv = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        kv("dim", c.dim.to_string());
        kv("seq_slots", c.seq_slots.to_string());
        kv("encoder_layers", c.encoder_layers.to_string());
        kv("attn_heads", c.attn_heads.to_string());
        kv("denoiser_hidden", c.denoiser_hidden.to_string());
        kv("raw_dummy_uncond", c.raw_dummy_uncond.to_string());
        kv("t_steps", c.t_steps.to_string());
        kv("s_steps", c.s_steps.to_string());
        kv("beta_start", c.beta_start.to_string());
        kv("beta_end", c.beta_end.to_string());
        kv("lambda1", c.lambda1.to_string());
        kv("lambda2", c.lambda2.to_string());
        kv("kappa", c.kappa.to_string());
        kv("rho", c.rho.to_string());
        kv("local_value", c.local_value.to_string());
        kv("global_value", c.global_value.to_string());
        kv("weighted_loss", c.weighted_loss.to_string());
        kv("sigma", c.sigma.to_string());
        kv("learning_rate", c.learning_rate.to_string());
        kv("batch_size", c.batch_size.to_string());
        kv("epochs", c.epochs.to_string());
        kv("patience", c.patience.to_string());
        kv("guidance_w", c.guidance_w.to_string());
        kv("val_k", c.val_k.to_string());
        kv("seed", c.seed.to_string());
        kv("item_count", self.item_count.to_string());
        kv("epochs_done", self.epochs_done.to_string());
        kv("global_step", self.global_step.to_string());
        kv("adam_t", self.adam.t.to_string());
        lines.join("\n") + "\n"
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(TdmError::CheckpointFormat {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TdmError::CheckpointFormat {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }

        let count = r.u64("array count")? as usize;
        let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u64("array name length")? as usize;
            let name_off = r.offset;
            let name_bytes = r.take(name_len, "array name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| TdmError::CheckpointFormat {
                    offset: name_off as u64,
                    message: format!("array {i} name is not UTF-8"),
                })?
                .to_string();
            let rank = r.u64("array rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("array dim")? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(
                    r.take(8, "array data")?.try_into().expect("8 bytes"),
                ));
            }
            arrays.insert(name, (dims, data));
        }

        let cfg_len = r.u64("config length")? as usize;
        let cfg_off = r.offset;
        let cfg_bytes = r.take(cfg_len, "config text")?;
        let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| TdmError::CheckpointFormat {
            offset: cfg_off as u64,
            message: "config text is not UTF-8".into(),
        })?;
        let kv = parse_config_text(cfg_text, cfg_off as u64)?;

        let rng_len = r.u64("rng state length")? as usize;
        let _rng = r.take(rng_len, "rng state")?;

        build_checkpoint(kv, arrays, cfg_off as u64)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(TdmError::CheckpointFormat {
                offset: self.offset as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn parse_config_text(text: &str, offset: u64) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| TdmError::CheckpointFormat {
            offset,
            message: format!("config line without '=': {line:?}"),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn build_checkpoint(
    kv: BTreeMap<String, String>,
    mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    cfg_offset: u64,
) -> Result<Checkpoint> {
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| TdmError::CheckpointFormat {
            offset: cfg_offset,
            message: format!("config key {k} missing"),
        })
    };
    let parse_err = |k: &str, v: &str| TdmError::CheckpointFormat {
        offset: cfg_offset,
        message: format!("config key {k} has unparsable value {v:?}"),
    };
    macro_rules! field {
        ($k:expr, $t:ty) => {{
            let v = get($k)?;
            v.parse::<$t>().map_err(|_| parse_err($k, v))?
        }};
    }

    let config = TrainConfig {
        dim: field!("dim", usize),
        seq_slots: field!("seq_slots", usize),
        encoder_layers: field!("encoder_layers", usize),
        attn_heads: field!("attn_heads", usize),
        denoiser_hidden: field!("denoiser_hidden", usize),
        raw_dummy_uncond: field!("raw_dummy_uncond", bool),
        t_steps: field!("t_steps", usize),
        s_steps: field!("s_steps", usize),
        beta_start: field!("beta_start", f64),
        beta_end: field!("beta_end", f64),
        lambda1: field!("lambda1", f64),
        lambda2: field!("lambda2", f64),
        kappa: field!("kappa", f64),
        rho: field!("rho", f64),
        local_value: field!("local_value", LocalValue),
        global_value: field!("global_value", GlobalValue),
        weighted_loss: field!("weighted_loss", bool),
        sigma: field!("sigma", f64),
        learning_rate: field!("learning_rate", f64),
        batch_size: field!("batch_size", usize),
        epochs: field!("epochs", usize),
        patience: field!("patience", usize),
        guidance_w: field!("guidance_w", f64),
        val_k: field!("val_k", usize),
        seed: field!("seed", u64),
    };
    let item_count = field!("item_count", u32);
    let epochs_done = field!("epochs_done", usize);
    let global_step = field!("global_step", u64);
    let adam_t = field!("adam_t", u64);

    let model_cfg = config.model_config(item_count);
    let mut params = ModelParams::zeros(&model_cfg);
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();

    let mut fill = |target: &mut ModelParams, prefix: &str| -> Result<()> {
        for arr in target.named_arrays_mut() {
            let key = format!("{prefix}{}", arr.name);
            let (dims, data) = arrays.remove(&key).ok_or_else(|| TdmError::CheckpointFormat {
                offset: cfg_offset,
                message: format!("array {key} missing"),
            })?;
            if dims != arr.dims || data.len() != arr.data.len() {
                return Err(TdmError::CheckpointFormat {
                    offset: cfg_offset,
                    message: format!(
                        "array {key} has shape {dims:?}, expected {:?}",
                        arr.dims
                    ),
                });
            }
            arr.data.copy_from_slice(&data);
        }
        Ok(())
    };
    fill(&mut params, "")?;
    fill(&mut m, "adam.m.")?;
    fill(&mut v, "adam.v.")?;

    let schedule = NoiseSchedule::build(
        config.t_steps,
        config.beta_start,
        config.beta_end,
        config.s_steps,
    )?;
    if let Some((_, betas)) = arrays.remove("schedule.betas") {
        if betas.iter().zip(schedule.betas()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(TdmError::CheckpointFormat {
                offset: cfg_offset,
                message: "stored schedule disagrees with the configured one".into(),
            });
        }
    } else {
        return Err(TdmError::CheckpointFormat {
            offset: cfg_offset,
            message: "array schedule.betas missing".into(),
        });
    }
    let train_loss = arrays
        .remove("history.train_loss")
        .map(|(_, d)| d)
        .ok_or_else(|| TdmError::CheckpointFormat {
            offset: cfg_offset,
            message: "array history.train_loss missing".into(),
        })?;
    let val_hr = arrays
        .remove("history.val_hr")
        .map(|(_, d)| d)
        .ok_or_else(|| TdmError::CheckpointFormat {
            offset: cfg_offset,
            message: "array history.val_hr missing".into(),
        })?;

    Ok(Checkpoint {
        params,
        adam: AdamState { m, v, t: adam_t },
        config,
        item_count,
        schedule,
        epochs_done,
        global_step,
        train_loss,
        val_hr,
    })
}

/// Write a checkpoint atomically (write to a scratch file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| TdmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TdmError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TdmError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
