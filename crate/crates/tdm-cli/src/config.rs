//! Flat `key = value` run configuration: file parsing, flag overrides, and
//! the resolved-config echo written next to every command's outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tdm_core::eval::Variant;
use tdm_core::trainer::TrainConfig;

/// Every key a config file may set. Unknown keys are rejected.
const KNOWN_KEYS: &[&str] = &[
    "dim",
    "seq_slots",
    "encoder_layers",
    "attn_heads",
    "denoiser_hidden",
    "raw_dummy_uncond",
    "t_steps",
    "s_steps",
    "beta_start",
    "beta_end",
    "lambda1",
    "lambda2",
    "kappa",
    "rho",
    "local_value",
    "global_value",
    "weighted_loss",
    "sigma",
    "learning_rate",
    "batch_size",
    "epochs",
    "patience",
    "guidance_w",
    "val_k",
    "seed",
    "data",
    "out",
    "split",
    "k",
    "eval_seeds",
    "w_list",
    "ratios",
    "variants",
];

/// Fully resolved run settings: the training configuration plus
/// command-level options.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
    pub k: usize,
    pub eval_seeds: usize,
    /// Guidance strengths to evaluate; empty means "use the training value".
    pub w_list: Vec<f64>,
    pub ratios: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: None,
            split: "test".into(),
            k: 20,
            eval_seeds: 5,
            w_list: Vec::new(),
            ratios: vec![0.1, 0.2, 0.3],
            variants: Vec::new(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| anyhow!("invalid {what} entry {s:?}"))
        })
        .collect()
}

pub fn parse_variants(value: &str) -> Result<Vec<Variant>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Variant>().map_err(|e| anyhow!("{e}")))
        .collect()
}

impl RunConfig {
    /// Apply a config file (if given), rejecting unknown keys.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                bail!(
                    "{}:{}: unknown configuration key {key:?}",
                    path.display(),
                    lineno + 1
                );
            }
            self.set(key, value)
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            () => {
                value.parse().map_err(|_| anyhow!("invalid value {value:?} for {key}"))?
            };
        }
        let t = &mut self.train;
        match key {
            "dim" => t.dim = parse!(),
            "seq_slots" => t.seq_slots = parse!(),
            "encoder_layers" => t.encoder_layers = parse!(),
            "attn_heads" => t.attn_heads = parse!(),
            "denoiser_hidden" => t.denoiser_hidden = parse!(),
            "raw_dummy_uncond" => t.raw_dummy_uncond = parse!(),
            "t_steps" => t.t_steps = parse!(),
            "s_steps" => t.s_steps = parse!(),
            "beta_start" => t.beta_start = parse!(),
            "beta_end" => t.beta_end = parse!(),
            "lambda1" => t.lambda1 = parse!(),
            "lambda2" => t.lambda2 = parse!(),
            "kappa" => t.kappa = parse!(),
            "rho" => t.rho = parse!(),
            "local_value" => t.local_value = value.parse().map_err(|e| anyhow!("{e}"))?,
            "global_value" => t.global_value = value.parse().map_err(|e| anyhow!("{e}"))?,
            "weighted_loss" => t.weighted_loss = parse!(),
            "sigma" => t.sigma = parse!(),
            "learning_rate" => t.learning_rate = parse!(),
            "batch_size" => t.batch_size = parse!(),
            "epochs" => t.epochs = parse!(),
            "patience" => t.patience = parse!(),
            "guidance_w" => t.guidance_w = parse!(),
            "val_k" => t.val_k = parse!(),
            "seed" => t.seed = parse!(),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "split" => self.split = value.to_string(),
            "k" => self.k = parse!(),
            "eval_seeds" => self.eval_seeds = parse!(),
            "w_list" => self.w_list = parse_list(value, "w_list")?,
            "ratios" => self.ratios = parse_list(value, "ratios")?,
            "variants" => self.variants = parse_variants(value)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    /// Render the fully resolved configuration as `key = value` text.
    pub fn resolved_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dim", t.dim.to_string());
        kv("seq_slots", t.seq_slots.to_string());
        kv("encoder_layers", t.encoder_layers.to_string());
        kv("attn_heads", t.attn_heads.to_string());
        kv("denoiser_hidden", t.denoiser_hidden.to_string());
        kv("raw_dummy_uncond", t.raw_dummy_uncond.to_string());
        kv("t_steps", t.t_steps.to_string());
        kv("s_steps", t.s_steps.to_string());
        kv("beta_start", t.beta_start.to_string());
        kv("beta_end", t.beta_end.to_string());
        kv("lambda1", t.lambda1.to_string());
        kv("lambda2", t.lambda2.to_string());
        kv("kappa", t.kappa.to_string());
        kv("rho", t.rho.to_string());
        kv("local_value", t.local_value.to_string());
        kv("global_value", t.global_value.to_string());
        kv("weighted_loss", t.weighted_loss.to_string());
        kv("sigma", t.sigma.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("guidance_w", t.guidance_w.to_string());
        kv("val_k", t.val_k.to_string());
        kv("seed", t.seed.to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        kv("split", self.split.clone());
        kv("k", self.k.to_string());
        kv("eval_seeds", self.eval_seeds.to_string());
        if !self.w_list.is_empty() {
            kv(
                "w_list",
                self.w_list
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        kv(
            "ratios",
            self.ratios
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        if !self.variants.is_empty() {
            kv(
                "variants",
                self.variants
                    .iter()
                    .map(|v| v.token().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        s
    }
}

/// Write a file via a scratch path and rename, so failures never leave a
/// partial file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create directory {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp.partial");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// Write `<out>/config.resolved.txt` for a run.
pub fn echo_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&out.join("config.resolved.txt"), cfg.resolved_text().as_bytes())
}
