//! Command implementations. Every command resolves its configuration,
//! echoes it to `<out>/config.resolved.txt`, and writes outputs atomically.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use tdm_core::corpus::{
    chronological_split, dataset_to_text, inject_missing, load_sequences_filtered, load_split,
    synth_generate, RawDataset, SplitSpec, SynthSpec,
};
use tdm_core::eval::{
    ablation_run, evaluate, metrics_csv, robustness_sweep, summary_table, EvalConfig, MetricsRow,
    Similarity, Variant, ALL_VARIANTS,
};
use tdm_core::rng::SeedTree;
use tdm_core::trainer::{load_checkpoint, resume as resume_training, save_checkpoint, train as train_model};

use crate::config::{echo_resolved, parse_variants, write_atomic, RunConfig};
use crate::CommonOverrides;

const ID_MAP_FILE: &str = "items.map";

fn resolve(overrides: &CommonOverrides, data: &Path, out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &overrides.config {
        cfg.load_file(path)?;
    }
    let t = &mut cfg.train;
    macro_rules! over {
        ($($field:ident),*) => {
            $(if let Some(v) = overrides.$field { t.$field = v; })*
        };
    }
    over!(
        seed,
        learning_rate,
        batch_size,
        epochs,
        patience,
        lambda1,
        lambda2,
        kappa,
        rho,
        t_steps,
        s_steps,
        dim,
        encoder_layers,
        attn_heads,
        denoiser_hidden,
        guidance_w
    );
    if let Some(v) = &overrides.local_value {
        t.local_value = v.parse().map_err(|e| anyhow!("{e}"))?;
    }
    if let Some(v) = &overrides.global_value {
        t.global_value = v.parse().map_err(|e| anyhow!("{e}"))?;
    }
    cfg.data = Some(data.to_path_buf());
    cfg.out = Some(out.to_path_buf());
    Ok(cfg)
}

/// Write the standard data-directory layout: three split files plus the
/// dense-id map (`orig<TAB>dense` per line).
fn write_data_dir(
    out: &Path,
    splits: (&RawDataset, &RawDataset, &RawDataset),
    id_map: &[u64],
) -> Result<()> {
    let (tr, va, te) = splits;
    write_atomic(&out.join("train.txt"), dataset_to_text(tr).as_bytes())?;
    write_atomic(&out.join("val.txt"), dataset_to_text(va).as_bytes())?;
    write_atomic(&out.join("test.txt"), dataset_to_text(te).as_bytes())?;
    let mut map = String::new();
    for (dense, orig) in id_map.iter().enumerate() {
        let _ = writeln!(map, "{orig}\t{dense}");
    }
    write_atomic(&out.join(ID_MAP_FILE), map.as_bytes())?;
    Ok(())
}

fn read_item_count(data: &Path) -> Result<u32> {
    let path = data.join(ID_MAP_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read id map {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count() as u32)
}

fn load_data_dir(data: &Path) -> Result<(RawDataset, RawDataset, RawDataset)> {
    let item_count = read_item_count(data)?;
    let tr = load_split(data.join("train.txt"), item_count)?;
    let va = load_split(data.join("val.txt"), item_count)?;
    let te = load_split(data.join("test.txt"), item_count)?;
    Ok((tr, va, te))
}

fn load_split_by_name(data: &Path, split: &str) -> Result<RawDataset> {
    let file = match split {
        "train" => "train.txt",
        "val" => "val.txt",
        "test" => "test.txt",
        other => bail!("unknown split {other:?} (expected train|val|test)"),
    };
    let item_count = read_item_count(data)?;
    Ok(load_split(data.join(file), item_count)?)
}

pub fn prepare(
    input: &Path,
    out: &Path,
    min_item_freq: usize,
    min_seq_len: usize,
    train_frac: f64,
    val_frac: f64,
    test_frac: f64,
) -> Result<()> {
    let (dataset, id_map) = load_sequences_filtered(input, min_item_freq, min_seq_len)?;
    let spec = SplitSpec {
        train_fraction: train_frac,
        val_fraction: val_frac,
        test_fraction: test_frac,
    };
    let (tr, va, te) = chronological_split(&dataset, &spec)?;
    write_data_dir(out, (&tr, &va, &te), &id_map)?;
    let resolved = format!(
        "input = {}\nout = {}\nmin_item_freq = {min_item_freq}\nmin_seq_len = {min_seq_len}\n\
         train_frac = {train_frac}\nval_frac = {val_frac}\ntest_frac = {test_frac}\n",
        input.display(),
        out.display(),
    );
    write_atomic(&out.join("config.resolved.txt"), resolved.as_bytes())?;
    println!(
        "prepared {} sequences over {} items -> {} / {} / {} (train/val/test) in {}",
        dataset.len(),
        dataset.item_count,
        tr.len(),
        va.len(),
        te.len(),
        out.display()
    );
    Ok(())
}

pub fn synth(
    out: &Path,
    sequences: usize,
    items: u32,
    clusters: u32,
    len_min: usize,
    len_max: usize,
    missing_ratio: f64,
    seed: u64,
) -> Result<()> {
    let spec = SynthSpec {
        n_sequences: sequences,
        n_items: items,
        n_clusters: clusters,
        len_min,
        len_max,
    };
    let tree = SeedTree::new(seed);
    let mut dataset = synth_generate(&spec, &mut tree.stream("synth", 0))?;
    if missing_ratio > 0.0 {
        dataset = inject_missing(&dataset, missing_ratio, &mut tree.stream("missing", 0))?;
    }
    let (tr, va, te) = chronological_split(&dataset, &SplitSpec::default())?;
    let id_map: Vec<u64> = (0..u64::from(items)).collect();
    write_data_dir(out, (&tr, &va, &te), &id_map)?;
    let resolved = format!(
        "out = {}\nsequences = {sequences}\nitems = {items}\nclusters = {clusters}\n\
         len_min = {len_min}\nlen_max = {len_max}\nmissing_ratio = {missing_ratio}\nseed = {seed}\n",
        out.display(),
    );
    write_atomic(&out.join("config.resolved.txt"), resolved.as_bytes())?;
    println!(
        "synthesized {} sequences over {} items ({} clusters, missing ratio {}) -> {}",
        sequences,
        items,
        clusters,
        missing_ratio,
        out.display()
    );
    Ok(())
}

fn loss_curve_csv(train_loss: &[f64], val_hr: &[f64]) -> String {
    let mut out = String::from("epoch,train_loss,val_hr\n");
    for (e, (l, h)) in train_loss.iter().zip(val_hr).enumerate() {
        let _ = writeln!(out, "{e},{l},{h}");
    }
    out
}

pub fn train(data: &Path, out: &Path, resume: bool, overrides: &CommonOverrides) -> Result<()> {
    let cfg = resolve(overrides, data, out)?;
    let (tr, va, _) = load_data_dir(data)?;

    let last_path = out.join("last.ckpt");
    let best_path = out.join("best.ckpt");
    let outcome = if resume {
        // The stored configuration governs the replay; only the epoch
        // budget and patience may be raised for the continued run.
        let mut last = load_checkpoint(&last_path)
            .with_context(|| format!("--resume needs {}", last_path.display()))?;
        last.config.epochs = cfg.train.epochs;
        last.config.patience = cfg.train.patience;
        let best = load_checkpoint(&best_path).ok().map(|mut b| {
            b.config.epochs = cfg.train.epochs;
            b.config.patience = cfg.train.patience;
            b
        });
        resume_training(last, best, &tr, &va)?
    } else {
        train_model(&cfg.train, &tr, &va)?
    };

    echo_resolved(out, &cfg)?;
    save_checkpoint(&outcome.best, &best_path)?;
    save_checkpoint(&outcome.last, &last_path)?;
    write_atomic(
        &out.join("loss_curve.csv"),
        loss_curve_csv(&outcome.last.train_loss, &outcome.last.val_hr).as_bytes(),
    )?;
    println!(
        "trained {} epochs ({} steps): train loss {:.4} -> {:.4}, best val HR@{} {:.4} at epoch {}",
        outcome.last.epochs_done,
        outcome.last.global_step,
        outcome.last.train_loss.first().copied().unwrap_or(f64::NAN),
        outcome.last.train_loss.last().copied().unwrap_or(f64::NAN),
        outcome.last.config.val_k,
        outcome.best.val_hr.last().copied().unwrap_or(f64::NAN),
        outcome.best.epochs_done.saturating_sub(1),
    );
    Ok(())
}

/// Label the variant a configuration corresponds to, for report rows.
fn variant_label_of(cfg: &tdm_core::trainer::TrainConfig) -> String {
    if cfg.lambda1 == 0.0 {
        return "Base".to_string();
    }
    ALL_VARIANTS
        .iter()
        .filter(|v| !matches!(v, Variant::Base))
        .find(|v| {
            let c = v.apply(cfg);
            c.local_value == cfg.local_value && c.global_value == cfg.global_value
        })
        .map(|v| v.label().to_string())
        .unwrap_or_else(|| "custom".to_string())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: Option<String>,
    k: Option<usize>,
    w: Option<String>,
    seeds: Option<usize>,
    similarity: Option<String>,
    overrides: &CommonOverrides,
) -> Result<()> {
    let mut cfg = resolve(overrides, data, out)?;
    let similarity = match similarity.as_deref() {
        None | Some("inner") => Similarity::InnerProduct,
        Some("cosine") => Similarity::Cosine,
        Some(other) => bail!("unknown similarity {other:?} (expected inner|cosine)"),
    };
    if let Some(s) = split {
        cfg.split = s;
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(n) = seeds {
        cfg.eval_seeds = n;
    }
    if let Some(list) = &w {
        cfg.w_list = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| anyhow!("invalid w value {s:?}")))
            .collect::<Result<_>>()?;
    }

    let ckpt = load_checkpoint(checkpoint)?;
    let split_data = load_split_by_name(data, &cfg.split)?;
    let w_values = if cfg.w_list.is_empty() {
        vec![ckpt.config.guidance_w]
    } else {
        cfg.w_list.clone()
    };
    let label = variant_label_of(&ckpt.config);

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut csv_extra = String::new();
    for &w in &w_values {
        let eval_cfg = EvalConfig {
            k: cfg.k,
            seeds: (0..cfg.eval_seeds as u64).collect(),
            gen: tdm_core::diffusion::GenerationConfig {
                w,
                sigma: ckpt.config.sigma,
            },
            similarity,
        };
        let metrics = evaluate(&ckpt, &split_data, &eval_cfg)?;
        let variant = if w_values.len() > 1 {
            format!("{label} w={w}")
        } else {
            label.clone()
        };
        for s in &metrics.per_seed {
            rows.push(MetricsRow {
                variant: variant.clone(),
                ratio: 0.0,
                seed: s.seed,
                hr: s.hr,
                ndcg: s.ndcg,
                n: s.n,
            });
        }
        let _ = writeln!(
            csv_extra,
            "{variant},0,mean,{},{},{}",
            metrics.hr_mean, metrics.ndcg_mean, metrics.n
        );
        println!(
            "w={w}: HR@{} {:.4} +-{:.4}, NDCG@{} {:.4} +-{:.4} over {} sequences x {} seeds",
            cfg.k, metrics.hr_mean, metrics.hr_std, cfg.k, metrics.ndcg_mean, metrics.ndcg_std,
            metrics.n, cfg.eval_seeds
        );
    }

    echo_resolved(out, &cfg)?;
    let csv = format!("{}{}", metrics_csv(&rows), csv_extra);
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    write_atomic(&out.join("summary.txt"), summary_table(&rows).as_bytes())?;
    Ok(())
}

pub fn ablate(
    data: &Path,
    out: &Path,
    variants: Option<String>,
    seeds: Option<usize>,
    overrides: &CommonOverrides,
) -> Result<()> {
    let mut cfg = resolve(overrides, data, out)?;
    if let Some(list) = &variants {
        cfg.variants = parse_variants(list)?;
    }
    if let Some(n) = seeds {
        cfg.eval_seeds = n;
    }
    let chosen: Vec<Variant> = if cfg.variants.is_empty() {
        ALL_VARIANTS.to_vec()
    } else {
        cfg.variants.clone()
    };

    let (tr, va, te) = load_data_dir(data)?;
    let eval_cfg = EvalConfig {
        k: cfg.k,
        seeds: (0..cfg.eval_seeds as u64).collect(),
        gen: cfg.train.generation_config(),
        ..EvalConfig::default()
    };
    let rows = ablation_run(&cfg.train, &chosen, &tr, &va, &te, &eval_cfg)?;

    echo_resolved(out, &cfg)?;
    write_atomic(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    let table = summary_table(&rows);
    write_atomic(&out.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn sweep_missing(
    data: &Path,
    out: &Path,
    ratios: Option<String>,
    seeds: Option<usize>,
    variants: Option<String>,
    overrides: &CommonOverrides,
) -> Result<()> {
    let mut cfg = resolve(overrides, data, out)?;
    if let Some(list) = &ratios {
        cfg.ratios = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| anyhow!("invalid ratio {s:?}")))
            .collect::<Result<_>>()?;
    }
    if let Some(n) = seeds {
        cfg.eval_seeds = n;
    }
    if let Some(list) = &variants {
        cfg.variants = parse_variants(list)?;
    }
    let chosen: Vec<Variant> = if cfg.variants.is_empty() {
        vec![Variant::Full]
    } else {
        cfg.variants.clone()
    };

    // The positional split concatenates back to the original corpus order.
    let (tr, va, te) = load_data_dir(data)?;
    let mut sequences = tr.sequences;
    sequences.extend(va.sequences);
    sequences.extend(te.sequences);
    let full = RawDataset {
        sequences,
        item_count: tr.item_count,
    };

    let train_seeds: Vec<u64> = (0..cfg.eval_seeds as u64)
        .map(|i| cfg.train.seed + i)
        .collect();
    let eval_cfg = EvalConfig {
        k: cfg.k,
        seeds: vec![0],
        gen: cfg.train.generation_config(),
        ..EvalConfig::default()
    };
    let rows = robustness_sweep(&cfg.train, &chosen, &cfg.ratios, &full, &train_seeds, &eval_cfg)?;

    echo_resolved(out, &cfg)?;
    write_atomic(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    let table = summary_table(&rows);
    write_atomic(&out.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
