//! Ranking evaluation: nearest-item retrieval over generated embeddings,
//! HR@K / NDCG@K, multi-seed evaluation runs, ablation variants, robustness
//! sweeps over injected missing data, and the guidance-consistency probe.

use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{inject_missing, ItemSequence, RawDataset};
use crate::diffusion::{
    generate, q_sample, standard_normal, GenerationConfig, NoiseSchedule,
};
use crate::dts::{dts_edit, EditParams, GlobalValue, LocalValue, ScoringContext};
use crate::error::{Result, TdmError};
use crate::linalg::{cosine, dot, sq_dist};
use crate::model::{
    denoiser_forward, encode_guidance, EmbeddingTable, ModelConfig, ModelParams,
};
use crate::rng::SeedTree;
use crate::trainer::{train, Checkpoint, TrainConfig};

/// Similarity used for nearest-item retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    InnerProduct,
    Cosine,
}

/// Ranked recommendation list: ids with non-increasing scores, ties broken
/// toward the smaller id. PAD and placeholder rows are never candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// 1-based rank of `target`, if present.
    pub fn rank_of(&self, target: u32) -> Option<usize> {
        self.ids.iter().position(|&id| id == target).map(|p| p + 1)
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    score: f64,
    id: u32,
}

// Max-heap keyed on (score, then smaller id first).
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Rank the `k` nearest real items to a generated embedding.
pub fn retrieve_topk(
    query: &[f64],
    table: &EmbeddingTable,
    k: usize,
    sim: Similarity,
) -> Result<RankedList> {
    if k == 0 {
        return Err(TdmError::usage("retrieval size must be positive"));
    }
    if k > table.item_count as usize {
        return Err(TdmError::usage(format!(
            "retrieval size {k} exceeds the candidate set ({})",
            table.item_count
        )));
    }
    let mut heap = BinaryHeap::with_capacity(table.item_count as usize);
    for id in 0..table.item_count {
        let row = table.weights.row(id as usize);
        let score = match sim {
            Similarity::InnerProduct => dot(query, row),
            Similarity::Cosine => cosine(query, row),
        };
        heap.push(HeapEntry { score, id });
    }
    let mut ids = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for _ in 0..k {
        let e = heap.pop().expect("k <= item_count");
        ids.push(e.id);
        scores.push(e.score);
    }
    Ok(RankedList { ids, scores })
}

/// Fraction of targets ranked within the top `k`.
pub fn hr_at_k(lists: &[RankedList], targets: &[u32], k: usize) -> f64 {
    assert_eq!(lists.len(), targets.len());
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .zip(targets)
        .filter(|(l, t)| matches!(l.rank_of(**t), Some(r) if r <= k))
        .count();
    hits as f64 / lists.len() as f64
}

/// Mean position-discounted gain for a single relevant item per list:
/// 1 / log2(rank + 1) when the target ranks within the top `k`, else 0.
pub fn ndcg_at_k(lists: &[RankedList], targets: &[u32], k: usize) -> f64 {
    assert_eq!(lists.len(), targets.len());
    if lists.is_empty() {
        return 0.0;
    }
    let sum: f64 = lists
        .iter()
        .zip(targets)
        .map(|(l, t)| match l.rank_of(*t) {
            Some(r) if r <= k => 1.0 / ((r as f64 + 1.0).log2()),
            _ => 0.0,
        })
        .sum();
    sum / lists.len() as f64
}

/// Metrics of one evaluation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub hr: f64,
    pub ndcg: f64,
    pub n: usize,
}

/// Aggregated metrics over the configured seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_seed: Vec<SeedMetrics>,
    pub hr_mean: f64,
    pub hr_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub n: usize,
}

impl Metrics {
    fn aggregate(per_seed: Vec<SeedMetrics>) -> Self {
        let m = per_seed.len().max(1) as f64;
        let hr_mean = per_seed.iter().map(|s| s.hr).sum::<f64>() / m;
        let ndcg_mean = per_seed.iter().map(|s| s.ndcg).sum::<f64>() / m;
        let hr_std =
            (per_seed.iter().map(|s| (s.hr - hr_mean).powi(2)).sum::<f64>() / m).sqrt();
        let ndcg_std = (per_seed
            .iter()
            .map(|s| (s.ndcg - ndcg_mean).powi(2))
            .sum::<f64>()
            / m)
            .sqrt();
        let n = per_seed.first().map_or(0, |s| s.n);
        Self {
            per_seed,
            hr_mean,
            hr_std,
            ndcg_mean,
            ndcg_std,
            n,
        }
    }
}

/// Evaluation-time knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub gen: GenerationConfig,
    pub similarity: Similarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            seeds: vec![0, 1, 2, 3, 4],
            gen: GenerationConfig::default(),
            similarity: Similarity::InnerProduct,
        }
    }
}

/// Evaluate with a pluggable generator: `gen_fn(seq, seed, index)` produces
/// the oracle embedding for one window. The seam that lets tests substitute
/// exact or adversarial generators for the trained model.
pub fn evaluate_with<F>(
    gen_fn: F,
    table: &EmbeddingTable,
    split: &[ItemSequence],
    cfg: &EvalConfig,
) -> Result<Metrics>
where
    F: Fn(&ItemSequence, u64, usize) -> Result<Vec<f64>> + Sync,
{
    if split.is_empty() {
        return Err(TdmError::usage("cannot evaluate an empty split"));
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let lists: Vec<RankedList> = split
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let e = gen_fn(seq, seed, i)?;
                retrieve_topk(&e, table, cfg.k, cfg.similarity)
            })
            .collect::<Result<_>>()?;
        let targets: Vec<u32> = split.iter().map(|s| s.target).collect();
        per_seed.push(SeedMetrics {
            seed,
            hr: hr_at_k(&lists, &targets, cfg.k),
            ndcg: ndcg_at_k(&lists, &targets, cfg.k),
            n: split.len(),
        });
    }
    Ok(Metrics::aggregate(per_seed))
}

/// Evaluate a trained model on a split: generate one oracle embedding per
/// window (guidance from the observed, unedited window), retrieve the top
/// `k`, and average HR/NDCG per seed.
pub fn evaluate_model(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    split: &[ItemSequence],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    evaluate_with(
        |seq, seed, index| {
            let mut rng = SeedTree::new(seed).stream("gen", index as u64);
            generate(params, model_cfg, seq, sched, &cfg.gen, &mut rng)
        },
        &params.embedding,
        split,
        cfg,
    )
}

/// Evaluate a checkpoint on a raw split.
pub fn evaluate(ckpt: &Checkpoint, split: &RawDataset, cfg: &EvalConfig) -> Result<Metrics> {
    let model_cfg = ckpt.model_config();
    let seqs = crate::corpus::to_item_sequences(split, model_cfg.seq_slots)?;
    evaluate_model(&ckpt.params, &model_cfg, &ckpt.schedule, &seqs, cfg)
}

/// Ablation variants: which probability models drive the editing, or no
/// editing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No simulated missing data (sequence threshold forced to 0).
    Base,
    /// Both models replaced with random sampling.
    NoLocalGlobal,
    /// Local model replaced with random sampling.
    NoLocal,
    /// Global model replaced with random sampling.
    NoGlobal,
    /// Local model driven by item popularity.
    PopularityLocal,
    /// Local model driven by item position.
    PositionLocal,
    /// Global model driven by intra-sequence diversity.
    DiversityGlobal,
    /// Global model driven by sequence length.
    LengthGlobal,
    /// Continuity + stability (the full method).
    Full,
}

pub const ALL_VARIANTS: [Variant; 9] = [
    Variant::Base,
    Variant::NoLocalGlobal,
    Variant::NoLocal,
    Variant::NoGlobal,
    Variant::PopularityLocal,
    Variant::PositionLocal,
    Variant::DiversityGlobal,
    Variant::LengthGlobal,
    Variant::Full,
];

impl Variant {
    /// Display label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::NoLocalGlobal => "w/o GL",
            Variant::NoLocal => "w/o L",
            Variant::NoGlobal => "w/o G",
            Variant::PopularityLocal => "w/P",
            Variant::PositionLocal => "w/I",
            Variant::DiversityGlobal => "w/D",
            Variant::LengthGlobal => "w/S",
            Variant::Full => "TDM",
        }
    }

    /// Stable command-line token.
    pub fn token(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoLocalGlobal => "wo-gl",
            Variant::NoLocal => "wo-l",
            Variant::NoGlobal => "wo-g",
            Variant::PopularityLocal => "w-p",
            Variant::PositionLocal => "w-i",
            Variant::DiversityGlobal => "w-d",
            Variant::LengthGlobal => "w-s",
            Variant::Full => "tdm",
        }
    }

    /// Apply the variant to a base training configuration.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Base => {
                cfg.lambda1 = 0.0;
            }
            Variant::NoLocalGlobal => {
                cfg.local_value = LocalValue::Random;
                cfg.global_value = GlobalValue::Random;
            }
            Variant::NoLocal => {
                cfg.local_value = LocalValue::Random;
                cfg.global_value = GlobalValue::Stability;
            }
            Variant::NoGlobal => {
                cfg.local_value = LocalValue::Continuity;
                cfg.global_value = GlobalValue::Random;
            }
            Variant::PopularityLocal => {
                cfg.local_value = LocalValue::Popularity;
                cfg.global_value = GlobalValue::Stability;
            }
            Variant::PositionLocal => {
                cfg.local_value = LocalValue::Position;
                cfg.global_value = GlobalValue::Stability;
            }
            Variant::DiversityGlobal => {
                cfg.local_value = LocalValue::Continuity;
                cfg.global_value = GlobalValue::Diversity;
            }
            Variant::LengthGlobal => {
                cfg.local_value = LocalValue::Continuity;
                cfg.global_value = GlobalValue::Length;
            }
            Variant::Full => {
                cfg.local_value = LocalValue::Continuity;
                cfg.global_value = GlobalValue::Stability;
            }
        }
        cfg
    }
}

impl std::str::FromStr for Variant {
    type Err = TdmError;
    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .iter()
            .find(|v| v.token() == s)
            .copied()
            .ok_or_else(|| {
                let tokens: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.token()).collect();
                TdmError::config(format!(
                    "unknown variant {s:?} (expected one of {})",
                    tokens.join("|")
                ))
            })
    }
}

/// One output row of an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub ratio: f64,
    pub seed: u64,
    pub hr: f64,
    pub ndcg: f64,
    pub n: usize,
}

/// Render rows as the metrics CSV (stable header, one row per run).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,ratio,seed,hr@20,ndcg@20,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.ratio, r.seed, r.hr, r.ndcg, r.n
        ));
    }
    out
}

/// Plain-text summary: mean +- std per (variant, ratio) group.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let mut groups: Vec<(String, f64, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        if let Some(g) = groups
            .iter_mut()
            .find(|(v, ratio, _)| *v == r.variant && *ratio == r.ratio)
        {
            g.2.push(r);
        } else {
            groups.push((r.variant.clone(), r.ratio, vec![r]));
        }
    }
    let mut out = format!(
        "{:<10} {:>6} {:>8} {:>18} {:>18}\n",
        "variant", "ratio", "seeds", "hr@20", "ndcg@20"
    );
    for (variant, ratio, members) in groups {
        let m = members.len() as f64;
        let hr = members.iter().map(|r| r.hr).sum::<f64>() / m;
        let nd = members.iter().map(|r| r.ndcg).sum::<f64>() / m;
        let hr_std = (members.iter().map(|r| (r.hr - hr).powi(2)).sum::<f64>() / m).sqrt();
        let nd_std = (members.iter().map(|r| (r.ndcg - nd).powi(2)).sum::<f64>() / m).sqrt();
        out.push_str(&format!(
            "{variant:<10} {ratio:>6.2} {:>8} {hr:>10.4} +-{hr_std:.4} {nd:>10.4} +-{nd_std:.4}\n",
            members.len()
        ));
    }
    out
}

/// Train and evaluate the requested variants under identical seed schedules.
/// Returns one row per (variant, seed).
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Variant],
    train_split: &RawDataset,
    val_split: &RawDataset,
    test_split: &RawDataset,
    eval_cfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = variant.apply(base);
        let outcome = train(&cfg, train_split, val_split)?;
        let metrics = evaluate(&outcome.best, test_split, eval_cfg)?;
        for s in &metrics.per_seed {
            rows.push(MetricsRow {
                variant: variant.label().to_string(),
                ratio: 0.0,
                seed: s.seed,
                hr: s.hr,
                ndcg: s.ndcg,
                n: s.n,
            });
        }
    }
    Ok(rows)
}

/// Train and evaluate each (variant, ratio, training seed) combination on a
/// dataset with injected missing history. Injection is deterministic per
/// ratio, so every variant and seed sees the same degraded data.
pub fn robustness_sweep(
    base: &TrainConfig,
    variants: &[Variant],
    ratios: &[f64],
    dataset: &RawDataset,
    train_seeds: &[u64],
    eval_cfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (ri, &ratio) in ratios.iter().enumerate() {
        let mut missing_rng = SeedTree::new(base.seed).stream("missing", ri as u64);
        let degraded = inject_missing(dataset, ratio, &mut missing_rng)?;
        let (train_split, val_split, test_split) =
            crate::corpus::chronological_split(&degraded, &crate::corpus::SplitSpec::default())?;
        for &variant in variants {
            for &seed in train_seeds {
                let mut cfg = variant.apply(base);
                cfg.seed = seed;
                let outcome = train(&cfg, &train_split, &val_split)?;
                let metrics = evaluate(&outcome.best, &test_split, eval_cfg)?;
                rows.push(MetricsRow {
                    variant: variant.label().to_string(),
                    ratio,
                    seed,
                    hr: metrics.hr_mean,
                    ndcg: metrics.ndcg_mean,
                    n: metrics.n,
                });
            }
        }
    }
    Ok(rows)
}

/// Per-element statistics of the guidance-consistency probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub mean_lhs: f64,
    /// max(lhs - rhs) over elements; nonpositive when the bound holds.
    pub max_violation: f64,
}

impl ProbeReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// For each window, denoise the same corrupted target twice — once guided by
/// the observed window, once by its edited counterpart — and bound the
/// squared prediction gap by twice the sum of both reconstruction errors.
pub fn consistency_probe(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    batch: &[ItemSequence],
    item_freq: &[u64],
    sched: &NoiseSchedule,
    edit: &EditParams,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeReport> {
    if batch.is_empty() {
        return Err(TdmError::usage("cannot probe an empty batch"));
    }
    let ctx = ScoringContext {
        table: &params.embedding,
        item_freq,
    };
    let (edited, _) = dts_edit(batch, &ctx, edit, rng)?;
    let mut lhs = Vec::with_capacity(batch.len());
    let mut rhs = Vec::with_capacity(batch.len());
    for (seq, seq_edited) in batch.iter().zip(&edited) {
        let e0 = params.embedding.row_for_item(seq.target)?.to_vec();
        let s = rng.gen_range(1..=sched.s_steps());
        let tau_s = sched.tau()[s - 1];
        let eps = standard_normal(model_cfg.dim, rng);
        let noisy = q_sample(&e0, tau_s, &eps, sched)?;

        let g_obs = encode_guidance(params, model_cfg, seq)?.guidance().to_vec();
        let g_edit = encode_guidance(params, model_cfg, seq_edited)?
            .guidance()
            .to_vec();
        let a = denoiser_forward(params, &noisy, &g_obs, tau_s)?;
        let b = denoiser_forward(params, &noisy, &g_edit, tau_s)?;
        lhs.push(sq_dist(&a, &b));
        rhs.push(2.0 * (sq_dist(&a, &e0) + sq_dist(&b, &e0)));
    }
    let mean_lhs = lhs.iter().sum::<f64>() / lhs.len() as f64;
    let max_violation = lhs
        .iter()
        .zip(&rhs)
        .map(|(l, r)| l - r)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ProbeReport {
        lhs,
        rhs,
        mean_lhs,
        max_violation,
    })
}
