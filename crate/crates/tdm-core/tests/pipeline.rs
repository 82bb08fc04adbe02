//! Cross-module pipeline checks on small configurations.

use tdm_core::corpus::{synth_generate, SynthSpec};
use tdm_core::eval::{ablation_run, robustness_sweep, EvalConfig, Variant, ALL_VARIANTS};
use tdm_core::rng::SeedTree;
use tdm_core::trainer::TrainConfig;

fn tiny_dataset() -> tdm_core::corpus::RawDataset {
    let spec = SynthSpec {
        n_sequences: 120,
        n_items: 30,
        n_clusters: 6,
        len_min: 4,
        len_max: 8,
    };
    synth_generate(&spec, &mut SeedTree::new(9).stream("synth", 0)).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        seq_slots: 6,
        denoiser_hidden: 12,
        t_steps: 100,
        s_steps: 10,
        batch_size: 32,
        epochs: 1,
        patience: 0,
        val_k: 5,
        seed: 13,
        ..TrainConfig::default()
    }
}

#[test]
fn nine_variant_ablation_emits_aligned_rows() {
    let ds = tiny_dataset();
    let (tr, va, te) =
        tdm_core::corpus::chronological_split(&ds, &tdm_core::corpus::SplitSpec::default())
            .unwrap();
    let eval_cfg = EvalConfig {
        k: 5,
        seeds: vec![0, 1],
        ..EvalConfig::default()
    };
    let rows = ablation_run(&tiny_config(), &ALL_VARIANTS, &tr, &va, &te, &eval_cfg).unwrap();
    assert_eq!(rows.len(), 9 * 2, "9 variants x 2 evaluation seeds");

    // Identical seed schedule across variants: same ordered seed list per
    // variant group.
    let mut seen = std::collections::BTreeMap::<String, Vec<u64>>::new();
    for r in &rows {
        seen.entry(r.variant.clone()).or_default().push(r.seed);
    }
    assert_eq!(seen.len(), 9);
    let reference = seen.values().next().unwrap().clone();
    for (variant, seeds) in &seen {
        assert_eq!(seeds, &reference, "variant {variant} ran a different seed schedule");
    }
    let labels: Vec<&String> = seen.keys().collect();
    for expect in ["Base", "w/o GL", "w/o L", "w/o G", "w/P", "w/I", "w/D", "w/S", "TDM"] {
        assert!(
            labels.iter().any(|l| l.as_str() == expect),
            "missing variant row {expect}"
        );
    }
}

#[test]
fn sweep_at_ratio_zero_matches_direct_training() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let eval_cfg = EvalConfig {
        k: 5,
        seeds: vec![0],
        ..EvalConfig::default()
    };
    let rows = robustness_sweep(&cfg, &[Variant::Full], &[0.0], &ds, &[13], &eval_cfg).unwrap();
    assert_eq!(rows.len(), 1);

    // Ratio 0 injection is the identity, so the sweep row must equal a
    // plain train-and-evaluate on the same split.
    let (tr, va, te) =
        tdm_core::corpus::chronological_split(&ds, &tdm_core::corpus::SplitSpec::default())
            .unwrap();
    let outcome = tdm_core::trainer::train(&cfg, &tr, &va).unwrap();
    let direct = tdm_core::eval::evaluate(&outcome.best, &te, &eval_cfg).unwrap();
    assert_eq!(rows[0].hr, direct.hr_mean);
    assert_eq!(rows[0].ndcg, direct.ndcg_mean);
    assert_eq!(rows[0].ratio, 0.0);
}

#[test]
fn sweep_rows_cover_every_ratio_seed_pair() {
    let ds = tiny_dataset();
    let cfg = tiny_config();
    let eval_cfg = EvalConfig {
        k: 5,
        seeds: vec![0],
        ..EvalConfig::default()
    };
    let rows =
        robustness_sweep(&cfg, &[Variant::Full], &[0.1, 0.2], &ds, &[1, 2, 3], &eval_cfg).unwrap();
    let mut pairs: Vec<(u64, String)> = rows
        .iter()
        .map(|r| (r.seed, format!("{}", r.ratio)))
        .collect();
    pairs.sort();
    pairs.dedup();
    assert_eq!(pairs.len(), 6, "expected one row per (ratio, seed) pair");
}
