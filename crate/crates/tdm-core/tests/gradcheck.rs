//! Gradient verification: the hand-written backward pass against central
//! finite differences of the full training loss. The differencing oracle
//! below touches only the public forward API, never the backward code it
//! checks.

use tdm_core::corpus::{ItemSequence, Slot};
use tdm_core::diffusion::{loss_backward, plan_batch, training_loss, LossConfig, NoiseSchedule};
use tdm_core::dts::{EditParams, ScoringContext};
use tdm_core::model::{ModelConfig, ModelParams};
use tdm_core::rng::SeedTree;

use rand::Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        item_count: 9,
        dim: 8,
        seq_slots: 6,
        encoder_layers: 1,
        attn_heads: 2,
        denoiser_hidden: 12,
        raw_dummy_uncond: false,
    }
}

fn seq_of(items: &[Slot], target: u32) -> ItemSequence {
    ItemSequence {
        slots: items.to_vec(),
        target,
    }
}

fn batch() -> Vec<ItemSequence> {
    use Slot::*;
    vec![
        seq_of(&[Pad, Pad, Pad, Item(0), Item(1), Item(2)], 3),
        seq_of(&[Item(4), Item(5), Item(6), Item(7), Item(8), Item(0)], 1),
        seq_of(&[Pad, Pad, Item(2), Dummy, Item(3), Item(5)], 6),
        seq_of(&[Pad, Pad, Pad, Pad, Item(8), Item(7)], 2),
    ]
}

struct Setup {
    cfg: ModelConfig,
    params: ModelParams,
    sched: NoiseSchedule,
    lcfg: LossConfig,
    plan: tdm_core::diffusion::LossPlan,
}

/// Freeze a loss plan (edits, dropout, steps, noise) so the loss becomes a
/// deterministic smooth function of the parameters alone.
fn setup(seed: u64, rho: f64) -> Setup {
    let cfg = tiny_config();
    let params = ModelParams::init(&cfg, &mut SeedTree::new(seed).stream("init", 0)).unwrap();
    let sched = NoiseSchedule::build(100, 1e-4, 0.02, 10).unwrap();
    let lcfg = LossConfig {
        rho,
        edit: EditParams {
            lambda1: 0.7,
            lambda2: 0.7,
            ..EditParams::default()
        },
        ..LossConfig::default()
    };
    let freq = vec![2u64; cfg.item_count as usize];
    let ctx = ScoringContext {
        table: &params.embedding,
        item_freq: &freq,
    };
    let plan = plan_batch(
        &batch(),
        &ctx,
        &sched,
        &lcfg,
        cfg.dim,
        &mut SeedTree::new(seed).stream("edit", 0),
        &mut SeedTree::new(seed).stream("noise", 0),
    )
    .unwrap();
    Setup {
        cfg,
        params,
        sched,
        lcfg,
        plan,
    }
}

fn loss_of(s: &Setup, params: &ModelParams) -> f64 {
    training_loss(params, &s.cfg, &s.plan, &s.sched, &s.lcfg)
        .unwrap()
        .0
}

/// Central finite difference of the loss along one parameter coordinate.
fn fd_at(s: &Setup, array_index: usize, elem: usize) -> f64 {
    let mut plus = s.params.clone();
    plus.named_arrays_mut()[array_index].data[elem] += FD_STEP;
    let mut minus = s.params.clone();
    minus.named_arrays_mut()[array_index].data[elem] -= FD_STEP;
    (loss_of(s, &plus) - loss_of(s, &minus)) / (2.0 * FD_STEP)
}

fn group_of(name: &str) -> &'static str {
    if name.starts_with("embedding.") {
        "embedding"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else {
        "denoiser"
    }
}

/// Spot-check >= 20 randomly chosen coordinates per parameter group.
fn check_group(s: &Setup, grads: &ModelParams, group: &str, samples: usize, rng_seed: u64) {
    let mut rng = SeedTree::new(rng_seed).stream("pick", 0);
    let arrays = s.params.named_arrays();
    let analytic = grads.named_arrays();
    let candidates: Vec<usize> = (0..arrays.len())
        .filter(|&i| group_of(&arrays[i].name) == group)
        .collect();
    assert!(!candidates.is_empty());

    let mut checked = 0;
    let mut worst: (f64, String) = (0.0, String::new());
    while checked < samples {
        let ai = candidates[rng.gen_range(0..candidates.len())];
        let len = arrays[ai].data.len();
        let ei = rng.gen_range(0..len);
        let fd = fd_at(s, ai, ei);
        let an = analytic[ai].data[ei];
        let rel = (an - fd).abs() / fd.abs().max(1e-8);
        if rel > worst.0 {
            worst = (rel, format!("{}[{}]", arrays[ai].name, ei));
        }
        assert!(
            rel <= REL_TOL,
            "{}[{}]: analytic {an} vs finite-difference {fd} (rel {rel:.3e})",
            arrays[ai].name,
            ei
        );
        checked += 1;
    }
    println!("group {group}: {checked} coordinates checked, worst rel err {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn gradients_match_finite_differences_conditional_path() {
    let s = setup(41, 0.0);
    let (_, tape) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let grads = loss_backward(&s.params, &s.cfg, &tape);
    for group in ["embedding", "encoder", "denoiser"] {
        check_group(&s, &grads, group, 24, 101);
    }
}

#[test]
fn gradients_match_finite_differences_with_guidance_dropout() {
    // rho = 1 exercises the shared unconditional-encoding branch.
    let s = setup(43, 1.0);
    assert!(s.plan.uncond.iter().all(|u| *u));
    let (_, tape) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let grads = loss_backward(&s.params, &s.cfg, &tape);
    for group in ["embedding", "encoder", "denoiser"] {
        check_group(&s, &grads, group, 20, 103);
    }
}

#[test]
fn gradients_match_with_raw_placeholder_guidance() {
    let mut s = setup(47, 0.6);
    s.cfg.raw_dummy_uncond = true;
    let (_, tape) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let grads = loss_backward(&s.params, &s.cfg, &tape);
    for group in ["embedding", "encoder", "denoiser"] {
        check_group(&s, &grads, group, 20, 107);
    }
}

#[test]
fn repeated_backward_passes_are_identical() {
    let s = setup(53, 0.3);
    let (_, tape1) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let (_, tape2) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let g1 = loss_backward(&s.params, &s.cfg, &tape1);
    let g2 = loss_backward(&s.params, &s.cfg, &tape2);
    assert_eq!(g1, g2);
}

#[test]
fn squared_norm_loss_has_gradient_two_w() {
    // Degenerate pipeline: zero final denoiser weights make the prediction
    // equal b3, and a zero target embedding makes the loss ||b3||^2, whose
    // gradient must be exactly 2 b3.
    let s = setup(59, 0.0);
    let mut params = s.params.clone();
    params.denoiser.w3.fill(0.0);
    let b3: Vec<f64> = (0..s.cfg.dim).map(|i| 0.1 * (i as f64 + 1.0)).collect();
    params.denoiser.b3.copy_from_slice(&b3);
    // Zero the embedding table: every e0 is the zero vector and guidance
    // still flows through the encoder without affecting the output.
    params.embedding.weights.fill(0.0);

    let (loss, tape) = training_loss(&params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let expected: f64 = b3.iter().map(|v| v * v).sum();
    assert!((loss - expected).abs() < 1e-12);
    let grads = loss_backward(&params, &s.cfg, &tape);
    for (g, b) in grads.denoiser.b3.iter().zip(&b3) {
        assert!((g - 2.0 * b).abs() < 1e-12, "{g} vs {}", 2.0 * b);
    }
}

#[test]
fn pad_row_never_receives_gradient() {
    let s = setup(61, 0.4);
    let (_, tape) = training_loss(&s.params, &s.cfg, &s.plan, &s.sched, &s.lcfg).unwrap();
    let grads = loss_backward(&s.params, &s.cfg, &tape);
    let pad = s.params.embedding.pad_id() as usize;
    assert!(grads.embedding.weights.row(pad).iter().all(|&v| v == 0.0));
}
