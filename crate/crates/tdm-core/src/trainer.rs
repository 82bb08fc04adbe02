//! Optimization loop: seeded shuffling, edit-augmented loss evaluation,
//! adaptive (moment-based) updates, early stopping on validation HR@20, and
//! checkpointing with exact resumption.
//!
//! Determinism contract: (seed, config, data) fully determine the produced
//! checkpoints. Every random draw comes from a counter-addressed stream, and
//! batch gradients are reduced over fixed-size chunks in index order, so
//! neither thread count nor scheduling affects results.

use rayon::prelude::*;

use crate::corpus::{to_item_sequences, ItemSequence, RawDataset};
use crate::diffusion::{
    check_finite_params, generate, loss_backward, plan_batch, training_loss, GenerationConfig,
    LossConfig, NoiseSchedule,
};
use crate::dts::{EditParams, GlobalValue, LocalValue, ScoringContext, DEFAULT_KAPPA};
use crate::error::{Result, TdmError};
use crate::eval::{retrieve_topk, Similarity};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::SeedTree;

pub use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Batch elements per gradient chunk. Fixed (not tied to the thread count)
/// so that parallel reductions are bit-reproducible everywhere.
const GRAD_CHUNK: usize = 16;

/// Hyperparameter grids searched in the experiments.
pub const LEARNING_RATE_GRID: [f64; 6] = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5];
pub const GUIDANCE_W_GRID: [f64; 6] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0];
pub const T_STEPS_GRID: [usize; 3] = [500, 1000, 2000];

/// Full training-run configuration: model shapes, diffusion schedule,
/// editing thresholds, and optimization knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // Model shapes.
    pub dim: usize,
    pub seq_slots: usize,
    pub encoder_layers: usize,
    pub attn_heads: usize,
    pub denoiser_hidden: usize,
    pub raw_dummy_uncond: bool,
    // Diffusion schedule.
    pub t_steps: usize,
    pub s_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // Editing and guidance dropout.
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: f64,
    pub rho: f64,
    pub local_value: LocalValue,
    pub global_value: GlobalValue,
    pub weighted_loss: bool,
    pub sigma: f64,
    // Optimization.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    // Validation / generation.
    pub guidance_w: f64,
    pub val_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seq_slots: 10,
            encoder_layers: 1,
            attn_heads: 1,
            denoiser_hidden: 128,
            raw_dummy_uncond: false,
            t_steps: 1000,
            s_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            lambda1: 0.5,
            lambda2: 0.5,
            kappa: DEFAULT_KAPPA,
            rho: 0.1,
            local_value: LocalValue::Continuity,
            global_value: GlobalValue::Stability,
            weighted_loss: false,
            sigma: 0.0,
            learning_rate: 5e-4,
            batch_size: 256,
            epochs: 200,
            patience: 20,
            guidance_w: 2.0,
            val_k: 20,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TdmError::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(TdmError::config("epoch count must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TdmError::config("learning rate must be nonnegative"));
        }
        if self.val_k == 0 {
            return Err(TdmError::config("validation cutoff must be positive"));
        }
        self.loss_config().validate()?;
        self.generation_config().validate()?;
        NoiseSchedule::build(self.t_steps, self.beta_start, self.beta_end, self.s_steps)?;
        Ok(())
    }

    pub fn model_config(&self, item_count: u32) -> ModelConfig {
        ModelConfig {
            item_count,
            dim: self.dim,
            seq_slots: self.seq_slots,
            encoder_layers: self.encoder_layers,
            attn_heads: self.attn_heads,
            denoiser_hidden: self.denoiser_hidden,
            raw_dummy_uncond: self.raw_dummy_uncond,
        }
    }

    pub fn edit_params(&self) -> EditParams {
        EditParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            kappa: self.kappa,
            local: self.local_value,
            global: self.global_value,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            rho: self.rho,
            edit: self.edit_params(),
            weighted: self.weighted_loss,
            sigma: self.sigma,
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            w: self.guidance_w,
            sigma: self.sigma,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.t_steps, self.beta_start, self.beta_end, self.s_steps)
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected adaptive update. Parameters with an identically zero
/// gradient and zero moments (the PAD row) are left bit-identical.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    let mut ps = params.named_arrays_mut();
    let gs = grads.named_arrays();
    let mut ms = state.m.named_arrays_mut();
    let mut vs = state.v.named_arrays_mut();
    if ps.len() != gs.len() {
        return Err(TdmError::usage("gradient shape does not match parameters"));
    }
    for i in 0..ps.len() {
        let p = &mut ps[i];
        let g = &gs[i];
        if p.name != g.name || p.data.len() != g.data.len() {
            return Err(TdmError::usage(format!(
                "gradient array {} does not match parameter {}",
                g.name, p.name
            )));
        }
        let m = &mut ms[i];
        let v = &mut vs[i];
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = ADAM_BETA1 * m.data[j] + (1.0 - ADAM_BETA1) * gj;
            v.data[j] = ADAM_BETA2 * v.data[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m.data[j] / bc1;
            let v_hat = v.data[j] / bc2;
            p.data[j] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Result of a training run: the best-validation checkpoint (the artifact)
/// and the final state (for exact resumption).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Train from scratch. Per epoch: seeded shuffle, per batch strategic
/// editing -> guidance encoding -> diffusion loss -> backward -> adaptive
/// update; then validation HR@`val_k` by full generation. Keeps the
/// checkpoint with the best validation score.
pub fn train(cfg: &TrainConfig, train_split: &RawDataset, val_split: &RawDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(TdmError::usage("training and validation splits must be nonempty"));
    }
    let model_cfg = cfg.model_config(train_split.item_count);
    let tree = SeedTree::new(cfg.seed);
    let params = ModelParams::init(&model_cfg, &mut tree.stream("init", 0))?;
    let adam = AdamState::new(&params);
    let state = Checkpoint {
        params,
        adam,
        config: cfg.clone(),
        item_count: train_split.item_count,
        schedule: cfg.schedule()?,
        epochs_done: 0,
        global_step: 0,
        train_loss: Vec::new(),
        val_hr: Vec::new(),
    };
    run_epochs(state, None, train_split, val_split)
}

/// Continue a run from its final state. `best` carries the
/// best-so-far checkpoint when the caller has one; the loss and validation
/// trajectories continue exactly as if the run had never stopped.
pub fn resume(
    last: Checkpoint,
    best: Option<Checkpoint>,
    train_split: &RawDataset,
    val_split: &RawDataset,
) -> Result<TrainOutcome> {
    if last.item_count != train_split.item_count {
        return Err(TdmError::usage(format!(
            "checkpoint was trained over {} items, data has {}",
            last.item_count, train_split.item_count
        )));
    }
    run_epochs(last, best, train_split, val_split)
}

fn run_epochs(
    mut state: Checkpoint,
    best_in: Option<Checkpoint>,
    train_split: &RawDataset,
    val_split: &RawDataset,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let model_cfg = cfg.model_config(state.item_count);
    let tree = SeedTree::new(cfg.seed);
    let sched = state.schedule.clone();
    let lcfg = cfg.loss_config();
    let gencfg = cfg.generation_config();

    let train_seqs = to_item_sequences(train_split, cfg.seq_slots)?;
    let val_seqs = to_item_sequences(val_split, cfg.seq_slots)?;
    let item_freq = train_split.item_frequencies();

    let mut best: Option<Checkpoint> = best_in;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch: Option<usize> = None;
    for (e, &hr) in state.val_hr.iter().enumerate() {
        if hr > best_val {
            best_val = hr;
            best_epoch = Some(e);
        }
    }

    let n = train_seqs.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);

    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut tree.stream("shuffle", epoch as u64));

        let mut loss_sum = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let step = state.global_step;
            let batch: Vec<ItemSequence> =
                batch_ids.iter().map(|&i| train_seqs[i].clone()).collect();
            let ctx = ScoringContext {
                table: &state.params.embedding,
                item_freq: &item_freq,
            };
            let plan = plan_batch(
                &batch,
                &ctx,
                &sched,
                &lcfg,
                cfg.dim,
                &mut tree.stream("edit", step),
                &mut tree.stream("noise", step),
            )?;

            let total = plan.len();
            let ranges: Vec<std::ops::Range<usize>> = (0..total)
                .step_by(GRAD_CHUNK)
                .map(|lo| lo..(lo + GRAD_CHUNK).min(total))
                .collect();
            let parts: Vec<(f64, ModelParams)> = ranges
                .into_par_iter()
                .map(|range| -> Result<(f64, ModelParams)> {
                    let tape = crate::diffusion::loss_forward_range(
                        &state.params,
                        &model_cfg,
                        &plan,
                        &sched,
                        &lcfg,
                        range,
                        total,
                    )?;
                    let grads = loss_backward(&state.params, &model_cfg, &tape);
                    Ok((tape.loss_sum(), grads))
                })
                .collect::<Result<_>>()?;

            let mut grads = state.params.zeros_like();
            let mut batch_sq_sum = 0.0;
            for (s, g) in &parts {
                batch_sq_sum += s;
                grads.add_assign(g);
            }
            let loss = batch_sq_sum / total as f64;
            if !loss.is_finite() {
                return Err(TdmError::Diverged {
                    epoch,
                    step,
                    message: format!("loss became {loss}"),
                });
            }

            optimizer_step(&mut state.params, &grads, &mut state.adam, cfg.learning_rate)?;
            check_finite_params(&state.params).map_err(|_| TdmError::Diverged {
                epoch,
                step,
                message: "parameters left the finite range after an update".into(),
            })?;

            loss_sum += loss;
            state.global_step += 1;
        }
        state.train_loss.push(loss_sum / batches_per_epoch as f64);

        let val_hr = validation_hr(&state.params, &model_cfg, &sched, &val_seqs, &gencfg, &tree, cfg.val_k)?;
        state.val_hr.push(val_hr);
        state.epochs_done = epoch + 1;

        if val_hr > best_val {
            best_val = val_hr;
            best_epoch = Some(epoch);
            best = Some(state.clone());
        } else if cfg.patience > 0 {
            let since_best = epoch - best_epoch.unwrap_or(0);
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let last = state;
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last })
}

/// Validation hit ratio by full generation, with a fixed per-sequence noise
/// stream so scores are comparable across epochs.
fn validation_hr(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
    val_seqs: &[ItemSequence],
    gencfg: &GenerationConfig,
    tree: &SeedTree,
    k: usize,
) -> Result<f64> {
    let hits: Vec<bool> = val_seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| -> Result<bool> {
            let mut rng = tree.stream("val", i as u64);
            let oracle = generate(params, model_cfg, seq, sched, gencfg, &mut rng)?;
            let ranked = retrieve_topk(&oracle, &params.embedding, k, Similarity::InnerProduct)?;
            Ok(ranked.ids.contains(&seq.target))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Fisher-Yates with draws from the given stream.
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Serial reference for the loss used by tests: identical math to the
/// chunked path apart from floating-point summation order.
pub fn training_loss_once(
    cfg: &TrainConfig,
    params: &ModelParams,
    batch: &[ItemSequence],
    item_freq: &[u64],
    step: u64,
) -> Result<f64> {
    let model_cfg = cfg.model_config(params.embedding.item_count);
    let sched = cfg.schedule()?;
    let lcfg = cfg.loss_config();
    let tree = SeedTree::new(cfg.seed);
    let ctx = ScoringContext {
        table: &params.embedding,
        item_freq,
    };
    let plan = plan_batch(
        batch,
        &ctx,
        &sched,
        &lcfg,
        cfg.dim,
        &mut tree.stream("edit", step),
        &mut tree.stream("noise", step),
    )?;
    Ok(training_loss(params, &model_cfg, &plan, &sched, &lcfg)?.0)
}
