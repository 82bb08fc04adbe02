//! Implicit-model diffusion over target-item embeddings: noise schedule with
//! an accelerated step subsequence, forward corruption, guidance-dropout
//! training loss, deterministic reverse steps, and oracle-item generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::ItemSequence;
use crate::dts::{dts_edit, EditParams, ScoringContext};
use crate::error::{Result, TdmError};
use crate::linalg::{axpy, sq_dist};
use crate::model::{
    denoiser_backward, denoiser_forward, denoiser_forward_taped, encode_guidance,
    encoder_backward, unconditional_sequence, DenoiserTape, EncoderTape, ModelConfig, ModelParams,
};

/// Cumulative noise schedule plus the accelerated step subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// alphas[t-1] is the cumulative product at step t.
    alphas: Vec<f64>,
    /// Strictly increasing 1-based steps; the last entry equals T.
    tau: Vec<usize>,
}

impl NoiseSchedule {
    /// Linearly spaced betas over `[beta_start, beta_end]`, cumulative-product
    /// alphas, and an evenly spaced subsequence `[T/S, 2T/S, ..., T]`.
    pub fn build(t_steps: usize, beta_start: f64, beta_end: f64, s_steps: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(TdmError::config("diffusion step count must be positive"));
        }
        if s_steps == 0 || s_steps > t_steps || t_steps % s_steps != 0 {
            return Err(TdmError::config(format!(
                "subsequence length {s_steps} must divide the total step count {t_steps}"
            )));
        }
        if !(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start {
            return Err(TdmError::config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                })
                .collect()
        };
        let mut alphas = Vec::with_capacity(t_steps);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alphas.push(acc);
        }
        debug_assert!(alphas.windows(2).all(|w| w[1] < w[0]));
        debug_assert!(alphas.iter().all(|a| *a > 0.0 && *a < 1.0));
        let stride = t_steps / s_steps;
        let tau = (1..=s_steps).map(|s| s * stride).collect();
        Ok(Self { betas, alphas, tau })
    }

    #[cfg(test)]
    pub(crate) fn raw(betas: Vec<f64>, alphas: Vec<f64>, tau: Vec<usize>) -> Self {
        Self { betas, alphas, tau }
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn s_steps(&self) -> usize {
        self.tau.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    /// Cumulative alpha at a 1-based step.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.betas.len(), "step {t} outside schedule");
        self.alphas[t - 1]
    }

    /// Cumulative alpha at subsequence index `s` (1-based); `s = 0` is the
    /// clean-data boundary with alpha 1.
    pub fn alpha_at_tau(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bar(self.tau[s - 1])
        }
    }

    pub fn contains_tau(&self, t: usize) -> bool {
        self.tau.binary_search(&t).is_ok()
    }
}

/// Sample a standard-normal vector.
pub fn standard_normal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Forward corruption at subsequence step `tau_step`:
/// sqrt(alpha) x0 + sqrt(1 - alpha) eps.
pub fn q_sample(x0: &[f64], tau_step: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if !sched.contains_tau(tau_step) {
        return Err(TdmError::usage(format!(
            "step {tau_step} is not in the schedule subsequence"
        )));
    }
    let alpha = sched.alpha_bar(tau_step);
    let a = alpha.sqrt();
    let b = (1.0 - alpha).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Classifier-free combination: (1 + w) cond - w uncond.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect()
}

/// One reverse step from subsequence index `s` down to `s - 1` given the
/// predicted clean sample. With `sigma = 0` the step is deterministic; with
/// `sigma > 0` the residual direction shrinks to make room for fresh noise.
pub fn ddim_step(
    x: &[f64],
    x_hat0: &[f64],
    s: usize,
    sched: &NoiseSchedule,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if s == 0 || s > sched.s_steps() {
        return Err(TdmError::usage(format!(
            "reverse step index {s} outside 1..={}",
            sched.s_steps()
        )));
    }
    let alpha_s = sched.alpha_at_tau(s);
    let alpha_prev = sched.alpha_at_tau(s - 1);
    if alpha_s >= 1.0 {
        return Err(TdmError::numeric(
            "cumulative alpha is 1; reverse residual undefined",
        ));
    }
    let resid_scale = 1.0 / (1.0 - alpha_s).sqrt();
    let a_s = alpha_s.sqrt();
    let a_prev = alpha_prev.sqrt();

    let dir_coeff_sq = 1.0 - alpha_prev - sigma * sigma;
    if dir_coeff_sq < -1e-15 {
        return Err(TdmError::numeric(format!(
            "sigma {sigma} too large for step {s} (1 - alpha = {})",
            1.0 - alpha_prev
        )));
    }
    let dir_coeff = dir_coeff_sq.max(0.0).sqrt();

    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let resid = (x[i] - a_s * x_hat0[i]) * resid_scale;
        out.push(a_prev * x_hat0[i] + dir_coeff * resid);
    }
    if sigma > 0.0 {
        let eps = standard_normal(x.len(), rng);
        axpy(sigma, &eps, &mut out);
    }
    Ok(out)
}

/// Generation-time knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Guidance strength in the classifier-free combination.
    pub w: f64,
    /// Per-step noise scale; 0 gives the deterministic sampler.
    pub sigma: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { w: 2.0, sigma: 0.0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(TdmError::config("sigma must be nonnegative"));
        }
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(TdmError::config("guidance strength must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Run the reverse subsequence from `x_init` down to a clean sample, with a
/// pluggable denoiser. The unconditional branch is evaluated only when the
/// guidance strength is nonzero.
pub fn reverse_trajectory<F>(
    denoise: &F,
    g_cond: &[f64],
    g_uncond: Option<&[f64]>,
    x_init: Vec<f64>,
    sched: &NoiseSchedule,
    gen: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64], usize) -> Result<Vec<f64>>,
{
    gen.validate()?;
    let mut x = x_init;
    for s in (1..=sched.s_steps()).rev() {
        let tau_s = sched.tau()[s - 1];
        let cond = denoise(&x, g_cond, tau_s)?;
        let x_hat0 = if gen.w == 0.0 {
            cond
        } else {
            let uncond_g = g_uncond.ok_or_else(|| {
                TdmError::usage("guidance strength is nonzero but no unconditional guidance given")
            })?;
            let uncond = denoise(&x, uncond_g, tau_s)?;
            cfg_combine(&cond, &uncond, gen.w)
        };
        x = ddim_step(&x, &x_hat0, s, sched, gen.sigma, rng)?;
    }
    Ok(x)
}

/// Unconditional guidance vector for the trained model.
pub fn uncond_guidance(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if cfg.raw_dummy_uncond {
        Ok(params.embedding.dummy_row().to_vec())
    } else {
        Ok(encode_guidance(params, cfg, &unconditional_sequence(cfg))?
            .guidance()
            .to_vec())
    }
}

/// Generate an oracle embedding for one window by denoising a Gaussian
/// sample. Guidance is encoded from the window as observed; editing is a
/// training-time device only.
pub fn generate(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq: &ItemSequence,
    sched: &NoiseSchedule,
    gen: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let g_cond = encode_guidance(params, cfg, seq)?.guidance().to_vec();
    let g_uncond = if gen.w == 0.0 {
        None
    } else {
        Some(uncond_guidance(params, cfg)?)
    };
    let x_init = standard_normal(cfg.dim, rng);
    reverse_trajectory(
        &|x, g, tau| denoiser_forward(params, x, g, tau),
        &g_cond,
        g_uncond.as_deref(),
        x_init,
        sched,
        gen,
        rng,
    )
}

/// Loss-time hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Probability of replacing the guidance with the unconditional branch.
    pub rho: f64,
    pub edit: EditParams,
    /// Per-step weighted loss variant; requires `sigma > 0`.
    pub weighted: bool,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            edit: EditParams::default(),
            weighted: false,
            sigma: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(TdmError::config(format!(
                "unconditional probability must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if self.weighted && !(self.sigma > 0.0) {
            return Err(TdmError::config(
                "weighted loss requires a positive sigma",
            ));
        }
        self.edit.validate()
    }
}

/// Everything random about one loss evaluation, drawn up front: the edited
/// windows, the guidance-dropout flags, the sampled subsequence indices, and
/// the corruption noise. Separating the draws from the math keeps the loss a
/// deterministic, differentiable function of the parameters.
#[derive(Debug, Clone)]
pub struct LossPlan {
    pub edited: Vec<ItemSequence>,
    pub targets: Vec<u32>,
    pub uncond: Vec<bool>,
    /// Subsequence index per element, 1-based.
    pub step_idx: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
}

impl LossPlan {
    pub fn len(&self) -> usize {
        self.edited.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edited.is_empty()
    }
}

/// Draw a loss plan for one batch: strategic editing, then per element a
/// uniform subsequence index, corruption noise, and the dropout flag.
pub fn plan_batch(
    batch: &[ItemSequence],
    ctx: &ScoringContext<'_>,
    sched: &NoiseSchedule,
    lcfg: &LossConfig,
    dim: usize,
    edit_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<LossPlan> {
    lcfg.validate()?;
    if batch.is_empty() {
        return Err(TdmError::usage("cannot compute a loss over an empty batch"));
    }
    let (edited, _) = dts_edit(batch, ctx, &lcfg.edit, edit_rng)?;
    let mut step_idx = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let mut uncond = Vec::with_capacity(batch.len());
    for _ in batch {
        step_idx.push(noise_rng.gen_range(1..=sched.s_steps()));
        noise.push(standard_normal(dim, noise_rng));
        uncond.push(noise_rng.gen::<f64>() < lcfg.rho);
    }
    Ok(LossPlan {
        edited,
        targets: batch.iter().map(|s| s.target).collect(),
        uncond,
        step_idx,
        noise,
    })
}

pub(crate) struct ElemTape {
    pub(crate) enc: Option<EncoderTape>,
    pub(crate) den: DenoiserTape,
    pub(crate) pred: Vec<f64>,
    pub(crate) e0: Vec<f64>,
    pub(crate) target_row: usize,
    pub(crate) sqrt_alpha: f64,
    pub(crate) weight: f64,
}

/// Recorded forward pass of the training loss over a batch (or a chunk of
/// one when `total` exceeds the element count).
pub struct LossTape {
    pub(crate) elems: Vec<ElemTape>,
    pub(crate) uncond_tape: Option<EncoderTape>,
    pub(crate) raw_uncond: bool,
    /// Total batch size the mean is taken over.
    pub(crate) total: usize,
    loss_sum: f64,
}

impl LossTape {
    /// Mean loss over the full batch. Only meaningful when the tape covers
    /// the whole batch.
    pub fn loss(&self) -> f64 {
        self.loss_sum / self.total as f64
    }

    pub fn loss_sum(&self) -> f64 {
        self.loss_sum
    }
}

/// Forward the training loss for elements `range` of the plan, recording
/// tapes. `total` is the full batch size used for the mean.
pub(crate) fn loss_forward_range(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &LossPlan,
    sched: &NoiseSchedule,
    lcfg: &LossConfig,
    range: std::ops::Range<usize>,
    total: usize,
) -> Result<LossTape> {
    let dim = cfg.dim;
    let needs_uncond = plan.uncond[range.clone()].iter().any(|u| *u);
    let uncond_tape = if needs_uncond && !cfg.raw_dummy_uncond {
        Some(encode_guidance(params, cfg, &unconditional_sequence(cfg))?)
    } else {
        None
    };

    let mut elems = Vec::with_capacity(range.len());
    let mut loss_sum = 0.0;
    for i in range {
        let target = plan.targets[i];
        let target_row = params.embedding.slot_row(crate::corpus::Slot::Item(target))?;
        let e0 = params.embedding.weights.row(target_row).to_vec();
        let s = plan.step_idx[i];
        let tau_s = sched.tau()[s - 1];
        let alpha = sched.alpha_at_tau(s);
        let noisy = q_sample(&e0, tau_s, &plan.noise[i], sched)?;

        let (enc, guidance): (Option<EncoderTape>, Vec<f64>) = if plan.uncond[i] {
            if cfg.raw_dummy_uncond {
                (None, params.embedding.dummy_row().to_vec())
            } else {
                let g = uncond_tape
                    .as_ref()
                    .expect("uncond tape present")
                    .guidance()
                    .to_vec();
                (None, g)
            }
        } else {
            let tape = encode_guidance(params, cfg, &plan.edited[i])?;
            let g = tape.guidance().to_vec();
            (Some(tape), g)
        };

        let (pred, den) = denoiser_forward_taped(params, &noisy, &guidance, tau_s)?;
        let weight = if lcfg.weighted {
            1.0 / (2.0 * dim as f64 * lcfg.sigma * lcfg.sigma * (1.0 - alpha))
        } else {
            1.0
        };
        loss_sum += weight * sq_dist(&pred, &e0);
        elems.push(ElemTape {
            enc,
            den,
            pred,
            e0,
            target_row,
            sqrt_alpha: alpha.sqrt(),
            weight,
        });
    }
    if !loss_sum.is_finite() {
        return Err(TdmError::numeric("loss is not finite"));
    }
    Ok(LossTape {
        elems,
        uncond_tape,
        raw_uncond: cfg.raw_dummy_uncond,
        total,
        loss_sum,
    })
}

/// Training loss over a whole batch: edit, encode, corrupt, denoise, and
/// average the squared reconstruction error. Returns the recorded graph for
/// [`loss_backward`].
pub fn training_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    plan: &LossPlan,
    sched: &NoiseSchedule,
    lcfg: &LossConfig,
) -> Result<(f64, LossTape)> {
    let tape = loss_forward_range(params, cfg, plan, sched, lcfg, 0..plan.len(), plan.len())?;
    Ok((tape.loss(), tape))
}

/// Reverse-mode gradients of the recorded loss with respect to every
/// parameter. The PAD embedding row is forced to zero.
pub fn loss_backward(params: &ModelParams, cfg: &ModelConfig, tape: &LossTape) -> ModelParams {
    let mut grads = params.zeros_like();
    let dim = cfg.dim;
    let inv_total = 1.0 / tape.total as f64;
    let mut d_g_uncond = vec![0.0; dim];

    for elem in &tape.elems {
        let coeff = 2.0 * elem.weight * inv_total;
        let d_pred: Vec<f64> = elem
            .pred
            .iter()
            .zip(&elem.e0)
            .map(|(p, e)| coeff * (p - e))
            .collect();
        let (d_noisy, d_guidance) = denoiser_backward(params, &elem.den, &d_pred, &mut grads);

        // e0 appears both as the regression target and inside the corrupted
        // input.
        let e0_grad = grads.embedding.weights.row_mut(elem.target_row);
        for i in 0..dim {
            e0_grad[i] += -d_pred[i] + elem.sqrt_alpha * d_noisy[i];
        }

        match &elem.enc {
            Some(enc) => encoder_backward(params, cfg, enc, &d_guidance, &mut grads),
            None => {
                if tape.raw_uncond {
                    add_to_dummy_row(params, &mut grads, &d_guidance);
                } else {
                    axpy(1.0, &d_guidance, &mut d_g_uncond);
                }
            }
        }
    }

    if let Some(uncond) = &tape.uncond_tape {
        encoder_backward(params, cfg, uncond, &d_g_uncond, &mut grads);
    }

    let pad = params.embedding.pad_id() as usize;
    grads.embedding.weights.row_mut(pad).fill(0.0);
    grads
}

fn add_to_dummy_row(params: &ModelParams, grads: &mut ModelParams, d: &[f64]) {
    let row = params.embedding.dummy_id() as usize;
    axpy(1.0, d, grads.embedding.weights.row_mut(row));
}

/// Guard used by the trainer after each step.
pub fn check_finite_params(params: &ModelParams) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(TdmError::numeric("parameters contain NaN or Inf"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Slot;
    use crate::linalg::all_finite;
    use crate::rng::SeedTree;

    #[test]
    fn tau_is_evenly_spaced() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        let expected: Vec<usize> = (1..=10).map(|s| s * 100).collect();
        assert_eq!(sched.tau(), expected.as_slice());
        assert_eq!(sched.t_steps(), 1000);
    }

    #[test]
    fn alphas_are_hand_checked_products() {
        let sched = NoiseSchedule::build(4, 0.1, 0.1, 4).unwrap();
        let expected = [0.9, 0.81, 0.729, 0.6561];
        for (t, e) in (1..=4).zip(expected) {
            assert!((sched.alpha_bar(t) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_betas_rejected() {
        assert!(NoiseSchedule::build(4, 0.0, 0.0, 4).is_err());
        assert!(NoiseSchedule::build(4, 1e-4, 1.0, 4).is_err());
        assert!(NoiseSchedule::build(10, 1e-4, 0.02, 3).is_err());
        assert!(NoiseSchedule::build(10, 1e-4, 0.02, 20).is_err());
    }

    #[test]
    fn alphas_strictly_decreasing_within_unit_interval() {
        for (t, s) in [(500, 5), (1000, 10), (2000, 20)] {
            let sched = NoiseSchedule::build(t, 1e-4, 0.02, s).unwrap();
            let mut prev = 1.0;
            for step in 1..=t {
                let a = sched.alpha_bar(step);
                assert!(a > 0.0 && a < 1.0 && a < prev);
                prev = a;
            }
        }
    }

    #[test]
    fn q_sample_scales_exactly() {
        let sched = NoiseSchedule::build(4, 0.36, 0.36, 4).unwrap();
        // alpha_bar(1) = 0.64.
        let x0 = vec![1.0, -2.0];
        let zeros = vec![0.0, 0.0];
        let got = q_sample(&x0, 1, &zeros, &sched).unwrap();
        assert!((got[0] - 0.8).abs() < 1e-12);
        assert!((got[1] + 1.6).abs() < 1e-12);

        let e1 = vec![1.0, 0.0];
        let origin = vec![0.0, 0.0];
        let got = q_sample(&origin, 1, &e1, &sched).unwrap();
        // sqrt(1 - 0.64) = 0.6.
        assert!((got[0] - 0.6).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn q_sample_rejects_steps_outside_subsequence() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        assert!(q_sample(&[0.0], 150, &[0.0], &sched).is_err());
        assert!(q_sample(&[0.0], 100, &[0.0], &sched).is_ok());
    }

    #[test]
    fn cfg_combination_cases() {
        assert_eq!(cfg_combine(&[1.0, 2.0], &[9.0, 9.0], 0.0), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&[3.0, 4.0], &[3.0, 4.0], 7.5), vec![3.0, 4.0]);
        assert_eq!(cfg_combine(&[1.0, 0.0], &[0.0, 1.0], 2.0), vec![3.0, -2.0]);
    }

    #[test]
    fn reverse_step_renoises_along_the_same_direction() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        let mut rng = SeedTree::new(4).stream("t", 0);
        let x0 = standard_normal(6, &mut rng);
        let eps = standard_normal(6, &mut rng);
        for s in (2..=10).rev() {
            let x_s = q_sample(&x0, sched.tau()[s - 1], &eps, &sched).unwrap();
            let stepped = ddim_step(&x_s, &x0, s, &sched, 0.0, &mut rng).unwrap();
            let expected = q_sample(&x0, sched.tau()[s - 2], &eps, &sched).unwrap();
            for (a, b) in stepped.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn final_reverse_step_recovers_clean_sample() {
        let sched = NoiseSchedule::build(500, 1e-4, 0.02, 5).unwrap();
        let mut rng = SeedTree::new(4).stream("t", 1);
        let x0 = standard_normal(4, &mut rng);
        let eps = standard_normal(4, &mut rng);
        let x1 = q_sample(&x0, sched.tau()[0], &eps, &sched).unwrap();
        let out = ddim_step(&x1, &x0, 1, &sched, 0.0, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_keeps_direction_empty() {
        let sched = NoiseSchedule::build(100, 1e-3, 0.02, 10).unwrap();
        let mut rng = SeedTree::new(4).stream("t", 2);
        let x_hat0 = vec![0.5, -1.5, 2.0];
        let s = 7;
        let a_s = sched.alpha_at_tau(s).sqrt();
        let x: Vec<f64> = x_hat0.iter().map(|v| a_s * v).collect();
        let out = ddim_step(&x, &x_hat0, s, &sched, 0.0, &mut rng).unwrap();
        let a_prev = sched.alpha_at_tau(s - 1).sqrt();
        for (o, h) in out.iter().zip(&x_hat0) {
            assert!((o - a_prev * h).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_alpha_is_a_numeric_error() {
        let sched = NoiseSchedule::raw(vec![0.0; 2], vec![1.0, 0.5], vec![1, 2]);
        let mut rng = SeedTree::new(4).stream("t", 3);
        let err = ddim_step(&[1.0], &[1.0], 1, &sched, 0.0, &mut rng).unwrap_err();
        assert!(matches!(err, TdmError::Numeric(_)));
    }

    #[test]
    fn trajectory_with_fixed_prediction_converges_to_it() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        let c = vec![0.25, -0.75, 1.25];
        let denoise = |_: &[f64], _: &[f64], _: usize| Ok(c.clone());
        let mut rng = SeedTree::new(8).stream("gen", 0);
        let x_init = standard_normal(3, &mut rng);
        let out = reverse_trajectory(
            &denoise,
            &[0.0; 3],
            None,
            x_init,
            &sched,
            &GenerationConfig { w: 0.0, sigma: 0.0 },
            &mut rng,
        )
        .unwrap();
        for (o, e) in out.iter().zip(&c) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_guidance_strength_skips_unconditional_branch() {
        use std::cell::Cell;
        let sched = NoiseSchedule::build(100, 1e-4, 0.02, 10).unwrap();
        let calls = Cell::new(0usize);
        let denoise = |_: &[f64], g: &[f64], _: usize| {
            calls.set(calls.get() + 1);
            assert_eq!(g[0], 1.0, "only the conditional branch may be evaluated");
            Ok(vec![0.0; 2])
        };
        let mut rng = SeedTree::new(8).stream("gen", 1);
        let x_init = standard_normal(2, &mut rng);
        let g_uncond = [2.0, 0.0];
        reverse_trajectory(
            &denoise,
            &[1.0, 0.0],
            Some(&g_uncond),
            x_init,
            &sched,
            &GenerationConfig { w: 0.0, sigma: 0.0 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(calls.get(), 10);
    }

    #[test]
    fn corruption_marginals_match_schedule() {
        let sched = NoiseSchedule::build(1000, 1e-4, 0.02, 10).unwrap();
        let tau = 500;
        let alpha = sched.alpha_bar(tau);
        let x0 = vec![1.0, -0.5, 0.25, 2.0];
        let mut rng = SeedTree::new(12).stream("marginal", 0);
        let n = 100_000;
        let mut sums = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        for _ in 0..n {
            let eps = standard_normal(4, &mut rng);
            let x = q_sample(&x0, tau, &eps, &sched).unwrap();
            for i in 0..4 {
                sums[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..4 {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let expected_mean = alpha.sqrt() * x0[i];
            let expected_var = 1.0 - alpha;
            assert!(
                (mean - expected_mean).abs() <= 0.02 * expected_mean.abs().max(1.0),
                "coordinate {i} mean {mean} vs {expected_mean}"
            );
            assert!(
                (var - expected_var).abs() <= 0.02 * expected_var,
                "coordinate {i} var {var} vs {expected_var}"
            );
        }
    }

    fn tiny_setup() -> (ModelConfig, ModelParams, NoiseSchedule, Vec<ItemSequence>, Vec<u64>) {
        let cfg = ModelConfig {
            item_count: 8,
            dim: 8,
            seq_slots: 5,
            encoder_layers: 1,
            attn_heads: 2,
            denoiser_hidden: 12,
            raw_dummy_uncond: false,
        };
        let params = ModelParams::init(&cfg, &mut SeedTree::new(6).stream("init", 0)).unwrap();
        let sched = NoiseSchedule::build(100, 1e-4, 0.02, 10).unwrap();
        let mk = |items: &[u32], target: u32| {
            let mut slots = vec![Slot::Pad; 5];
            for (i, &it) in items.iter().enumerate() {
                slots[5 - items.len() + i] = Slot::Item(it);
            }
            ItemSequence { slots, target }
        };
        let batch = vec![mk(&[0, 1, 2], 3), mk(&[4, 5], 6), mk(&[7, 0, 1, 2], 3)];
        let freq = vec![3u64; 8];
        (cfg, params, sched, batch, freq)
    }

    #[test]
    fn loss_is_deterministic_given_streams() {
        let (cfg, params, sched, batch, freq) = tiny_setup();
        let ctx = ScoringContext {
            table: &params.embedding,
            item_freq: &freq,
        };
        let lcfg = LossConfig::default();
        let once = || {
            let mut er = SeedTree::new(9).stream("edit", 0);
            let mut nr = SeedTree::new(9).stream("noise", 0);
            let plan = plan_batch(&batch, &ctx, &sched, &lcfg, cfg.dim, &mut er, &mut nr).unwrap();
            training_loss(&params, &cfg, &plan, &sched, &lcfg).unwrap().0
        };
        let a = once();
        let b = once();
        assert_eq!(a, b);
        assert!(a > 0.0 && a.is_finite());
    }

    #[test]
    fn rho_one_makes_every_element_unconditional() {
        let (cfg, params, sched, batch, freq) = tiny_setup();
        let ctx = ScoringContext {
            table: &params.embedding,
            item_freq: &freq,
        };
        let lcfg = LossConfig {
            rho: 1.0,
            ..LossConfig::default()
        };
        let mut er = SeedTree::new(9).stream("edit", 1);
        let mut nr = SeedTree::new(9).stream("noise", 1);
        let plan = plan_batch(&batch, &ctx, &sched, &lcfg, cfg.dim, &mut er, &mut nr).unwrap();
        assert!(plan.uncond.iter().all(|u| *u));
        let (_, tape) = training_loss(&params, &cfg, &plan, &sched, &lcfg).unwrap();
        assert!(tape.elems.iter().all(|e| e.enc.is_none()));
        assert!(tape.uncond_tape.is_some());
    }

    #[test]
    fn perfect_reconstruction_gives_zero_loss() {
        // mean ||pred - e0||^2 is zero exactly when pred == e0.
        assert_eq!(sq_dist(&[0.3, -0.4], &[0.3, -0.4]), 0.0);
    }

    #[test]
    fn weighted_loss_requires_positive_sigma() {
        let lcfg = LossConfig {
            weighted: true,
            sigma: 0.0,
            ..LossConfig::default()
        };
        assert!(lcfg.validate().is_err());
    }

    #[test]
    fn empty_batch_is_a_usage_error() {
        let (cfg, params, sched, _, freq) = tiny_setup();
        let ctx = ScoringContext {
            table: &params.embedding,
            item_freq: &freq,
        };
        let mut er = SeedTree::new(9).stream("edit", 2);
        let mut nr = SeedTree::new(9).stream("noise", 2);
        let err = plan_batch(&[], &ctx, &sched, &LossConfig::default(), cfg.dim, &mut er, &mut nr)
            .unwrap_err();
        assert!(matches!(err, TdmError::Usage(_)));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let (cfg, params, sched, batch, _) = tiny_setup();
        let gen = GenerationConfig { w: 2.0, sigma: 0.0 };
        let a = generate(
            &params,
            &cfg,
            &batch[0],
            &sched,
            &gen,
            &mut SeedTree::new(10).stream("gen", 0),
        )
        .unwrap();
        let b = generate(
            &params,
            &cfg,
            &batch[0],
            &sched,
            &gen,
            &mut SeedTree::new(10).stream("gen", 0),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(all_finite(&a));
    }
}
