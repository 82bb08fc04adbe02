//! MLP denoiser: predicts the clean target embedding from the noisy target,
//! the guidance vector, and sinusoidal step features. Two tanh hidden
//! layers keep the graph smooth enough for tight finite-difference checks.

use crate::error::{Result, TdmError};
use crate::linalg::{add_into, all_finite};

use super::{DenoiserParams, ModelParams};

/// Sinusoidal features of a diffusion step at geometric frequencies.
/// Entries are bounded by 1; step 0 maps to all-zero sines and all-one
/// cosines.
pub fn timestep_embedding(step: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "step features need an even dim");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
        let angle = step as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// Activations recorded by a taped denoiser forward.
#[derive(Debug, Clone)]
pub struct DenoiserTape {
    input: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

fn run(
    p: &DenoiserParams,
    noisy: &[f64],
    guidance: &[f64],
    step_features: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut input = Vec::with_capacity(noisy.len() + guidance.len() + step_features.len());
    input.extend_from_slice(noisy);
    input.extend_from_slice(guidance);
    input.extend_from_slice(step_features);

    let mut t1 = p.w1.matvec(&input);
    for (v, b) in t1.iter_mut().zip(&p.b1) {
        *v = (*v + b).tanh();
    }
    let mut t2 = p.w2.matvec(&t1);
    for (v, b) in t2.iter_mut().zip(&p.b2) {
        *v = (*v + b).tanh();
    }
    let mut out = p.w3.matvec(&t2);
    for (v, b) in out.iter_mut().zip(&p.b3) {
        *v += b;
    }
    let skip_g = p.sg.matvec(guidance);
    let skip_x = p.sx.matvec(noisy);
    for i in 0..out.len() {
        out[i] += skip_g[i] + skip_x[i];
    }
    (out, input, t1, t2)
}

/// Predict the clean target embedding. Errors on non-finite inputs.
pub fn denoiser_forward(
    params: &ModelParams,
    noisy: &[f64],
    guidance: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    if !all_finite(noisy) || !all_finite(guidance) {
        return Err(TdmError::numeric("denoiser received non-finite input"));
    }
    let temb = timestep_embedding(step, noisy.len());
    let (out, _, _, _) = run(&params.denoiser, noisy, guidance, &temb);
    Ok(out)
}

/// As [`denoiser_forward`], also recording the tape for backward.
pub fn denoiser_forward_taped(
    params: &ModelParams,
    noisy: &[f64],
    guidance: &[f64],
    step: usize,
) -> Result<(Vec<f64>, DenoiserTape)> {
    if !all_finite(noisy) || !all_finite(guidance) {
        return Err(TdmError::numeric("denoiser received non-finite input"));
    }
    let temb = timestep_embedding(step, noisy.len());
    let (out, input, t1, t2) = run(&params.denoiser, noisy, guidance, &temb);
    Ok((out, DenoiserTape { input, t1, t2 }))
}

/// Backpropagate `d_out` through the denoiser. Parameter gradients
/// accumulate into `grads`; returns the gradients on the noisy input and on
/// the guidance vector (step features are not differentiated).
pub fn denoiser_backward(
    params: &ModelParams,
    tape: &DenoiserTape,
    d_out: &[f64],
    grads: &mut ModelParams,
) -> (Vec<f64>, Vec<f64>) {
    let p = &params.denoiser;
    let g = &mut grads.denoiser;
    let dim = d_out.len();

    g.w3.add_outer(d_out, &tape.t2);
    add_into(d_out, &mut g.b3);
    let dt2 = p.w3.matvec_t(d_out);

    let mut du2 = vec![0.0; dt2.len()];
    for i in 0..dt2.len() {
        du2[i] = dt2[i] * (1.0 - tape.t2[i] * tape.t2[i]);
    }
    g.w2.add_outer(&du2, &tape.t1);
    add_into(&du2, &mut g.b2);
    let dt1 = p.w2.matvec_t(&du2);

    let mut du1 = vec![0.0; dt1.len()];
    for i in 0..dt1.len() {
        du1[i] = dt1[i] * (1.0 - tape.t1[i] * tape.t1[i]);
    }
    g.w1.add_outer(&du1, &tape.input);
    add_into(&du1, &mut g.b1);
    let d_input = p.w1.matvec_t(&du1);

    let noisy = &tape.input[..dim];
    let guidance = &tape.input[dim..2 * dim];
    g.sg.add_outer(d_out, guidance);
    g.sx.add_outer(d_out, noisy);

    let mut d_noisy = d_input[..dim].to_vec();
    let mut d_guidance = d_input[dim..2 * dim].to_vec();
    p.sx.matvec_t_acc(d_out, &mut d_noisy);
    p.sg.matvec_t_acc(d_out, &mut d_guidance);
    (d_noisy, d_guidance)
}
