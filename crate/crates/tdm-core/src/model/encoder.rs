//! Causal transformer encoder over a left-padded item window. The guidance
//! vector is the final-layer representation at the last slot, which attends
//! to the whole occupied history. PAD slots are excluded from attention in
//! both directions and contribute nothing to any output.
//!
//! Forward passes record the activations needed for the manual backward
//! pass in an [`EncoderTape`].

use crate::corpus::ItemSequence;
use crate::error::{Result, TdmError};
use crate::linalg::{add_into, dot, Mat};

use super::{ModelConfig, ModelParams};

pub(crate) const LN_EPS: f64 = 1e-5;

/// LayerNorm over one row. Writes the normalized row into `xhat` and the
/// affine output into `out`; returns 1/std for the backward pass.
pub(crate) fn ln_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mu) * inv_std;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    inv_std
}

/// LayerNorm backward for one row; accumulates into `d_x`, `d_gain`, `d_bias`.
pub(crate) fn ln_backward(
    d_out: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
    d_x: &mut [f64],
) {
    let d = d_out.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..d_out.len() {
        let dxh = d_out[i] * gain[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
        d_gain[i] += d_out[i] * xhat[i];
        d_bias[i] += d_out[i];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for i in 0..d_out.len() {
        let dxh = d_out[i] * gain[i];
        d_x[i] += inv_std * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

/// Per-slot LayerNorm cache: normalized rows plus 1/std per slot.
#[derive(Debug, Clone)]
struct LnRows {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LnRows {
    fn new(slots: usize, dim: usize) -> Self {
        Self {
            xhat: Mat::zeros(slots, dim),
            inv_std: vec![0.0; slots],
        }
    }
}

/// Activations of one encoder layer.
#[derive(Debug, Clone)]
struct LayerTape {
    /// Layer input, (slots x d). Rows at PAD slots are zero.
    x: Mat,
    ln1: LnRows,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// attn[head][query_index] = probabilities over occupied key indices
    /// 0..=query_index (causal prefix of the occupied slots).
    attn: Vec<Vec<Vec<f64>>>,
    ctx: Mat,
    /// Residual stream after attention, (slots x d).
    r: Mat,
    ln2: LnRows,
    b: Mat,
    /// tanh of the expansion activations, (slots x 4d).
    t: Mat,
}

/// Forward record of one encoded sequence.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    /// Occupied (non-PAD) slot indices, ascending.
    occupied: Vec<usize>,
    /// Embedding row index used at each occupied slot.
    emb_rows: Vec<usize>,
    layers: Vec<LayerTape>,
    out_xhat: Vec<f64>,
    out_inv_std: f64,
    guidance: Vec<f64>,
}

impl EncoderTape {
    pub fn guidance(&self) -> &[f64] {
        &self.guidance
    }

    /// Attention rows (probability vectors) of a layer, for invariants.
    pub fn attention_rows(&self, layer: usize) -> Vec<&[f64]> {
        self.layers[layer]
            .attn
            .iter()
            .flat_map(|head| head.iter().map(Vec::as_slice))
            .collect()
    }
}

/// Encode a window into its guidance vector, recording the tape.
pub fn encode_guidance(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq: &ItemSequence,
) -> Result<EncoderTape> {
    let d = cfg.dim;
    let slots = cfg.seq_slots;
    if seq.slot_count() != slots {
        return Err(TdmError::usage(format!(
            "sequence has {} slots, model expects {slots}",
            seq.slot_count()
        )));
    }
    let occupied: Vec<usize> = seq
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_pad())
        .map(|(i, _)| i)
        .collect();
    if occupied.is_empty() {
        return Err(TdmError::usage(
            "cannot encode a window with no occupied slots",
        ));
    }
    if *occupied.last().unwrap() != slots - 1 {
        return Err(TdmError::usage(
            "window is not left-padded: the last slot must be occupied",
        ));
    }

    let heads = cfg.attn_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut emb_rows = Vec::with_capacity(occupied.len());
    let mut x = Mat::zeros(slots, d);
    for &p in &occupied {
        let row = params.embedding.slot_row(seq.slots[p])?;
        emb_rows.push(row);
        let dst = x.row_mut(p);
        dst.copy_from_slice(params.embedding.weights.row(row));
        add_into(params.encoder.pos.row(p), dst);
    }

    let mut layers = Vec::with_capacity(params.encoder.layers.len());
    for layer in &params.encoder.layers {
        let mut tape = LayerTape {
            x: x.clone(),
            ln1: LnRows::new(slots, d),
            a: Mat::zeros(slots, d),
            q: Mat::zeros(slots, d),
            k: Mat::zeros(slots, d),
            v: Mat::zeros(slots, d),
            attn: vec![Vec::with_capacity(occupied.len()); heads],
            ctx: Mat::zeros(slots, d),
            r: Mat::zeros(slots, d),
            ln2: LnRows::new(slots, d),
            b: Mat::zeros(slots, d),
            t: Mat::zeros(slots, 4 * d),
        };

        for &p in &occupied {
            let mut a_out = vec![0.0; d];
            tape.ln1.inv_std[p] = ln_forward(
                tape.x.row(p),
                &layer.ln1.gain,
                &layer.ln1.bias,
                &mut a_out,
                tape.ln1.xhat.row_mut(p),
            );
            tape.a.row_mut(p).copy_from_slice(&a_out);
            let a_row = a_out;
            tape.q.row_mut(p).copy_from_slice(&layer.attn.wq.matvec(&a_row));
            tape.k.row_mut(p).copy_from_slice(&layer.attn.wk.matvec(&a_row));
            tape.v.row_mut(p).copy_from_slice(&layer.attn.wv.matvec(&a_row));
        }

        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            for (qi, &p) in occupied.iter().enumerate() {
                let qrow = &tape.q.row(p)[lo..hi];
                let mut scores = Vec::with_capacity(qi + 1);
                for &kp in &occupied[..=qi] {
                    scores.push(dot(qrow, &tape.k.row(kp)[lo..hi]) * scale);
                }
                let probs = crate::linalg::softmax(&scores);
                let mut ctx_head = vec![0.0; dh];
                for (j, &kp) in occupied[..=qi].iter().enumerate() {
                    crate::linalg::axpy(probs[j], &tape.v.row(kp)[lo..hi], &mut ctx_head);
                }
                tape.ctx.row_mut(p)[lo..hi].copy_from_slice(&ctx_head);
                tape.attn[h].push(probs);
            }
        }

        for &p in &occupied {
            let ctx_row = tape.ctx.row(p).to_vec();
            let attn_out = layer.attn.wo.matvec(&ctx_row);
            let r = tape.r.row_mut(p);
            for i in 0..d {
                r[i] = tape.x.row(p)[i] + attn_out[i] + layer.attn.bo[i];
            }
        }

        let mut y = Mat::zeros(slots, d);
        for &p in &occupied {
            let mut b_out = vec![0.0; d];
            tape.ln2.inv_std[p] = ln_forward(
                tape.r.row(p),
                &layer.ln2.gain,
                &layer.ln2.bias,
                &mut b_out,
                tape.ln2.xhat.row_mut(p),
            );
            tape.b.row_mut(p).copy_from_slice(&b_out);
            let u = layer.ffn.w1.matvec(&b_out);
            for i in 0..4 * d {
                tape.t.row_mut(p)[i] = (u[i] + layer.ffn.b1[i]).tanh();
            }
            let t_row = tape.t.row(p).to_vec();
            let f = layer.ffn.w2.matvec(&t_row);
            let yr = y.row_mut(p);
            for i in 0..d {
                yr[i] = tape.r.row(p)[i] + f[i] + layer.ffn.b2[i];
            }
        }

        layers.push(tape);
        x = y;
    }

    let last = slots - 1;
    let mut guidance = vec![0.0; d];
    let mut out_xhat = vec![0.0; d];
    let out_inv_std = ln_forward(
        x.row(last),
        &params.encoder.ln_out.gain,
        &params.encoder.ln_out.bias,
        &mut guidance,
        &mut out_xhat,
    );

    Ok(EncoderTape {
        occupied,
        emb_rows,
        layers,
        out_xhat,
        out_inv_std,
        guidance,
    })
}

/// Backpropagate a gradient on the guidance vector through the encoder,
/// accumulating parameter gradients into `grads` (same shape as the model).
/// The PAD embedding row receives no gradient.
pub fn encoder_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    tape: &EncoderTape,
    d_guidance: &[f64],
    grads: &mut ModelParams,
) {
    let d = cfg.dim;
    let slots = cfg.seq_slots;
    let heads = cfg.attn_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let occupied = &tape.occupied;
    let last = slots - 1;

    // Output LayerNorm.
    let mut dy = Mat::zeros(slots, d);
    ln_backward(
        d_guidance,
        &tape.out_xhat,
        tape.out_inv_std,
        &params.encoder.ln_out.gain,
        &mut grads.encoder.ln_out.gain,
        &mut grads.encoder.ln_out.bias,
        dy.row_mut(last),
    );

    for li in (0..params.encoder.layers.len()).rev() {
        let layer = &params.encoder.layers[li];
        let lt = &tape.layers[li];
        let g = &mut grads.encoder.layers[li];

        // y = r + FFN(LN2(r)): route dy into dr and the FFN.
        let mut dr = Mat::zeros(slots, d);
        for &p in occupied.iter() {
            let dy_p = dy.row(p).to_vec();
            add_into(&dy_p, dr.row_mut(p));

            // FFN backward.
            g.ffn.w2.add_outer(&dy_p, lt.t.row(p));
            add_into(&dy_p, &mut g.ffn.b2);
            let dt = layer.ffn.w2.matvec_t(&dy_p);
            let mut du = vec![0.0; 4 * d];
            for i in 0..4 * d {
                let t = lt.t.row(p)[i];
                du[i] = dt[i] * (1.0 - t * t);
            }
            g.ffn.w1.add_outer(&du, lt.b.row(p));
            add_into(&du, &mut g.ffn.b1);
            let db = layer.ffn.w1.matvec_t(&du);

            ln_backward(
                &db,
                lt.ln2.xhat.row(p),
                lt.ln2.inv_std[p],
                &layer.ln2.gain,
                &mut g.ln2.gain,
                &mut g.ln2.bias,
                dr.row_mut(p),
            );
        }

        // r = x + Wo ctx + bo: route dr into dx (residual) and attention.
        let mut dq = Mat::zeros(slots, d);
        let mut dk = Mat::zeros(slots, d);
        let mut dv = Mat::zeros(slots, d);
        let mut dx = Mat::zeros(slots, d);
        let mut dctx_all = Mat::zeros(slots, d);
        for &p in occupied.iter() {
            add_into(dr.row(p), dx.row_mut(p));
            let dr_p = dr.row(p).to_vec();
            g.attn.wo.add_outer(&dr_p, lt.ctx.row(p));
            add_into(&dr_p, &mut g.attn.bo);
            let c = layer.attn.wo.matvec_t(&dr_p);
            dctx_all.row_mut(p).copy_from_slice(&c);
        }

        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            for (qi, &p) in occupied.iter().enumerate() {
                let dctx = &dctx_all.row(p)[lo..hi];
                let probs = &lt.attn[h][qi];

                let mut dprob = vec![0.0; qi + 1];
                for (j, &kp) in occupied[..=qi].iter().enumerate() {
                    dprob[j] = dot(dctx, &lt.v.row(kp)[lo..hi]);
                    crate::linalg::axpy(probs[j], dctx, &mut dv.row_mut(kp)[lo..hi]);
                }
                let inner: f64 = dprob.iter().zip(probs.iter()).map(|(a, b)| a * b).sum();
                for (j, &kp) in occupied[..=qi].iter().enumerate() {
                    let dscore = probs[j] * (dprob[j] - inner) * scale;
                    crate::linalg::axpy(dscore, &lt.k.row(kp)[lo..hi], &mut dq.row_mut(p)[lo..hi]);
                    crate::linalg::axpy(dscore, &lt.q.row(p)[lo..hi], &mut dk.row_mut(kp)[lo..hi]);
                }
            }
        }

        // Projections and first LayerNorm.
        for &p in occupied.iter() {
            let a_row = lt.a.row(p);
            let dq_p = dq.row(p).to_vec();
            let dk_p = dk.row(p).to_vec();
            let dv_p = dv.row(p).to_vec();
            g.attn.wq.add_outer(&dq_p, a_row);
            g.attn.wk.add_outer(&dk_p, a_row);
            g.attn.wv.add_outer(&dv_p, a_row);

            let mut da = layer.attn.wq.matvec_t(&dq_p);
            layer.attn.wk.matvec_t_acc(&dk_p, &mut da);
            layer.attn.wv.matvec_t_acc(&dv_p, &mut da);

            ln_backward(
                &da,
                lt.ln1.xhat.row(p),
                lt.ln1.inv_std[p],
                &layer.ln1.gain,
                &mut g.ln1.gain,
                &mut g.ln1.bias,
                dx.row_mut(p),
            );
        }

        dy = dx;
    }

    // Embedding and positional gradients.
    for (&p, &row) in occupied.iter().zip(&tape.emb_rows) {
        add_into(dy.row(p), grads.embedding.weights.row_mut(row));
        add_into(dy.row(p), grads.encoder.pos.row_mut(p));
    }
    let pad = params.embedding.pad_id() as usize;
    grads.embedding.weights.row_mut(pad).fill(0.0);
}
