//! Learnable functions: item embedding table, transformer sequence encoder,
//! MLP denoiser, and reverse-mode gradients for the fixed training graph.
//!
//! All parameters are 64-bit. Gradients are accumulated into a second
//! [`ModelParams`] of identical shape, which also serves as the container
//! for optimizer moments.

mod denoiser;
mod encoder;

pub use denoiser::{
    denoiser_backward, denoiser_forward, denoiser_forward_taped, timestep_embedding, DenoiserTape,
};
pub use encoder::{encode_guidance, encoder_backward, EncoderTape};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{ItemSequence, Slot};
use crate::error::{Result, TdmError};
use crate::linalg::Mat;

/// Shape configuration for the model graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub item_count: u32,
    /// Embedding dimension (default 64).
    pub dim: usize,
    /// History window length.
    pub seq_slots: usize,
    pub encoder_layers: usize,
    pub attn_heads: usize,
    pub denoiser_hidden: usize,
    /// When true, unconditional guidance is the raw placeholder embedding
    /// instead of the encoder output over a placeholder-only sequence.
    pub raw_dummy_uncond: bool,
}

impl ModelConfig {
    pub fn new(item_count: u32) -> Self {
        Self {
            item_count,
            dim: 64,
            seq_slots: 10,
            encoder_layers: 1,
            attn_heads: 1,
            denoiser_hidden: 128,
            raw_dummy_uncond: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(TdmError::config("embedding dimension must be even and nonzero"));
        }
        if self.attn_heads == 0 || self.dim % self.attn_heads != 0 {
            return Err(TdmError::config(format!(
                "attention heads ({}) must divide the embedding dimension ({})",
                self.attn_heads, self.dim
            )));
        }
        if self.seq_slots < 3 {
            return Err(TdmError::config("sequence window must have at least 3 slots"));
        }
        if self.encoder_layers == 0 || self.denoiser_hidden == 0 {
            return Err(TdmError::config("layer sizes must be nonzero"));
        }
        Ok(())
    }
}

/// Item-id -> d-dimensional vector map with two extra rows: a frozen
/// all-zero padding row and a learnable placeholder row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub item_count: u32,
    pub dim: usize,
    /// (item_count + 2) x dim; row `item_count` is PAD, `item_count + 1`
    /// is the placeholder token.
    pub weights: Mat,
}

impl EmbeddingTable {
    pub fn zeros(item_count: u32, dim: usize) -> Self {
        Self {
            item_count,
            dim,
            weights: Mat::zeros(item_count as usize + 2, dim),
        }
    }

    pub fn pad_id(&self) -> u32 {
        self.item_count
    }

    pub fn dummy_id(&self) -> u32 {
        self.item_count + 1
    }

    pub fn row_for_item(&self, id: u32) -> Result<&[f64]> {
        if id >= self.item_count {
            return Err(TdmError::Index(format!(
                "item id {id} out of range (item_count {})",
                self.item_count
            )));
        }
        Ok(self.weights.row(id as usize))
    }

    pub fn dummy_row(&self) -> &[f64] {
        self.weights.row(self.dummy_id() as usize)
    }

    /// Row index a slot token resolves to.
    pub fn slot_row(&self, slot: Slot) -> Result<usize> {
        match slot {
            Slot::Pad => Ok(self.pad_id() as usize),
            Slot::Dummy => Ok(self.dummy_id() as usize),
            Slot::Item(id) => {
                if id >= self.item_count {
                    Err(TdmError::Index(format!(
                        "item id {id} out of range (item_count {})",
                        self.item_count
                    )))
                } else {
                    Ok(id as usize)
                }
            }
        }
    }
}

/// Embed each slot of a sequence; PAD slots map to the frozen zero row.
pub fn embed_lookup(table: &EmbeddingTable, seq: &ItemSequence) -> Result<Mat> {
    let mut out = Mat::zeros(seq.slot_count(), table.dim);
    for (i, &slot) in seq.slots.iter().enumerate() {
        let row = table.slot_row(slot)?;
        out.row_mut(i).copy_from_slice(table.weights.row(row));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    fn zeros(dim: usize) -> Self {
        Self {
            gain: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

/// Attention projections are bias-free: a key bias cancels exactly in the
/// row-wise softmax and a value bias folds into the output bias, so neither
/// would ever receive useful gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// (4d x d) expansion.
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// (d x 4d) contraction.
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Learnable positional embeddings, (seq_slots x d).
    pub pos: Mat,
    pub layers: Vec<EncoderLayer>,
    pub ln_out: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    /// (hidden x 3d): consumes [noisy target, guidance, step features].
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// (hidden x hidden).
    pub w2: Mat,
    pub b2: Vec<f64>,
    /// (d x hidden).
    pub w3: Mat,
    pub b3: Vec<f64>,
    /// (d x d) linear shortcut from the guidance to the output. Starts at
    /// zero; gives the conditioning pathway a fast-to-train direct route.
    pub sg: Mat,
    /// (d x d) linear shortcut from the noisy input to the output.
    pub sx: Mat,
}

/// Every learnable parameter of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingTable,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserParams,
}

/// Borrowed view of one named parameter array.
pub struct ArrayRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named parameter array.
pub struct ArrayMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `cfg`. Also the
    /// container shape for gradients and optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let h = cfg.denoiser_hidden;
        let layer = || EncoderLayer {
            ln1: LayerNormParams::zeros(d),
            attn: AttnParams {
                wq: Mat::zeros(d, d),
                wk: Mat::zeros(d, d),
                wv: Mat::zeros(d, d),
                wo: Mat::zeros(d, d),
                bo: vec![0.0; d],
            },
            ln2: LayerNormParams::zeros(d),
            ffn: FfnParams {
                w1: Mat::zeros(4 * d, d),
                b1: vec![0.0; 4 * d],
                w2: Mat::zeros(d, 4 * d),
                b2: vec![0.0; d],
            },
        };
        Self {
            embedding: EmbeddingTable::zeros(cfg.item_count, d),
            encoder: EncoderParams {
                pos: Mat::zeros(cfg.seq_slots, d),
                layers: (0..cfg.encoder_layers).map(|_| layer()).collect(),
                ln_out: LayerNormParams::zeros(d),
            },
            denoiser: DenoiserParams {
                w1: Mat::zeros(h, 3 * d),
                b1: vec![0.0; h],
                w2: Mat::zeros(h, h),
                b2: vec![0.0; h],
                w3: Mat::zeros(d, h),
                b3: vec![0.0; d],
                sg: Mat::zeros(d, d),
                sx: Mat::zeros(d, d),
            },
        }
    }

    /// Zero parameters with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for arr in out.named_arrays_mut() {
            arr.data.fill(0.0);
        }
        out
    }

    /// Deterministic initialization: normal embeddings scaled to near-unit
    /// row norm, Xavier-normal projection weights, unit layer-norm gains,
    /// zero biases, zero PAD row. Draw order follows the canonical array
    /// order so identical seeds give identical parameters.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zeros(cfg);
        for arr in params.named_arrays_mut() {
            init_array(&arr.name, &arr.dims, arr.data, rng);
        }
        let pad = params.embedding.pad_id() as usize;
        params.embedding.weights.row_mut(pad).fill(0.0);
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.named_arrays()
            .iter()
            .all(|a| crate::linalg::all_finite(a.data))
    }

    /// Canonically ordered named views of every parameter array.
    pub fn named_arrays(&self) -> Vec<ArrayRef<'_>> {
        let mut out = Vec::new();
        out.push(mat_ref("embedding.weight".into(), &self.embedding.weights));
        out.push(mat_ref("encoder.pos".into(), &self.encoder.pos));
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let p = |s: &str| format!("encoder.l{i}.{s}");
            out.push(vec_ref(p("ln1.gain"), &l.ln1.gain));
            out.push(vec_ref(p("ln1.bias"), &l.ln1.bias));
            out.push(mat_ref(p("attn.wq"), &l.attn.wq));
            out.push(mat_ref(p("attn.wk"), &l.attn.wk));
            out.push(mat_ref(p("attn.wv"), &l.attn.wv));
            out.push(mat_ref(p("attn.wo"), &l.attn.wo));
            out.push(vec_ref(p("attn.bo"), &l.attn.bo));
            out.push(vec_ref(p("ln2.gain"), &l.ln2.gain));
            out.push(vec_ref(p("ln2.bias"), &l.ln2.bias));
            out.push(mat_ref(p("ffn.w1"), &l.ffn.w1));
            out.push(vec_ref(p("ffn.b1"), &l.ffn.b1));
            out.push(mat_ref(p("ffn.w2"), &l.ffn.w2));
            out.push(vec_ref(p("ffn.b2"), &l.ffn.b2));
        }
        out.push(vec_ref("encoder.ln_out.gain".into(), &self.encoder.ln_out.gain));
        out.push(vec_ref("encoder.ln_out.bias".into(), &self.encoder.ln_out.bias));
        out.push(mat_ref("denoiser.w1".into(), &self.denoiser.w1));
        out.push(vec_ref("denoiser.b1".into(), &self.denoiser.b1));
        out.push(mat_ref("denoiser.w2".into(), &self.denoiser.w2));
        out.push(vec_ref("denoiser.b2".into(), &self.denoiser.b2));
        out.push(mat_ref("denoiser.w3".into(), &self.denoiser.w3));
        out.push(vec_ref("denoiser.b3".into(), &self.denoiser.b3));
        out.push(mat_ref("denoiser.sg".into(), &self.denoiser.sg));
        out.push(mat_ref("denoiser.sx".into(), &self.denoiser.sx));
        out
    }

    /// Mutable counterpart of [`named_arrays`], same order.
    pub fn named_arrays_mut(&mut self) -> Vec<ArrayMut<'_>> {
        let mut out = Vec::new();
        out.push(mat_mut("embedding.weight".into(), &mut self.embedding.weights));
        out.push(mat_mut("encoder.pos".into(), &mut self.encoder.pos));
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("encoder.l{i}.{s}");
            out.push(vec_mut(p("ln1.gain"), &mut l.ln1.gain));
            out.push(vec_mut(p("ln1.bias"), &mut l.ln1.bias));
            out.push(mat_mut(p("attn.wq"), &mut l.attn.wq));
            out.push(mat_mut(p("attn.wk"), &mut l.attn.wk));
            out.push(mat_mut(p("attn.wv"), &mut l.attn.wv));
            out.push(mat_mut(p("attn.wo"), &mut l.attn.wo));
            out.push(vec_mut(p("attn.bo"), &mut l.attn.bo));
            out.push(vec_mut(p("ln2.gain"), &mut l.ln2.gain));
            out.push(vec_mut(p("ln2.bias"), &mut l.ln2.bias));
            out.push(mat_mut(p("ffn.w1"), &mut l.ffn.w1));
            out.push(vec_mut(p("ffn.b1"), &mut l.ffn.b1));
            out.push(mat_mut(p("ffn.w2"), &mut l.ffn.w2));
            out.push(vec_mut(p("ffn.b2"), &mut l.ffn.b2));
        }
        out.push(vec_mut(
            "encoder.ln_out.gain".into(),
            &mut self.encoder.ln_out.gain,
        ));
        out.push(vec_mut(
            "encoder.ln_out.bias".into(),
            &mut self.encoder.ln_out.bias,
        ));
        out.push(mat_mut("denoiser.w1".into(), &mut self.denoiser.w1));
        out.push(vec_mut("denoiser.b1".into(), &mut self.denoiser.b1));
        out.push(mat_mut("denoiser.w2".into(), &mut self.denoiser.w2));
        out.push(vec_mut("denoiser.b2".into(), &mut self.denoiser.b2));
        out.push(mat_mut("denoiser.w3".into(), &mut self.denoiser.w3));
        out.push(vec_mut("denoiser.b3".into(), &mut self.denoiser.b3));
        out.push(mat_mut("denoiser.sg".into(), &mut self.denoiser.sg));
        out.push(mat_mut("denoiser.sx".into(), &mut self.denoiser.sx));
        out
    }

    /// self += other, array by array (gradient reduction).
    pub fn add_assign(&mut self, other: &ModelParams) {
        let mut mine = self.named_arrays_mut();
        let theirs = other.named_arrays();
        assert_eq!(mine.len(), theirs.len());
        for (a, b) in mine.iter_mut().zip(theirs.iter()) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += *y;
            }
        }
    }
}

fn mat_ref(name: String, m: &Mat) -> ArrayRef<'_> {
    ArrayRef {
        name,
        dims: vec![m.rows(), m.cols()],
        data: m.data(),
    }
}

fn vec_ref(name: String, v: &[f64]) -> ArrayRef<'_> {
    ArrayRef {
        name,
        dims: vec![v.len()],
        data: v,
    }
}

fn mat_mut(name: String, m: &mut Mat) -> ArrayMut<'_> {
    let dims = vec![m.rows(), m.cols()];
    ArrayMut {
        name,
        dims,
        data: m.data_mut(),
    }
}

fn vec_mut(name: String, v: &mut Vec<f64>) -> ArrayMut<'_> {
    let dims = vec![v.len()];
    ArrayMut {
        name,
        dims,
        data: v.as_mut_slice(),
    }
}

fn init_array(name: &str, dims: &[usize], data: &mut [f64], rng: &mut ChaCha8Rng) {
    // Every 1-D array is either a layer-norm gain (ones) or a bias (zeros).
    if dims.len() == 1 {
        data.fill(if name.ends_with(".gain") { 1.0 } else { 0.0 });
        return;
    }
    // Output shortcuts start at zero so the initial model matches the plain
    // MLP; their gradients are nonzero from the first step.
    if name == "denoiser.sg" || name == "denoiser.sx" {
        data.fill(0.0);
        return;
    }
    let std = if name == "embedding.weight" {
        1.0 / (dims[1] as f64).sqrt()
    } else if name == "encoder.pos" {
        0.02
    } else {
        // Xavier-normal for projection weights, dims = [out, in].
        (2.0 / (dims[0] + dims[1]) as f64).sqrt()
    };
    let normal = Normal::new(0.0, std).expect("valid std");
    for v in data.iter_mut() {
        *v = normal.sample(rng);
    }
}

/// Unconditional guidance: the encoder applied to a window whose only
/// occupied slot is the placeholder token (or the raw placeholder row when
/// configured).
pub fn unconditional_sequence(cfg: &ModelConfig) -> ItemSequence {
    let mut slots = vec![Slot::Pad; cfg.seq_slots];
    slots[cfg.seq_slots - 1] = Slot::Dummy;
    ItemSequence { slots, target: 0 }
}
