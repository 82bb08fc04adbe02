//! Dual-side Thompson sampling: score each sequence locally (adjacent-item
//! continuity) and globally (entropy-based stability), sample edit
//! probabilities from Beta models parameterized by those scores, and replace
//! sampled items with the placeholder token to simulate missing data.
//!
//! Scores are computed from the current embedding values but never carry
//! gradients; editing is a sampling decision, not a differentiable path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::corpus::{ItemSequence, Slot};
use crate::error::{Result, TdmError};
use crate::linalg::{cosine, entropy, min_max_scale, softmax, Mat};
use crate::model::{embed_lookup, EmbeddingTable};

pub const DEFAULT_KAPPA: f64 = 4.0;

/// Keep sampled probabilities strictly inside (0, 1).
const P_CLAMP: f64 = 1e-12;

/// Softmax-normalized similarities of consecutive real items; one entry per
/// adjacent pair, in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityScores {
    pub con: Vec<f64>,
}

/// Per-sequence entropies and their batch-softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityScores {
    pub entropies: Vec<f64>,
    pub sta: Vec<f64>,
}

/// Local (item-side) value function choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalValue {
    /// Adjacent-pair similarity (the default model).
    Continuity,
    /// Normalized global interaction frequency.
    Popularity,
    /// Ordinal position of the item within the window.
    Position,
    /// Uniform random value.
    Random,
}

/// Global (sequence-side) value function choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalValue {
    /// Batch-softmaxed continuity entropy (the default model).
    Stability,
    /// Mean pairwise cosine distance of the window's real items.
    Diversity,
    /// Real-item count.
    Length,
    /// Uniform random value.
    Random,
}

impl std::str::FromStr for LocalValue {
    type Err = TdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuity" => Ok(Self::Continuity),
            "popularity" => Ok(Self::Popularity),
            "position" => Ok(Self::Position),
            "random" => Ok(Self::Random),
            other => Err(TdmError::config(format!(
                "unknown local value function {other:?} (expected continuity|popularity|position|random)"
            ))),
        }
    }
}

impl std::str::FromStr for GlobalValue {
    type Err = TdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stability" => Ok(Self::Stability),
            "diversity" => Ok(Self::Diversity),
            "length" => Ok(Self::Length),
            "random" => Ok(Self::Random),
            other => Err(TdmError::config(format!(
                "unknown global value function {other:?} (expected stability|diversity|length|random)"
            ))),
        }
    }
}

impl std::fmt::Display for LocalValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Continuity => "continuity",
            Self::Popularity => "popularity",
            Self::Position => "position",
            Self::Random => "random",
        };
        f.write_str(s)
    }
}

impl std::fmt::Display for GlobalValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Stability => "stability",
            Self::Diversity => "diversity",
            Self::Length => "length",
            Self::Random => "random",
        };
        f.write_str(s)
    }
}

/// Editing thresholds and probability-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EditParams {
    /// Sequence-side threshold: sequence k is edited iff 1 - p_k < lambda1.
    pub lambda1: f64,
    /// Item-side threshold: slot n is replaced iff 1 - p_n < lambda2.
    pub lambda2: f64,
    /// Beta concentration; the sampled model is Beta(1 + k v, 1 + k (1 - v)).
    pub kappa: f64,
    pub local: LocalValue,
    pub global: GlobalValue,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            kappa: DEFAULT_KAPPA,
            local: LocalValue::Continuity,
            global: GlobalValue::Stability,
        }
    }
}

impl EditParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TdmError::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.kappa > 0.0) {
            return Err(TdmError::config(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Everything scoring needs besides the sequences themselves.
pub struct ScoringContext<'a> {
    pub table: &'a EmbeddingTable,
    /// Global interaction counts per item id (popularity value function).
    pub item_freq: &'a [u64],
}

/// Sampled probabilities and decisions for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    /// Sequence-side sample per batch element.
    pub p_seq: Vec<f64>,
    /// Whether each sequence was selected for editing.
    pub edit_sequence: Vec<bool>,
    /// Item-side samples, aligned with slots; 0 at PAD slots and at the last
    /// real slot (which is protected by construction).
    pub p_item: Vec<Vec<f64>>,
    /// Replacement decisions, aligned with slots.
    pub remove_item: Vec<Vec<bool>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Continuity scores over the real items of one window: cosine similarity of
/// each consecutive real-item pair, softmax-normalized within the sequence.
/// A zero-norm embedding contributes similarity 0.
pub fn continuity_scores(embedded: &Mat, real_mask: &[bool]) -> Result<ContinuityScores> {
    let real: Vec<usize> = real_mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| i)
        .collect();
    if real.len() < 2 {
        return Err(TdmError::UndefinedScore(format!(
            "continuity needs at least 2 real items, found {}",
            real.len()
        )));
    }
    let sims: Vec<f64> = real
        .windows(2)
        .map(|w| cosine(embedded.row(w[0]), embedded.row(w[1])))
        .collect();
    Ok(ContinuityScores { con: softmax(&sims) })
}

/// Natural-log entropy of a continuity distribution.
pub fn sequence_entropy(scores: &ContinuityScores) -> f64 {
    entropy(&scores.con)
}

/// Batch-softmax of per-sequence entropies.
pub fn stability_scores(entropies: &[f64]) -> StabilityScores {
    StabilityScores {
        entropies: entropies.to_vec(),
        sta: softmax(entropies),
    }
}

/// One Thompson draw from Beta(1 + kappa v, 1 + kappa (1 - v)).
/// `value` must already be scaled into [0, 1].
pub fn thompson_sample(value: f64, kappa: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(TdmError::config(format!("kappa must be positive, got {kappa}")));
    }
    if !value.is_finite() || !(0.0..=1.0).contains(&value) {
        return Err(TdmError::usage(format!(
            "thompson value must be a finite number in [0, 1], got {value}"
        )));
    }
    let alpha = 1.0 + kappa * value;
    let beta = 1.0 + kappa * (1.0 - value);
    let dist = Beta::new(alpha, beta)
        .map_err(|e| TdmError::numeric(format!("invalid beta parameters: {e}")))?;
    let draw: f64 = dist.sample(rng);
    Ok(draw.clamp(P_CLAMP, 1.0 - P_CLAMP))
}

/// Raw (pre-scaling) local values for the removable items of one window.
/// Removable items are every real item except the last one.
fn local_values(
    seq: &ItemSequence,
    embedded: &Mat,
    ctx: &ScoringContext<'_>,
    which: LocalValue,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let real = seq.real_positions();
    let removable = real.len() - 1;
    match which {
        LocalValue::Continuity => {
            let scores = continuity_scores(embedded, &seq.real_mask())?;
            Ok(scores.con)
        }
        LocalValue::Popularity => {
            let total: u64 = ctx.item_freq.iter().sum();
            let denom = if total == 0 { 1.0 } else { total as f64 };
            real[..removable]
                .iter()
                .map(|&p| match seq.slots[p] {
                    Slot::Item(id) => Ok(ctx.item_freq[id as usize] as f64 / denom),
                    _ => unreachable!("real positions hold items"),
                })
                .collect()
        }
        LocalValue::Position => Ok((1..=removable)
            .map(|n| n as f64 / seq.slot_count() as f64)
            .collect()),
        LocalValue::Random => Ok((0..removable).map(|_| rng.gen::<f64>()).collect()),
    }
}

/// Raw (pre-scaling) global value of one window.
fn global_value(
    seq: &ItemSequence,
    embedded: &Mat,
    entropy_value: f64,
    which: GlobalValue,
    rng: &mut ChaCha8Rng,
) -> f64 {
    match which {
        GlobalValue::Stability => entropy_value,
        GlobalValue::Diversity => {
            let real = seq.real_positions();
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..real.len() {
                for j in i + 1..real.len() {
                    sum += 1.0 - cosine(embedded.row(real[i]), embedded.row(real[j]));
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        }
        GlobalValue::Length => seq.real_count() as f64,
        GlobalValue::Random => rng.gen::<f64>(),
    }
}

/// Strategically edit a batch: sample which sequences to edit from the
/// global model and which of their items to replace with the placeholder
/// from the local model. The last real item of every window is protected
/// (its sampled probability is forced to 0), PAD slots are never touched,
/// and windows with fewer than 2 real items are exempt.
pub fn dts_edit(
    batch: &[ItemSequence],
    ctx: &ScoringContext<'_>,
    params: &EditParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ItemSequence>, EditPlan)> {
    params.validate()?;
    if batch.is_empty() {
        return Err(TdmError::usage("cannot edit an empty batch"));
    }

    // Score pass. Draw order is fixed (sequence by sequence) so a seeded rng
    // reproduces the plan bit for bit.
    let embedded: Vec<Mat> = batch
        .iter()
        .map(|seq| embed_lookup(ctx.table, seq))
        .collect::<Result<_>>()?;

    let mut eligible = Vec::with_capacity(batch.len());
    let mut entropies = Vec::with_capacity(batch.len());
    for (seq, emb) in batch.iter().zip(&embedded) {
        let ok = seq.real_count() >= 2;
        eligible.push(ok);
        if ok {
            let con = continuity_scores(emb, &seq.real_mask())?;
            entropies.push(sequence_entropy(&con));
        } else {
            entropies.push(0.0);
        }
    }

    // Global values, min-max scaled across the batch.
    let raw_global: Vec<f64> = match params.global {
        GlobalValue::Stability => stability_scores(&entropies).sta,
        _ => batch
            .iter()
            .zip(&embedded)
            .zip(&entropies)
            .map(|((seq, emb), &h)| global_value(seq, emb, h, params.global, rng))
            .collect(),
    };
    let scaled_global = min_max_scale(&raw_global);

    let mut p_seq = Vec::with_capacity(batch.len());
    let mut edit_sequence = Vec::with_capacity(batch.len());
    let mut p_item = Vec::with_capacity(batch.len());
    let mut remove_item = Vec::with_capacity(batch.len());
    let mut edited = Vec::with_capacity(batch.len());

    for (idx, seq) in batch.iter().enumerate() {
        let slots = seq.slot_count();
        let mut p_items = vec![0.0; slots];
        let mut removes = vec![false; slots];

        if !eligible[idx] {
            p_seq.push(0.0);
            edit_sequence.push(false);
            p_item.push(p_items);
            remove_item.push(removes);
            edited.push(seq.clone());
            continue;
        }

        let pk = thompson_sample(scaled_global[idx], params.kappa, rng)?;
        let edit = 1.0 - pk < params.lambda1;
        p_seq.push(pk);
        edit_sequence.push(edit);

        // Item-side samples are always drawn so the plan is fully populated;
        // replacement applies only inside edited sequences.
        let raw_local = local_values(seq, &embedded[idx], ctx, params.local, rng)?;
        let scaled_local = min_max_scale(&raw_local);
        let real = seq.real_positions();
        let mut out = seq.clone();
        for (n, &pos) in real[..real.len() - 1].iter().enumerate() {
            let pn = thompson_sample(scaled_local[n], params.kappa, rng)?;
            p_items[pos] = pn;
            if edit && 1.0 - pn < params.lambda2 {
                removes[pos] = true;
                out.slots[pos] = Slot::Dummy;
            }
        }
        // The final real item keeps probability 0 and is never replaced.

        p_item.push(p_items);
        remove_item.push(removes);
        edited.push(out);
    }

    Ok((
        edited,
        EditPlan {
            p_seq,
            edit_sequence,
            p_item,
            remove_item,
            lambda1: params.lambda1,
            lambda2: params.lambda2,
        },
    ))
}
