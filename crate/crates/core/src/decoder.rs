//! One-shot decoder.
//!
//! The encoder output is mean-pooled into a single `1×d` start vector, run
//! through `depth` blocks of (one-token self-attention → cross-attention
//! over the encoder rows → FFN), and projected to a sigmoid score for every
//! item in the vocabulary. A bundle is the top-k of those scores restricted
//! to the instance's candidates, so the whole bundle costs one decoder pass
//! and can never contain a duplicate.

use crate::error::{Error, Result};
use crate::layers::{self, ForwardCtx};
use crate::numerics::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

pub const PROJ_WEIGHT: &str = "dec.proj.wo";
pub const PROJ_BIAS: &str = "dec.proj.bo";

pub fn self_prefix(block: usize) -> String {
    format!("dec.{block}.self")
}

pub fn cross_prefix(block: usize) -> String {
    format!("dec.{block}.cross")
}

pub fn ffn_prefix(block: usize) -> String {
    format!("dec.{block}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    pub n_items: usize,
    pub layernorm: bool,
}

pub fn init_decoder(store: &mut ParamStore, shape: DecoderShape, rng: &mut Rng) -> Result<()> {
    if shape.depth == 0 {
        return Err(Error::Config("decoder depth must be at least 1".into()));
    }
    for b in 0..shape.depth {
        layers::init_attention(store, &self_prefix(b), shape.dim, shape.heads, rng)?;
        layers::init_attention(store, &cross_prefix(b), shape.dim, shape.heads, rng)?;
        layers::init_ffn(store, &ffn_prefix(b), shape.dim, shape.ffn_hidden, rng)?;
        if shape.layernorm {
            for ln in ["ln1", "ln2", "ln3"] {
                layers::init_layer_norm(store, &format!("dec.{b}.{ln}"), shape.dim)?;
            }
        }
    }
    store.insert_glorot(PROJ_WEIGHT, shape.dim, shape.n_items, rng)?;
    store.insert(PROJ_BIAS, Tensor::zeros(1, shape.n_items))
}

/// Column means of the encoder output.
pub fn copy_from_encoder(tape: &mut Tape, x_f: Var) -> Result<Var> {
    tape.mean_over_rows(x_f)
}

pub fn one_token_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    heads: usize,
    h: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    layers::attention(tape, store, &self_prefix(block), heads, h, h, ctx)
}

/// `h'` queries; the encoder rows provide keys and values.
pub fn cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    heads: usize,
    h: Var,
    x_f: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    layers::attention(tape, store, &cross_prefix(block), heads, h, x_f, ctx)
}

pub fn decoder_ffn(tape: &mut Tape, store: &ParamStore, block: usize, h: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    layers::ffn(tape, store, &ffn_prefix(block), h, ctx)
}

/// Logits `h_d W_o + b_o` over the whole vocabulary (`1×N`).
pub fn project(tape: &mut Tape, store: &ParamStore, h_d: Var) -> Result<Var> {
    let wo = tape.param(store, PROJ_WEIGHT)?;
    let bo = tape.param(store, PROJ_BIAS)?;
    let z = tape.matmul(h_d, wo)?;
    tape.add(z, bo)
}

/// Decoder stack from the encoder output to vocabulary logits.
pub fn decode_logits(
    tape: &mut Tape,
    store: &ParamStore,
    shape: &DecoderShape,
    x_f: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let mut h = copy_from_encoder(tape, x_f)?;
    let ln = |tape: &mut Tape, b: usize, which: &str, x: Var| -> Result<Var> {
        if shape.layernorm {
            layers::layer_norm(tape, store, &format!("dec.{b}.{which}"), x)
        } else {
            Ok(x)
        }
    };
    for b in 0..shape.depth {
        let h1 = one_token_attention(tape, store, b, shape.heads, h, ctx)?;
        let h1 = ln(tape, b, "ln1", h1)?;
        let h2 = cross_attention(tape, store, b, shape.heads, h1, x_f, ctx)?;
        let h2 = ln(tape, b, "ln2", h2)?;
        let h3 = decoder_ffn(tape, store, b, h2, ctx)?;
        h = ln(tape, b, "ln3", h3)?;
    }
    project(tape, store, h)
}

/// Per-item scores for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    /// Pre-sigmoid scores, used for ranking.
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`, in `(0, 1)` away from saturation.
    pub probs: Vec<f64>,
    /// True for the instance's candidates.
    pub mask: Vec<bool>,
}

impl PredictionDistribution {
    pub fn from_logits(logits: Vec<f64>, candidates: &[usize]) -> Result<Self> {
        let n = logits.len();
        let mut mask = vec![false; n];
        for &c in candidates {
            if c >= n {
                return Err(Error::Range { what: "item", id: c, size: n });
            }
            mask[c] = true;
        }
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(PredictionDistribution { logits, probs, mask })
    }

    /// Builds a distribution from probabilities; logits are their log-odds.
    pub fn from_probs(probs: Vec<f64>, candidates: &[usize]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        let logits = probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        let mut d = Self::from_logits(logits, candidates)?;
        d.probs = probs;
        Ok(d)
    }

    pub fn n_items(&self) -> usize {
        self.logits.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Top-k candidate items by score, descending; ties go to the smaller id.
pub fn infer_bundle(dist: &PredictionDistribution, k: usize) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = (0..dist.n_items()).filter(|&i| dist.mask[i]).collect();
    if k == 0 || k > ids.len() {
        return Err(Error::Argument(format!("k={k} but {} candidates", ids.len())));
    }
    ids.sort_by(|&a, &b| dist.logits[b].total_cmp(&dist.logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub dist: PredictionDistribution,
    pub bundle: Vec<usize>,
    /// Decoder forward passes spent on this bundle.
    pub passes: usize,
}

/// One decoder pass, then top-k.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    shape: &DecoderShape,
    x_f: Var,
    candidates: &[usize],
    k: usize,
    ctx: &mut ForwardCtx,
) -> Result<Decoded> {
    let logits = decode_logits(tape, store, shape, x_f, ctx)?;
    let passes = 1;
    let dist = PredictionDistribution::from_logits(tape.value(logits).data().to_vec(), candidates)?;
    let bundle = infer_bundle(&dist, k)?;
    Ok(Decoded { dist, bundle, passes })
}
