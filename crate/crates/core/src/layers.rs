//! Attention and feed-forward building blocks shared by the encoder and the
//! decoder. Parameters live in a [`ParamStore`] under a caller-chosen prefix.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Training/evaluation switch for one forward pass.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<Rng>,
}

impl ForwardCtx {
    /// Deterministic pass, dropout disabled.
    pub fn eval() -> Self {
        ForwardCtx { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: Rng) -> Self {
        ForwardCtx { dropout, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let (r, c) = tape.value(x).dims();
        let keep = 1.0 / (1.0 - p);
        let data = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        tape.dropout_mask(x, Tensor::matrix(r, c, data)?)
    }
}

pub fn head_names(prefix: &str, head: usize) -> [String; 3] {
    ["wq", "wk", "wv"].map(|w| format!("{prefix}.{head}.{w}"))
}

pub fn mix_name(prefix: &str) -> String {
    format!("{prefix}.wm")
}

pub fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
    }
    Ok(dim / heads)
}

/// Per-head `W_Q, W_K, W_V` (`d × d/heads`) plus the `d × d` head mix.
pub fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<()> {
    let dh = check_heads(dim, heads)?;
    for h in 0..heads {
        for name in head_names(prefix, h) {
            store.insert_glorot(name, dim, dh, rng)?;
        }
    }
    store.insert_glorot(mix_name(prefix), dim, dim, rng)
}

pub fn init_ffn(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
    store.insert_glorot(format!("{prefix}.w1"), dim, hidden, rng)?;
    store.insert_glorot(format!("{prefix}.w2"), hidden, dim, rng)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(1, dim))
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.gain"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// Attention weights of one head: `softmax((q W_Q)(kv W_K)ᵀ / √d_h)`.
pub fn head_weights(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    head: usize,
    query: Var,
    source: Var,
) -> Result<Var> {
    let [wq, wk, _] = head_names(prefix, head);
    let wq = tape.param(store, &wq)?;
    let wk = tape.param(store, &wk)?;
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(source, wk)?;
    let dh = tape.value(q).cols();
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    tape.softmax_rows(logits)
}

/// Multi-head attention: rows of `query` attend over rows of `source`;
/// `source` supplies both keys and values. Output has `query`'s row count.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    query: Var,
    source: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let dim = tape.value(query).cols();
    if tape.value(source).cols() != dim {
        return Err(Error::Dimension(format!(
            "attention {prefix}: query width {dim}, source width {}",
            tape.value(source).cols()
        )));
    }
    check_heads(dim, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let weights = head_weights(tape, store, prefix, h, query, source)?;
        let weights = ctx.dropout(tape, weights)?;
        let wv = tape.param(store, &head_names(prefix, h)[2])?;
        let v = tape.matmul(source, wv)?;
        outs.push(tape.matmul(weights, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let wm = tape.param(store, &mix_name(prefix))?;
    tape.matmul(cat, wm)
}

/// `x + relu(x W1) W2`, dropout on the branch before the residual add.
pub fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.relu(hidden);
    let branch = tape.matmul(hidden, w2)?;
    let branch = ctx.dropout(tape, branch)?;
    tape.add(x, branch)
}
