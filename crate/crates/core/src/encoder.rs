//! Candidate encoder.
//!
//! The input row for candidate `v` of user `u` is `[e_v ; e_u] + c_v`: the
//! concatenated preference embeddings plus the item's compatibility
//! embedding, which plays the role of an item-bound (not index-bound)
//! position encoding. Each block is multi-head self-attention followed by
//! `X_A + relu(X_A W1) W2`. No position index enters anywhere, so the stack
//! is equivariant to candidate order.

use crate::data::GenerationInstance;
use crate::error::{Error, Result};
use crate::layers::{self, ForwardCtx};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::pretrain::PreferenceModel;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    /// `n × d`, row `i` belongs to `candidates[i]`.
    pub x: Tensor,
    pub candidates: Vec<usize>,
}

pub fn block_prefix(block: usize) -> String {
    format!("enc.{block}")
}

/// Preference rows `p_i = e_{v_i} ⊕ e_u` for the instance's candidates.
pub fn preference_rows<P: PreferenceModel>(instance: &GenerationInstance, pref: &P) -> Tensor {
    let d_e = pref.dim();
    let eu = pref.user_embedding(instance.user);
    let mut p = Tensor::zeros(instance.candidates.len(), 2 * d_e);
    for (r, &v) in instance.candidates.iter().enumerate() {
        let row = p.row_slice_mut(r);
        row[..d_e].copy_from_slice(pref.item_embedding(v));
        row[d_e..].copy_from_slice(eu);
    }
    p
}

/// `X = P + C`. `compat` holds one row per candidate.
pub fn assemble_input<P: PreferenceModel>(
    instance: &GenerationInstance,
    pref: &P,
    compat: &Tensor,
) -> Result<EncoderInput> {
    let p = preference_rows(instance, pref);
    if p.cols() != compat.cols() {
        return Err(Error::Config(format!(
            "preference width 2·d_e = {} does not match compatibility width d_c = {}",
            p.cols(),
            compat.cols()
        )));
    }
    if p.rows() != compat.rows() {
        return Err(Error::Dimension(format!(
            "{} candidates but {} compatibility rows",
            p.rows(),
            compat.rows()
        )));
    }
    let mut x = p;
    x.add_assign(compat);
    Ok(EncoderInput { x, candidates: instance.candidates.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_hidden: usize,
    pub layernorm: bool,
}

/// Registers `enc.<b>.<h>.{wq,wk,wv}`, `enc.<b>.wm`, `enc.<b>.{w1,w2}`.
pub fn init_encoder(store: &mut ParamStore, shape: EncoderShape, rng: &mut Rng) -> Result<()> {
    if shape.depth == 0 {
        return Err(Error::Config("encoder depth must be at least 1".into()));
    }
    for b in 0..shape.depth {
        let prefix = block_prefix(b);
        layers::init_attention(store, &prefix, shape.dim, shape.heads, rng)?;
        layers::init_ffn(store, &prefix, shape.dim, shape.ffn_hidden, rng)?;
        if shape.layernorm {
            layers::init_layer_norm(store, &format!("{prefix}.ln1"), shape.dim)?;
            layers::init_layer_norm(store, &format!("{prefix}.ln2"), shape.dim)?;
        }
    }
    Ok(())
}

pub fn multihead_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    heads: usize,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    layers::attention(tape, store, &block_prefix(block), heads, x, x, ctx)
}

pub fn encoder_ffn(tape: &mut Tape, store: &ParamStore, block: usize, x_a: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    layers::ffn(tape, store, &block_prefix(block), x_a, ctx)
}

/// One attention → FFN unit.
pub fn encode_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    shape: &EncoderShape,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let prefix = block_prefix(block);
    let mut x_a = multihead_self_attention(tape, store, block, shape.heads, x, ctx)?;
    if shape.layernorm {
        x_a = layers::layer_norm(tape, store, &format!("{prefix}.ln1"), x_a)?;
    }
    let mut x_f = encoder_ffn(tape, store, block, x_a, ctx)?;
    if shape.layernorm {
        x_f = layers::layer_norm(tape, store, &format!("{prefix}.ln2"), x_f)?;
    }
    Ok(x_f)
}

pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    shape: &EncoderShape,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let mut h = x;
    for b in 0..shape.depth {
        h = encode_block(tape, store, b, shape, h, ctx)?;
    }
    Ok(h)
}
