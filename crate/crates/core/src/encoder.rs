//! The joint transformer encoder.
//!
//! Each layer is multi-head masked self-attention followed by a GELU
//! feed-forward block, each with a residual connection and layer
//! normalization (post-norm by default, pre-norm behind a flag). Dropout hits
//! the attention weights and the feed-forward output in training mode only.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::params::{Mat, ModelParams};
use crate::tensor::{softmax_rows_inplace, Tape, Var};

const LN_EPS: f64 = 1e-12;

/// Single-head `softmax(Q K^T / sqrt(d_k) + M) V`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, mask: &AttentionMask) -> Result<Mat> {
    let s = mask.layout().len();
    if q.nrows() != s || k.nrows() != s || v.nrows() != s || q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?} for S={s}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let mut w = attention_weights(q, k, mask.matrix());
    softmax_rows_inplace(&mut w);
    Ok(w.dot(v))
}

fn attention_weights(q: &Mat, k: &Mat, mask: &Mat) -> Mat {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    q.dot(&k.t()) * scale + mask
}

/// Parameter names and shapes of the encoder stack.
pub fn encoder_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, ff) = (cfg.hidden, cfg.ff);
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("layer{l}.attn.{proj}.weight"), (d, d)));
            out.push((format!("layer{l}.attn.{proj}.bias"), (1, d)));
        }
        out.push((format!("layer{l}.attn.norm.gamma"), (1, d)));
        out.push((format!("layer{l}.attn.norm.beta"), (1, d)));
        out.push((format!("layer{l}.ffn.inner.weight"), (d, ff)));
        out.push((format!("layer{l}.ffn.inner.bias"), (1, ff)));
        out.push((format!("layer{l}.ffn.outer.weight"), (ff, d)));
        out.push((format!("layer{l}.ffn.outer.bias"), (1, d)));
        out.push((format!("layer{l}.ffn.norm.gamma"), (1, d)));
        out.push((format!("layer{l}.ffn.norm.beta"), (1, d)));
    }
    if cfg.pre_norm {
        out.push(("final.norm.gamma".into(), (1, d)));
        out.push(("final.norm.beta".into(), (1, d)));
    }
    out
}

fn keep_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

fn affine_named(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.affine(x, w, b)
}

fn norm_named(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gamma"))?;
    let b = tape.param(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Result of running the stack on a tape.
pub struct EncoderRun {
    pub hidden: Var,
    /// `attention[layer][head]` is the `S x S` weight matrix, when retained.
    pub attention: Vec<Vec<Mat>>,
}

/// Runs every layer on `input` (`S x d`). Passing an rng enables dropout.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    input: Var,
    mask: &AttentionMask,
    cfg: &ModelConfig,
    mut dropout_rng: Option<&mut dyn rand::RngCore>,
    retain_attention: bool,
) -> Result<EncoderRun> {
    let (s, d) = tape.value(input).dim();
    if d != cfg.hidden || s != mask.layout().len() {
        return Err(Error::Shape(format!(
            "encoder input {s}x{d}, expected {}x{}",
            mask.layout().len(),
            cfg.hidden
        )));
    }
    let rate = cfg.dropout;
    let mut x = input;
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let a_in = if cfg.pre_norm {
            norm_named(tape, x, &format!("layer{l}.attn.norm"))?
        } else {
            x
        };
        let q = affine_named(tape, a_in, &format!("layer{l}.attn.query"))?;
        let k = affine_named(tape, a_in, &format!("layer{l}.attn.key"))?;
        let v = affine_named(tape, a_in, &format!("layer{l}.attn.value"))?;
        let drop = match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                Some((0..cfg.heads).map(|_| keep_mask((s, s), rate, rng)).collect())
            }
            _ => None,
        };
        let att = tape.attention(q, k, v, cfg.heads, mask.matrix(), drop)?;
        if retain_attention {
            attention.push(tape.attention_weights(att).unwrap_or_default().to_vec());
        }
        let o = affine_named(tape, att, &format!("layer{l}.attn.output"))?;
        let sum = tape.add(x, o)?;
        x = if cfg.pre_norm {
            sum
        } else {
            norm_named(tape, sum, &format!("layer{l}.attn.norm"))?
        };

        let f_in = if cfg.pre_norm {
            norm_named(tape, x, &format!("layer{l}.ffn.norm"))?
        } else {
            x
        };
        let inner = affine_named(tape, f_in, &format!("layer{l}.ffn.inner"))?;
        let inner = tape.gelu(inner);
        let mut f = affine_named(tape, inner, &format!("layer{l}.ffn.outer"))?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if rate > 0.0 {
                let m = keep_mask((s, d), rate, rng);
                f = tape.dropout(f, m)?;
            }
        }
        let sum = tape.add(x, f)?;
        x = if cfg.pre_norm {
            sum
        } else {
            norm_named(tape, sum, &format!("layer{l}.ffn.norm"))?
        };
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation after layer {l}")));
        }
    }
    if cfg.pre_norm {
        x = norm_named(tape, x, "final.norm")?;
    }
    Ok(EncoderRun {
        hidden: x,
        attention,
    })
}

/// Contextualized output of a value-level forward pass.
#[derive(Debug, Clone)]
pub struct ContextualOutput {
    pub hidden: Mat,
    pub attention: Vec<Vec<Mat>>,
}

/// Value-level forward pass over an assembled joint input.
pub fn forward(
    input: &crate::embed::JointInput,
    mask: &AttentionMask,
    params: &ModelParams,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut dyn rand::RngCore>,
    retain_attention: bool,
) -> Result<ContextualOutput> {
    if input.layout != *mask.layout() {
        return Err(Error::Shape("input layout differs from mask layout".into()));
    }
    let mut tape = Tape::with_params(params);
    let x = tape.constant(input.matrix.clone());
    let run = encode_on_tape(&mut tape, x, mask, cfg, dropout_rng, retain_attention)?;
    Ok(ContextualOutput {
        hidden: tape.value(run.hidden).clone(),
        attention: run.attention,
    })
}
