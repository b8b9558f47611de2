//! Parameter layout, initialization and the end-to-end forward pass with
//! its task heads.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::embed::embed_on_tape;
use crate::encoder::{self, encode_on_tape};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::masks::{build_layout, build_mask_with, MaskScheme, SequenceLayout};
use crate::params::{Mat, ModelParams};
use crate::tensor::{Tape, Var};
use crate::visual;

/// Number of diagnosis labels (one affine classification head each).
pub const NUM_LABELS: usize = 14;

/// Names and shapes of every parameter for a configuration.
///
/// `match_width` is 1 for schemes that classify matching from CLS alone and 2
/// when CLS and CLS_L are concatenated. `answers` adds the VQA head.
pub fn param_shapes(
    cfg: &ModelConfig,
    vocab_size: usize,
    match_width: usize,
    answers: Option<usize>,
) -> Vec<(String, (usize, usize))> {
    let (d, c) = (cfg.hidden, cfg.vis_channels);
    let mut out = visual::encoder_shapes(cfg);
    out.extend([
        ("emb.vis_loc".to_string(), (cfg.grid_capacity(), c)),
        ("emb.vis_type".to_string(), (1, c)),
        ("emb.vis_proj.weight".to_string(), (c, d)),
        ("emb.vis_proj.bias".to_string(), (1, d)),
        ("emb.token".to_string(), (vocab_size, d)),
        ("emb.pos".to_string(), (cfg.max_len + 2, d)),
        ("emb.lang_type".to_string(), (1, d)),
    ]);
    out.extend(encoder::encoder_shapes(cfg));
    out.extend([
        ("head.mlm.weight".to_string(), (d, vocab_size)),
        ("head.mlm.bias".to_string(), (1, vocab_size)),
        ("head.match.weight".to_string(), (match_width * d, 1)),
        ("head.match.bias".to_string(), (1, 1)),
        ("head.cls.weight".to_string(), (d, NUM_LABELS)),
        ("head.cls.bias".to_string(), (1, NUM_LABELS)),
    ]);
    if let Some(a) = answers {
        out.push(("head.vqa.weight".to_string(), (d, a)));
        out.push(("head.vqa.bias".to_string(), (1, a)));
    }
    out
}

fn init_tensor<R: Rng + ?Sized>(name: &str, shape: (usize, usize), rng: &mut R) -> Mat {
    let std = if name.ends_with(".bias") || name.ends_with(".beta") {
        return Mat::zeros(shape);
    } else if name.ends_with(".gamma") {
        return Mat::ones(shape);
    } else if name.starts_with("vis.") {
        (2.0 / shape.0 as f64).sqrt()
    } else if name == "emb.vis_type" || name == "emb.lang_type" {
        0.1
    } else if name.starts_with("emb.") && !name.starts_with("emb.vis_proj") {
        1.0
    } else {
        (1.0 / shape.0 as f64).sqrt()
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Fresh parameters: normal weights, zero biases, unit norm gains.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    vocab_size: usize,
    match_width: usize,
    rng: &mut R,
) -> ModelParams {
    let mut p = ModelParams::new();
    for (name, shape) in param_shapes(cfg, vocab_size, match_width, None) {
        let t = init_tensor(&name, shape, rng);
        p.insert(name, t);
    }
    p
}

/// Adds (or replaces) a freshly initialized VQA head over `answers` classes.
pub fn add_vqa_head<R: Rng + ?Sized>(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    answers: usize,
    rng: &mut R,
) {
    let d = cfg.hidden;
    params.insert("head.vqa.weight", init_tensor("head.vqa.weight", (d, answers), rng));
    params.insert("head.vqa.bias", Mat::zeros((1, answers)));
}

/// Checks every tensor against the shapes implied by `cfg`; the vocabulary
/// size, match width and answer count are read off the tensors themselves.
pub fn validate_shapes(params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let vocab = params.require("emb.token")?.nrows();
    let match_rows = params.require("head.match.weight")?.nrows();
    if cfg.hidden == 0 || match_rows % cfg.hidden != 0 {
        return Err(Error::Checkpoint(format!(
            "tensor 'head.match.weight' has {match_rows} rows, not a multiple of hidden {}",
            cfg.hidden
        )));
    }
    let answers = params.get("head.vqa.weight").map(|t| t.ncols());
    let expected = param_shapes(cfg, vocab, match_rows / cfg.hidden, answers);
    let names: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.dim() != *shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, config expects {:?}",
                t.dim(),
                shape
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !names.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
    }
    Ok(())
}

/// One image-text input to the model.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a ImageGrid,
    /// Grid indices to keep; `None` uses every feature.
    pub visual_subset: Option<&'a [usize]>,
    /// Language content ids (no CLS/SEP).
    pub tokens: &'a [usize],
    pub scheme: MaskScheme,
}

pub struct ModelRun {
    pub hidden: Var,
    pub layout: SequenceLayout,
    pub attention: Vec<Vec<Mat>>,
}

/// Visual encoder, joint embedding and the encoder stack on one tape.
pub fn run_on_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    example: &Example<'_>,
    dropout_rng: Option<&mut dyn rand::RngCore>,
    retain_attention: bool,
) -> Result<ModelRun> {
    let full = visual::encode_on_tape(tape, example.image, cfg)?;
    let all: Vec<usize>;
    let (features, position_ids) = match example.visual_subset {
        Some(idx) => (tape.rows(full, idx)?, idx),
        None => {
            all = (0..tape.value(full).nrows()).collect();
            (full, all.as_slice())
        }
    };
    let layout = build_layout(position_ids.len(), example.tokens.len(), example.scheme)?;
    let mask = build_mask_with(&layout, example.scheme, cfg.neg)?;
    let input = embed_on_tape(tape, features, position_ids, example.tokens, &layout)?;
    let run = encode_on_tape(tape, input, &mask, cfg, dropout_rng, retain_attention)?;
    Ok(ModelRun {
        hidden: run.hidden,
        layout,
        attention: run.attention,
    })
}

fn head(tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(&format!("head.{name}.weight"))?;
    let b = tape.param(&format!("head.{name}.bias"))?;
    tape.affine(x, w, b)
}

/// Vocabulary logits at the given content positions (`0..N`).
pub fn mlm_logits(tape: &mut Tape<'_>, run: &ModelRun, positions: &[usize]) -> Result<Var> {
    let start = run.layout.token_range().start;
    let rows: Vec<usize> = positions.iter().map(|p| start + p).collect();
    if let Some(&bad) = positions.iter().find(|&&p| p >= run.layout.token_count()) {
        return Err(Error::Shape(format!("token position {bad} out of range")));
    }
    let h = tape.rows(run.hidden, &rows)?;
    head(tape, h, "mlm")
}

/// Match logit from CLS, or from CLS ++ CLS_L when the layout has a language CLS.
pub fn match_logit(tape: &mut Tape<'_>, run: &ModelRun) -> Result<Var> {
    let cls = tape.rows(run.hidden, &[run.layout.cls()])?;
    let input = match run.layout.language_cls() {
        Some(pos) => {
            let cls_l = tape.rows(run.hidden, &[pos])?;
            tape.concat_cols(&[cls, cls_l])?
        }
        None => cls,
    };
    head(tape, input, "match")
}

/// `1 x 14` diagnosis logits from CLS.
pub fn classify_logits(tape: &mut Tape<'_>, run: &ModelRun) -> Result<Var> {
    let cls = tape.rows(run.hidden, &[run.layout.cls()])?;
    head(tape, cls, "cls")
}

/// `1 x A` answer logits from CLS.
pub fn vqa_logits(tape: &mut Tape<'_>, run: &ModelRun) -> Result<Var> {
    let cls = tape.rows(run.hidden, &[run.layout.cls()])?;
    head(tape, cls, "vqa")
}

/// Match head input width for a pre-training selector.
pub fn match_width_for(scheme: MaskScheme) -> usize {
    if scheme.has_language_cls() {
        2
    } else {
        1
    }
}
