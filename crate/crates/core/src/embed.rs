//! Joint input assembly: visual rows, language rows and special tokens.
//!
//! Visual row `i` is `proj(v_i + l[pos_i] + s_V)` where `l` is the location
//! table indexed by the feature's original grid index. Language row `j` is
//! `tok[w_j] + p[j] + s_L`, with `j` counted from the start of the language
//! block (so CLS_L and SEP_L take positions too). CLS and SEP_V are
//! `tok[id] + proj(s_V)`.

use crate::error::{Error, Result};
use crate::masks::SequenceLayout;
use crate::params::{Mat, ModelParams};
use crate::tensor::{Tape, Var};
use crate::visual::VisualFeatures;
use crate::vocab::{TokenSequence, CLS, SEP};

/// The assembled `S x d` input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInput {
    pub matrix: Mat,
    pub layout: SequenceLayout,
}

/// Token ids of the language block for `content` under `layout`.
pub fn language_block_ids(content: &[usize], layout: &SequenceLayout) -> Vec<usize> {
    let mut ids = Vec::with_capacity(content.len() + 2);
    if layout.has_language_cls() {
        ids.push(CLS);
    }
    ids.extend_from_slice(content);
    ids.push(SEP);
    ids
}

/// Builds the joint input on the tape. `visual` is the `K x c` feature node.
pub fn embed_on_tape(
    tape: &mut Tape<'_>,
    visual: Var,
    position_ids: &[usize],
    content: &[usize],
    layout: &SequenceLayout,
) -> Result<Var> {
    let k = tape.value(visual).nrows();
    if k != layout.visual_count() || position_ids.len() != k {
        return Err(Error::Shape(format!(
            "{k} visual rows, {} position ids, layout expects K={}",
            position_ids.len(),
            layout.visual_count()
        )));
    }
    if content.len() != layout.token_count() {
        return Err(Error::Shape(format!(
            "{} tokens, layout expects N={}",
            content.len(),
            layout.token_count()
        )));
    }
    let loc_table = tape.param("emb.vis_loc")?;
    let s_v = tape.param("emb.vis_type")?;
    let proj_w = tape.param("emb.vis_proj.weight")?;
    let proj_b = tape.param("emb.vis_proj.bias")?;
    let tok_table = tape.param("emb.token")?;
    let pos_table = tape.param("emb.pos")?;
    let s_l = tape.param("emb.lang_type")?;

    let loc = tape.rows(loc_table, position_ids)?;
    let v = tape.add(visual, loc)?;
    let v = tape.add_row(v, s_v)?;
    let v = tape.affine(v, proj_w, proj_b)?;

    let specials = tape.rows(tok_table, &[CLS, SEP])?;
    let s_v_proj = tape.affine(s_v, proj_w, proj_b)?;
    let specials = tape.add_row(specials, s_v_proj)?;
    let cls = tape.rows(specials, &[0])?;
    let sep_v = tape.rows(specials, &[1])?;

    let ids = language_block_ids(content, layout);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let max_pos = tape.value(pos_table).nrows();
    if ids.len() > max_pos {
        return Err(Error::Shape(format!(
            "language block of {} positions exceeds position table of {max_pos}",
            ids.len()
        )));
    }
    let w = tape.rows(tok_table, &ids)?;
    let p = tape.rows(pos_table, &positions)?;
    let l = tape.add(w, p)?;
    let l = tape.add_row(l, s_l)?;

    tape.concat_rows(&[cls, v, sep_v, l])
}

/// Value-level joint embedding of already-extracted visual features.
pub fn embed_joint(
    visual: &VisualFeatures,
    tokens: &TokenSequence,
    params: &ModelParams,
    layout: &SequenceLayout,
) -> Result<JointInput> {
    let mut tape = Tape::with_params(params);
    let v = tape.constant(visual.features.clone());
    let h = embed_on_tape(&mut tape, v, &visual.position_ids, tokens.content(), layout)?;
    Ok(JointInput {
        matrix: tape.value(h).clone(),
        layout: layout.clone(),
    })
}
