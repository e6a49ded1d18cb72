//! Cross-modal fusion components: the bridge projection, the step-wise prompt
//! injection schedule, the cross-modal interactive adapter (CIA) and the
//! domain-specific adapter (DoSA).
//!
//! All forward functions operate on tape variables so gradients flow through
//! every adapter into the shared objective.

use crate::config::ModelConfig;
use crate::tape::{Tape, Var};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cross-attention context is fully masked")]
    EmptyContext,
}

/// One entry per vision layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwipStep {
    pub inject: bool,
    /// Index of the text layer whose output prompt is injected (0-based).
    pub source_text_layer: Option<usize>,
}

/// Vision layer i receives the prompt produced by text layer i while text
/// layers remain; once the text stack is exhausted no further tokens are
/// injected, but earlier ones keep flowing through deeper layers.
pub fn swip_schedule(cfg: &ModelConfig) -> Vec<SwipStep> {
    (0..cfg.vision_depth)
        .map(|i| {
            if cfg.swip_enabled && i < cfg.text_depth {
                SwipStep { inject: true, source_text_layer: Some(i) }
            } else {
                SwipStep { inject: false, source_text_layer: None }
            }
        })
        .collect()
}

/// Pure linear map from text width to vision width; no bias, no activation.
pub fn bridge_project(
    tape: &mut Tape,
    text_features: Var,
    bridge_weight: Var,
) -> Result<Var, FusionError> {
    let f = tape.value(text_features);
    let w = tape.value(bridge_weight);
    if f.cols != w.rows {
        return Err(FusionError::ShapeMismatch(format!(
            "bridge expects [{} x C_t={}] input, got cols {}",
            f.rows, w.rows, f.cols
        )));
    }
    Ok(tape.matmul(text_features, bridge_weight))
}

/// Multi-head cross-attention parameters. Wq maps the bottleneck query space
/// onto itself; Wk/Wv map the (bridged) context down to the bottleneck.
#[derive(Debug, Clone, Copy)]
pub struct MhcaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub heads: usize,
}

/// softmax((q Wq)(ctx Wk)^T / sqrt(C_head)) (ctx Wv), heads concatenated.
/// Masked context tokens get zero attention weight.
pub fn cross_attention(
    tape: &mut Tape,
    query: Var,
    context: Var,
    params: &MhcaVars,
    context_mask: &Rc<Vec<bool>>,
) -> Result<Var, FusionError> {
    let q_cols = tape.value(query).cols;
    let wq = tape.value(params.wq);
    let wk = tape.value(params.wk);
    let ctx = tape.value(context);
    if wq.rows != q_cols {
        return Err(FusionError::ShapeMismatch(format!(
            "Wq expects query dim {}, got {}",
            wq.rows, q_cols
        )));
    }
    if wk.rows != ctx.cols {
        return Err(FusionError::ShapeMismatch(format!(
            "Wk expects context dim {}, got {}",
            wk.rows, ctx.cols
        )));
    }
    if context_mask.len() != ctx.rows {
        return Err(FusionError::ShapeMismatch("context mask length".into()));
    }
    if !context_mask.iter().any(|&m| m) {
        return Err(FusionError::EmptyContext);
    }
    let d = wq.cols;
    let heads = params.heads;
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;

    let q = tape.matmul(query, params.wq);
    let k = tape.matmul(context, params.wk);
    let v = tape.matmul(context, params.wv);
    // mask applies to keys (columns of the score matrix = context rows)
    let key_mask = Rc::new(context_mask.to_vec());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.row_softmax(scores, key_mask.clone());
        outs.push(tape.matmul(probs, vh));
    }
    Ok(tape.concat_cols(&outs))
}

#[derive(Debug, Clone, Copy)]
pub struct CiaVars {
    pub down: Var,
    pub linear: Var,
    pub up: Var,
    pub mhca: MhcaVars,
    pub scale: f64,
}

/// Down-project, ReLU, linear, cross-attend to bridged text features, then
/// up-project and add back as a scaled residual.
pub fn cia_forward(
    tape: &mut Tape,
    vision_features: Var,
    text_post_mha: Var,
    params: &CiaVars,
    bridge_weight: Var,
    text_mask: &Rc<Vec<bool>>,
) -> Result<Var, FusionError> {
    let fv_cols = tape.value(vision_features).cols;
    if tape.value(params.down).rows != fv_cols {
        return Err(FusionError::ShapeMismatch(format!(
            "CIA down-projection expects dim {}, got {}",
            tape.value(params.down).rows,
            fv_cols
        )));
    }
    let bridged = bridge_project(tape, text_post_mha, bridge_weight)?;
    let f_down = tape.matmul(vision_features, params.down);
    let f_act = tape.relu(f_down);
    let f_l = tape.matmul(f_act, params.linear);
    let attended = cross_attention(tape, f_l, bridged, &params.mhca, text_mask)?;
    let mixed = tape.add(f_l, attended);
    let f_up = tape.matmul(mixed, params.up);
    let scaled = tape.scale(f_up, params.scale);
    Ok(tape.add(vision_features, scaled))
}

#[derive(Debug, Clone, Copy)]
pub struct DosaVars {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

/// f + scale * ReLU(f W_down) W_up
pub fn dosa_forward(
    tape: &mut Tape,
    text_features: Var,
    params: &DosaVars,
) -> Result<Var, FusionError> {
    let cols = tape.value(text_features).cols;
    if tape.value(params.down).rows != cols {
        return Err(FusionError::ShapeMismatch(format!(
            "DoSA down-projection expects dim {}, got {}",
            tape.value(params.down).rows,
            cols
        )));
    }
    let down = tape.matmul(text_features, params.down);
    let act = tape.relu(down);
    let up = tape.matmul(act, params.up);
    let scaled = tape.scale(up, params.scale);
    Ok(tape.add(text_features, scaled))
}
