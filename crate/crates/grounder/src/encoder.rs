//! Transformer encoder building blocks shared by the text and vision stacks.
//!
//! Blocks are pre-norm: x + MHA(LN(x)), then an adapter hook on the post-MHA
//! features, then x + FFN(LN(x)). PAD positions are masked out of attention
//! keys so padding never leaks into real tokens.

use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

pub const FFN_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Reg,
    Swip,
    Patch,
    Prompt,
    Word,
    Pad,
}

/// A token sequence with per-token roles. The pad mask is derived: true
/// exactly where the role is PAD.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub data: Tensor,
    pub roles: Vec<TokenRole>,
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(data: Tensor, roles: Vec<TokenRole>) -> Self {
        assert_eq!(data.rows, roles.len(), "one role per token row");
        let pad_mask = roles.iter().map(|r| *r == TokenRole::Pad).collect();
        TokenSequence { data, roles, pad_mask }
    }

    /// Attention key mask: true where the token may be attended to.
    pub fn key_mask(&self) -> Rc<Vec<bool>> {
        Rc::new(self.pad_mask.iter().map(|p| !p).collect())
    }
}

/// Parameter ids for one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl LayerIds {
    /// Random frozen layer: weights at std 0.02, biases zero, norms identity.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> LayerIds {
        let hidden = FFN_RATIO * dim;
        let mut w = |name: &str, t: Tensor| {
            store.add(format!("{prefix}.{name}"), t, true, ParamGroup::Backbone, false)
        };
        LayerIds {
            ln1_g: w("ln1.gamma", ones(dim)),
            ln1_b: w("ln1.beta", Tensor::zeros(1, dim)),
            wq: w("attn.wq", Tensor::randn(dim, dim, 0.02, rng)),
            bq: w("attn.bq", Tensor::zeros(1, dim)),
            wk: w("attn.wk", Tensor::randn(dim, dim, 0.02, rng)),
            bk: w("attn.bk", Tensor::zeros(1, dim)),
            wv: w("attn.wv", Tensor::randn(dim, dim, 0.02, rng)),
            bv: w("attn.bv", Tensor::zeros(1, dim)),
            wo: w("attn.wo", Tensor::randn(dim, dim, 0.02, rng)),
            bo: w("attn.bo", Tensor::zeros(1, dim)),
            ln2_g: w("ln2.gamma", ones(dim)),
            ln2_b: w("ln2.beta", Tensor::zeros(1, dim)),
            w1: w("ffn.w1", Tensor::randn(dim, hidden, 0.02, rng)),
            b1: w("ffn.b1", Tensor::zeros(1, hidden)),
            w2: w("ffn.w2", Tensor::randn(hidden, dim, 0.02, rng)),
            b2: w("ffn.b2", Tensor::zeros(1, dim)),
        }
    }
}

fn ones(dim: usize) -> Tensor {
    Tensor::from_vec(1, dim, vec![1.0; dim])
}

/// Layer params registered on a tape for one forward pass.
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LayerVars {
    pub fn load(tape: &mut Tape, store: &ParamStore, ids: &LayerIds) -> LayerVars {
        LayerVars {
            ln1_g: tape.param(store, ids.ln1_g),
            ln1_b: tape.param(store, ids.ln1_b),
            wq: tape.param(store, ids.wq),
            bq: tape.param(store, ids.bq),
            wk: tape.param(store, ids.wk),
            bk: tape.param(store, ids.bk),
            wv: tape.param(store, ids.wv),
            bv: tape.param(store, ids.bv),
            wo: tape.param(store, ids.wo),
            bo: tape.param(store, ids.bo),
            ln2_g: tape.param(store, ids.ln2_g),
            ln2_b: tape.param(store, ids.ln2_b),
            w1: tape.param(store, ids.w1),
            b1: tape.param(store, ids.b1),
            w2: tape.param(store, ids.w2),
            b2: tape.param(store, ids.b2),
        }
    }
}

/// x + MHA(LN1(x)). Returns the post-attention features (the adapter hook
/// point) and the per-head attention probabilities.
pub fn attn_sublayer(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    heads: usize,
    key_mask: &Rc<Vec<bool>>,
) -> (Var, Vec<Var>) {
    let dim = tape.value(x).cols;
    debug_assert_eq!(dim % heads, 0);
    let dh = dim / heads;

    let xn = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
    let q = tape.matmul(xn, layer.wq);
    let q = tape.add_row(q, layer.bq);
    let k = tape.matmul(xn, layer.wk);
    let k = tape.add_row(k, layer.bk);
    let v = tape.matmul(xn, layer.wv);
    let v = tape.add_row(v, layer.bv);

    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let p = tape.row_softmax(scores, key_mask.clone());
        probs.push(p);
        outs.push(tape.matmul(p, vh));
    }
    let merged = tape.concat_cols(&outs);
    let o = tape.matmul(merged, layer.wo);
    let o = tape.add_row(o, layer.bo);
    let post = tape.add(x, o);
    (post, probs)
}

/// f + FFN(LN2(f))
pub fn ffn_sublayer(tape: &mut Tape, f: Var, layer: &LayerVars) -> Var {
    let fn_ = tape.layer_norm(f, layer.ln2_g, layer.ln2_b);
    let h = tape.matmul(fn_, layer.w1);
    let h = tape.add_row(h, layer.b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, layer.w2);
    let o = tape.add_row(o, layer.b2);
    tape.add(f, o)
}

/// Cut an image (row-major H x W x C, values in [0,1]) into non-overlapping
/// patches, one flattened patch per row, raster order.
pub fn patchify(image: &[f64], image_size: usize, patch_size: usize, channels: usize) -> Tensor {
    let grid = image_size / patch_size;
    let n = grid * grid;
    let plen = patch_size * patch_size * channels;
    let mut out = Tensor::zeros(n, plen);
    for py in 0..grid {
        for px in 0..grid {
            let row = py * grid + px;
            let mut k = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = py * patch_size + dy;
                    let x = px * patch_size + dx;
                    for c in 0..channels {
                        *out.at_mut(row, k) = image[(y * image_size + x) * channels + c];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}
