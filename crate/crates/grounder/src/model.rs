//! Full model: frozen dual encoders, prompt/swip injection, CIA/DoSA
//! adapters, bridge layers and the box-regression head, assembled on a tape
//! so a single backward pass yields gradients for every tunable parameter.

use crate::boxes::BoundingBox;
use crate::config::ModelConfig;
use crate::encoder::{
    attn_sublayer, ffn_sublayer, patchify, LayerIds, LayerVars, TokenRole, TokenSequence,
};
use crate::fusion::{
    cia_forward, dosa_forward, swip_schedule, CiaVars, DosaVars, FusionError, MhcaVars, SwipStep,
};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("word id {id} out of vocabulary (size {vocab})")]
    VocabOverflow { id: u32, vocab: usize },
    #[error("swip schedule mismatch: expected {expected} injected tokens, got {got}")]
    ScheduleMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Clone)]
pub struct CiaIds {
    pub down: usize,
    pub linear: usize,
    pub up: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    /// Present only in per-layer bridge mode.
    pub bridge: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DosaIds {
    pub down: usize,
    pub up: usize,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub word_emb: usize,
    pub text_pos: usize,
    pub text_layers: Vec<LayerIds>,
    pub text_final_g: usize,
    pub text_final_b: usize,
    pub patch_proj: usize,
    pub patch_pos: usize,
    pub vision_layers: Vec<LayerIds>,
    pub vision_final_g: usize,
    pub vision_final_b: usize,
    pub reg: usize,
    pub prompt: usize,
    pub swip_bridge: Option<usize>,
    pub cia_shared_bridge: Option<usize>,
    /// Indexed by vision layer.
    pub cia: Vec<Option<CiaIds>>,
    /// Indexed by text layer.
    pub dosa: Vec<Option<DosaIds>>,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
    /// Non-trainable buffer subtracted from the REG embedding before the
    /// head (akin to a normalization layer's running statistics). The frozen
    /// random backbone leaves the REG state dominated by an input-independent
    /// offset orders of magnitude above the per-sample signal; removing the
    /// calibrated mean makes the head's optimization problem well-conditioned.
    pub head_center: Tensor,
}

/// Everything a caller may want out of one forward pass. Attention vars stay
/// on the tape so both the loss path and the visualization path share one
/// computation.
pub struct Forward {
    pub tape: Tape,
    /// 1x4 (cx, cy, w, h), already sigmoid-squashed.
    pub box_var: Var,
    pub reg_final: Var,
    /// Final text tokens after the closing LayerNorm.
    pub text_final: Var,
    pub prompts_per_layer: Vec<Var>,
    pub text_post_mha: Vec<Var>,
    /// Per-head attention of the final vision layer.
    pub vision_attn_last: Vec<Var>,
    /// Per-head attention of the final text layer.
    pub text_attn_last: Vec<Var>,
    pub vision_token_counts: Vec<usize>,
    /// Roles of the final vision token sequence.
    pub vision_roles: Vec<TokenRole>,
}

impl Forward {
    pub fn predicted_box(&self) -> BoundingBox {
        let b = self.tape.value(self.box_var);
        BoundingBox { cx: b.data[0], cy: b.data[1], w: b.data[2], h: b.data[3] }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::default();
        let (ct, cv, cd) = (cfg.text_dim, cfg.vision_dim, cfg.bottleneck_dim);
        let n = cfg.patch_count();

        let word_emb = store.add(
            "text.word_emb",
            Tensor::randn(cfg.vocab_size, ct, 0.02, &mut rng),
            true,
            ParamGroup::Backbone,
            false,
        );
        let text_pos = store.add(
            "text.pos",
            Tensor::randn(cfg.max_text_len, ct, cfg.pos_init_std, &mut rng),
            true,
            ParamGroup::Backbone,
            false,
        );
        let text_layers: Vec<LayerIds> = (0..cfg.text_depth)
            .map(|i| LayerIds::init(&mut store, &format!("text.layer{i}"), ct, &mut rng))
            .collect();
        let text_final_g = store.add(
            "text.final_ln.gamma",
            Tensor::from_vec(1, ct, vec![1.0; ct]),
            true,
            ParamGroup::Backbone,
            false,
        );
        let text_final_b = store.add(
            "text.final_ln.beta",
            Tensor::zeros(1, ct),
            true,
            ParamGroup::Backbone,
            false,
        );

        let plen = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let patch_proj = store.add(
            "vision.patch_proj",
            Tensor::randn(plen, cv, 0.02, &mut rng),
            true,
            ParamGroup::Backbone,
            false,
        );
        let patch_pos = store.add(
            "vision.patch_pos",
            Tensor::randn(n, cv, cfg.pos_init_std, &mut rng),
            true,
            ParamGroup::Backbone,
            false,
        );
        let vision_layers: Vec<LayerIds> = (0..cfg.vision_depth)
            .map(|i| LayerIds::init(&mut store, &format!("vision.layer{i}"), cv, &mut rng))
            .collect();
        let vision_final_g = store.add(
            "vision.final_ln.gamma",
            Tensor::from_vec(1, cv, vec![1.0; cv]),
            true,
            ParamGroup::Backbone,
            false,
        );
        let vision_final_b = store.add(
            "vision.final_ln.beta",
            Tensor::zeros(1, cv),
            true,
            ParamGroup::Backbone,
            false,
        );

        let reg = store.add(
            "reg",
            Tensor::xavier_uniform(1, cv, &mut rng),
            false,
            ParamGroup::Reg,
            false,
        );
        // The prompt token is part of the sequence layout either way; it only
        // trains when swip fusion is on.
        let prompt = store.add(
            "prompt",
            Tensor::xavier_uniform(1, ct, &mut rng),
            !cfg.swip_enabled,
            if cfg.swip_enabled { ParamGroup::Prompt } else { ParamGroup::Backbone },
            false,
        );
        let swip_bridge = if cfg.swip_enabled {
            Some(store.add(
                "swip_bridge",
                Tensor::kaiming_normal(ct, cv, &mut rng),
                false,
                ParamGroup::Bridge,
                true,
            ))
        } else {
            None
        };

        let cia_active = cfg.cia_enabled && !cfg.cia_layers.is_empty();
        let cia_shared_bridge = if cia_active && !cfg.cia_bridge_per_layer {
            Some(store.add(
                "cia_bridge",
                Tensor::kaiming_normal(ct, cv, &mut rng),
                false,
                ParamGroup::Bridge,
                true,
            ))
        } else {
            None
        };
        let mut cia: Vec<Option<CiaIds>> = vec![None; cfg.vision_depth];
        if cia_active {
            for &l in &cfg.cia_layers {
                let p = format!("cia.layer{l}");
                let bridge = if cfg.cia_bridge_per_layer {
                    Some(store.add(
                        format!("{p}.bridge"),
                        Tensor::kaiming_normal(ct, cv, &mut rng),
                        false,
                        ParamGroup::Bridge,
                        true,
                    ))
                } else {
                    None
                };
                cia[l] = Some(CiaIds {
                    down: store.add(
                        format!("{p}.down"),
                        Tensor::kaiming_normal(cv, cd, &mut rng),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    linear: store.add(
                        format!("{p}.linear"),
                        Tensor::kaiming_normal(cd, cd, &mut rng),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    // zero-init up-projection: training starts at the frozen
                    // backbone function
                    up: store.add(
                        format!("{p}.up"),
                        Tensor::zeros(cd, cv),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    wq: store.add(
                        format!("{p}.mhca.wq"),
                        Tensor::kaiming_normal(cd, cd, &mut rng),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    wk: store.add(
                        format!("{p}.mhca.wk"),
                        Tensor::kaiming_normal(cv, cd, &mut rng),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    wv: store.add(
                        format!("{p}.mhca.wv"),
                        Tensor::kaiming_normal(cv, cd, &mut rng),
                        false,
                        ParamGroup::Cia,
                        true,
                    ),
                    bridge,
                });
            }
        }

        let mut dosa: Vec<Option<DosaIds>> = vec![None; cfg.text_depth];
        if cfg.dosa_enabled {
            for &l in &cfg.dosa_layers {
                let p = format!("dosa.layer{l}");
                dosa[l] = Some(DosaIds {
                    down: store.add(
                        format!("{p}.down"),
                        Tensor::kaiming_normal(ct, cd, &mut rng),
                        false,
                        ParamGroup::Dosa,
                        true,
                    ),
                    up: store.add(
                        format!("{p}.up"),
                        Tensor::zeros(cd, ct),
                        false,
                        ParamGroup::Dosa,
                        true,
                    ),
                });
            }
        }

        let h = cfg.head_hidden_dim;
        let head_w1 = store.add(
            "head.w1",
            Tensor::kaiming_normal(cv, h, &mut rng),
            false,
            ParamGroup::Head,
            true,
        );
        let head_b1 = store.add("head.b1", Tensor::zeros(1, h), false, ParamGroup::Head, false);
        let head_w2 = store.add(
            "head.w2",
            Tensor::kaiming_normal(h, 4, &mut rng),
            false,
            ParamGroup::Head,
            true,
        );
        let head_b2 = store.add("head.b2", Tensor::zeros(1, 4), false, ParamGroup::Head, false);

        let ids = ModelIds {
            word_emb,
            text_pos,
            text_layers,
            text_final_g,
            text_final_b,
            patch_proj,
            patch_pos,
            vision_layers,
            vision_final_g,
            vision_final_b,
            reg,
            prompt,
            swip_bridge,
            cia_shared_bridge,
            cia,
            dosa,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        };
        Model { cfg: cfg.clone(), store, ids, head_center: Tensor::zeros(1, cfg.vision_dim) }
    }

    /// REG token plus projected patches with positional embeddings. The REG
    /// and (virtual) SWIP tokens carry no positional embedding.
    pub fn embed_patches(&self, image: &[f64]) -> Result<TokenSequence, ModelError> {
        let cfg = &self.cfg;
        let expect = cfg.image_size * cfg.image_size * cfg.in_channels;
        if image.len() != expect {
            return Err(ModelError::ShapeMismatch(format!(
                "image has {} values, config implies {}",
                image.len(),
                expect
            )));
        }
        let patches = patchify(image, cfg.image_size, cfg.patch_size, cfg.in_channels);
        let mut emb = patches.matmul(self.store.value(self.ids.patch_proj));
        emb.add_assign(self.store.value(self.ids.patch_pos));
        let n = emb.rows;
        let mut data = self.store.value(self.ids.reg).data.clone();
        data.extend_from_slice(&emb.data);
        let mut roles = vec![TokenRole::Reg];
        roles.extend(std::iter::repeat(TokenRole::Patch).take(n));
        Ok(TokenSequence::new(Tensor::from_vec(1 + n, cfg.vision_dim, data), roles))
    }

    /// Look up (frozen) word embeddings and add word positions; pads/truncates
    /// to max_text_len.
    pub fn embed_words(&self, word_ids: &[u32]) -> Result<(Tensor, Vec<TokenRole>), ModelError> {
        let cfg = &self.cfg;
        let emb = self.store.value(self.ids.word_emb);
        let pos = self.store.value(self.ids.text_pos);
        let l = cfg.max_text_len;
        let mut data = Vec::with_capacity(l * cfg.text_dim);
        let mut roles = Vec::with_capacity(l);
        for i in 0..l {
            let id = word_ids.get(i).copied().unwrap_or(crate::data::PAD_ID);
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::VocabOverflow { id, vocab: cfg.vocab_size });
            }
            for c in 0..cfg.text_dim {
                data.push(emb.at(id as usize, c) + pos.at(i, c));
            }
            roles.push(if id == crate::data::PAD_ID { TokenRole::Pad } else { TokenRole::Word });
        }
        Ok((Tensor::from_vec(l, cfg.text_dim, data), roles))
    }

    /// Full multimodal forward pass on a fresh tape.
    pub fn forward(&self, image: &[f64], word_ids: &[u32]) -> Result<Forward, ModelError> {
        let mut tape = Tape::new();
        let cfg = &self.cfg;

        // --- text encoder ---
        let (word_tensor, word_roles) = self.embed_words(word_ids)?;
        let prompt = tape.param(&self.store, self.ids.prompt);
        let words = tape.input(word_tensor);
        let mut text = tape.concat_rows(&[prompt, words]);
        let mut text_roles = vec![TokenRole::Prompt];
        text_roles.extend(word_roles);
        let text_mask: Rc<Vec<bool>> =
            Rc::new(text_roles.iter().map(|r| *r != TokenRole::Pad).collect());

        let mut prompts_per_layer = Vec::with_capacity(cfg.text_depth);
        let mut text_post_mha = Vec::with_capacity(cfg.text_depth);
        let mut text_attn_last = Vec::new();
        for (i, ids) in self.ids.text_layers.iter().enumerate() {
            let layer = LayerVars::load(&mut tape, &self.store, ids);
            let (post, probs) = attn_sublayer(&mut tape, text, &layer, cfg.text_heads, &text_mask);
            text_post_mha.push(post);
            let hooked = match self.ids.dosa[i].as_ref().filter(|_| cfg.dosa_enabled) {
                Some(d) => {
                    let down = tape.param(&self.store, d.down);
                    let up = tape.param(&self.store, d.up);
                    dosa_forward(
                        &mut tape,
                        post,
                        &DosaVars { down, up, scale: cfg.adapter_scale_t },
                    )?
                }
                None => post,
            };
            text = ffn_sublayer(&mut tape, hooked, &layer);
            prompts_per_layer.push(tape.slice_rows(text, 0, 1));
            if i + 1 == cfg.text_depth {
                text_attn_last = probs;
            }
        }
        let tg = tape.param(&self.store, self.ids.text_final_g);
        let tb = tape.param(&self.store, self.ids.text_final_b);
        let text_final = tape.layer_norm(text, tg, tb);

        // --- vision encoder ---
        let vis_seq = self.embed_patches(image)?;
        let n = cfg.patch_count();
        // REG row comes from the parameter so gradients reach it; patch rows
        // are frozen-embedding constants.
        let reg = tape.param(&self.store, self.ids.reg);
        let patch_rows = tape.input(Tensor::from_vec(
            n,
            cfg.vision_dim,
            vis_seq.data.data[cfg.vision_dim..].to_vec(),
        ));
        let mut vis = tape.concat_rows(&[reg, patch_rows]);
        let mut vis_roles = vis_seq.roles.clone();

        let schedule = swip_schedule(cfg);
        let swip_bridge = self.ids.swip_bridge.map(|id| tape.param(&self.store, id));
        let cia_shared_bridge =
            self.ids.cia_shared_bridge.map(|id| tape.param(&self.store, id));

        let mut vision_token_counts = Vec::with_capacity(cfg.vision_depth);
        let mut vision_attn_last = Vec::new();
        let mut swips = 0usize;
        for (i, ids) in self.ids.vision_layers.iter().enumerate() {
            if let SwipStep { inject: true, source_text_layer: Some(src) } = schedule[i] {
                let bridge = swip_bridge.expect("swip enabled implies bridge");
                let m = tape.matmul(prompts_per_layer[src], bridge);
                // newest token goes after REG and the previously injected ones
                let front = tape.slice_rows(vis, 0, 1 + swips);
                let back = tape.slice_rows(vis, 1 + swips, n);
                vis = tape.concat_rows(&[front, m, back]);
                vis_roles.insert(1 + swips, TokenRole::Swip);
                swips += 1;
            }
            vision_token_counts.push(tape.value(vis).rows);

            let vis_mask: Rc<Vec<bool>> = Rc::new(vec![true; tape.value(vis).rows]);
            let layer = LayerVars::load(&mut tape, &self.store, ids);
            let (post, probs) =
                attn_sublayer(&mut tape, vis, &layer, cfg.vision_heads, &vis_mask);
            let hooked = match self.ids.cia[i].as_ref().filter(|_| cfg.cia_enabled) {
                Some(c) => {
                    let bridge = match c.bridge {
                        Some(id) => tape.param(&self.store, id),
                        None => cia_shared_bridge.expect("shared bridge in shared mode"),
                    };
                    // deeper vision layers reuse the final text layer's features
                    let src = i.min(cfg.text_depth - 1);
                    let params = CiaVars {
                        down: tape.param(&self.store, c.down),
                        linear: tape.param(&self.store, c.linear),
                        up: tape.param(&self.store, c.up),
                        mhca: MhcaVars {
                            wq: tape.param(&self.store, c.wq),
                            wk: tape.param(&self.store, c.wk),
                            wv: tape.param(&self.store, c.wv),
                            heads: cfg.cia_heads,
                        },
                        scale: cfg.adapter_scale_vt,
                    };
                    cia_forward(&mut tape, post, text_post_mha[src], &params, bridge, &text_mask)?
                }
                None => post,
            };
            vis = ffn_sublayer(&mut tape, hooked, &layer);
            if i + 1 == cfg.vision_depth {
                vision_attn_last = probs;
            }
        }
        let expected_swips = schedule.iter().filter(|s| s.inject).count();
        if swips != expected_swips {
            return Err(ModelError::ScheduleMismatch { expected: expected_swips, got: swips });
        }

        let fg = tape.param(&self.store, self.ids.vision_final_g);
        let fb = tape.param(&self.store, self.ids.vision_final_b);
        let vis_final = tape.layer_norm(vis, fg, fb);
        let reg_final = tape.slice_rows(vis_final, 0, 1);

        // --- head ---
        let center = tape.input(self.head_center.clone());
        let centered = tape.sub(reg_final, center);
        let w1 = tape.param(&self.store, self.ids.head_w1);
        let b1 = tape.param(&self.store, self.ids.head_b1);
        let w2 = tape.param(&self.store, self.ids.head_w2);
        let b2 = tape.param(&self.store, self.ids.head_b2);
        let h = tape.matmul(centered, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        let o = tape.add_row(o, b2);
        let box_var = tape.sigmoid(o);

        Ok(Forward {
            tape,
            box_var,
            reg_final,
            text_final,
            prompts_per_layer,
            text_post_mha,
            vision_attn_last,
            text_attn_last,
            vision_token_counts,
            vision_roles: vis_roles,
        })
    }

    /// Differentiable L1 + GIoU objective appended to a forward pass.
    /// Returns (total, l1, giou_loss) vars; all scalars.
    pub fn loss_on(
        &self,
        fwd: &mut Forward,
        gt: &BoundingBox,
    ) -> (Var, Var, Var) {
        let tape = &mut fwd.tape;
        let pred = fwd.box_var;
        let gt_var = tape.input(Tensor::row_vec(vec![gt.cx, gt.cy, gt.w, gt.h]));

        let diff = tape.sub(pred, gt_var);
        let absdiff = tape.abs(diff);
        let l1 = tape.mean(absdiff);

        let giou = giou_var(tape, pred, gt_var);
        let one = tape.constant(1.0);
        let giou_loss = tape.sub(one, giou);

        let l1_term = tape.scale(l1, self.cfg.lambda_l1);
        let giou_term = tape.scale(giou_loss, self.cfg.lambda_giou);
        let total = tape.add(l1_term, giou_term);
        (total, l1, giou_loss)
    }
}

/// GIoU of two 1x4 center-form boxes as a tape scalar. Mirrors
/// `boxes::giou`; the two are tested against each other.
pub fn giou_var(tape: &mut Tape, a: Var, b: Var) -> Var {
    let corners = |tape: &mut Tape, v: Var| -> (Var, Var, Var, Var) {
        let c = tape.slice_cols(v, 0, 2); // (cx, cy)
        let s = tape.slice_cols(v, 2, 2); // (w, h)
        let half = tape.scale(s, 0.5);
        let lo = tape.sub(c, half);
        let hi = tape.add(c, half);
        let x1 = tape.slice_cols(lo, 0, 1);
        let y1 = tape.slice_cols(lo, 1, 1);
        let x2 = tape.slice_cols(hi, 0, 1);
        let y2 = tape.slice_cols(hi, 1, 1);
        (x1, y1, x2, y2)
    };
    let (ax1, ay1, ax2, ay2) = corners(tape, a);
    let (bx1, by1, bx2, by2) = corners(tape, b);

    let ix1 = tape.max(ax1, bx1);
    let iy1 = tape.max(ay1, by1);
    let ix2 = tape.min(ax2, bx2);
    let iy2 = tape.min(ay2, by2);
    let iw_raw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy2, iy1);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area = |tape: &mut Tape, x1: Var, y1: Var, x2: Var, y2: Var| -> Var {
        let w = tape.sub(x2, x1);
        let h = tape.sub(y2, y1);
        tape.mul(w, h)
    };
    let area_a = area(tape, ax1, ay1, ax2, ay2);
    let area_b = area(tape, bx1, by1, bx2, by2);
    let sum_ab = tape.add(area_a, area_b);
    let union = tape.sub(sum_ab, inter);

    let cx1 = tape.min(ax1, bx1);
    let cy1 = tape.min(ay1, by1);
    let cx2 = tape.max(ax2, bx2);
    let cy2 = tape.max(ay2, by2);
    let enclosing = area(tape, cx1, cy1, cx2, cy2);

    let iou = tape.div(inter, union);
    let gap = tape.sub(enclosing, union);
    let penalty = tape.div(gap, enclosing);
    tape.sub(iou, penalty)
}
