//! Validated model/training configuration and derived shape arithmetic.
//!
//! Config files are flat JSON objects. Unknown keys are a hard error so a
//! typo'd override cannot silently fall back to a default.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("config is not a JSON object")]
    NotAnObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    // text encoder
    pub text_depth: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    // vision encoder
    pub vision_depth: usize,
    pub vision_dim: usize,
    pub vision_heads: usize,
    // input geometry
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Std of the frozen positional embeddings (both encoders). The backbone
    /// weight std stays 0.02; positions get their own knob because box
    /// regression from a frozen random stack leans entirely on them.
    pub pos_init_std: f64,
    // adapters
    pub bottleneck_dim: usize,
    pub cia_heads: usize,
    pub adapter_scale_vt: f64,
    pub adapter_scale_t: f64,
    pub cia_layers: Vec<usize>,
    pub dosa_layers: Vec<usize>,
    pub cia_bridge_per_layer: bool,
    // ablation switches
    pub swip_enabled: bool,
    pub cia_enabled: bool,
    pub dosa_enabled: bool,
    // text input
    pub max_text_len: usize,
    pub vocab_size: usize,
    // head and objective
    pub head_hidden_dim: usize,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    // optimization
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeReport {
    pub patch_count: usize,
    pub vision_tokens_at_layer: Vec<usize>,
    pub text_tokens: usize,
    pub tunable_fraction_estimate: f64,
}

impl ModelConfig {
    /// Small profile trainable on CPU in minutes.
    pub fn toy() -> Self {
        let mut cfg = ModelConfig {
            text_depth: 2,
            text_dim: 32,
            text_heads: 2,
            vision_depth: 3,
            vision_dim: 192,
            vision_heads: 4,
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            pos_init_std: 0.02,
            bottleneck_dim: 16,
            cia_heads: 2,
            adapter_scale_vt: 0.2,
            adapter_scale_t: 0.2,
            cia_layers: vec![],
            dosa_layers: vec![],
            cia_bridge_per_layer: false,
            swip_enabled: true,
            cia_enabled: true,
            dosa_enabled: true,
            max_text_len: 12,
            vocab_size: 32,
            head_hidden_dim: 256,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 10,
            clip_norm: 1.0,
            warmup_steps: 0,
            seed: 0,
        };
        cfg.cia_layers = default_cia_layers(cfg.vision_depth);
        cfg.dosa_layers = (0..cfg.text_depth).collect();
        cfg
    }

    /// Full-scale reference profile (CLIP-B text stack plus a
    /// 24-layer vision stack at dim 768, 224px/14px patches, bottleneck 56).
    pub fn full_scale() -> Self {
        let mut cfg = ModelConfig {
            text_depth: 12,
            text_dim: 512,
            text_heads: 8,
            vision_depth: 24,
            vision_dim: 768,
            vision_heads: 12,
            image_size: 224,
            patch_size: 14,
            pos_init_std: 0.02,
            in_channels: 3,
            bottleneck_dim: 56,
            cia_heads: 2,
            adapter_scale_vt: 0.2,
            adapter_scale_t: 0.2,
            cia_layers: vec![],
            dosa_layers: vec![],
            cia_bridge_per_layer: false,
            swip_enabled: true,
            cia_enabled: true,
            dosa_enabled: true,
            max_text_len: 77,
            vocab_size: 49408,
            head_hidden_dim: 768,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 65,
            clip_norm: 1.0,
            warmup_steps: 0,
            seed: 0,
        };
        cfg.cia_layers = default_cia_layers(cfg.vision_depth);
        cfg.dosa_layers = (0..cfg.text_depth).collect();
        cfg
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            reason,
        };
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(bad("patch_size", "must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(bad(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.vision_heads == 0 || self.vision_dim % self.vision_heads != 0 {
            return Err(bad("vision_heads", "must divide vision_dim".into()));
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return Err(bad("text_heads", "must divide text_dim".into()));
        }
        if !(self.pos_init_std.is_finite() && self.pos_init_std > 0.0) {
            return Err(bad("pos_init_std", "must be positive and finite".into()));
        }
        if self.bottleneck_dim < 1 || self.bottleneck_dim > self.text_dim.min(self.vision_dim) {
            return Err(bad(
                "bottleneck_dim",
                format!("must be in [1, min(text_dim, vision_dim) = {}]", self.text_dim.min(self.vision_dim)),
            ));
        }
        if self.cia_heads == 0 || self.bottleneck_dim % self.cia_heads != 0 {
            return Err(bad("cia_heads", "must divide bottleneck_dim".into()));
        }
        if self.text_depth == 0 || self.vision_depth == 0 {
            return Err(bad("text_depth", "encoder depths must be positive".into()));
        }
        if let Some(&l) = self.cia_layers.iter().find(|&&l| l >= self.vision_depth) {
            return Err(bad("cia_layers", format!("layer {l} out of range [0, {})", self.vision_depth)));
        }
        if let Some(&l) = self.dosa_layers.iter().find(|&&l| l >= self.text_depth) {
            return Err(bad("dosa_layers", format!("layer {l} out of range [0, {})", self.text_depth)));
        }
        if !self.adapter_scale_vt.is_finite() || !self.adapter_scale_t.is_finite() {
            return Err(bad("adapter_scale_vt", "adapter scales must be finite".into()));
        }
        if !(self.lambda_l1 >= 0.0) || !(self.lambda_giou >= 0.0) {
            return Err(bad("lambda_l1", "loss weights must be >= 0".into()));
        }
        if self.max_text_len == 0 {
            return Err(bad("max_text_len", "must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(bad("vocab_size", "needs at least PAD and UNK".into()));
        }
        if self.in_channels == 0 {
            return Err(bad("in_channels", "must be positive".into()));
        }
        if self.head_hidden_dim == 0 {
            return Err(bad("head_hidden_dim", "must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(bad("learning_rate", "must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Later-half insertion mirrors the finding that deeper cross-modal adapters
/// work better; all text layers get domain adapters.
pub fn default_cia_layers(vision_depth: usize) -> Vec<usize> {
    (vision_depth / 2..vision_depth).collect()
}

/// Parse and validate a flat JSON config. Missing keys fall back to the toy
/// profile defaults except the core dimensional keys, which are required.
pub fn validate_config(raw: &Value) -> Result<ModelConfig, ConfigError> {
    let obj = raw.as_object().ok_or(ConfigError::NotAnObject)?;
    let known: BTreeSet<&str> = KEYS.iter().copied().collect();
    for key in obj.keys() {
        if !known.contains(key.as_str()) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
    }
    for req in REQUIRED {
        if !obj.contains_key(*req) {
            return Err(ConfigError::MissingKey(req.to_string()));
        }
    }

    let defaults = ModelConfig::toy();
    let mut cfg = ModelConfig {
        text_depth: get_usize(obj, "text_depth")?.unwrap(),
        text_dim: get_usize(obj, "text_dim")?.unwrap(),
        text_heads: get_usize(obj, "text_heads")?.unwrap(),
        vision_depth: get_usize(obj, "vision_depth")?.unwrap(),
        vision_dim: get_usize(obj, "vision_dim")?.unwrap(),
        vision_heads: get_usize(obj, "vision_heads")?.unwrap(),
        image_size: get_usize(obj, "image_size")?.unwrap(),
        patch_size: get_usize(obj, "patch_size")?.unwrap(),
        in_channels: get_usize(obj, "in_channels")?.unwrap_or(defaults.in_channels),
        pos_init_std: get_f64(obj, "pos_init_std")?.unwrap_or(defaults.pos_init_std),
        bottleneck_dim: get_usize(obj, "bottleneck_dim")?.unwrap_or(defaults.bottleneck_dim),
        cia_heads: get_usize(obj, "cia_heads")?.unwrap_or(defaults.cia_heads),
        adapter_scale_vt: get_f64(obj, "adapter_scale_vt")?.unwrap_or(defaults.adapter_scale_vt),
        adapter_scale_t: get_f64(obj, "adapter_scale_t")?.unwrap_or(defaults.adapter_scale_t),
        cia_layers: vec![],
        dosa_layers: vec![],
        cia_bridge_per_layer: get_bool(obj, "cia_bridge_per_layer")?.unwrap_or(false),
        swip_enabled: get_bool(obj, "swip_enabled")?.unwrap_or(true),
        cia_enabled: get_bool(obj, "cia_enabled")?.unwrap_or(true),
        dosa_enabled: get_bool(obj, "dosa_enabled")?.unwrap_or(true),
        max_text_len: get_usize(obj, "max_text_len")?.unwrap_or(defaults.max_text_len),
        vocab_size: get_usize(obj, "vocab_size")?.unwrap_or(defaults.vocab_size),
        head_hidden_dim: get_usize(obj, "head_hidden_dim")?.unwrap_or(defaults.head_hidden_dim),
        lambda_l1: get_f64(obj, "lambda_l1")?.unwrap_or(defaults.lambda_l1),
        lambda_giou: get_f64(obj, "lambda_giou")?.unwrap_or(defaults.lambda_giou),
        learning_rate: get_f64(obj, "learning_rate")?.unwrap_or(defaults.learning_rate),
        weight_decay: get_f64(obj, "weight_decay")?.unwrap_or(defaults.weight_decay),
        batch_size: get_usize(obj, "batch_size")?.unwrap_or(defaults.batch_size),
        epochs: get_usize(obj, "epochs")?.unwrap_or(defaults.epochs),
        clip_norm: get_f64(obj, "clip_norm")?.unwrap_or(defaults.clip_norm),
        warmup_steps: get_usize(obj, "warmup_steps")?.unwrap_or(defaults.warmup_steps),
        seed: get_usize(obj, "seed")?.map(|s| s as u64).unwrap_or(defaults.seed),
    };
    cfg.cia_layers = match get_usize_list(obj, "cia_layers")? {
        Some(l) => l,
        None => default_cia_layers(cfg.vision_depth),
    };
    cfg.dosa_layers = match get_usize_list(obj, "dosa_layers")? {
        Some(l) => l,
        None => (0..cfg.text_depth).collect(),
    };
    cfg.check()?;
    Ok(cfg)
}

/// Token counts per layer follow the step-wise injection schedule: one new
/// prompt-derived token per vision layer until the text depth is exhausted.
pub fn derive_shapes(cfg: &ModelConfig) -> ShapeReport {
    let n = cfg.patch_count();
    let vision_tokens_at_layer = (0..cfg.vision_depth)
        .map(|i| {
            let swips = if cfg.swip_enabled { (i + 1).min(cfg.text_depth) } else { 0 };
            1 + swips + n
        })
        .collect();
    let (frozen, tunable) = crate::budget::closed_form_counts(cfg);
    ShapeReport {
        patch_count: n,
        vision_tokens_at_layer,
        text_tokens: 1 + cfg.max_text_len,
        tunable_fraction_estimate: tunable as f64 / (tunable + frozen) as f64,
    }
}

const REQUIRED: &[&str] = &[
    "text_depth", "text_dim", "text_heads",
    "vision_depth", "vision_dim", "vision_heads",
    "image_size", "patch_size",
];

const KEYS: &[&str] = &[
    "text_depth", "text_dim", "text_heads",
    "vision_depth", "vision_dim", "vision_heads",
    "image_size", "patch_size", "in_channels", "pos_init_std",
    "bottleneck_dim", "cia_heads", "adapter_scale_vt", "adapter_scale_t",
    "cia_layers", "dosa_layers", "cia_bridge_per_layer",
    "swip_enabled", "cia_enabled", "dosa_enabled",
    "max_text_len", "vocab_size",
    "head_hidden_dim", "lambda_l1", "lambda_giou",
    "learning_rate", "weight_decay", "batch_size", "epochs",
    "clip_norm", "warmup_steps", "seed",
];

fn get_usize(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<usize>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|x| Some(x as usize))
            .ok_or_else(|| ConfigError::InvalidValue {
                key: key.to_string(),
                reason: "expected a non-negative integer".into(),
            }),
    }
}

fn get_f64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<f64>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| ConfigError::InvalidValue {
            key: key.to_string(),
            reason: "expected a number".into(),
        }),
    }
}

fn get_bool(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<bool>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v.as_bool().map(Some).ok_or_else(|| ConfigError::InvalidValue {
            key: key.to_string(),
            reason: "expected a boolean".into(),
        }),
    }
}

fn get_usize_list(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> Result<Option<Vec<usize>>, ConfigError> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64().map(|x| x as usize).ok_or_else(|| ConfigError::InvalidValue {
                    key: key.to_string(),
                    reason: "expected an array of non-negative integers".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(_) => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            reason: "expected an array".into(),
        }),
    }
}
