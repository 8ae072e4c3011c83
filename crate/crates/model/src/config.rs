//! Architecture and training configuration.

use serde::{Deserialize, Serialize};

use crate::{ModelError, Result};

/// Vision transformer shape shared by both branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of residual attention blocks.
    pub depth: usize,
    /// Embedding width `d`, shared with the text branch.
    pub width: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Prompts are injected into blocks `0..prompt_depth`.
    pub prompt_depth: usize,
    /// 1-indexed blocks whose token outputs feed the pixel map.
    pub feature_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            depth: 8,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            prompt_depth: 6,
            feature_layers: vec![2, 4, 6, 8],
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per branch: one class token plus the patches.
    pub fn seq_len(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Flattened patch length (three channels, channel-major).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(ModelError::Config {
                field: field.into(),
                reason,
            })
        };
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("patch_size", "image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(
                "image_size",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        if self.depth == 0 {
            return fail("depth", "at least one block required".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(
                "heads",
                format!("width {} not divisible by heads {}", self.width, self.heads),
            );
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio", "must be positive".into());
        }
        if self.prompt_depth > self.depth {
            return fail(
                "prompt_depth",
                format!("prompt_depth {} exceeds depth {}", self.prompt_depth, self.depth),
            );
        }
        if self.feature_layers.is_empty() {
            return fail("feature_layers", "must name at least one block".into());
        }
        let mut prev = 0usize;
        for &layer in &self.feature_layers {
            if layer == 0 || layer > self.depth {
                return fail(
                    "feature_layers",
                    format!("layer {layer} outside 1..={}", self.depth),
                );
            }
            if layer <= prev {
                return fail("feature_layers", "layers must be strictly increasing".into());
            }
            prev = layer;
        }
        Ok(())
    }
}

/// Lengths of the three injected prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub l_ccp: usize,
    pub l_msp: usize,
    pub l_map: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            l_ccp: 8,
            l_msp: 8,
            l_map: 8,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, l) in [
            ("l_ccp", self.l_ccp),
            ("l_msp", self.l_msp),
            ("l_map", self.l_map),
        ] {
            if l == 0 {
                return Err(ModelError::Config {
                    field: field.into(),
                    reason: "prompt length must be at least 1 (disable via activation flags instead)"
                        .into(),
                });
            }
        }
        Ok(())
    }
}

/// Which prompt types participate in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptActivation {
    pub ccp: bool,
    pub msp: bool,
    pub map: bool,
}

impl Default for PromptActivation {
    fn default() -> Self {
        PromptActivation {
            ccp: true,
            msp: true,
            map: true,
        }
    }
}

impl PromptActivation {
    pub const NONE: PromptActivation = PromptActivation {
        ccp: false,
        msp: false,
        map: false,
    };

    pub fn any(&self) -> bool {
        self.ccp || self.msp || self.map
    }

    /// Total prompt rows prepended at an injection site.
    pub fn total_len(&self, p: &PromptConfig) -> usize {
        (if self.ccp { p.l_ccp } else { 0 })
            + (if self.msp { p.l_msp } else { 0 })
            + (if self.map { p.l_map } else { 0 })
    }
}

/// Everything that determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    /// Learnable suffix token count for abnormal text prompts.
    pub n_ctx: usize,
    /// Text transformer depth.
    pub text_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            prompts: PromptConfig::default(),
            n_ctx: 4,
            text_depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompts.validate()?;
        if self.n_ctx == 0 {
            return Err(ModelError::Config {
                field: "n_ctx".into(),
                reason: "learnable suffix needs at least one token".into(),
            });
        }
        if self.text_depth == 0 {
            return Err(ModelError::Config {
                field: "text_depth".into(),
                reason: "text transformer needs at least one block".into(),
            });
        }
        // MSP pooling slices `seq_len` rows into `l_msp` contiguous groups.
        if self.encoder.seq_len() < self.prompts.l_msp {
            return Err(ModelError::Config {
                field: "l_msp".into(),
                reason: format!(
                    "l_msp {} exceeds token count {}",
                    self.prompts.l_msp,
                    self.encoder.seq_len()
                ),
            });
        }
        Ok(())
    }
}

/// Optimizer schedule and loop controls for both warmup and prompt training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Self-supervised encoder pretraining epochs.
    pub warmup_epochs: usize,
    pub use_ccp: bool,
    pub use_msp: bool,
    pub use_map: bool,
    pub use_scl: bool,
    /// Drop loss terms of missing branches instead of training on dummies.
    pub skip_missing_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_min: 1e-5,
            epochs: 30,
            batch_size: 8,
            warmup_epochs: 20,
            use_ccp: true,
            use_msp: true,
            use_map: true,
            use_scl: true,
            skip_missing_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn activation(&self) -> PromptActivation {
        PromptActivation {
            ccp: self.use_ccp,
            msp: self.use_msp,
            map: self.use_map,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: &str| {
            Err(ModelError::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", "must be positive and finite");
        }
        if self.lr_min >= self.lr {
            return fail("lr_min", "must be below lr");
        }
        if self.epochs == 0 {
            return fail("epochs", "at least one epoch required");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be nonnegative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn default_shape_arithmetic() {
        let e = EncoderConfig::default();
        assert_eq!(e.n_patches(), 64);
        assert_eq!(e.seq_len(), 65);
        assert_eq!(e.head_dim(), 16);
        assert_eq!(e.patch_dim(), 192);
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut e = EncoderConfig::default();
        e.image_size = 60;
        match e.validate() {
            Err(ModelError::Config { field, .. }) => assert_eq!(field, "image_size"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut e = EncoderConfig::default();
        e.prompt_depth = 9;
        match e.validate() {
            Err(ModelError::Config { field, .. }) => assert_eq!(field, "prompt_depth"),
            other => panic!("expected config error, got {other:?}"),
        }

        let mut e = EncoderConfig::default();
        e.feature_layers = vec![2, 2];
        assert!(e.validate().is_err());
        e.feature_layers = vec![0];
        assert!(e.validate().is_err());
        e.feature_layers = vec![9];
        assert!(e.validate().is_err());

        let mut t = TrainConfig::default();
        t.lr_min = 0.05;
        match t.validate() {
            Err(ModelError::Config { field, .. }) => assert_eq!(field, "lr_min"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn activation_lengths() {
        let p = PromptConfig::default();
        let all = PromptActivation::default();
        assert_eq!(all.total_len(&p), 24);
        let none = PromptActivation::NONE;
        assert_eq!(none.total_len(&p), 0);
        assert!(!none.any());
        let only_map = PromptActivation {
            ccp: false,
            msp: false,
            map: true,
        };
        assert_eq!(only_map.total_len(&p), 8);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::default();
        let bytes = serde_json::to_vec(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(back, cfg);
    }
}
