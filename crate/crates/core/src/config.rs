//! Run configuration: model shapes, stopping rules, loss weights, training
//! budgets and the synthetic corpus specification. Loaded from JSON with
//! unknown keys rejected; every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::intention::StoppingConfig;
use crate::losses::{ClassifierRef, FamilySpec, LossWeights, SignalObjective};
use crate::numerics::Activation;
use crate::stack::{StackConfig, StackKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared width after unification.
    pub d: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    pub hash_buckets: usize,
    pub text_encoder: StackConfig,
    pub image_encoder: StackConfig,
    pub document_encoder: StackConfig,
    pub fusion_encoder: StackConfig,
    pub decoder: StackConfig,
    pub classifier_inner: usize,
    /// Hidden activation of the count classifiers.
    pub classifier_activation: Activation,
    pub stop_hidden: usize,
    pub family: FamilySpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_text: 32,
            d_image: 48,
            image_channels: 3,
            patch_size: 4,
            hash_buckets: 64,
            text_encoder: StackConfig::toy(Activation::Gelu),
            image_encoder: StackConfig::toy(Activation::Gelu).with_width(48, 96),
            document_encoder: StackConfig::toy(Activation::Gelu),
            fusion_encoder: StackConfig::toy(Activation::Geglu),
            decoder: StackConfig::toy(Activation::Geglu),
            classifier_inner: 64,
            classifier_activation: Activation::Gelu,
            stop_hidden: 32,
            family: FamilySpec::default(),
        }
    }
}

impl ModelConfig {
    /// Shrinks every width to `d` (heads and layers kept), for gradient
    /// checks and quick tests.
    pub fn tiny(d: usize, n_layers: usize, n_heads: usize) -> Self {
        let stack = |act| StackConfig {
            n_layers,
            d_model: d,
            n_heads_self: n_heads,
            n_heads_cross: n_heads,
            d_ffn_inner: 2 * d,
            activation: act,
            layer_norm_epsilon: 1e-5,
        };
        ModelConfig {
            d,
            d_text: d,
            d_image: d,
            text_encoder: stack(Activation::Gelu),
            image_encoder: stack(Activation::Gelu),
            document_encoder: stack(Activation::Gelu),
            fusion_encoder: stack(Activation::Geglu),
            decoder: stack(Activation::Geglu),
            classifier_inner: d,
            stop_hidden: d,
            ..ModelConfig::default()
        }
    }

    pub fn classifiers<'a>(&'a self, prefix: &'a str) -> ClassifierRef<'a> {
        ClassifierRef { prefix, family: &self.family, hidden: self.classifier_activation }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("text_encoder", &self.text_encoder, self.d_text, StackKind::Encoder),
            ("image_encoder", &self.image_encoder, self.d_image, StackKind::Encoder),
            ("document_encoder", &self.document_encoder, self.d_text, StackKind::Encoder),
            ("fusion_encoder", &self.fusion_encoder, self.d, StackKind::Encoder),
            ("decoder", &self.decoder, self.d, StackKind::Decoder),
        ];
        for (name, cfg, width, kind) in widths {
            cfg.validate(kind).map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if cfg.d_model != width {
                return Err(Error::Config(format!(
                    "{name}.d_model is {} but its input width is {width}",
                    cfg.d_model
                )));
            }
        }
        if self.patch_size == 0 || self.image_channels == 0 || self.classifier_inner == 0 || self.stop_hidden == 0 {
            return Err(Error::Config("patch size, channels and hidden widths must be positive".into()));
        }
        self.family.validate()
    }
}

/// Update rule. Both are deterministic; Adam state starts fresh for every
/// modality run and phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, epsilon } = *self {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !unit(beta1) || !unit(beta2) || !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(Error::Config("adam needs betas in [0, 1) and epsilon > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_phase2: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub objective: SignalObjective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 20,
            epochs_stage2: 20,
            epochs_phase2: 20,
            step_size: 1e-2,
            optimizer: Optimizer::Sgd,
            objective: SignalObjective::Inner,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Config("step_size must be finite and non-negative".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stopping: StoppingConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            stopping: StoppingConfig::default(),
            losses: LossWeights::default(),
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stopping.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        self.corpus.validate(&self.model)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "colour": "red"}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_json(r#"{"model": {"d": 32, "typo": 1}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "stopping": {"t_max": 1}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stopping.t_max, 1);
        assert_eq!(cfg.stopping.tau_sim, 0.9);
    }
}
