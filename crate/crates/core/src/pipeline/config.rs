use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::GtDownsample;
use crate::attributes::hex;
use crate::backbone::BackboneConfig;
use crate::cmki::{EnsembleWeights, LossWeights};
use crate::error::{Error, Result};
use crate::layers::AttentionConfig;
use crate::maskdecoder::MatchWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shape: [usize; 3],
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    /// Training samples generated per seen class.
    pub train_per_class: usize,
    /// Test samples generated per class, seen and unseen.
    pub test_per_class: usize,
    pub lesions_per_sample: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shape: [32; 3],
            seen: ["Hepatic Vessel Tumor", "Pancreas Cyst", "Kidney Stone", "Gallbladder Tumor"]
                .map(String::from)
                .to_vec(),
            unseen: ["Liver Cyst", "Kidney Tumor"].map(String::from).to_vec(),
            train_per_class: 50,
            test_per_class: 10,
            lesions_per_sample: 1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Mask tokens `N`.
    pub tokens: usize,
    /// Token and text dimension `C`.
    pub dim: usize,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub masked_attention: bool,
    /// L2-normalise tokens before the similarity with text embeddings.
    pub normalize_tokens: bool,
    /// Output width of the text provider.
    pub text_dim: usize,
    pub provider_seed: u64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub ensemble: EnsembleWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokens: 16,
            dim: 32,
            backbone: BackboneConfig::default(),
            attention: AttentionConfig { heads: 1, ffn_hidden: 0 },
            masked_attention: false,
            normalize_tokens: false,
            text_dim: 64,
            provider_seed: 0,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
            ensemble: EnsembleWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub matching: MatchWeights,
    pub gt_downsample: GtDownsample,
    pub background: BackgroundRule,
}

/// Which token embeddings pick the background target channel: the unmatched
/// token most similar to `t_0` wins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundRule {
    /// Refined tokens of the final decoder block.
    #[default]
    Refined,
    /// The learnable query embeddings, which change slowly across samples.
    Query,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            matching: MatchWeights::default(),
            gt_downsample: GtDownsample::Occupancy,
            background: BackgroundRule::Refined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Warm-up length as a fraction of all optimiser steps.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            // 40 warm-up epochs out of 4000.
            warmup_fraction: 0.01,
            epochs: 40,
            batch_size: 2,
            seed: 0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface tolerance in voxels of the finest spacing.
    pub nsd_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { nsd_tolerance: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn seen(&self) -> BTreeSet<String> {
        self.data.seen.iter().cloned().collect()
    }

    pub fn unseen(&self) -> BTreeSet<String> {
        self.data.unseen.iter().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (d, m, t) = (&self.data, &self.model, &self.train);
        if d.shape.iter().any(|&n| n == 0 || n % 32 != 0) {
            return bad(format!("volume shape {:?} must be positive multiples of 32", d.shape));
        }
        if m.tokens < d.lesions_per_sample + 1 {
            return bad(format!("{} tokens cannot cover {} lesions plus background", m.tokens, d.lesions_per_sample));
        }
        if m.dim == 0 || m.attention.heads == 0 || m.dim % m.attention.heads != 0 {
            return bad(format!("dimension {} is not divisible by {} heads", m.dim, m.attention.heads));
        }
        if m.text_dim == 0 {
            return bad("text_dim must be positive".into());
        }
        if !(0.0 < m.tau_min && m.tau_min <= m.tau_init && m.tau_init <= m.tau_max) {
            return bad(format!("temperature {} outside [{}, {}]", m.tau_init, m.tau_min, m.tau_max));
        }
        if m.ensemble.beta_m < 0.0 || m.ensemble.beta_t < 0.0 {
            return bad("ensemble weights must be nonnegative".into());
        }
        let w = &self.loss.weights;
        if [w.alpha_bce, w.alpha_dice, w.lambda_deep, w.lambda_sim, w.lambda_seg].iter().any(|x| !(*x >= 0.0)) {
            return bad("loss weights must be nonnegative".into());
        }
        let c = &self.loss.matching;
        if [c.dice, c.bce, c.attribute].iter().any(|x| !(*x >= 0.0)) {
            return bad("matching weights must be nonnegative".into());
        }
        if !(t.lr > 0.0) || t.batch_size == 0 || !(0.0..1.0).contains(&t.warmup_fraction) || !(t.grad_clip >= 0.0) {
            return bad("learning rate, batch size, warm-up fraction or gradient clip out of range".into());
        }
        if !(self.eval.nsd_tolerance > 0.0) {
            return bad("nsd_tolerance must be positive".into());
        }
        if let Some(c) = self.seen().intersection(&self.unseen()).next() {
            return bad(format!("class {c:?} is both seen and unseen"));
        }
        Ok(())
    }

    /// Identifies the model architecture a checkpoint was trained with.
    pub fn model_hash(&self) -> String {
        let json = serde_json::to_string(&self.model).expect("model config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}
