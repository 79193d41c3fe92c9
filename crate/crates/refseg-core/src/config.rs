//! Run configuration. Defaults reproduce the published full-scale training
//! settings; [`RunConfig::desk`] is a scaled-down preset for CPU-sized runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Seeded toy encoders trained from scratch.
    Toy,
    /// External pretrained multimodal encoder plugged through the adapter
    /// trait; no implementation ships with weights.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiMode {
    /// Score regularizer disabled (identically zero).
    Zero,
    /// Focal-style re-balancing of easy queries inside the classification
    /// loss.
    Focal,
}

/// Axis over which the text-to-visual attention weights are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnVAxis {
    /// Per-pixel softmax over the query axis; with a single query every
    /// weight is exactly 1.
    Queries,
    /// Softmax across pixels, forming a distribution over positions.
    Pixels,
}

/// How a cosine similarity is mapped into (0, 1) for the calibration loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescaleMode {
    /// `(cos + 1) / 2`, clamped to `(eps, 1 - eps)`.
    Affine,
    /// `sigmoid(rescale_temp * cos)`, clamped to `(eps, 1 - eps)`.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // -- step-1 / step-2 training hyperparameters ---------------------------
    /// Mixing weight of the text-to-visual residual prompt.
    pub alpha: f64,
    /// Mixing weight of the visual-to-text residual prompt.
    pub beta: f64,
    /// Number of cross-image negative expressions per classification batch.
    pub n_negatives: usize,
    /// Number of same-image negative queries in the calibration loss.
    pub k_calibration: usize,
    /// Unified hidden dimension after projection.
    pub c_d: usize,
    /// Visual down-sampling ratio of the encoder.
    pub s: usize,
    /// Weight of the classification loss in `lambda * L_cls + L_cal`.
    pub lambda_cls: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub image_size: usize,
    /// Maximum referring-expression length in tokens.
    pub t_max: usize,
    pub lr_schedule: String,
    pub lr_poly_power: f64,

    // -- artifact-level keys -------------------------------------------------
    /// Pseudo-label binarization threshold, in (0, 1).
    pub threshold: f64,
    /// Connected components smaller than this are dropped from pseudo masks.
    pub min_component_px: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    /// Raw visual channel count (toy encoders require `c_v == c_l` so the
    /// pooled visual embedding lives in the text feature space).
    pub c_v: usize,
    /// Raw text channel count.
    pub c_l: usize,
    /// Initial value of the learnable log temperature, `ln(1/0.07)`.
    pub temperature_init: f64,
    pub psi_mode: PsiMode,
    /// Focal exponent used when `psi_mode = focal`.
    pub psi_focal_gamma: f64,
    /// Enable the text-to-visual prompt path (`P_t2v` ablation switch).
    pub enable_t2v: bool,
    /// Enable the visual-to-text prompt path (`P_v2t` ablation switch).
    pub enable_v2t: bool,
    pub attn_v_axis: AttnVAxis,
    /// Keep the positive-enhancement term of the calibration loss.
    pub calibration_pos_term: bool,
    /// Keep the negative-suppression term of the calibration loss.
    pub calibration_neg_term: bool,
    /// Hold the similarity-scoring encoders frozen (no gradients into them
    /// through the calibration path).
    pub scoring_frozen: bool,
    pub epsilon_clamp: f64,
    pub rescale_mode: RescaleMode,
    /// Temperature for `rescale_mode = sigmoid`.
    pub rescale_temp: f64,
    /// Dataset root directory.
    #[serde(default)]
    pub data_root: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            n_negatives: 47,
            k_calibration: 6,
            c_d: 1024,
            s: 32,
            lambda_cls: 5.0,
            lr: 5e-5,
            weight_decay: 1e-2,
            epochs: 15,
            batch: 48,
            image_size: 320,
            t_max: 20,
            lr_schedule: "polynomial".to_string(),
            lr_poly_power: 0.9,
            threshold: 0.4,
            min_component_px: 4,
            seed: 0,
            encoder: EncoderKind::Toy,
            c_v: 1024,
            c_l: 1024,
            temperature_init: (1.0f64 / 0.07).ln(),
            psi_mode: PsiMode::Zero,
            psi_focal_gamma: 2.0,
            enable_t2v: true,
            enable_v2t: true,
            attn_v_axis: AttnVAxis::Queries,
            calibration_pos_term: true,
            calibration_neg_term: true,
            scoring_frozen: true,
            epsilon_clamp: 1e-6,
            rescale_mode: RescaleMode::Affine,
            rescale_temp: 5.0,
            data_root: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: every size is a scaled-down version of the
    /// full-scale default so the whole pipeline runs on one CPU.
    ///
    /// Scalings relative to [`RunConfig::default`]:
    /// - canvas 320 -> 64, down-sampling s 32 -> 8 (response grid stays 10x10 vs 8x8)
    /// - hidden width C_d 1024 -> 64, raw channels 1024 -> 64
    /// - batch 48 -> 8, negatives N 47 -> 7, calibration K 6 -> 2
    /// - learning rate 5e-5 -> 2e-3: the toy encoders train from random
    ///   initialization rather than fine-tuning pretrained weights
    /// - epochs stay at 15
    pub fn desk() -> Self {
        Self {
            n_negatives: 7,
            k_calibration: 2,
            c_d: 64,
            c_v: 64,
            c_l: 64,
            s: 8,
            lr: 2e-3,
            batch: 8,
            image_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // n_negatives = 0 is legal: it is the N+1 = 1 ablation configuration.
        if self.k_calibration < 1 {
            return Err(Error::Config("k_calibration must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.lambda_cls <= 0.0 {
            return Err(Error::Config("lambda_cls must be > 0".into()));
        }
        if self.c_d == 0 || self.c_v == 0 || self.c_l == 0 {
            return Err(Error::Config("channel dimensions must be nonzero".into()));
        }
        if self.encoder == EncoderKind::Toy && self.c_v != self.c_l {
            return Err(Error::Config(format!(
                "toy encoders require c_v == c_l (pooled visual embedding shares the text space), got c_v={} c_l={}",
                self.c_v, self.c_l
            )));
        }
        if !self.s.is_power_of_two() || self.s < 2 || self.s > 256 {
            return Err(Error::Config(format!(
                "down-sampling ratio s must be a power of two in [2, 256], got {}",
                self.s
            )));
        }
        if self.image_size % self.s != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by s {}",
                self.image_size, self.s
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp < 0.5) {
            return Err(Error::Config("epsilon_clamp must lie in (0, 0.5)".into()));
        }
        if self.lr_schedule != "polynomial" && self.lr_schedule != "constant" {
            return Err(Error::Config(format!(
                "unknown lr_schedule '{}'",
                self.lr_schedule
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialization")
    }

    /// Keys that must agree between a checkpoint snapshot and the active
    /// config for evaluation to be meaningful.
    pub fn structural_keys(&self) -> Vec<(&'static str, serde_json::Value)> {
        vec![
            ("c_d", serde_json::json!(self.c_d)),
            ("s", serde_json::json!(self.s)),
            ("encoder", serde_json::to_value(self.encoder).unwrap()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_serializes_published_values() {
        let v = RunConfig::default().to_json();
        assert_eq!(v["alpha"], 0.1);
        assert_eq!(v["beta"], 0.1);
        assert_eq!(v["n_negatives"], 47);
        assert_eq!(v["k_calibration"], 6);
        assert_eq!(v["c_d"], 1024);
        assert_eq!(v["s"], 32);
        assert_eq!(v["lambda_cls"], 5.0);
        assert_eq!(v["lr"], 5e-5);
        assert_eq!(v["weight_decay"], 1e-2);
        assert_eq!(v["epochs"], 15);
        assert_eq!(v["batch"], 48);
        assert_eq!(v["image_size"], 320);
        assert_eq!(v["t_max"], 20);
        assert_eq!(v["lr_schedule"], "polynomial");
        assert_eq!(v["threshold"], 0.4);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut cfg = RunConfig::desk();
        cfg.threshold = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.k_calibration = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.image_size = 63;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.s = 12;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::desk().validate().is_ok());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn ablation_with_zero_negatives_is_allowed() {
        let mut cfg = RunConfig::desk();
        cfg.n_negatives = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
