//! Run configuration: model hyperparameters, training knobs and the
//! variant tag selecting an ablation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::AdamConfig;

/// Model variant. `Full` is the complete model; the `Wo*` tags remove one
/// component; the `E2e*` tags train a single scenario end to end without
/// joint pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Joint pretraining only, no fine-tuning.
    #[serde(rename = "woFT")]
    WoFT,
    /// No cross-attention sub-layer.
    #[serde(rename = "woCA")]
    WoCA,
    /// Separate encoder parameters for the query branch.
    #[serde(rename = "woSEa")]
    WoSEa,
    /// Separate encoder parameters for the recommendation scenario.
    #[serde(rename = "woSEb")]
    WoSEb,
    /// Sessions from the largest timestamp gaps instead of learned ranges.
    #[serde(rename = "woISMa")]
    WoISMa,
    /// No session module: no enhancement and no self-supervised loss.
    #[serde(rename = "woISMb")]
    WoISMb,
    /// Recommendation data only, trained end to end.
    #[serde(rename = "e2eR")]
    E2eRec,
    /// Search data only, trained end to end.
    #[serde(rename = "e2eS")]
    E2eSearch,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::WoFT,
        Variant::WoCA,
        Variant::WoSEa,
        Variant::WoSEb,
        Variant::WoISMa,
        Variant::WoISMb,
        Variant::E2eRec,
        Variant::E2eSearch,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoFT => "woFT",
            Variant::WoCA => "woCA",
            Variant::WoSEa => "woSEa",
            Variant::WoSEb => "woSEb",
            Variant::WoISMa => "woISMa",
            Variant::WoISMb => "woISMb",
            Variant::E2eRec => "e2eR",
            Variant::E2eSearch => "e2eS",
        }
    }

    pub fn cross_attention(self) -> bool {
        self != Variant::WoCA
    }

    pub fn session_module(self) -> bool {
        self != Variant::WoISMb
    }

    pub fn learned_sessions(self) -> bool {
        !matches!(self, Variant::WoISMa | Variant::WoISMb)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown variant tag {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// How pretraining interleaves the two scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Alternation {
    /// One search batch, then one recommendation batch, and so on.
    #[default]
    Batch,
    /// A full pass over one scenario, then the other; the leading scenario
    /// switches every epoch.
    Epoch,
}

/// Session membership used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MembershipMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    /// Equal scores rank by candidate index.
    #[default]
    Stable,
    /// Equal scores rank in a seeded random order.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub sessions: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub warmup: usize,
    /// Multiplier on the warmup-and-decay schedule.
    pub lr_factor: f64,
    pub seed: u64,
    pub precision: Precision,
    pub negatives_train: usize,
    pub eval_negatives: usize,
    pub tau: f64,
    pub variant: Variant,
    pub max_len: usize,
    pub max_query_words: usize,
    pub adam: AdamConfig,
    pub early_stopping: bool,
    pub patience: usize,
    pub alternation: Alternation,
    pub unconstrained_w: bool,
    pub eval_membership: MembershipMode,
    pub tie_break: TieBreak,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            layers: 2,
            sessions: 2,
            alpha: 0.1,
            dropout: 0.1,
            batch_size: 128,
            epochs: 100,
            finetune_epochs: 100,
            warmup: 400,
            lr_factor: 1.0,
            seed: 0,
            precision: Precision::F32,
            negatives_train: 1,
            eval_negatives: 99,
            tau: 1.0,
            variant: Variant::Full,
            max_len: 100,
            max_query_words: 16,
            adam: AdamConfig::default(),
            early_stopping: false,
            patience: 10,
            alternation: Alternation::Batch,
            unconstrained_w: false,
            eval_membership: MembershipMode::Soft,
            tie_break: TieBreak::Stable,
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hidden width of the feed-forward sub-layer.
    pub fn d_ff(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.sessions == 0 {
            return fail("sessions must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 || self.warmup == 0 {
            return fail("batch_size and warmup must be positive".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return fail(format!("lr_factor must be positive, got {}", self.lr_factor));
        }
        if self.negatives_train == 0 || self.eval_negatives == 0 {
            return fail("negative counts must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.max_len == 0 || self.max_query_words == 0 {
            return fail("max_len and max_query_words must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be positive".into());
        }
        Ok(())
    }

    /// Hash of every field that fixes the parameter layout. Training knobs
    /// are excluded, so a fine-tuning run may change them.
    pub fn architecture_hash(&self) -> String {
        let arch = serde_json::json!({
            "d": self.d,
            "heads": self.heads,
            "layers": self.layers,
            "sessions": self.sessions,
            "variant": self.variant.tag(),
            "max_len": self.max_len,
            "max_query_words": self.max_query_words,
            "unconstrained_w": self.unconstrained_w,
            "precision": self.precision,
        });
        hex::encode(Sha256::digest(arch.to_string().as_bytes()))
    }

    /// Hash of the complete resolved configuration.
    pub fn full_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.d_ff(), 64);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"alpha_ssl": 0.2}"#).unwrap_err();
        assert!(err.to_string().contains("alpha_ssl"), "{err}");
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.tag()));
        }
        assert!("woXY".parse::<Variant>().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"heads": 3}"#,
            r#"{"dropout": 1.0}"#,
            r#"{"alpha": -1}"#,
            r#"{"sessions": 0}"#,
            r#"{"tau": 0}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn architecture_hash_ignores_training_knobs() {
        let a = RunConfig::default();
        let b = RunConfig {
            epochs: 3,
            seed: 9,
            ..RunConfig::default()
        };
        let c = RunConfig {
            variant: Variant::WoCA,
            ..RunConfig::default()
        };
        assert_eq!(a.architecture_hash(), b.architecture_hash());
        assert_ne!(a.architecture_hash(), c.architecture_hash());
        assert_ne!(a.full_hash(), b.full_hash());
    }
}
