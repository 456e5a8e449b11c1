//! Flat `key = value` training configuration with dataset profiles.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tsm::ScoreHead;
use crate::vlc::Reconstructor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Thumos,
    Anet,
    Synthetic,
}

/// How the two attention branches are tied together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    Mse,
    Mae,
    Kl,
    /// Completion reuses the mining attention; no consistency term.
    Share,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub topk_divisor: usize,
    pub t_target: usize,
    pub consistency: Consistency,
    pub head: ScoreHead,
    pub use_vlc: bool,
    pub reconstructor: Reconstructor,
    pub masked_only: bool,
    pub coact_weight: f64,
    pub norm_weight: f64,
    pub guide_weight: f64,
    pub prompt_len: usize,
    pub vlc_template: String,
    pub word_vectors: String,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub att_hidden: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub vlc_hidden: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub dropout: f64,
    pub class_threshold: f64,
    pub att_threshold_min: f64,
    pub att_threshold_max: f64,
    pub att_threshold_step: f64,
    pub inflation: f64,
    pub nms_sigma: f64,
    pub min_len: usize,
    pub frame_threshold: f64,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let thumos = Self {
            profile: Profile::Thumos,
            seed: 0,
            learning_rate: 5e-4,
            weight_decay: 1e-3,
            iterations: 5000,
            batch_size: 10,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.5,
            gamma1: 0.1,
            gamma2: 0.2,
            topk_divisor: 8,
            t_target: 320,
            consistency: Consistency::Mse,
            head: ScoreHead::Text,
            use_vlc: true,
            reconstructor: Reconstructor::Transformer,
            masked_only: false,
            coact_weight: 1.0,
            norm_weight: 0.1,
            guide_weight: 1.0,
            prompt_len: 10,
            vlc_template: crate::text::DEFAULT_TEMPLATE.to_string(),
            word_vectors: "hash:300".to_string(),
            feature_dim: crate::dataset::FEATURE_DIM,
            embed_dim: 2048,
            att_hidden: 512,
            text_heads: 8,
            text_ff: 2048,
            vlc_hidden: 512,
            decoder_heads: 8,
            decoder_ff: 512,
            encoder_depth: 1,
            decoder_depth: 1,
            dropout: 0.5,
            class_threshold: 0.2,
            att_threshold_min: 0.1,
            att_threshold_max: 0.9,
            att_threshold_step: 0.05,
            inflation: 0.25,
            nms_sigma: 0.3,
            min_len: 2,
            frame_threshold: 0.5,
        };
        match profile {
            Profile::Thumos => thumos,
            Profile::Anet => Self {
                profile,
                learning_rate: 3e-5,
                iterations: 50000,
                lambda: 0.25,
                t_target: 60,
                ..thumos
            },
            Profile::Synthetic => Self {
                profile,
                iterations: 500,
                t_target: 64,
                learning_rate: 1e-3,
                embed_dim: 32,
                att_hidden: 32,
                text_heads: 4,
                text_ff: 32,
                vlc_hidden: 32,
                decoder_heads: 4,
                decoder_ff: 32,
                word_vectors: "hash:32".to_string(),
                dropout: 0.0,
                norm_weight: 1.0,
                ..thumos
            },
        }
    }

    /// Builds a config from an optional `key = value` file and CLI overrides.
    /// The profile (from overrides, else the file, else `default_profile`)
    /// selects the defaults every other key is applied on top of.
    pub fn from_sources(
        file: Option<&str>,
        overrides: &[(String, String)],
        default_profile: Profile,
    ) -> Result<Self> {
        let file_pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        let profile_value = overrides
            .iter()
            .chain(file_pairs.iter())
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.as_str());
        let profile = match profile_value {
            Some(v) => v
                .parse()
                .map_err(|m: String| invalid!("config key profile: {m}"))?,
            None => default_profile,
        };
        let mut config = Self::for_profile(profile);
        for (k, v) in file_pairs.iter().chain(overrides) {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(
        path: &Path,
        overrides: &[(String, String)],
        default_profile: Profile,
    ) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sources(Some(&text), overrides, default_profile)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, w) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("coact_weight", self.coact_weight),
            ("norm_weight", self.norm_weight),
            ("guide_weight", self.guide_weight),
            ("inflation", self.inflation),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid!("{key} must be a nonnegative number, got {w}"));
            }
        }
        for (key, v) in [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("t_target", self.t_target),
            ("topk_divisor", self.topk_divisor),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(invalid!("{key} must be at least 1"));
            }
        }
        for (key, v) in [
            ("class_threshold", self.class_threshold),
            ("att_threshold_min", self.att_threshold_min),
            ("att_threshold_max", self.att_threshold_max),
            ("frame_threshold", self.frame_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid!("{key} must lie in (0, 1], got {v}"));
            }
        }
        if self.att_threshold_min > self.att_threshold_max || !(self.att_threshold_step > 0.0) {
            return Err(invalid!("attention threshold sweep is empty"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(invalid!("nms_sigma must be positive"));
        }
        crate::text::validate_template(&self.vlc_template)?;
        Ok(())
    }

    /// Canonical `key = value` text, one line per key in `KEYS` order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The α/β/λ weights that actually apply given the component switches.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        if !self.use_vlc {
            return (0.0, 0.0, 0.0);
        }
        let lambda = match self.consistency {
            Consistency::Share | Consistency::None => 0.0,
            _ => self.lambda,
        };
        (self.alpha, self.beta, lambda)
    }

    /// Attention thresholds `min, min+step, …, ≤ max`, computed from integer steps.
    pub fn attention_thresholds(&self) -> Vec<f64> {
        let n = ((self.att_threshold_max - self.att_threshold_min) / self.att_threshold_step + 1e-9)
            .floor() as usize;
        (0..=n)
            .map(|i| self.att_threshold_min + i as f64 * self.att_threshold_step)
            .map(|v| (v * 1e9).round() / 1e9)
            .collect()
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse("config", format!("line {}: expected key = value", i + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(f64, usize, u64, bool, String);

macro_rules! enum_value {
    ($t:ty { $($name:literal => $variant:expr),* $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)*
                    _ => Err(format!("unknown value {s:?} (expected one of: {})", [$($name),*].join(", "))),
                }
            }
        }
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse()
            }
            fn format_value(&self) -> String {
                $(if *self == $variant { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_value!(Profile { "thumos" => Profile::Thumos, "anet" => Profile::Anet, "synthetic" => Profile::Synthetic });
enum_value!(Consistency {
    "mse" => Consistency::Mse,
    "mae" => Consistency::Mae,
    "kl" => Consistency::Kl,
    "share" => Consistency::Share,
    "none" => Consistency::None,
});
enum_value!(ScoreHead { "text" => ScoreHead::Text, "conv" => ScoreHead::Conv });
enum_value!(Reconstructor {
    "transformer" => Reconstructor::Transformer,
    "gru" => Reconstructor::Gru,
    "lstm" => Reconstructor::Lstm,
});

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_value())
    }
}

impl fmt::Display for Consistency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format_value())
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        /// Every accepted configuration key.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl TrainConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = ConfigValue::parse_value(value)
                            .map_err(|m| invalid!("config key {key}: {m}"))?;
                    })*
                    _ => {
                        return Err(invalid!(
                            "unknown config key {key:?}; valid keys: {}",
                            KEYS.join(", ")
                        ))
                    }
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.format_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys!(
    profile,
    seed,
    learning_rate,
    weight_decay,
    iterations,
    batch_size,
    alpha,
    beta,
    lambda,
    gamma1,
    gamma2,
    topk_divisor,
    t_target,
    consistency,
    head,
    use_vlc,
    reconstructor,
    masked_only,
    coact_weight,
    norm_weight,
    guide_weight,
    prompt_len,
    vlc_template,
    word_vectors,
    feature_dim,
    embed_dim,
    att_hidden,
    text_heads,
    text_ff,
    vlc_hidden,
    decoder_heads,
    decoder_ff,
    encoder_depth,
    decoder_depth,
    dropout,
    class_threshold,
    att_threshold_min,
    att_threshold_max,
    att_threshold_step,
    inflation,
    nms_sigma,
    min_len,
    frame_threshold,
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let t = TrainConfig::for_profile(Profile::Thumos);
        assert_eq!(
            (t.learning_rate, t.weight_decay, t.iterations),
            (5e-4, 1e-3, 5000)
        );
        assert_eq!((t.alpha, t.beta, t.lambda), (1.0, 1.0, 1.5));
        assert_eq!((t.gamma1, t.gamma2), (0.1, 0.2));
        let a = TrainConfig::for_profile(Profile::Anet);
        assert_eq!(
            (a.learning_rate, a.iterations, a.lambda),
            (3e-5, 50000, 0.25)
        );
        assert_eq!((a.alpha, a.beta), (1.0, 1.0));
        assert_eq!(TrainConfig::for_profile(Profile::Synthetic).iterations, 500);
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let base = TrainConfig::for_profile(Profile::Synthetic);
        let text = base.to_text();
        let parsed = TrainConfig::from_sources(Some(&text), &[], Profile::Thumos).unwrap();
        assert_eq!(parsed, base);
        assert_eq!(parsed.hash(), base.hash());

        let file = "profile = anet\n# comment\nlambda = 0.7\nseed=3\n";
        let overrides = vec![("lambda".to_string(), "0".to_string())];
        let c = TrainConfig::from_sources(Some(file), &overrides, Profile::Thumos).unwrap();
        assert_eq!(c.profile, Profile::Anet);
        assert_eq!(c.learning_rate, 3e-5);
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.seed, 3);
        assert_ne!(c.hash(), TrainConfig::for_profile(Profile::Anet).hash());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::from_sources(Some("learnin_rate = 1\n"), &[], Profile::Thumos)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learnin_rate"));
        assert!(msg.contains("learning_rate") && msg.contains("gamma2"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "alpha = -1",
            "iterations = 0",
            "consistency = cosine",
            "batch_size = x",
            "nonsense line",
        ] {
            assert!(
                TrainConfig::from_sources(Some(bad), &[], Profile::Thumos).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn threshold_sweep() {
        let c = TrainConfig::for_profile(Profile::Thumos);
        let t = c.attention_thresholds();
        assert_eq!(t.len(), 17);
        assert_eq!(t[0], 0.1);
        assert_eq!(t[16], 0.9);
        assert_eq!(t[5], 0.35);
    }

    #[test]
    fn effective_weights_follow_switches() {
        let mut c = TrainConfig::for_profile(Profile::Thumos);
        assert_eq!(c.effective_weights(), (1.0, 1.0, 1.5));
        c.consistency = Consistency::Share;
        assert_eq!(c.effective_weights(), (1.0, 1.0, 0.0));
        c.use_vlc = false;
        assert_eq!(c.effective_weights(), (0.0, 0.0, 0.0));
    }
}
