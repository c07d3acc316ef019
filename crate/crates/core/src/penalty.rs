//! Guard against outputs that copy the input image.
//!
//! An output keeps its identity score only if its text-image score improves
//! on the input image's score by a margin derived from the spread `sigma` of
//! input-side text-image scores over the whole evaluation set.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{BackendError, BackendSuite};
use crate::data::EvalSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// Passes iff `score_pi + 2σ < score_po`.
    #[default]
    Additive,
    /// Passes iff `score_pi × 2σ < score_po`.
    LiteralMultiplicative,
}

impl fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyMode::Additive => "additive",
            PenaltyMode::LiteralMultiplicative => "literal-multiplicative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SigmaSetting {
    Fixed(f64),
    #[default]
    Estimate,
}

impl Serialize for SigmaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SigmaSetting::Fixed(v) => s.serialize_f64(*v),
            SigmaSetting::Estimate => s.serialize_str("estimate"),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 0.0 && v.is_finite() => Ok(SigmaSetting::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "penalty.sigma must be a finite number >= 0, got {v}"
            ))),
            Raw::Str(s) if s == "estimate" => Ok(SigmaSetting::Estimate),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "penalty.sigma must be a number or \"estimate\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default)]
    pub mode: PenaltyMode,
    #[serde(default)]
    pub sigma: SigmaSetting,
    /// Label for the sample set sigma was estimated over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_estimation_scope: Option<String>,
}

/// A penalty configuration with a concrete sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedPenalty {
    pub mode: PenaltyMode,
    pub sigma: f64,
}

impl ResolvedPenalty {
    pub fn new(mode: PenaltyMode, sigma: f64) -> Self {
        assert!(sigma >= 0.0, "sigma must be non-negative");
        ResolvedPenalty { mode, sigma }
    }

    pub fn indicator(&self, score_pi: f64, score_po: f64) -> u8 {
        penalty_indicator(score_pi, score_po, self.mode, self.sigma)
    }
}

/// `1` when the output clears the margin (no penalty), `0` otherwise.
/// Ties penalize.
pub fn penalty_indicator(score_pi: f64, score_po: f64, mode: PenaltyMode, sigma: f64) -> u8 {
    let threshold = match mode {
        PenaltyMode::Additive => score_pi + 2.0 * sigma,
        PenaltyMode::LiteralMultiplicative => score_pi * (2.0 * sigma),
    };
    u8::from(threshold < score_po)
}

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error("sigma estimation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> Result<f64, PenaltyError> {
    if values.len() < 2 {
        return Err(PenaltyError::TooFewSamples(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Population σ of `score_text_image(P, I)` over the samples' input images.
pub fn estimate_sigma(samples: &[EvalSample], suite: &BackendSuite) -> Result<f64, PenaltyError> {
    if samples.len() < 2 {
        return Err(PenaltyError::TooFewSamples(samples.len()));
    }
    let scores = samples
        .iter()
        .map(|s| suite.score_text_image(&s.prompt.text, s.input_image()))
        .collect::<Result<Vec<_>, _>>()?;
    population_std(&scores)
}

/// Estimated sigmas keyed by (scorer identity, manifest hash).
#[derive(Debug, Default)]
pub struct SigmaCache {
    entries: Mutex<HashMap<(String, String), f64>>,
}

impl SigmaCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_estimate(
        &self,
        scorer_identity: &str,
        manifest_hash: &str,
        samples: &[EvalSample],
        suite: &BackendSuite,
    ) -> Result<f64, PenaltyError> {
        let key = (scorer_identity.to_string(), manifest_hash.to_string());
        if let Some(&s) = self.entries.lock().unwrap().get(&key) {
            return Ok(s);
        }
        let sigma = estimate_sigma(samples, suite)?;
        self.entries.lock().unwrap().entry(key).or_insert(sigma);
        Ok(sigma)
    }
}
