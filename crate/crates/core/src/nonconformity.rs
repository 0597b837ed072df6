//! Nonconformity scores: how atypical a response is for its prompt.
//!
//! Lower scores mean more typical / more confident. Two regimes:
//!
//! - white-box: negative log-likelihood of the response, from per-token
//!   log-probabilities (optionally length-normalized);
//! - black-box: `-Freq(y) + lambda1 * NE(bag) - lambda2 * Sim(y, y_top)`
//!   over a bag of repeated generations for the same prompt, where Freq is
//!   the raw count of `y`, NE the normalized entropy of the bag, and Sim the
//!   similarity to the most frequent sample.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{EvidenceKind, ResponseEvidence};
use crate::error::{Error, Result};

/// Text similarity used by the black-box score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Jaccard overlap of the two token sets.
    #[default]
    TokenJaccard,
}

/// Tokenizer feeding the similarity measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Lowercase, split on whitespace.
    #[default]
    WhitespaceLower,
}

impl TokenizerKind {
    fn tokens(&self, text: &str) -> BTreeSet<String> {
        match self {
            TokenizerKind::WhitespaceLower => text
                .split_whitespace()
                .map(|t| t.to_lowercase())
                .collect(),
        }
    }
}

/// Coefficients and plug-ins for the black-box score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlackBoxConfig {
    /// Weight of the normalized-entropy term.
    pub lambda1: f64,
    /// Weight of the similarity term.
    pub lambda2: f64,
    pub similarity: SimilarityKind,
    pub tokenizer: TokenizerKind,
}

impl Default for BlackBoxConfig {
    fn default() -> Self {
        BlackBoxConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            similarity: SimilarityKind::default(),
            tokenizer: TokenizerKind::default(),
        }
    }
}

impl BlackBoxConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which regime to score with, plus its knobs. The kind must match the
/// evidence attached to the dataset being scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: EvidenceKind,
    /// Divide the white-box NLL by the token count. Off by default: the raw
    /// negative log-likelihood is the score.
    pub length_normalize: bool,
    pub black_box: BlackBoxConfig,
}

impl ScorerConfig {
    pub fn for_kind(kind: EvidenceKind) -> Self {
        ScorerConfig {
            kind,
            length_normalize: false,
            black_box: BlackBoxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.black_box.validate()
    }
}

/// A bag of repeated generations for one prompt, with derived counts and the
/// most frequent sample (ties broken by the lexicographically smallest
/// string, so the bag is a pure function of its multiset of samples).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBag {
    samples: Vec<String>,
    counts: BTreeMap<String, usize>,
    y_top: String,
}

impl SampleBag {
    pub fn new(samples: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("a sample bag needs at least one sample".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &samples {
            *counts.entry(s.clone()).or_insert(0) += 1;
        }
        // Ascending key order plus strict comparison picks the
        // lexicographically smallest maximizer.
        let y_top = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .expect("non-empty");
        Ok(SampleBag {
            samples,
            counts,
            y_top,
        })
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    /// A most frequent sample (deterministic under ties).
    pub fn y_top(&self) -> &str {
        &self.y_top
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// White-box score: the negative log-likelihood, in nats.
pub fn score_whitebox(token_logprobs: &[f64], length_normalize: bool) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Input(
            "white-box scoring needs at least one token log-probability".into(),
        ));
    }
    for lp in token_logprobs {
        if !lp.is_finite() || *lp > 0.0 {
            return Err(Error::Input(format!(
                "token log-probabilities must be finite and <= 0, got {lp}"
            )));
        }
    }
    let nll: f64 = token_logprobs.iter().map(|lp| -lp).sum();
    if length_normalize {
        Ok(nll / token_logprobs.len() as f64)
    } else {
        Ok(nll)
    }
}

/// Raw count of `y` among the bag's samples (exact string match).
pub fn frequency(bag: &SampleBag, y: &str) -> usize {
    bag.counts.get(y).copied().unwrap_or(0)
}

/// Entropy of the empirical distribution over distinct samples, normalized
/// by log of the number of draws. 0 when every draw agrees, 1 when all draws
/// are distinct.
pub fn normalized_entropy(bag: &SampleBag) -> f64 {
    let m = bag.len();
    if m <= 1 || bag.counts.len() <= 1 {
        return 0.0;
    }
    let m_f = m as f64;
    let entropy: f64 = bag
        .counts
        .values()
        .map(|&c| {
            let p = c as f64 / m_f;
            -p * p.ln()
        })
        .sum();
    (entropy / m_f.ln()).clamp(0.0, 1.0)
}

/// Similarity of two texts in [0, 1]; 1 for identical token sets (including
/// both empty), 0 for disjoint ones.
pub fn similarity(y: &str, y_top: &str, config: &BlackBoxConfig) -> f64 {
    match config.similarity {
        SimilarityKind::TokenJaccard => {
            let a = config.tokenizer.tokens(y);
            let b = config.tokenizer.tokens(y_top);
            if a.is_empty() && b.is_empty() {
                return 1.0;
            }
            let intersection = a.intersection(&b).count();
            let union = a.len() + b.len() - intersection;
            intersection as f64 / union as f64
        }
    }
}

/// Black-box score: `-Freq(y) + lambda1 * NE(bag) - lambda2 * Sim(y, y_top)`.
///
/// Freq is the raw count, so scores are only comparable across bags of the
/// same size.
pub fn score_blackbox(bag: &SampleBag, y: &str, config: &BlackBoxConfig) -> f64 {
    let freq = frequency(bag, y) as f64;
    let ne = normalized_entropy(bag);
    let sim = similarity(y, bag.y_top(), config);
    -freq + config.lambda1 * ne - config.lambda2 * sim
}

/// Score a response from its attached evidence, dispatching on the
/// configured regime. The evidence kind must match the scorer kind.
pub fn score_evidence(
    response: &str,
    evidence: &ResponseEvidence,
    config: &ScorerConfig,
) -> Result<f64> {
    match (config.kind, evidence) {
        (EvidenceKind::WhiteBox, ResponseEvidence::WhiteBox { token_logprobs }) => {
            score_whitebox(token_logprobs, config.length_normalize)
        }
        (EvidenceKind::BlackBox, ResponseEvidence::BlackBox { samples }) => {
            let bag = SampleBag::new(samples.clone())?;
            Ok(score_blackbox(&bag, response, &config.black_box))
        }
        (expected, _) => Err(Error::Config(format!(
            "scorer configured for {expected:?} evidence but the record carries {:?}",
            evidence.kind()
        ))),
    }
}
