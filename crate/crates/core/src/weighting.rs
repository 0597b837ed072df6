//! Set-wise aggregation of two response strata into one pair weight.
//!
//! Each response earns the confidence of its stratum (a ladder rung's weight,
//! or the outside floor); the pair weight u is the mean of the two. For the
//! default two-level ladder this reproduces the three-case table exactly:
//! both-core 0.8, both-shell 0.5, mixed 0.65.

use crate::conformal::{CalibratorState, LevelLadder, Stratum};
use crate::dataset::{PreferenceExample, WeightedPreferenceExample};
use crate::error::{Error, Result};
use crate::nonconformity::{score_evidence, ScorerConfig};

/// A pair weight together with the per-response confidences it averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairWeight {
    pub u: f64,
    pub chosen_confidence: f64,
    pub rejected_confidence: f64,
}

/// Confidence granted to a single response from its stratum.
pub fn response_confidence(stratum: Stratum, ladder: &LevelLadder) -> f64 {
    ladder.confidence(stratum)
}

/// Aggregate the two responses' strata into the pair weight u.
pub fn pair_weight(chosen: Stratum, rejected: Stratum, ladder: &LevelLadder) -> PairWeight {
    let chosen_confidence = response_confidence(chosen, ladder);
    let rejected_confidence = response_confidence(rejected, ladder);
    PairWeight {
        u: (chosen_confidence + rejected_confidence) / 2.0,
        chosen_confidence,
        rejected_confidence,
    }
}

/// Score both responses of every pair, classify them against the frozen
/// calibrator, and attach the pair weight. Order-preserving and pure per
/// pair.
pub fn weight_dataset(
    data: &[PreferenceExample],
    calibrator: &CalibratorState,
    scorer: &ScorerConfig,
) -> Result<Vec<WeightedPreferenceExample>> {
    scorer.validate()?;
    let ladder = calibrator.ladder();
    let mut out = Vec::with_capacity(data.len());
    for pair in data {
        let chosen_score = score_evidence(&pair.chosen, &pair.chosen_evidence, scorer)?;
        let rejected_score = score_evidence(&pair.rejected, &pair.rejected_evidence, scorer)?;
        let chosen_stratum = calibrator.stratum_of(chosen_score)?;
        let rejected_stratum = calibrator.stratum_of(rejected_score)?;
        let weight = pair_weight(chosen_stratum, rejected_stratum, ladder);
        out.push(WeightedPreferenceExample {
            pair: pair.clone(),
            weight: weight.u,
            chosen_score,
            rejected_score,
            chosen_stratum,
            rejected_stratum,
        });
    }
    Ok(out)
}

/// Check that every stored weight is what `pair_weight` produces from the
/// stored strata under the given ladder.
pub fn verify_weight_consistency(
    data: &[WeightedPreferenceExample],
    ladder: &LevelLadder,
) -> Result<()> {
    for (i, record) in data.iter().enumerate() {
        let expected = pair_weight(record.chosen_stratum, record.rejected_stratum, ladder).u;
        if record.weight != expected {
            return Err(Error::validation(
                "weight",
                format!(
                    "record {i}: weight {} is not recomputable from strata ({}, {}), expected {expected}",
                    record.weight, record.chosen_stratum, record.rejected_stratum
                ),
            ));
        }
    }
    Ok(())
}
