//! Split-conformal calibration of nonconformity scores.
//!
//! Given a calibration set of n scores and a quantile level p, the conformal
//! threshold is the ceil((n+1)*p)-th smallest calibration score (or +inf when
//! that rank exceeds n). For exchangeable data, the prediction set
//! `{y : s(x, y) <= t(p)}` then contains a fresh response with probability in
//! `[p, p + 1/(n+1)]` — the finite-sample guarantee that makes the reliability
//! strata auditable rather than heuristic.
//!
//! A [`LevelLadder`] holds several nested levels at once; classifying a score
//! against the resulting thresholds yields a [`Stratum`] (core / shell /
//! outside for the default two-level ladder).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One quantile level paired with the confidence weight granted to scores
/// inside its prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    /// Quantile level in (0, 1) of the calibration score distribution.
    pub level: f64,
    /// Confidence weight in [0, 1] for responses inside this set.
    pub confidence: f64,
}

/// Ordered quantile levels with strictly decreasing confidence weights, plus
/// a floor weight for scores beyond every level.
///
/// Levels increase (sets are nested, each containing the previous) while
/// confidences decrease: the tightest set holds the most typical responses
/// and earns the largest weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LadderRepr", into = "LadderRepr")]
pub struct LevelLadder {
    rungs: Vec<LadderRung>,
    outside_weight: f64,
}

#[derive(Serialize, Deserialize)]
struct LadderRepr {
    rungs: Vec<LadderRung>,
    outside_weight: f64,
}

impl From<LevelLadder> for LadderRepr {
    fn from(l: LevelLadder) -> Self {
        LadderRepr {
            rungs: l.rungs,
            outside_weight: l.outside_weight,
        }
    }
}

impl TryFrom<LadderRepr> for LevelLadder {
    type Error = Error;

    fn try_from(raw: LadderRepr) -> Result<Self> {
        LevelLadder::new(raw.rungs, raw.outside_weight)
    }
}

impl LevelLadder {
    pub fn new(rungs: Vec<LadderRung>, outside_weight: f64) -> Result<Self> {
        if rungs.is_empty() {
            return Err(Error::Config("ladder needs at least one rung".into()));
        }
        for rung in &rungs {
            if !rung.level.is_finite() || rung.level <= 0.0 || rung.level >= 1.0 {
                return Err(Error::Config(format!(
                    "rung level {} must lie in (0, 1)",
                    rung.level
                )));
            }
            if !rung.confidence.is_finite() || rung.confidence < 0.0 || rung.confidence > 1.0 {
                return Err(Error::Config(format!(
                    "rung confidence {} must lie in [0, 1]",
                    rung.confidence
                )));
            }
        }
        for pair in rungs.windows(2) {
            if pair[1].level <= pair[0].level {
                return Err(Error::Config(format!(
                    "rung levels must strictly increase ({} then {})",
                    pair[0].level, pair[1].level
                )));
            }
            if pair[1].confidence >= pair[0].confidence {
                return Err(Error::Config(format!(
                    "rung confidences must strictly decrease ({} then {})",
                    pair[0].confidence, pair[1].confidence
                )));
            }
        }
        let last = rungs.last().expect("non-empty").confidence;
        if !outside_weight.is_finite() || outside_weight < 0.0 || outside_weight >= last {
            return Err(Error::Config(format!(
                "outside weight {outside_weight} must lie in [0, {last})"
            )));
        }
        Ok(LevelLadder {
            rungs,
            outside_weight,
        })
    }

    /// The two-level ladder used throughout: levels 0.5 and 0.8 with
    /// confidences 0.8 and 0.5, and a floor of 0.25 beyond both sets.
    pub fn two_level() -> Self {
        LevelLadder::new(
            vec![
                LadderRung {
                    level: 0.5,
                    confidence: 0.8,
                },
                LadderRung {
                    level: 0.8,
                    confidence: 0.5,
                },
            ],
            0.25,
        )
        .expect("default ladder is valid")
    }

    pub fn rungs(&self) -> &[LadderRung] {
        &self.rungs
    }

    pub fn outside_weight(&self) -> f64 {
        self.outside_weight
    }

    /// Confidence weight granted to a response in the given stratum.
    ///
    /// A rung index beyond the ladder (possible only when a stratum produced
    /// by a deeper ladder is replayed against this one) falls back to the
    /// outside weight.
    pub fn confidence(&self, stratum: Stratum) -> f64 {
        match stratum {
            Stratum::Rung(i) => self
                .rungs
                .get(i)
                .map(|r| r.confidence)
                .unwrap_or(self.outside_weight),
            Stratum::Outside => self.outside_weight,
        }
    }
}

impl Default for LevelLadder {
    fn default() -> Self {
        LevelLadder::two_level()
    }
}

/// Reliability band for a single response.
///
/// `Rung(i)` means the score fell inside the i-th prediction set but outside
/// every tighter one; `Outside` means it exceeded all thresholds. For the
/// default two-level ladder, `Rung(0)` is the core set and `Rung(1)` the
/// shell, serialized as `"core"`, `"shell"` and `"outside"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Rung(usize),
    Outside,
}

impl Stratum {
    pub fn as_label(&self) -> String {
        match self {
            Stratum::Rung(0) => "core".to_string(),
            Stratum::Rung(1) => "shell".to_string(),
            Stratum::Rung(i) => format!("rung{i}"),
            Stratum::Outside => "outside".to_string(),
        }
    }

    pub fn parse_label(label: &str) -> Result<Self> {
        match label {
            "core" => Ok(Stratum::Rung(0)),
            "shell" => Ok(Stratum::Rung(1)),
            "outside" => Ok(Stratum::Outside),
            other => {
                if let Some(rest) = other.strip_prefix("rung") {
                    if let Ok(i) = rest.parse::<usize>() {
                        return Ok(Stratum::Rung(i));
                    }
                }
                Err(Error::validation(
                    "stratum",
                    format!("unknown stratum label {other:?}"),
                ))
            }
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.as_label())
    }
}

impl Serialize for Stratum {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_label())
    }
}

impl<'de> Deserialize<'de> for Stratum {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let label = String::deserialize(d)?;
        Stratum::parse_label(&label).map_err(serde::de::Error::custom)
    }
}

/// Frozen result of fitting conformal thresholds on a calibration set.
///
/// Immutable after [`calibrate`]; classification and audits never touch the
/// stored scores again, so shared references are safe across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibratorRepr", into = "CalibratorRepr")]
pub struct CalibratorState {
    sorted_scores: Vec<f64>,
    ladder: LevelLadder,
    thresholds: Vec<f64>,
}

/// Serialized form of a calibrator. Thresholds use `null` for +inf because
/// JSON has no infinity literal.
#[derive(Serialize, Deserialize)]
struct CalibratorRepr {
    sorted_scores: Vec<f64>,
    ladder: LevelLadder,
    thresholds: Vec<Option<f64>>,
}

impl From<CalibratorState> for CalibratorRepr {
    fn from(s: CalibratorState) -> Self {
        CalibratorRepr {
            sorted_scores: s.sorted_scores,
            ladder: s.ladder,
            thresholds: s
                .thresholds
                .into_iter()
                .map(|t| if t.is_finite() { Some(t) } else { None })
                .collect(),
        }
    }
}

impl TryFrom<CalibratorRepr> for CalibratorState {
    type Error = Error;

    fn try_from(raw: CalibratorRepr) -> Result<Self> {
        let rebuilt = calibrate(&raw.sorted_scores, raw.ladder)?;
        let stored: Vec<f64> = raw
            .thresholds
            .into_iter()
            .map(|t| t.unwrap_or(f64::INFINITY))
            .collect();
        if stored != rebuilt.thresholds {
            return Err(Error::validation(
                "thresholds",
                "stored thresholds disagree with the calibration scores",
            ));
        }
        Ok(rebuilt)
    }
}

/// Rank of the conformal threshold: the ceil((n+1)*p)-th order statistic,
/// 1-based. Ranks above n mean the set is unbounded (+inf threshold).
fn threshold_rank(n: usize, level: f64) -> usize {
    ((n as f64 + 1.0) * level).ceil() as usize
}

/// Fit conformal thresholds for every rung of the ladder.
///
/// Scores must be finite and non-empty; the input order is irrelevant.
pub fn calibrate(scores: &[f64], ladder: LevelLadder) -> Result<CalibratorState> {
    if scores.is_empty() {
        return Err(Error::Input(
            "calibration requires at least one score".into(),
        ));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!(
            "calibration scores must be finite, got {bad}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds = ladder
        .rungs()
        .iter()
        .map(|rung| {
            let rank = threshold_rank(n, rung.level);
            if rank > n {
                f64::INFINITY
            } else {
                sorted[rank - 1]
            }
        })
        .collect();
    Ok(CalibratorState {
        sorted_scores: sorted,
        ladder,
        thresholds,
    })
}

impl CalibratorState {
    pub fn ladder(&self) -> &LevelLadder {
        &self.ladder
    }

    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted_scores
    }

    pub fn calibration_size(&self) -> usize {
        self.sorted_scores.len()
    }

    /// Per-rung thresholds, non-decreasing; +inf marks an unbounded set.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Classify a score into the tightest set containing it.
    ///
    /// Boundary scores equal to a threshold fall inside that set (the set is
    /// `{y : s <= t}`).
    pub fn stratum_of(&self, score: f64) -> Result<Stratum> {
        if !score.is_finite() {
            return Err(Error::Input(format!(
                "cannot classify non-finite score {score}"
            )));
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if score <= *t {
                return Ok(Stratum::Rung(i));
            }
        }
        Ok(Stratum::Outside)
    }

    /// Fraction of test scores inside the prediction set at the given rung.
    pub fn coverage_audit(&self, test_scores: &[f64], rung: usize) -> Result<f64> {
        if test_scores.is_empty() {
            return Err(Error::Input("coverage audit needs a non-empty test set".into()));
        }
        let t = *self
            .thresholds
            .get(rung)
            .ok_or_else(|| Error::Input(format!("rung index {rung} out of range")))?;
        let covered = test_scores.iter().filter(|s| **s <= t).count();
        Ok(covered as f64 / test_scores.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn decile_scores() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    #[test]
    fn threshold_at_half_is_sixth_order_statistic() {
        let state = calibrate(&decile_scores(), LevelLadder::two_level()).unwrap();
        // n = 10, p = 0.5: rank ceil(11 * 0.5) = 6, so t = 0.6.
        assert_eq!(state.thresholds()[0], 0.6);
    }

    #[test]
    fn threshold_at_point_eight_is_ninth_order_statistic() {
        let state = calibrate(&decile_scores(), LevelLadder::two_level()).unwrap();
        // n = 10, p = 0.8: rank ceil(11 * 0.8) = 9, so t = 0.9.
        assert_eq!(state.thresholds()[1], 0.9);
    }

    #[test]
    fn single_score_above_half_level_is_unbounded() {
        let ladder = LevelLadder::new(
            vec![LadderRung {
                level: 0.8,
                confidence: 0.5,
            }],
            0.1,
        )
        .unwrap();
        let state = calibrate(&[3.0], ladder).unwrap();
        // rank ceil(2 * 0.8) = 2 > n = 1.
        assert_eq!(state.thresholds()[0], f64::INFINITY);
    }

    #[test]
    fn single_score_at_exactly_half_keeps_the_score() {
        // rank ceil(2 * 0.5) = 1 <= 1, so the lone score is the threshold.
        let ladder = LevelLadder::new(
            vec![LadderRung {
                level: 0.5,
                confidence: 0.5,
            }],
            0.1,
        )
        .unwrap();
        let state = calibrate(&[3.0], ladder).unwrap();
        assert_eq!(state.thresholds()[0], 3.0);
    }

    #[test]
    fn empty_scores_are_rejected() {
        assert!(matches!(
            calibrate(&[], LevelLadder::two_level()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        assert!(matches!(
            calibrate(&[0.1, f64::NAN], LevelLadder::two_level()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn strata_follow_thresholds_with_inclusive_boundaries() {
        let state = calibrate(&decile_scores(), LevelLadder::two_level()).unwrap();
        assert_eq!(state.thresholds(), &[0.6, 0.9]);
        assert_eq!(state.stratum_of(0.3).unwrap(), Stratum::Rung(0));
        // Boundary score lands in the tighter stratum: s <= t.
        assert_eq!(state.stratum_of(0.6).unwrap(), Stratum::Rung(0));
        assert_eq!(state.stratum_of(0.7).unwrap(), Stratum::Rung(1));
        assert_eq!(state.stratum_of(0.9).unwrap(), Stratum::Rung(1));
        assert_eq!(state.stratum_of(0.95).unwrap(), Stratum::Outside);
        assert!(state.stratum_of(f64::NAN).is_err());
    }

    #[test]
    fn coverage_audit_saturates() {
        let state = calibrate(&decile_scores(), LevelLadder::two_level()).unwrap();
        let below: Vec<f64> = vec![0.0; 5];
        let above: Vec<f64> = vec![2.0; 5];
        assert_eq!(state.coverage_audit(&below, 1).unwrap(), 1.0);
        assert_eq!(state.coverage_audit(&above, 1).unwrap(), 0.0);
        assert!(state.coverage_audit(&[], 0).is_err());
        assert!(state.coverage_audit(&[0.1], 7).is_err());
    }

    #[test]
    fn exchangeable_coverage_is_near_the_level() {
        // Mean coverage over resamples should sit in [p, p + 1/(n+1)] up to
        // Monte-Carlo noise.
        let mut rng = StdRng::seed_from_u64(11);
        let n_cal = 100;
        let mut sum = [0.0f64; 2];
        let trials = 200;
        for _ in 0..trials {
            let cal: Vec<f64> = (0..n_cal).map(|_| rng.random::<f64>()).collect();
            let test: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
            let state = calibrate(&cal, LevelLadder::two_level()).unwrap();
            sum[0] += state.coverage_audit(&test, 0).unwrap();
            sum[1] += state.coverage_audit(&test, 1).unwrap();
        }
        let slack = 1.0 / (n_cal as f64 + 1.0);
        for (rung, level) in [(0usize, 0.5f64), (1, 0.8)] {
            let mean = sum[rung] / trials as f64;
            assert!(
                mean >= level - 0.03 && mean <= level + slack + 0.03,
                "mean coverage {mean} at level {level} outside tolerance"
            );
        }
    }

    #[test]
    fn thresholds_are_monotone_across_rungs() {
        let mut rng = StdRng::seed_from_u64(3);
        let ladder = LevelLadder::new(
            vec![
                LadderRung {
                    level: 0.3,
                    confidence: 0.9,
                },
                LadderRung {
                    level: 0.6,
                    confidence: 0.6,
                },
                LadderRung {
                    level: 0.9,
                    confidence: 0.3,
                },
            ],
            0.05,
        )
        .unwrap();
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let state = calibrate(&scores, ladder.clone()).unwrap();
            for pair in state.thresholds().windows(2) {
                assert!(pair[0] <= pair[1], "thresholds must be non-decreasing");
            }
        }
    }

    #[test]
    fn ladder_validation_rejects_bad_shapes() {
        let rung = |level, confidence| LadderRung { level, confidence };
        assert!(LevelLadder::new(vec![], 0.1).is_err());
        assert!(LevelLadder::new(vec![rung(0.5, 0.8), rung(0.5, 0.5)], 0.1).is_err());
        assert!(LevelLadder::new(vec![rung(0.5, 0.5), rung(0.8, 0.8)], 0.1).is_err());
        assert!(LevelLadder::new(vec![rung(0.5, 0.8)], 0.9).is_err());
        assert!(LevelLadder::new(vec![rung(1.1, 0.8)], 0.1).is_err());
    }

    #[test]
    fn stratum_labels_round_trip() {
        for s in [
            Stratum::Rung(0),
            Stratum::Rung(1),
            Stratum::Rung(3),
            Stratum::Outside,
        ] {
            assert_eq!(Stratum::parse_label(&s.as_label()).unwrap(), s);
        }
        assert_eq!(Stratum::Rung(0).as_label(), "core");
        assert_eq!(Stratum::Rung(1).as_label(), "shell");
        assert_eq!(Stratum::Outside.as_label(), "outside");
        assert!(Stratum::parse_label("weird").is_err());
    }

    #[test]
    fn calibrator_serializes_with_unbounded_thresholds() {
        let ladder = LevelLadder::two_level();
        let state = calibrate(&[1.0], ladder).unwrap();
        assert_eq!(state.thresholds(), &[1.0, f64::INFINITY]);
        let json = serde_json::to_string(&state).unwrap();
        let back: CalibratorState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
    }
}
