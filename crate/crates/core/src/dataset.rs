//! On-disk preference-data model: line-delimited JSON records, validation,
//! and calibration/train splitting.
//!
//! One record per line, UTF-8. The preference schema carries a prompt, the
//! chosen/rejected responses, and per-response reliability evidence; the
//! weighted schema adds a pair weight, per-response nonconformity scores and
//! strata. Floats round-trip bit-exact through serialization.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::conformal::Stratum;
use crate::error::{Error, Result};

/// Which scoring regime a piece of evidence supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    WhiteBox,
    BlackBox,
}

impl std::fmt::Display for EvidenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvidenceKind::WhiteBox => f.write_str("white_box"),
            EvidenceKind::BlackBox => f.write_str("black_box"),
        }
    }
}

/// Reliability evidence attached to one response: either the model's
/// per-token log-probabilities (white-box) or a bag of repeated generations
/// for the same prompt (black-box).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseEvidence {
    WhiteBox { token_logprobs: Vec<f64> },
    BlackBox { samples: Vec<String> },
}

impl ResponseEvidence {
    pub fn kind(&self) -> EvidenceKind {
        match self {
            ResponseEvidence::WhiteBox { .. } => EvidenceKind::WhiteBox,
            ResponseEvidence::BlackBox { .. } => EvidenceKind::BlackBox,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match self {
            ResponseEvidence::WhiteBox { token_logprobs } => {
                if token_logprobs.is_empty() {
                    return Err(Error::validation(
                        field,
                        "white-box evidence needs at least one token log-probability",
                    ));
                }
                if let Some(bad) = token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0)
                {
                    return Err(Error::validation(
                        field,
                        format!("token log-probabilities must be finite and <= 0, got {bad}"),
                    ));
                }
            }
            ResponseEvidence::BlackBox { samples } => {
                if samples.is_empty() {
                    return Err(Error::validation(
                        field,
                        "black-box evidence needs at least one sample",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A single preference comparison with reliability evidence for both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_evidence: ResponseEvidence,
    pub rejected_evidence: ResponseEvidence,
}

impl PreferenceExample {
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::validation(
                "chosen",
                "chosen and rejected responses must differ",
            ));
        }
        self.chosen_evidence.validate("chosen_evidence")?;
        self.rejected_evidence.validate("rejected_evidence")?;
        if self.chosen_evidence.kind() != self.rejected_evidence.kind() {
            return Err(Error::validation(
                "rejected_evidence",
                "both evidences in a record must share one kind",
            ));
        }
        Ok(())
    }

    pub fn evidence_kind(&self) -> EvidenceKind {
        self.chosen_evidence.kind()
    }
}

/// A preference pair annotated with its reliability weight and the
/// per-response scores/strata the weight was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPreferenceExample {
    #[serde(flatten)]
    pub pair: PreferenceExample,
    /// Pair weight u in [0, 1]: the mean of the two response confidences.
    pub weight: f64,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub chosen_stratum: Stratum,
    pub rejected_stratum: Stratum,
}

impl WeightedPreferenceExample {
    pub fn validate(&self) -> Result<()> {
        self.pair.validate()?;
        if !self.weight.is_finite() || !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::validation(
                "weight",
                format!("weight must lie in [0, 1], got {}", self.weight),
            ));
        }
        for (field, v) in [
            ("chosen_score", self.chosen_score),
            ("rejected_score", self.rejected_score),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(field, format!("must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// How to split a dataset into calibration and training parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Number of pairs reserved for calibration.
    pub calibration_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            calibration_size: 100,
            seed: 0,
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    Ok(lines)
}

fn load_records<T, F>(path: &Path, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let mut records = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            return Err(Error::at_line(line_no, Error::Parse("empty line".into())));
        }
        let record: T = serde_json::from_str(&line)
            .map_err(|e| Error::at_line(line_no, Error::Parse(e.to_string())))?;
        validate(&record).map_err(|e| Error::at_line(line_no, e))?;
        records.push(record);
    }
    Ok(records)
}

fn check_single_kind<'a, I>(kinds: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, EvidenceKind)>,
{
    let mut first: Option<(usize, EvidenceKind)> = None;
    for (line, kind) in kinds {
        match first {
            None => first = Some((line, kind)),
            Some((first_line, first_kind)) if first_kind != kind => {
                return Err(Error::Schema(format!(
                    "mixed evidence kinds: line {first_line} is {first_kind} but line {line} is {kind}"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Load and validate a preference dataset. Records come back in file order;
/// every record satisfies its invariants and the whole file carries one
/// evidence kind.
pub fn load_preference_dataset(path: &Path) -> Result<Vec<PreferenceExample>> {
    let records = load_records(path, PreferenceExample::validate)?;
    check_single_kind(
        records
            .iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r.evidence_kind())),
    )?;
    Ok(records)
}

/// Load and validate a weighted preference dataset.
pub fn load_weighted_dataset(path: &Path) -> Result<Vec<WeightedPreferenceExample>> {
    let records = load_records(path, WeightedPreferenceExample::validate)?;
    check_single_kind(
        records
            .iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r.pair.evidence_kind())),
    )?;
    Ok(records)
}

fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Write bytes to `path` via a sibling temp file and an atomic rename, so a
/// failing writer never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp-{}",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default(),
        std::process::id()
    ));
    let result = (|| {
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Save a weighted dataset as one JSON record per line. Loading the file
/// back yields an equal sequence, floats included.
pub fn save_weighted(records: &[WeightedPreferenceExample], path: &Path) -> Result<()> {
    save_jsonl(records, path)
}

/// Save a preference dataset as one JSON record per line.
pub fn save_preference_dataset(records: &[PreferenceExample], path: &Path) -> Result<()> {
    save_jsonl(records, path)
}

/// Split pairs into a calibration set of exactly `spec.calibration_size`
/// records and a disjoint training set covering the rest.
///
/// Membership comes from a seeded shuffle; each part preserves the input's
/// relative order, and the same seed always produces the same partition.
pub fn split_calibration(
    data: Vec<PreferenceExample>,
    spec: &SplitSpec,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>)> {
    if spec.calibration_size == 0 {
        return Err(Error::Config("calibration_size must be positive".into()));
    }
    if spec.calibration_size >= data.len() {
        return Err(Error::Size(format!(
            "calibration_size {} must be smaller than the dataset ({} records)",
            spec.calibration_size,
            data.len()
        )));
    }
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(&mut StdRng::seed_from_u64(spec.seed));
    let mut in_calibration = vec![false; data.len()];
    for &i in &indices[..spec.calibration_size] {
        in_calibration[i] = true;
    }
    let mut calibration = Vec::with_capacity(spec.calibration_size);
    let mut train = Vec::with_capacity(data.len() - spec.calibration_size);
    for (i, record) in data.into_iter().enumerate() {
        if in_calibration[i] {
            calibration.push(record);
        } else {
            train.push(record);
        }
    }
    Ok((calibration, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    pub(crate) fn white_example(id: &str, chosen: &str, rejected: &str) -> PreferenceExample {
        PreferenceExample {
            prompt_id: id.to_string(),
            prompt: format!("prompt {id}"),
            chosen: chosen.to_string(),
            rejected: rejected.to_string(),
            chosen_evidence: ResponseEvidence::WhiteBox {
                token_logprobs: vec![-0.25, -0.5],
            },
            rejected_evidence: ResponseEvidence::WhiteBox {
                token_logprobs: vec![-1.0],
            },
        }
    }

    fn black_example(id: &str) -> PreferenceExample {
        PreferenceExample {
            prompt_id: id.to_string(),
            prompt: format!("prompt {id}"),
            chosen: "a".into(),
            rejected: "b".into(),
            chosen_evidence: ResponseEvidence::BlackBox {
                samples: vec!["a".into(), "a".into()],
            },
            rejected_evidence: ResponseEvidence::BlackBox {
                samples: vec!["b".into()],
            },
        }
    }

    fn write_file(dir: &tempfile::TempDir, name: &str, lines: &[String]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        path
    }

    #[test]
    fn loads_valid_whitebox_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..3)
            .map(|i| serde_json::to_string(&white_example(&format!("p{i}"), "x", "y")).unwrap())
            .collect();
        let path = write_file(&dir, "data.jsonl", &lines);
        let records = load_preference_dataset(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[1].prompt_id, "p1");
    }

    #[test]
    fn equal_chosen_rejected_is_a_validation_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = white_example("p0", "same", "same");
        bad.rejected = "same".into();
        let lines = vec![
            serde_json::to_string(&white_example("ok", "x", "y")).unwrap(),
            serde_json::to_string(&bad).unwrap(),
        ];
        let path = write_file(&dir, "data.jsonl", &lines);
        match load_preference_dataset(&path) {
            Err(Error::AtLine { line, source }) => {
                assert_eq!(line, 2);
                assert!(matches!(*source, Error::Validation { .. }));
            }
            other => panic!("expected line-tagged validation error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_kinds_are_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![
            serde_json::to_string(&white_example("p0", "x", "y")).unwrap(),
            serde_json::to_string(&black_example("p1")).unwrap(),
        ];
        let path = write_file(&dir, "data.jsonl", &lines);
        assert!(matches!(
            load_preference_dataset(&path),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![
            serde_json::to_string(&white_example("p0", "x", "y")).unwrap(),
            "{not json".to_string(),
        ];
        let path = write_file(&dir, "data.jsonl", &lines);
        match load_preference_dataset(&path) {
            Err(Error::AtLine { line, source }) => {
                assert_eq!(line, 2);
                assert!(matches!(*source, Error::Parse(_)));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error_with_path() {
        let err = load_preference_dataset(Path::new("/nonexistent/data.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/data.jsonl"));
    }

    fn weighted(id: &str, weight: f64) -> WeightedPreferenceExample {
        WeightedPreferenceExample {
            pair: white_example(id, "x", "y"),
            weight,
            chosen_score: 0.75,
            rejected_score: 1.0,
            chosen_stratum: Stratum::Rung(0),
            rejected_stratum: Stratum::Rung(1),
        }
    }

    #[test]
    fn weighted_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weighted.jsonl");
        let records: Vec<WeightedPreferenceExample> = (0..50)
            .map(|i| weighted(&format!("p{i}"), (i as f64) / 49.0))
            .collect();
        save_weighted(&records, &path).unwrap();
        let loaded = load_weighted_dataset(&path).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn empty_weighted_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_weighted(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(load_weighted_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn weight_serializes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        save_weighted(&[weighted("p0", 0.65)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"weight\":0.65"), "got: {text}");
        let loaded = load_weighted_dataset(&path).unwrap();
        assert_eq!(loaded[0].weight, 0.65);
    }

    #[test]
    fn weighted_schema_field_names_are_stable() {
        let json = serde_json::to_value(weighted("p0", 0.5)).unwrap();
        for field in [
            "prompt_id",
            "prompt",
            "chosen",
            "rejected",
            "chosen_evidence",
            "rejected_evidence",
            "weight",
            "chosen_score",
            "rejected_score",
            "chosen_stratum",
            "rejected_stratum",
        ] {
            assert!(json.get(field).is_some(), "missing field {field}");
        }
        assert_eq!(json["chosen_evidence"]["kind"], "white_box");
        assert_eq!(json["chosen_stratum"], "core");
        assert_eq!(json["rejected_stratum"], "shell");
    }

    #[test]
    fn out_of_range_weight_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = weighted("p0", 0.5);
        record.weight = 1.5;
        let path = write_file(
            &dir,
            "bad.jsonl",
            &[serde_json::to_string(&record).unwrap()],
        );
        assert!(load_weighted_dataset(&path).is_err());
    }

    fn many(n: usize) -> Vec<PreferenceExample> {
        (0..n)
            .map(|i| white_example(&format!("p{i}"), "x", "y"))
            .collect()
    }

    #[test]
    fn split_partitions_deterministically() {
        let spec = SplitSpec {
            calibration_size: 100,
            seed: 7,
        };
        let (cal_a, train_a) = split_calibration(many(1000), &spec).unwrap();
        let (cal_b, train_b) = split_calibration(many(1000), &spec).unwrap();
        assert_eq!(cal_a.len(), 100);
        assert_eq!(train_a.len(), 900);
        assert_eq!(cal_a, cal_b);
        assert_eq!(train_a, train_b);
        let cal_ids: std::collections::BTreeSet<_> =
            cal_a.iter().map(|r| r.prompt_id.clone()).collect();
        assert!(train_a.iter().all(|r| !cal_ids.contains(&r.prompt_id)));

        let other_seed = SplitSpec {
            calibration_size: 100,
            seed: 8,
        };
        let (cal_c, _) = split_calibration(many(1000), &other_seed).unwrap();
        assert_ne!(cal_a, cal_c, "different seeds should move the membership");
    }

    #[test]
    fn split_boundaries() {
        let spec = SplitSpec {
            calibration_size: 100,
            seed: 0,
        };
        assert!(matches!(
            split_calibration(many(100), &spec),
            Err(Error::Size(_))
        ));
        let (cal, train) = split_calibration(many(101), &spec).unwrap();
        assert_eq!((cal.len(), train.len()), (100, 1));
        assert!(split_calibration(many(5), &SplitSpec { calibration_size: 0, seed: 0 }).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(
            n in 2usize..120,
            seed in 0u64..1000,
        ) {
            let size = 1 + seed as usize % (n - 1);
            let spec = SplitSpec { calibration_size: size, seed };
            let data = many(n);
            let (cal, train) = split_calibration(data.clone(), &spec).unwrap();
            prop_assert_eq!(cal.len(), size);
            prop_assert_eq!(cal.len() + train.len(), n);
            let mut union: Vec<_> = cal.iter().chain(train.iter()).map(|r| r.prompt_id.clone()).collect();
            union.sort();
            let mut expected: Vec<_> = data.iter().map(|r| r.prompt_id.clone()).collect();
            expected.sort();
            prop_assert_eq!(union, expected);
        }

        #[test]
        fn adversarial_weighted_lines_never_load_invalid_records(
            weight in -1.0f64..2.0,
            chosen in "[a-c]{1,3}",
            rejected in "[a-c]{1,3}",
        ) {
            let record = WeightedPreferenceExample {
                pair: PreferenceExample {
                    prompt_id: "p".into(),
                    prompt: "q".into(),
                    chosen: chosen.clone(),
                    rejected: rejected.clone(),
                    chosen_evidence: ResponseEvidence::WhiteBox { token_logprobs: vec![-0.1] },
                    rejected_evidence: ResponseEvidence::WhiteBox { token_logprobs: vec![-0.2] },
                },
                weight,
                chosen_score: 0.1,
                rejected_score: 0.2,
                chosen_stratum: Stratum::Rung(0),
                rejected_stratum: Stratum::Outside,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("gen.jsonl");
            let mut f = fs::File::create(&path).unwrap();
            writeln!(f, "{}", serde_json::to_string(&record).unwrap()).unwrap();
            drop(f);
            match load_weighted_dataset(&path) {
                Ok(records) => {
                    for r in &records {
                        prop_assert!(r.validate().is_ok());
                    }
                }
                Err(e) => prop_assert!(e.is_data_error(), "unexpected error class: {e:?}"),
            }
        }
    }
}
