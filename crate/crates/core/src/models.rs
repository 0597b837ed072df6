//! Tabular policy and reward models over finite per-prompt vocabularies.
//!
//! A policy stores one logit per (prompt, response) and induces a softmax
//! distribution over each prompt's vocabulary; a reward model stores one
//! scalar per (prompt, response). Both are exact and cheap enough for
//! end-to-end gradient checks against finite differences.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::WeightedPreferenceExample;
use crate::error::{Error, Result};

/// Per-prompt response list with one value (logit or reward) per response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub responses: Vec<String>,
    pub values: Vec<f64>,
}

impl ResponseTable {
    fn index_of(&self, response: &str) -> Option<usize> {
        self.responses.iter().position(|r| r == response)
    }
}

/// Shared storage for both model kinds: prompt id -> response table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub prompts: BTreeMap<String, ResponseTable>,
}

impl Table {
    fn from_vocab<I, R>(vocab: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, R)>,
        R: IntoIterator<Item = String>,
    {
        let mut prompts = BTreeMap::new();
        for (prompt, responses) in vocab {
            let responses: Vec<String> = responses.into_iter().collect();
            if responses.is_empty() {
                return Err(Error::Config(format!(
                    "prompt {prompt:?} has an empty response vocabulary"
                )));
            }
            let mut seen = BTreeSet::new();
            for r in &responses {
                if !seen.insert(r.clone()) {
                    return Err(Error::Config(format!(
                        "prompt {prompt:?} lists response {r:?} twice"
                    )));
                }
            }
            let values = vec![0.0; responses.len()];
            if prompts
                .insert(prompt.clone(), ResponseTable { responses, values })
                .is_some()
            {
                return Err(Error::Config(format!("prompt {prompt:?} listed twice")));
            }
        }
        Ok(Table { prompts })
    }

    fn from_pairs(data: &[WeightedPreferenceExample]) -> Result<Self> {
        let mut vocab: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for record in data {
            let entry = vocab.entry(record.pair.prompt_id.clone()).or_default();
            entry.insert(record.pair.chosen.clone());
            entry.insert(record.pair.rejected.clone());
        }
        Table::from_vocab(vocab.into_iter().map(|(p, rs)| (p, rs.into_iter())))
    }

    fn slot(&self, prompt_id: &str) -> Result<&ResponseTable> {
        self.prompts
            .get(prompt_id)
            .ok_or_else(|| Error::Lookup(format!("unknown prompt {prompt_id:?}")))
    }

    fn value(&self, prompt_id: &str, response: &str) -> Result<f64> {
        let slot = self.slot(prompt_id)?;
        let idx = slot.index_of(response).ok_or_else(|| {
            Error::Lookup(format!(
                "unknown response {response:?} for prompt {prompt_id:?}"
            ))
        })?;
        Ok(slot.values[idx])
    }
}

fn log_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max
        + values
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    values.iter().map(|v| v - log_norm).collect()
}

/// Softmax policy over each prompt's finite response vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub(crate) table: Table,
}

impl ToyPolicy {
    /// Build a policy with uniform (all-zero) logits over the given
    /// vocabulary.
    pub fn from_vocab<I, R>(vocab: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, R)>,
        R: IntoIterator<Item = String>,
    {
        Ok(ToyPolicy {
            table: Table::from_vocab(vocab)?,
        })
    }

    /// Build a uniform policy whose vocabulary is every response seen in the
    /// dataset, per prompt.
    pub fn from_pairs(data: &[WeightedPreferenceExample]) -> Result<Self> {
        Ok(ToyPolicy {
            table: Table::from_pairs(data)?,
        })
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.table.prompts.keys().map(|s| s.as_str())
    }

    pub fn responses(&self, prompt_id: &str) -> Result<&[String]> {
        Ok(&self.table.slot(prompt_id)?.responses)
    }

    pub fn logit(&self, prompt_id: &str, response: &str) -> Result<f64> {
        self.table.value(prompt_id, response)
    }

    /// Stable log softmax of the response's logit within its prompt.
    pub fn logprob(&self, prompt_id: &str, response: &str) -> Result<f64> {
        let slot = self.table.slot(prompt_id)?;
        let idx = slot.index_of(response).ok_or_else(|| {
            Error::Lookup(format!(
                "unknown response {response:?} for prompt {prompt_id:?}"
            ))
        })?;
        Ok(log_softmax(&slot.values)[idx])
    }

    /// Softmax probabilities over the prompt's vocabulary, in vocabulary
    /// order.
    pub fn probs(&self, prompt_id: &str) -> Result<Vec<f64>> {
        let slot = self.table.slot(prompt_id)?;
        Ok(log_softmax(&slot.values).iter().map(|lp| lp.exp()).collect())
    }

    /// Highest-probability response; ties go to the earliest vocabulary
    /// entry, so the answer is deterministic.
    pub fn argmax(&self, prompt_id: &str) -> Result<&str> {
        let slot = self.table.slot(prompt_id)?;
        let mut best = 0;
        for (i, v) in slot.values.iter().enumerate() {
            if *v > slot.values[best] {
                best = i;
            }
        }
        Ok(&slot.responses[best])
    }

    /// KL(self || other) for one prompt; the vocabularies must match.
    pub fn kl_to(&self, other: &ToyPolicy, prompt_id: &str) -> Result<f64> {
        let here = self.table.slot(prompt_id)?;
        let there = other.table.slot(prompt_id)?;
        if here.responses != there.responses {
            return Err(Error::Lookup(format!(
                "vocabulary mismatch for prompt {prompt_id:?}"
            )));
        }
        let lp = log_softmax(&here.values);
        let lq = log_softmax(&there.values);
        Ok(lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b))
            .sum())
    }

    /// Mean KL(self || other) over all prompts.
    pub fn mean_kl_to(&self, other: &ToyPolicy) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for prompt in self.table.prompts.keys() {
            total += self.kl_to(other, prompt)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("policy has no prompts".into()));
        }
        Ok(total / count as f64)
    }

    /// Largest per-prompt total-variation distance to another policy.
    pub fn max_total_variation(&self, other: &ToyPolicy) -> Result<f64> {
        let mut worst = 0.0f64;
        for prompt in self.table.prompts.keys() {
            let p = self.probs(prompt)?;
            let q = other.probs(prompt)?;
            if p.len() != q.len() {
                return Err(Error::Lookup(format!(
                    "vocabulary mismatch for prompt {prompt:?}"
                )));
            }
            let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
            worst = worst.max(tv);
        }
        Ok(worst)
    }
}

/// Tabular reward model: one scalar per (prompt, response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRewardModel {
    pub(crate) table: Table,
}

impl ToyRewardModel {
    pub fn from_vocab<I, R>(vocab: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, R)>,
        R: IntoIterator<Item = String>,
    {
        Ok(ToyRewardModel {
            table: Table::from_vocab(vocab)?,
        })
    }

    pub fn from_pairs(data: &[WeightedPreferenceExample]) -> Result<Self> {
        Ok(ToyRewardModel {
            table: Table::from_pairs(data)?,
        })
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.table.prompts.keys().map(|s| s.as_str())
    }

    pub fn responses(&self, prompt_id: &str) -> Result<&[String]> {
        Ok(&self.table.slot(prompt_id)?.responses)
    }

    pub fn reward(&self, prompt_id: &str, response: &str) -> Result<f64> {
        self.table.value(prompt_id, response)
    }

    /// Mean reward over the prompt's vocabulary (the bandit baseline).
    pub fn mean_reward(&self, prompt_id: &str) -> Result<f64> {
        let slot = self.table.slot(prompt_id)?;
        Ok(slot.values.iter().sum::<f64>() / slot.values.len() as f64)
    }
}
