//! Sufficiency predicates, KL divergence, and deletion harm.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::answer::{answers_match, canonicalize};
use crate::error::{Error, Result};
use crate::oracle::{canonical_distribution, CachedOracle, Candidate, OracleResponse};
use crate::trace::{Subset, Trace};

pub const KL_FLOOR: f64 = 1e-12;

/// Argument order of the divergence used for distribution sufficiency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(p_subset || p_full)
    #[default]
    SubsetToFull,
    /// KL(p_full || p_subset)
    FullToSubset,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SufficiencyCriterion {
    #[default]
    Answer,
    Distribution {
        #[serde(with = "epsilon_serde")]
        epsilon: f64,
        #[serde(default)]
        direction: KlDirection,
    },
}

impl SufficiencyCriterion {
    pub fn distribution(epsilon: f64) -> Self {
        Self::Distribution { epsilon, direction: KlDirection::SubsetToFull }
    }

    pub fn needs_distributions(&self) -> bool {
        matches!(self, Self::Distribution { .. })
    }
}

/// Tolerances as JSON numbers, with `"inf"` for an unbounded tolerance.
pub mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() && *value > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid tolerance {t:?}"))),
        }
    }

    /// Same encoding for a list of tolerances.
    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(values.len()))?;
            for v in values {
                if v.is_infinite() && *v > 0.0 {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element(v)?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

/// KL(p || q) over the union of candidates.
///
/// Both sides are aligned by canonical answer; `q` is floored at
/// [`KL_FLOOR`] and both are renormalized before the log.
pub fn kl_divergence(p: &[Candidate], q: &[Candidate]) -> Result<f64> {
    let p = canonical_distribution(p);
    let q = canonical_distribution(q);
    let support: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let p_vals: Vec<f64> = support.iter().map(|k| p.get(*k).copied().unwrap_or(0.0).max(0.0)).collect();
    let q_vals: Vec<f64> = support.iter().map(|k| q.get(*k).copied().unwrap_or(0.0).max(KL_FLOOR)).collect();
    let p_total: f64 = p_vals.iter().sum();
    let q_total: f64 = q_vals.iter().sum();
    if p_total <= 0.0 {
        return Err(Error::EmptySupport);
    }
    let kl: f64 = p_vals
        .iter()
        .zip(&q_vals)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| {
            let pi = pi / p_total;
            let qi = qi / q_total;
            pi * (pi / qi).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmSource {
    LossIncrease,
    HarmSignal,
    ZeroFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmScore {
    pub value: f64,
    pub source: HarmSource,
}

impl HarmScore {
    pub fn zero() -> Self {
        Self { value: 0.0, source: HarmSource::ZeroFallback }
    }
}

/// Sufficiency checks for one trace against one oracle and criterion.
///
/// Holds the reference (full-trace) answer and counts every predicate
/// evaluation.
pub struct Judge<'a> {
    pub oracle: &'a CachedOracle,
    pub trace: &'a Trace,
    pub criterion: SufficiencyCriterion,
    reference: String,
    checks: AtomicUsize,
}

impl<'a> Judge<'a> {
    pub fn new(oracle: &'a CachedOracle, trace: &'a Trace, criterion: SufficiencyCriterion) -> Self {
        Self::with_reference(oracle, trace, criterion, trace.full_answer.clone())
    }

    /// Uses `reference` instead of `trace.full_answer` as the answer to preserve.
    pub fn with_reference(
        oracle: &'a CachedOracle,
        trace: &'a Trace,
        criterion: SufficiencyCriterion,
        reference: String,
    ) -> Self {
        Self { oracle, trace, criterion, reference, checks: AtomicUsize::new(0) }
    }

    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn checks(&self) -> usize {
        self.checks.load(Ordering::Relaxed)
    }

    pub fn response(&self, subset: &Subset) -> Result<OracleResponse> {
        self.oracle.query_subset(self.trace, subset, Some(&self.reference))
    }

    pub fn is_sufficient(&self, subset: &Subset) -> Result<bool> {
        self.checks.fetch_add(1, Ordering::Relaxed);
        let response = self.response(subset)?;
        match self.criterion {
            SufficiencyCriterion::Answer => Ok(answers_match(&response.answer, &self.reference)),
            SufficiencyCriterion::Distribution { epsilon, direction } => {
                let sub = response.distribution.ok_or(Error::DistributionUnavailable)?;
                let full =
                    self.response(&self.trace.full_subset())?.distribution.ok_or(Error::DistributionUnavailable)?;
                let kl = match direction {
                    KlDirection::SubsetToFull => kl_divergence(&sub, &full)?,
                    KlDirection::FullToSubset => kl_divergence(&full, &sub)?,
                };
                Ok(kl <= epsilon)
            }
        }
    }

    /// Harm of deleting `step` from `current`: loss increase when both losses
    /// are known, else the oracle's harm signal on the deleted state, else 0.
    pub fn harm(&self, current: &Subset, step: usize) -> Result<HarmScore> {
        let deleted = self.response(&current.without(step))?;
        let kept = self.response(current)?;
        if let (Some(after), Some(before)) = (deleted.answer_loss, kept.answer_loss) {
            return Ok(HarmScore { value: after - before, source: HarmSource::LossIncrease });
        }
        if let Some(signal) = deleted.harm_signal {
            return Ok(HarmScore { value: signal, source: HarmSource::HarmSignal });
        }
        Ok(HarmScore::zero())
    }
}

/// One-shot predicate evaluation.
pub fn is_sufficient(
    criterion: SufficiencyCriterion,
    oracle: &CachedOracle,
    trace: &Trace,
    subset: &Subset,
) -> Result<bool> {
    Judge::new(oracle, trace, criterion).is_sufficient(subset)
}

pub fn harm(oracle: &CachedOracle, trace: &Trace, current: &Subset, step: usize) -> Result<HarmScore> {
    Judge::new(oracle, trace, SufficiencyCriterion::Answer).harm(current, step)
}

/// Canonical answer produced by the oracle for the full trace.
pub fn fresh_full_answer(oracle: &CachedOracle, trace: &Trace) -> Result<String> {
    let r = oracle.query_subset(trace, &trace.full_subset(), Some(&trace.full_answer))?;
    Ok(canonicalize(&r.answer))
}
