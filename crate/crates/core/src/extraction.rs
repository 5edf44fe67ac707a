//! Minimal-core extraction.
//!
//! * [`greedy_backward`]: start from the full trace; at every round compute
//!   the admissible deletions (those that keep the subset sufficient) and
//!   delete the least harmful one, ties broken by original index. Stops when
//!   no single deletion is admissible, so the result is irreducible.
//! * [`necessity_guided`]: one pass in order of increasing leave-one-out
//!   necessity, accepting each deletion that keeps sufficiency.
//! * [`necessity_blind`]: the same order, deleting a fixed budget
//!   unconditionally (baseline for matched-budget sweeps).
//! * [`random_deletion`]: seeded uniform deletion at a fixed rate.
//! * [`exhaustive_minimum`]: cardinality-then-lexicographic enumeration; a
//!   true minimum for small traces.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::NecessityProfile;
use crate::oracle::CachedOracle;
use crate::sufficiency::{HarmScore, HarmSource, Judge, SufficiencyCriterion};
use crate::trace::{Subset, Trace};

pub const DEFAULT_MAX_EXHAUSTIVE_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    NecessityGuided,
    NecessityBlind,
    Random,
    Exhaustive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::NecessityGuided => "necessity_guided",
            Method::NecessityBlind => "necessity_blind",
            Method::Random => "random",
            Method::Exhaustive => "exhaustive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deletion {
    pub index: usize,
    pub harm: HarmScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreResult {
    pub method: Method,
    pub core: Subset,
    /// Deletions in the order they were applied.
    pub path: Vec<Deletion>,
    pub sufficiency_checks: usize,
    /// Whether `core` itself passed the sufficiency predicate.
    pub sufficient: bool,
    pub irreducible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CoreResult {
    pub fn trace_len(&self) -> usize {
        self.core.trace_len()
    }

    /// Subset after the first `k` deletions of the path.
    pub fn path_point(&self, k: usize) -> Subset {
        let removed: Vec<usize> = self.path.iter().take(k).map(|d| d.index).collect();
        Subset::full(self.trace_len()).without_all(&removed)
    }

    pub fn deleted_indices(&self) -> Vec<usize> {
        self.path.iter().map(|d| d.index).collect()
    }
}

fn require_full_sufficient(judge: &Judge<'_>) -> Result<()> {
    if judge.is_sufficient(&judge.trace.full_subset())? {
        Ok(())
    } else {
        Err(Error::FullTraceInsufficient)
    }
}

/// Admissible single deletions from `current`, in index order.
fn admissible(judge: &Judge<'_>, current: &Subset) -> Result<Vec<usize>> {
    let verdicts = current
        .indices()
        .par_iter()
        .map(|&t| judge.is_sufficient(&current.without(t)).map(|ok| ok.then_some(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(verdicts.into_iter().flatten().collect())
}

pub fn greedy_backward(trace: &Trace, oracle: &CachedOracle, criterion: SufficiencyCriterion) -> Result<CoreResult> {
    greedy_with_judge(&Judge::new(oracle, trace, criterion))
}

pub fn greedy_with_judge(judge: &Judge<'_>) -> Result<CoreResult> {
    require_full_sufficient(judge)?;
    let mut current = judge.trace.full_subset();
    let mut path = Vec::new();
    loop {
        let candidates = admissible(judge, &current)?;
        if candidates.is_empty() {
            break;
        }
        let mut best: Option<Deletion> = None;
        for t in candidates {
            let harm = judge.harm(&current, t)?;
            // Candidates arrive in index order, so strict `<` keeps the lower index on ties.
            if best.is_none_or(|b| harm.value.total_cmp(&b.harm.value).is_lt()) {
                best = Some(Deletion { index: t, harm });
            }
        }
        let chosen = best.expect("non-empty admissible set");
        current = current.without(chosen.index);
        path.push(chosen);
    }
    Ok(CoreResult {
        method: Method::Greedy,
        core: current,
        path,
        sufficiency_checks: judge.checks(),
        sufficient: true,
        irreducible: true,
        seed: None,
    })
}

/// Whether no single retained step can be deleted while staying sufficient.
pub fn is_irreducible(judge: &Judge<'_>, subset: &Subset) -> Result<bool> {
    Ok(admissible(judge, subset)?.is_empty())
}

pub fn necessity_guided(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    profile: &NecessityProfile,
) -> Result<CoreResult> {
    let judge = Judge::new(oracle, trace, criterion);
    necessity_guided_with_judge(&judge, profile)
}

pub fn necessity_guided_with_judge(judge: &Judge<'_>, profile: &NecessityProfile) -> Result<CoreResult> {
    check_profile(judge.trace, profile)?;
    require_full_sufficient(judge)?;
    let mut current = judge.trace.full_subset();
    let mut path = Vec::new();
    for t in profile.ascending_order() {
        let candidate = current.without(t);
        if judge.is_sufficient(&candidate)? {
            current = candidate;
            path.push(Deletion { index: t, harm: profile_harm(profile, t) });
        }
    }
    let checks = judge.checks();
    let irreducible = is_irreducible(judge, &current)?;
    Ok(CoreResult {
        method: Method::NecessityGuided,
        core: current,
        path,
        sufficiency_checks: checks,
        sufficient: true,
        irreducible,
        seed: None,
    })
}

/// Deletes the `floor(rate * T)` least necessary steps without checking.
pub fn necessity_blind(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    profile: &NecessityProfile,
    removal_rate: f64,
) -> Result<CoreResult> {
    check_profile(trace, profile)?;
    let judge = Judge::new(oracle, trace, criterion);
    let budget = removal_count(removal_rate, trace.len());
    let path: Vec<Deletion> = profile
        .ascending_order()
        .into_iter()
        .take(budget)
        .map(|t| Deletion { index: t, harm: profile_harm(profile, t) })
        .collect();
    let core = trace.full_subset().without_all(&path.iter().map(|d| d.index).collect::<Vec<_>>());
    let sufficient = judge.is_sufficient(&core)?;
    Ok(CoreResult {
        method: Method::NecessityBlind,
        core,
        path,
        sufficiency_checks: judge.checks(),
        sufficient,
        irreducible: false,
        seed: None,
    })
}

fn check_profile(trace: &Trace, profile: &NecessityProfile) -> Result<()> {
    if profile.len() != trace.len() {
        return Err(Error::LengthMismatch { subset: profile.len(), trace: trace.len() });
    }
    Ok(())
}

fn profile_harm(profile: &NecessityProfile, t: usize) -> HarmScore {
    let source = match profile.source {
        crate::metrics::NecessitySource::Loss => HarmSource::LossIncrease,
        crate::metrics::NecessitySource::HarmSignal => HarmSource::HarmSignal,
    };
    HarmScore { value: profile.deltas[t], source }
}

fn removal_count(rate: f64, len: usize) -> usize {
    ((rate.clamp(0.0, 1.0) * len as f64) + 1e-9).floor() as usize
}

/// Deletes `floor(rate * T)` uniformly sampled steps; sufficiency of the
/// result is recorded, not enforced.
pub fn random_deletion(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    removal_rate: f64,
    seed: u64,
) -> Result<CoreResult> {
    let judge = Judge::new(oracle, trace, criterion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = removal_count(removal_rate, trace.len());
    let mut removed = sample(&mut rng, trace.len(), n).into_vec();
    removed.sort_unstable();
    let core = trace.full_subset().without_all(&removed);
    let sufficient = judge.is_sufficient(&core)?;
    Ok(CoreResult {
        method: Method::Random,
        core,
        path: removed.into_iter().map(|index| Deletion { index, harm: HarmScore::zero() }).collect(),
        sufficiency_checks: judge.checks(),
        sufficient,
        irreducible: false,
        seed: Some(seed),
    })
}

/// Next k-combination of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Smallest sufficient subset, enumerating by cardinality then
/// lexicographically. The empty subset is tried first.
pub fn exhaustive_minimum(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    max_len: usize,
) -> Result<CoreResult> {
    let n = trace.len();
    if n > max_len {
        return Err(Error::TraceTooLong { len: n, max: max_len });
    }
    let judge = Judge::new(oracle, trace, criterion);
    for k in 0..=n {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let subset = Subset::new(combo.clone(), n)?;
            if judge.is_sufficient(&subset)? {
                let path = subset
                    .complement()
                    .indices()
                    .iter()
                    .map(|&index| Deletion { index, harm: HarmScore::zero() })
                    .collect();
                return Ok(CoreResult {
                    method: Method::Exhaustive,
                    core: subset,
                    path,
                    sufficiency_checks: judge.checks(),
                    sufficient: true,
                    irreducible: true,
                    seed: None,
                });
            }
            if k == 0 || !next_combination(&mut combo, n) {
                break;
            }
        }
    }
    Err(Error::FullTraceInsufficient)
}

/// Subset on the deletion path whose removal fraction is closest to
/// `budget`; equidistant points resolve to the smaller fraction. A path that
/// stops short of the budget yields its terminal subset.
pub fn budget_matched_subset(result: &CoreResult, budget: f64) -> Result<Subset> {
    if !matches!(result.method, Method::Greedy | Method::NecessityGuided) {
        return Err(Error::PathUnavailable);
    }
    let t = result.trace_len();
    if t == 0 {
        return Ok(result.core.clone());
    }
    let target = budget * t as f64;
    let mut best_k = 0;
    let mut best_gap = f64::INFINITY;
    for k in 0..=result.path.len() {
        let gap = (k as f64 - target).abs();
        if gap < best_gap - 1e-9 {
            best_gap = gap;
            best_k = k;
        }
    }
    Ok(result.path_point(best_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::PlantedOracle;
    use crate::sufficiency::HarmSource;

    fn planted(texts: &[&str], header: &str) -> (Trace, CachedOracle) {
        let input = format!("Combine the marked quantities. {header}");
        let answer = crate::oracle::PlantedHeader::parse(&input).unwrap().map(|h| h.answer).unwrap_or_default();
        let trace = Trace::from_texts("t", input, texts.iter().copied(), answer).unwrap();
        (trace, CachedOracle::new(Box::new(PlantedOracle::default())))
    }

    fn kfkf() -> (Trace, CachedOracle) {
        planted(
            &["key:3 first key", "Note 1: filler", "key:4 second key", "Note 2: filler"],
            "[planted rule=sum keys=3,4 notes=1,2 answer=7]",
        )
    }

    #[test]
    fn greedy_recovers_planted_core() {
        let (trace, oracle) = kfkf();
        let r = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap();
        assert_eq!(r.core.indices(), [0, 2]);
        assert_eq!(r.deleted_indices(), [1, 3]);
        assert!(r.irreducible);
        assert!(r.sufficiency_checks <= 4 * 5 / 2 + 4);
        assert!(r.path.iter().all(|d| d.harm.source == HarmSource::LossIncrease));
    }

    #[test]
    fn greedy_keeps_everything_when_all_steps_matter() {
        let (trace, oracle) =
            planted(&["key:1 a", "key:2 b", "key:5 c"], "[planted rule=all keys=1,2,5 notes= answer=8]");
        let r = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap();
        assert!(r.core.is_full());
        assert!(r.path.is_empty());
    }

    #[test]
    fn greedy_single_step_trace() {
        let (trace, oracle) = planted(&["key:2 only"], "[planted rule=all keys=2 notes= answer=2]");
        let r = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap();
        assert_eq!(r.core.indices(), [0]);
        let (trace, oracle) = planted(&["Note 1: only"], "[planted rule=all keys= notes=1 answer=0]");
        let r = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap();
        assert!(r.core.is_empty());
    }

    #[test]
    fn greedy_rejects_insufficient_full_trace() {
        let (mut trace, oracle) = kfkf();
        trace.full_answer = "99".into();
        let err = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap_err();
        assert_eq!(err, Error::FullTraceInsufficient);
    }

    #[test]
    fn greedy_tie_break_prefers_lower_index() {
        // Any one of the two group members suffices; equal harm, so index 0 goes first.
        let (trace, oracle) =
            planted(&["key:3 a", "key:4 b"], "[planted rule=any threshold=1 keys=3,4 notes= answer=7]");
        let r = greedy_backward(&trace, &oracle, SufficiencyCriterion::Answer).unwrap();
        assert_eq!(r.deleted_indices(), [0]);
        assert_eq!(r.core.indices(), [1]);
    }

    #[test]
    fn exhaustive_minimum_cases() {
        let (trace, oracle) = kfkf();
        let r = exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 14).unwrap();
        assert_eq!(r.core.indices(), [0, 2]);
        // Brute force over all 16 subsets: {0,2} is the only sufficient subset of size 2.
        let judge = Judge::new(&oracle, &trace, SufficiencyCriterion::Answer);
        let mut minimal = Vec::new();
        for mask in 0u32..16 {
            let s = Subset::new((0..4).filter(|i| mask >> i & 1 == 1).collect(), 4).unwrap();
            if judge.is_sufficient(&s).unwrap() {
                minimal.push(s);
            }
        }
        let min = minimal.iter().map(Subset::len).min().unwrap();
        let at_min: Vec<_> = minimal.iter().filter(|s| s.len() == min).collect();
        assert_eq!(at_min.len(), 1);
        assert_eq!(at_min[0].indices(), [0, 2]);

        let (trace, oracle) =
            planted(&["Note 1: a", "Note 2: b", "Note 3: c"], "[planted rule=all keys= notes=1,2,3 answer=0]");
        let r = exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 14).unwrap();
        assert!(r.core.is_empty());
        assert_eq!(r.sufficiency_checks, 1);

        let (trace, oracle) = planted(&["key:1 a", "key:2 b"], "[planted rule=all keys=1,2 notes= answer=3]");
        let r = exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 14).unwrap();
        assert!(r.core.is_full());
        assert_eq!(
            exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 1).unwrap_err(),
            Error::TraceTooLong { len: 2, max: 1 }
        );
    }

    #[test]
    fn combinations_enumerate_lexicographically() {
        let mut c = vec![0, 1];
        let mut seen = vec![c.clone()];
        while next_combination(&mut c, 4) {
            seen.push(c.clone());
        }
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn necessity_guided_removes_zero_necessity_fillers() {
        let (trace, oracle) = kfkf();
        let profile = crate::metrics::necessity_profile(&trace, &oracle).unwrap();
        assert_eq!(profile.deltas[1], 0.0);
        assert!(profile.deltas[0] > 0.0);
        let r = necessity_guided(&trace, &oracle, SufficiencyCriterion::Answer, &profile).unwrap();
        assert_eq!(r.core.indices(), [0, 2]);
        assert!(r.irreducible);
    }

    #[test]
    fn necessity_guided_keeps_one_of_a_substitutable_pair() {
        let (trace, oracle) =
            planted(&["key:3 a", "key:4 b", "Note 1: c"], "[planted rule=any threshold=1 keys=3,4 notes=1 answer=7]");
        let profile = crate::metrics::necessity_profile(&trace, &oracle).unwrap();
        assert_eq!(profile.deltas, [0.0, 0.0, 0.0]);
        let r = necessity_guided(&trace, &oracle, SufficiencyCriterion::Answer, &profile).unwrap();
        assert_eq!(r.deleted_indices(), [0, 2]);
        assert_eq!(r.core.indices(), [1]);
    }

    #[test]
    fn necessity_guided_with_no_admissible_deletion() {
        let (trace, oracle) = planted(&["key:1 a", "key:2 b"], "[planted rule=all keys=1,2 notes= answer=3]");
        let profile = crate::metrics::necessity_profile(&trace, &oracle).unwrap();
        assert!(profile.deltas.iter().all(|d| *d > 0.0));
        let r = necessity_guided(&trace, &oracle, SufficiencyCriterion::Answer, &profile).unwrap();
        assert!(r.core.is_full());
    }

    #[test]
    fn random_deletion_is_seeded() {
        let texts: Vec<String> = (0..8).map(|i| format!("Note {i}: filler")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let (trace, oracle) = planted(&refs, "[planted rule=all keys= notes= answer=0]");
        let c = SufficiencyCriterion::Answer;
        let r0 = random_deletion(&trace, &oracle, c, 0.0, 7).unwrap();
        assert!(r0.core.is_full() && r0.sufficient);
        let r1 = random_deletion(&trace, &oracle, c, 1.0, 7).unwrap();
        assert!(r1.core.is_empty());
        let a = random_deletion(&trace, &oracle, c, 0.5, 42).unwrap();
        let b = random_deletion(&trace, &oracle, c, 0.5, 42).unwrap();
        assert_eq!(a.path.len(), 4);
        assert_eq!(a, b);
    }

    fn fake_path(t: usize, deleted: &[usize]) -> CoreResult {
        CoreResult {
            method: Method::Greedy,
            core: Subset::full(t).without_all(deleted),
            path: deleted.iter().map(|&index| Deletion { index, harm: HarmScore::zero() }).collect(),
            sufficiency_checks: 0,
            sufficient: true,
            irreducible: true,
            seed: None,
        }
    }

    #[test]
    fn budget_matching_along_path() {
        let r = fake_path(10, &[9, 8, 7]);
        assert!(budget_matched_subset(&r, 0.0).unwrap().is_full());
        assert_eq!(budget_matched_subset(&r, 0.5).unwrap().len(), 7);
        let r = fake_path(10, &[1, 3, 5, 7, 9]);
        let s = budget_matched_subset(&r, 0.4).unwrap();
        assert_eq!(s.indices(), [0, 2, 4, 6, 8, 9]);
        // 0.45 sits between 4 and 5 deletions; the smaller fraction wins.
        assert_eq!(budget_matched_subset(&r, 0.45).unwrap().len(), 6);
        let mut random = r.clone();
        random.method = Method::Random;
        assert_eq!(budget_matched_subset(&random, 0.4), Err(Error::PathUnavailable));
    }
}
