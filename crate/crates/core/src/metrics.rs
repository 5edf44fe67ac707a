//! Per-trace and corpus quantities: leave-one-out necessity, top-k mass,
//! Gini concentration, compression, retention, and certificates.

use serde::{Deserialize, Serialize};

use crate::answer::answers_match;
use crate::error::{Error, Result};
use crate::oracle::CachedOracle;
use crate::sufficiency::{Judge, SufficiencyCriterion};
use crate::trace::{Subset, Trace};

pub const DEFAULT_ETA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NecessitySource {
    /// Deltas are answer-loss differences.
    Loss,
    /// Deltas are harm-signal differences; usable for ranking only.
    HarmSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessityProfile {
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
    pub eta: f64,
    pub degenerate: bool,
    pub source: NecessitySource,
}

impl NecessityProfile {
    /// Normalizes positive parts: `w_t = max(d_t, 0) / (sum_j max(d_j, 0) + eta)`.
    pub fn from_deltas(deltas: Vec<f64>, eta: f64) -> Self {
        let positive: f64 = deltas.iter().map(|d| d.max(0.0)).sum();
        let weights = deltas.iter().map(|d| d.max(0.0) / (positive + eta)).collect();
        Self { deltas, weights, eta, degenerate: positive == 0.0, source: NecessitySource::Loss }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Indices ordered by increasing delta, ties to the lower index.
    pub fn ascending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.deltas.len()).collect();
        order.sort_by(|&a, &b| self.deltas[a].total_cmp(&self.deltas[b]).then(a.cmp(&b)));
        order
    }

    /// Indices ordered by decreasing weight, ties to the lower index.
    pub fn top_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        order
    }
}

/// Leave-one-out deltas from `T + 1` loss queries against the full-trace answer.
pub fn necessity_profile(trace: &Trace, oracle: &CachedOracle) -> Result<NecessityProfile> {
    necessity_profile_with(trace, oracle, &trace.full_answer, DEFAULT_ETA)
}

pub fn necessity_profile_with(
    trace: &Trace,
    oracle: &CachedOracle,
    reference: &str,
    eta: f64,
) -> Result<NecessityProfile> {
    let full = trace.full_subset();
    let mut subsets = vec![full.clone()];
    subsets.extend((0..trace.len()).map(|t| full.without(t)));
    let responses = oracle.batch_query(trace, &subsets, Some(reference))?;
    let losses: Vec<f64> =
        responses.iter().map(|r| r.answer_loss.ok_or(Error::LossUnavailable)).collect::<Result<_>>()?;
    let deltas = losses[1..].iter().map(|l| l - losses[0]).collect();
    Ok(NecessityProfile::from_deltas(deltas, eta))
}

/// Ranking-only profile from harm signals, for oracles without losses.
pub fn signal_profile(trace: &Trace, oracle: &CachedOracle, reference: &str) -> Result<NecessityProfile> {
    let full = trace.full_subset();
    let judge = Judge::with_reference(oracle, trace, SufficiencyCriterion::Answer, reference.to_string());
    let deltas = (0..trace.len()).map(|t| judge.harm(&full, t).map(|h| h.value)).collect::<Result<Vec<_>>>()?;
    let mut profile = NecessityProfile::from_deltas(deltas, DEFAULT_ETA);
    profile.source = NecessitySource::HarmSignal;
    Ok(profile)
}

/// Sum of the `k` largest weights.
pub fn nmass_k(profile: &NecessityProfile, k: usize) -> f64 {
    profile.top_order().into_iter().take(k).map(|i| profile.weights[i]).sum()
}

/// Gini coefficient of the weights, zeros included:
/// `sum_i sum_j |w_i - w_j| / (2 T sum w)`.
pub fn gini(profile: &NecessityProfile) -> Result<f64> {
    let total = profile.total_weight();
    if profile.degenerate || total <= 0.0 {
        return Err(Error::DegenerateProfile);
    }
    let n = profile.weights.len() as f64;
    // Sorted form of the pairwise sum: sum_i (2i - n + 1) w_(i).
    let mut sorted = profile.weights.clone();
    sorted.sort_by(f64::total_cmp);
    let pairwise: f64 = sorted.iter().enumerate().map(|(i, w)| (2.0 * i as f64 - n + 1.0) * w).sum::<f64>() * 2.0;
    Ok(pairwise / (2.0 * n * total))
}

/// (CR, RM) with `RM = 1 - CR`.
pub fn compression(core: &Subset) -> (f64, f64) {
    let cr = if core.trace_len() == 0 { 1.0 } else { core.len() as f64 / core.trace_len() as f64 };
    (cr, 1.0 - cr)
}

/// Fraction of cases whose retained subset reproduces the full-trace answer.
pub fn retention(cases: &[(&Trace, &Subset, &CachedOracle)]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut kept = 0usize;
    for (trace, subset, oracle) in cases {
        let r = oracle.query_subset(trace, subset, Some(&trace.full_answer))?;
        if answers_match(&r.answer, &trace.full_answer) {
            kept += 1;
        }
    }
    Ok(kept as f64 / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Overcompleteness,
    SparseNecessity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CertificateBound {
    Compression { cr_upper: f64, rm_lower: f64 },
    Residual { gamma: f64, residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub kind: CertificateKind,
    pub trace_len: usize,
    pub witness: Vec<usize>,
    pub bound: CertificateBound,
}

impl CertificateRecord {
    /// CR/RM bound implied by a sufficient deletion set of size `k`.
    pub fn compression_bound(trace_len: usize, k: usize) -> CertificateBound {
        let cr_upper = (trace_len - k) as f64 / trace_len as f64;
        CertificateBound::Compression { cr_upper, rm_lower: k as f64 / trace_len as f64 }
    }

    /// Re-derives the overcompleteness bound from the witness.
    pub fn recompute_compression(&self) -> Option<CertificateBound> {
        (self.kind == CertificateKind::Overcompleteness)
            .then(|| Self::compression_bound(self.trace_len, self.witness.len()))
    }
}

/// A sufficient deletion set `K` bounds `CR <= (T - |K|) / T`.
pub fn overcompleteness_certificate(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    deletion: &[usize],
) -> Result<Option<CertificateRecord>> {
    let deleted = Subset::from_unsorted(deletion.to_vec(), trace.len())?;
    let retained = deleted.complement();
    let judge = Judge::new(oracle, trace, criterion);
    if !judge.is_sufficient(&retained)? {
        return Ok(None);
    }
    Ok(Some(CertificateRecord {
        kind: CertificateKind::Overcompleteness,
        trace_len: trace.len(),
        witness: deleted.indices().to_vec(),
        bound: CertificateRecord::compression_bound(trace.len(), deleted.len()),
    }))
}

/// Issued iff `sum_{t in C} w_t >= 1 - gamma`, where the mass withheld by
/// the smoothing constant (`1 - sum w`) counts towards `C`. Stores the
/// residual mass outside `C`. Degenerate profiles get no certificate.
pub fn sparse_necessity_certificate(
    profile: &NecessityProfile,
    concentration: &[usize],
    gamma: f64,
) -> Result<Option<CertificateRecord>> {
    let set = Subset::from_unsorted(concentration.to_vec(), profile.len())?;
    if profile.degenerate {
        return Ok(None);
    }
    let inside: f64 = set.indices().iter().map(|&t| profile.weights[t]).sum();
    let smoothing_gap = (1.0 - profile.total_weight()).max(0.0);
    if inside + smoothing_gap < 1.0 - gamma {
        return Ok(None);
    }
    let residual: f64 = set.complement().indices().iter().map(|&t| profile.weights[t]).sum();
    Ok(Some(CertificateRecord {
        kind: CertificateKind::SparseNecessity,
        trace_len: profile.len(),
        witness: set.indices().to_vec(),
        bound: CertificateBound::Residual { gamma, residual },
    }))
}
