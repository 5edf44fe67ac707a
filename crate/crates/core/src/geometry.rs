//! Embedding geometry of full traces, cores, and removed steps.
//!
//! Step vectors come from an [`Embedder`] (or are ingested precomputed).
//! Traces are summarized by mean pooling; the empty group maps to a zero
//! vector that every downstream statistic skips.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::NecessityProfile;
use crate::oracle::fnv1a;
use crate::trace::{Subset, Trace};

pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_ITERS: usize = 500;
pub const PROBE_STEP: f64 = 0.1;
pub const TRAIN_FRACTION: f64 = 0.7;
pub const MIN_PER_CLASS: usize = 10;
pub const DEFAULT_KNN_K: usize = 5;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Signed feature hashing of character n-grams, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    #[serde(default = "default_ngram")]
    pub ngram: usize,
}

fn default_ngram() -> usize {
    3
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, ngram: 3 }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        if self.dim == 0 || self.ngram == 0 {
            return Err("hash embedder needs dim >= 1 and ngram >= 1".into());
        }
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut v = vec![0.0; self.dim];
        let n = self.ngram.min(chars.len().max(1));
        let mut buf = String::new();
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let h = fnv1a(buf.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

pub fn embed_steps(trace: &Trace, embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    let d = embedder.dim();
    trace
        .steps
        .iter()
        .map(|step| {
            let v =
                embedder.embed(&step.text).map_err(|message| Error::EmbedderError { index: step.index, message })?;
            if v.len() != d {
                return Err(Error::EmbedderError {
                    index: step.index,
                    message: format!("expected dimension {d}, got {}", v.len()),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::EmbedderError { index: step.index, message: "non-finite component".into() });
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEmbeddings {
    pub full: Vec<f64>,
    pub core: Vec<f64>,
    pub removed: Vec<f64>,
    pub necessity_weighted: Vec<f64>,
    pub degenerate_core: bool,
    pub degenerate_removed: bool,
    pub degenerate_necessity: bool,
}

fn check_dims(vectors: &[Vec<f64>]) -> Result<usize> {
    let d = vectors.first().ok_or(Error::EmptyInput)?.len();
    for v in vectors {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    Ok(d)
}

fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a Vec<f64>>, d: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for v in vectors {
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

pub fn mean_vector(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_dims(vectors)?;
    Ok(mean_of(vectors, d).expect("non-empty"))
}

pub fn trace_embeddings(step_vecs: &[Vec<f64>], core: &Subset, profile: &NecessityProfile) -> Result<TraceEmbeddings> {
    let t = step_vecs.len();
    if core.trace_len() != t {
        return Err(Error::LengthMismatch { subset: core.trace_len(), trace: t });
    }
    if profile.len() != t {
        return Err(Error::LengthMismatch { subset: profile.len(), trace: t });
    }
    let d = check_dims(step_vecs)?;
    let full = mean_of(step_vecs, d).expect("non-empty");
    let core_mean = mean_of(core.indices().iter().map(|&i| &step_vecs[i]), d);
    let removed_mean = mean_of(core.complement().indices().iter().map(|&i| &step_vecs[i]), d);
    let necessity_weighted = if profile.degenerate {
        full.clone()
    } else {
        let mut h = vec![0.0; d];
        for (w, v) in profile.weights.iter().zip(step_vecs) {
            h.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
        }
        h
    };
    Ok(TraceEmbeddings {
        degenerate_core: core_mean.is_none(),
        degenerate_removed: removed_mean.is_none(),
        degenerate_necessity: profile.degenerate,
        core: core_mean.unwrap_or_else(|| vec![0.0; d]),
        removed: removed_mean.unwrap_or_else(|| vec![0.0; d]),
        full,
        necessity_weighted,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean squared distance to the centroid.
pub fn group_variance(vectors: &[Vec<f64>]) -> Result<f64> {
    let mu = mean_vector(vectors)?;
    Ok(vectors.iter().map(|v| sq_dist(v, &mu)).sum::<f64>() / vectors.len() as f64)
}

fn check_labels(vectors: &[Vec<f64>], labels: &[bool]) -> Result<()> {
    if vectors.len() != labels.len() {
        return Err(Error::LengthMismatch { subset: labels.len(), trace: vectors.len() });
    }
    check_dims(vectors)?;
    for label in [false, true] {
        let count = labels.iter().filter(|&&l| l == label).count();
        if count < MIN_PER_CLASS {
            return Err(Error::ClassImbalance { label, count, required: MIN_PER_CLASS });
        }
    }
    Ok(())
}

/// Stratified train/test split: per class, a seeded shuffle and the first
/// `round(0.7 n)` indices go to training. Both halves come back sorted.
pub fn stratified_split(labels: &[bool], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * TRAIN_FRACTION).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticProbe {
    /// Full-batch gradient descent on mean logistic loss plus `l2/2 ||w||^2`
    /// (bias unpenalized), from zero.
    pub fn fit(xs: &[&[f64]], ys: &[bool], l2: f64, iters: usize, step: f64) -> Self {
        let d = xs.first().map_or(0, |x| x.len());
        let n = xs.len().max(1) as f64;
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut grad = vec![0.0; d];
        for _ in 0..iters {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                let p = sigmoid(dot(&w, x) + b);
                let r = p - if y { 1.0 } else { 0.0 };
                grad.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g += r * xi);
                grad_b += r;
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= step * (g / n + l2 * *wi);
            }
            b -= step * grad_b / n;
        }
        Self { weights: w, bias: b }
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        dot(&self.weights, x) + self.bias >= 0.0
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn linear_probe_accuracy(vectors: &[Vec<f64>], labels: &[bool], split_seed: u64) -> Result<f64> {
    check_labels(vectors, labels)?;
    let (train, test) = stratified_split(labels, split_seed);
    let xs: Vec<&[f64]> = train.iter().map(|&i| vectors[i].as_slice()).collect();
    let ys: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let probe = LogisticProbe::fit(&xs, &ys, PROBE_L2, PROBE_ITERS, PROBE_STEP);
    let hits = test.iter().filter(|&&i| probe.predict(&vectors[i]) == labels[i]).count();
    Ok(hits as f64 / test.len() as f64)
}

/// k-NN majority vote on the held-out split; distance ties go to the lower
/// training index, vote ties to the label of the nearest neighbour.
pub fn knn_accuracy(vectors: &[Vec<f64>], labels: &[bool], k: usize, split_seed: u64) -> Result<f64> {
    check_labels(vectors, labels)?;
    let (train, test) = stratified_split(labels, split_seed);
    let mut hits = 0;
    for &i in &test {
        hits += usize::from(knn_predict(vectors, labels, &train, &vectors[i], k) == labels[i]);
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Majority label among the `k` training points nearest to `query`.
pub fn knn_predict(vectors: &[Vec<f64>], labels: &[bool], train: &[usize], query: &[f64], k: usize) -> bool {
    let k = k.max(1).min(train.len());
    let mut neighbours: Vec<(f64, usize)> = train.iter().map(|&j| (sq_dist(query, &vectors[j]), j)).collect();
    neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let votes_true = neighbours[..k].iter().filter(|(_, j)| labels[*j]).count();
    match (2 * votes_true).cmp(&k) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => labels[neighbours[0].1],
    }
}

fn class_members(vectors: &[Vec<f64>], labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if vectors.len() != labels.len() {
        return Err(Error::LengthMismatch { subset: labels.len(), trace: vectors.len() });
    }
    check_dims(vectors).map_err(|e| if e == Error::EmptyInput { Error::DegenerateClustering } else { e })?;
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 || classes.values().any(|m| m.len() < 2) {
        return Err(Error::DegenerateClustering);
    }
    Ok(classes)
}

/// Mean silhouette with Euclidean distance.
pub fn silhouette(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let classes = class_members(vectors, labels)?;
    let mut total = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let own = &classes[&labels[i]];
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(v, &vectors[j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = classes
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| m.iter().map(|&j| dist(v, &vectors[j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok((total / vectors.len() as f64).clamp(-1.0, 1.0))
}

pub fn davies_bouldin(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let classes = class_members(vectors, labels)?;
    let stats: Vec<(Vec<f64>, f64)> = classes
        .values()
        .map(|m| {
            let members: Vec<Vec<f64>> = m.iter().map(|&i| vectors[i].clone()).collect();
            let mu = mean_vector(&members).expect("non-empty class");
            let sigma = members.iter().map(|v| dist(v, &mu)).sum::<f64>() / members.len() as f64;
            (mu, sigma)
        })
        .collect();
    let mut total = 0.0;
    for (i, (mu_i, s_i)) in stats.iter().enumerate() {
        let mut worst = 0.0f64;
        for (j, (mu_j, s_j)) in stats.iter().enumerate() {
            if i == j {
                continue;
            }
            let sep = dist(mu_i, mu_j);
            if sep == 0.0 {
                return Err(Error::CoincidentCentroids);
            }
            worst = worst.max((s_i + s_j) / sep);
        }
        total += worst;
    }
    Ok(total / stats.len() as f64)
}

/// `(sum lambda)^2 / sum lambda^2` over eigenvalues of the population
/// covariance, computed as `tr(C)^2 / ||C||_F^2` on whichever of the `d x d`
/// covariance or the `N x N` Gram matrix is smaller.
pub fn participation_ratio(vectors: &[Vec<f64>]) -> Result<f64> {
    let d = check_dims(vectors)?;
    let n = vectors.len();
    if n < 2 {
        return Err(Error::EmptyInput);
    }
    let mu = mean_of(vectors, d).expect("non-empty");
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mu).map(|(x, m)| x - m).collect()).collect();
    let scale = 1.0 + vectors.iter().map(|v| dot(v, v)).sum::<f64>() / n as f64;
    let (trace, frob) = if d <= n {
        let mut cov = vec![0.0; d * d];
        for v in &centered {
            for a in 0..d {
                for b in a..d {
                    cov[a * d + b] += v[a] * v[b];
                }
            }
        }
        let mut trace = 0.0;
        let mut frob = 0.0;
        for a in 0..d {
            for b in a..d {
                let c = cov[a * d + b] / n as f64;
                if a == b {
                    trace += c;
                    frob += c * c;
                } else {
                    frob += 2.0 * c * c;
                }
            }
        }
        (trace, frob)
    } else {
        let mut trace = 0.0;
        let mut frob = 0.0;
        for i in 0..n {
            for j in i..n {
                let g = dot(&centered[i], &centered[j]) / n as f64;
                if i == j {
                    trace += g;
                    frob += g * g;
                } else {
                    frob += 2.0 * g * g;
                }
            }
        }
        (trace, frob)
    };
    if trace <= 1e-20 * scale || frob == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((trace * trace / frob).clamp(1.0, d as f64))
}

pub fn cosine_alignment(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Full,
    Core,
    Removed,
    NecessityWeighted,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Full, Group::Core, Group::Removed, Group::NecessityWeighted];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Full => "full",
            Group::Core => "core",
            Group::Removed => "removed",
            Group::NecessityWeighted => "necessity_weighted",
        }
    }

    fn pick<'a>(&self, e: &'a TraceEmbeddings) -> Option<&'a [f64]> {
        match self {
            Group::Full => Some(&e.full),
            Group::Core => (!e.degenerate_core).then_some(e.core.as_slice()),
            Group::Removed => (!e.degenerate_removed).then_some(e.removed.as_slice()),
            Group::NecessityWeighted => (!e.degenerate_necessity).then_some(e.necessity_weighted.as_slice()),
        }
    }
}

/// A metric value with the number of vectors it was computed on, or the
/// reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Measured {
    fn from(n: usize, r: Result<f64>) -> Self {
        match r {
            Ok(v) => Self { n, value: Some(v), error: None },
            Err(e) => Self { n, value: None, error: Some(e.to_string()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: Group,
    pub n: usize,
    pub excluded: usize,
    pub variance: Measured,
    /// Variance divided by the full-trace group's variance.
    pub relative_variance: Measured,
    pub probe_accuracy: Measured,
    pub knn_accuracy: Measured,
    pub silhouette: Measured,
    pub davies_bouldin: Measured,
    pub intrinsic_dim: Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub weighted_vs_core: Option<Summary>,
    pub weighted_vs_removed: Option<Summary>,
    pub full_vs_core: Option<Summary>,
    pub full_vs_removed: Option<Summary>,
    /// Traces dropped because a required vector was degenerate or zero.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub groups: Vec<GroupMetrics>,
    pub cosine: CosineReport,
    pub split_seed: u64,
    pub knn_k: usize,
}

impl GeometryReport {
    pub fn group(&self, group: Group) -> &GroupMetrics {
        self.groups.iter().find(|g| g.group == group).expect("all groups present")
    }
}

pub fn geometry_report(
    embeddings: &[TraceEmbeddings],
    labels: &[bool],
    split_seed: u64,
    knn_k: usize,
) -> Result<GeometryReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch { subset: labels.len(), trace: embeddings.len() });
    }
    let mut groups = Vec::new();
    let mut full_variance = None;
    for group in Group::ALL {
        let mut vectors = Vec::new();
        let mut ys = Vec::new();
        for (e, &y) in embeddings.iter().zip(labels) {
            if let Some(v) = group.pick(e) {
                vectors.push(v.to_vec());
                ys.push(y);
            }
        }
        let n = vectors.len();
        let classes: Vec<usize> = ys.iter().map(|&y| usize::from(y)).collect();
        let variance = group_variance(&vectors);
        if group == Group::Full {
            full_variance = variance.clone().ok();
        }
        let relative = match (&variance, full_variance) {
            (Ok(v), Some(f)) if f > 0.0 => Ok(v / f),
            (Err(e), _) => Err(e.clone()),
            _ => Err(Error::ZeroVariance),
        };
        groups.push(GroupMetrics {
            group,
            n,
            excluded: embeddings.len() - n,
            variance: Measured::from(n, variance),
            relative_variance: Measured::from(n, relative),
            probe_accuracy: Measured::from(n, linear_probe_accuracy(&vectors, &ys, split_seed)),
            knn_accuracy: Measured::from(n, knn_accuracy(&vectors, &ys, knn_k, split_seed)),
            silhouette: Measured::from(n, silhouette(&vectors, &classes)),
            davies_bouldin: Measured::from(n, davies_bouldin(&vectors, &classes)),
            intrinsic_dim: Measured::from(n, participation_ratio(&vectors)),
        });
    }
    Ok(GeometryReport { groups, cosine: cosine_report(embeddings), split_seed, knn_k })
}

/// Cosine alignments over traces where core, removed and necessity-weighted
/// vectors are all non-degenerate, so every column covers the same traces.
pub fn cosine_report(embeddings: &[TraceEmbeddings]) -> CosineReport {
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut excluded = 0;
    for e in embeddings {
        if e.degenerate_core || e.degenerate_removed || e.degenerate_necessity {
            excluded += 1;
            continue;
        }
        let row = [
            cosine_alignment(&e.necessity_weighted, &e.core),
            cosine_alignment(&e.necessity_weighted, &e.removed),
            cosine_alignment(&e.full, &e.core),
            cosine_alignment(&e.full, &e.removed),
        ];
        if row.iter().any(Result::is_err) {
            excluded += 1;
            continue;
        }
        for (col, v) in cols.iter_mut().zip(row) {
            col.push(v.expect("checked"));
        }
    }
    CosineReport {
        weighted_vs_core: Summary::of(&cols[0]),
        weighted_vs_removed: Summary::of(&cols[1]),
        full_vs_core: Summary::of(&cols[2]),
        full_vs_removed: Summary::of(&cols[3]),
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hash_embedder_is_deterministic_and_normalized() {
        let e = HashEmbedder::new(8);
        let a = e.embed("abc").unwrap();
        assert_eq!(a, e.embed("abc").unwrap());
        assert!(close(dot(&a, &a), 1.0, 1e-12));
        assert_eq!(e.embed("").unwrap(), vec![0.0; 8]);
        assert_ne!(e.embed("the first step").unwrap(), e.embed("another line").unwrap());
        assert!(HashEmbedder::new(0).embed("x").is_err());
    }

    struct Broken;
    impl Embedder for Broken {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
            if text.contains("bad") {
                Err("refused".into())
            } else {
                Ok(vec![1.0, 0.0])
            }
        }
    }

    #[test]
    fn embed_steps_reports_failing_index() {
        let trace = Trace::from_texts("t", "q", ["fine", "bad step"], "1").unwrap();
        assert_eq!(
            embed_steps(&trace, &Broken).unwrap_err(),
            Error::EmbedderError { index: 1, message: "refused".into() }
        );
    }

    #[test]
    fn trace_embedding_cases() {
        let phi = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        let p = NecessityProfile::from_deltas(vec![1.0, 0.0], 0.0);
        let e = trace_embeddings(&phi, &Subset::new(vec![0], 2).unwrap(), &p).unwrap();
        assert_eq!(e.core, [1.0, 0.0]);
        assert_eq!(e.removed, [0.0, 3.0]);
        assert_eq!(e.full, [0.5, 1.5]);
        assert_eq!(e.necessity_weighted, [1.0, 0.0]);
        assert!(!e.degenerate_core && !e.degenerate_removed && !e.degenerate_necessity);

        let e = trace_embeddings(&phi, &Subset::full(2), &p).unwrap();
        assert!(e.degenerate_removed);
        assert_eq!(e.removed, [0.0, 0.0]);

        let flat = NecessityProfile::from_deltas(vec![0.0, 0.0], 1e-8);
        assert!(flat.degenerate);
        let e = trace_embeddings(&phi, &Subset::empty(2), &flat).unwrap();
        assert!(e.degenerate_core && e.degenerate_necessity);
        assert_eq!(e.necessity_weighted, e.full);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(group_variance(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(), 1.0);
        assert_eq!(group_variance(&[vec![3.0, 4.0]]).unwrap(), 0.0);
        assert_eq!(group_variance(&vec![vec![1.0; 3]; 5]).unwrap(), 0.0);
        assert_eq!(group_variance(&[]), Err(Error::EmptyInput));
    }

    fn two_clusters(n: usize, offset: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2 == 0;
            let c = if y { offset } else { -offset };
            xs.push(vec![c + noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)]);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn probe_and_knn_on_separated_clusters() {
        let (xs, ys) = two_clusters(100, 2.0, 1);
        assert_eq!(linear_probe_accuracy(&xs, &ys, 0).unwrap(), 1.0);
        assert_eq!(knn_accuracy(&xs, &ys, 5, 0).unwrap(), 1.0);
    }

    #[test]
    fn probe_and_knn_on_shuffled_labels_are_near_chance() {
        let (xs, mut ys) = two_clusters(240, 2.0, 3);
        let mut probe = 0.0;
        let mut knn = 0.0;
        for seed in 0..10 {
            ys.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + seed));
            probe += linear_probe_accuracy(&xs, &ys, seed).unwrap() / 10.0;
            knn += knn_accuracy(&xs, &ys, 5, seed).unwrap() / 10.0;
        }
        assert!(close(probe, 0.5, 0.1), "{probe}");
        assert!(close(knn, 0.5, 0.1), "{knn}");
    }

    #[test]
    fn probe_on_identical_vectors_predicts_majority() {
        let xs = vec![vec![1.0, 1.0]; 40];
        let ys: Vec<bool> = (0..40).map(|i| i < 30).collect();
        let (_, test) = stratified_split(&ys, 4);
        let share = test.iter().filter(|&&i| ys[i]).count() as f64 / test.len() as f64;
        assert_eq!(linear_probe_accuracy(&xs, &ys, 4).unwrap(), share);
    }

    #[test]
    fn probe_needs_ten_per_class() {
        let xs = vec![vec![0.0]; 15];
        let ys: Vec<bool> = (0..15).map(|i| i < 9).collect();
        assert_eq!(
            linear_probe_accuracy(&xs, &ys, 0),
            Err(Error::ClassImbalance { label: false, count: 6, required: 10 })
        );
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ys: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let (train, test) = stratified_split(&ys, 9);
        assert_eq!(train.len() + test.len(), 50);
        assert_eq!(train.iter().filter(|&&i| ys[i]).count(), 7);
        assert_eq!((train.clone(), test.clone()), stratified_split(&ys, 9));
        assert_ne!(train, stratified_split(&ys, 10).0);
    }

    #[test]
    fn knn_with_k1_returns_the_duplicate_label() {
        let xs = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let ys = [true, false, true, false];
        for i in 0..4 {
            assert_eq!(knn_predict(&xs, &ys, &[0, 1, 2, 3], &xs[i], 1), ys[i]);
        }
        // Equidistant neighbours resolve to the lower index.
        assert!(knn_predict(&xs, &ys, &[0, 1, 2, 3], &[1.5], 1) == ys[1]);
    }

    /// Direct pairwise evaluation used as the reference implementation.
    fn silhouette_reference(xs: &[Vec<f64>], ls: &[usize]) -> f64 {
        let n = xs.len();
        let mut s = 0.0;
        for i in 0..n {
            let mut same = (0.0, 0usize);
            let mut other: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dij = dist(&xs[i], &xs[j]);
                if ls[j] == ls[i] {
                    same.0 += dij;
                    same.1 += 1;
                } else {
                    let e = other.entry(ls[j]).or_insert((0.0, 0));
                    e.0 += dij;
                    e.1 += 1;
                }
            }
            let a = same.0 / same.1 as f64;
            let b = other.values().map(|(t, c)| t / *c as f64).fold(f64::INFINITY, f64::min);
            s += if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        }
        s / n as f64
    }

    #[test]
    fn silhouette_examples() {
        let xs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![100.0, 0.0], vec![101.0, 0.0]];
        let ls = [0, 0, 1, 1];
        let s = silhouette(&xs, &ls).unwrap();
        assert!(s > 0.98 && s < 1.0, "{s}");
        assert!(close(s, silhouette_reference(&xs, &ls), 1e-12));
        // Identical clouds for both classes: b = a (n-1)/n, so s = -1/n.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let cloud: Vec<Vec<f64>> = (0..50).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        let xs: Vec<Vec<f64>> = cloud.iter().chain(&cloud).cloned().collect();
        let ls: Vec<usize> = (0..100).map(|i| i / 50).collect();
        assert!(close(silhouette(&xs, &ls).unwrap(), -1.0 / 50.0, 1e-9));
        assert_eq!(silhouette(&xs[..3], &[0, 0, 1]), Err(Error::DegenerateClustering));
        assert_eq!(silhouette(&xs[..2], &[0, 0]), Err(Error::DegenerateClustering));
    }

    #[test]
    fn davies_bouldin_examples() {
        let xs = vec![vec![0.0, 0.0], vec![0.01, 0.0], vec![100.0, 0.0], vec![100.01, 0.0]];
        let db = davies_bouldin(&xs, &[0, 0, 1, 1]).unwrap();
        assert!(db < 1e-3, "{db}");
        // Two overlapping squares whose centroids differ by 0.1: (sqrt2 + sqrt2) / 0.1.
        let square = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
        let mut xs = Vec::new();
        for shift in [0.0, 0.1] {
            xs.extend(square.iter().map(|(a, b)| vec![a + shift, *b]));
        }
        let db = davies_bouldin(&xs, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert!(close(db, 2.0 * 2f64.sqrt() / 0.1, 1e-9) && db > 5.0);
        let xs: Vec<Vec<f64>> = square.iter().chain(&square).map(|(a, b)| vec![*a, *b]).collect();
        assert_eq!(davies_bouldin(&xs, &[0, 0, 0, 0, 1, 1, 1, 1]), Err(Error::CoincidentCentroids));
    }

    #[test]
    fn participation_ratio_examples() {
        // Eigenvalues {3, 1}: points along axes scaled so the population covariance is diag(3, 1).
        let a = 3f64.sqrt();
        let xs = vec![vec![a, 1.0], vec![-a, -1.0], vec![a, -1.0], vec![-a, 1.0]];
        assert!(close(participation_ratio(&xs).unwrap(), 1.6, 1e-12));
        let iso = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(close(participation_ratio(&iso).unwrap(), 2.0, 1e-12));
        let line: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        assert!(close(participation_ratio(&line).unwrap(), 1.0, 1e-9));
        assert_eq!(participation_ratio(&vec![vec![2.0, 2.0]; 4]), Err(Error::ZeroVariance));
        assert_eq!(participation_ratio(&[vec![2.0, 2.0]]), Err(Error::EmptyInput));
    }

    #[test]
    fn participation_ratio_matches_eigenvalues() {
        use nalgebra::DMatrix;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for (n, d) in [(30, 4), (5, 9), (12, 12)] {
            let xs: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|j| normal.sample(&mut rng) * (1.0 + j as f64)).collect()).collect();
            let m = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
            let mean = m.row_mean();
            let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
            let cov = c.transpose() * &c / n as f64;
            let eig = cov.symmetric_eigenvalues();
            let s: f64 = eig.iter().sum();
            let s2: f64 = eig.iter().map(|l| l * l).sum();
            assert!(close(participation_ratio(&xs).unwrap(), s * s / s2, 1e-9));
        }
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_alignment(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, 1e-12));
        assert_eq!(cosine_alignment(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!(close(cosine_alignment(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), -1.0, 1e-12));
        assert_eq!(cosine_alignment(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn report_counts_exclusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let phi: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect()).collect();
            let core = if i % 10 == 0 { Subset::full(4) } else { Subset::new(vec![0, 1], 4).unwrap() };
            let profile = NecessityProfile::from_deltas(vec![1.0, 1.0, 0.0, 0.0], 1e-8);
            embeddings.push(trace_embeddings(&phi, &core, &profile).unwrap());
            labels.push(i % 2 == 0);
        }
        let report = geometry_report(&embeddings, &labels, 0, 5).unwrap();
        assert_eq!(report.group(Group::Full).n, 40);
        assert_eq!(report.group(Group::Removed).excluded, 4);
        assert_eq!(report.group(Group::Full).relative_variance.value, Some(1.0));
        assert_eq!(report.cosine.excluded, 4);
        assert_eq!(report.cosine.full_vs_core.unwrap().n, 36);
        assert!(report.group(Group::Removed).probe_accuracy.value.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn mean_decomposition_holds(
            t in 1usize..12,
            d in 1usize..6,
            mask in any::<u16>(),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 3.0).unwrap();
            let phi: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
            let core = Subset::new((0..t).filter(|i| mask >> i & 1 == 1).collect(), t).unwrap();
            let profile = NecessityProfile::from_deltas(vec![0.0; t], 1e-8);
            let e = trace_embeddings(&phi, &core, &profile).unwrap();
            let k = core.len() as f64;
            for j in 0..d {
                let lhs = k * e.core[j] + (t as f64 - k) * e.removed[j];
                prop_assert!((lhs - t as f64 * e.full[j]).abs() <= 1e-9);
            }
        }

        #[test]
        fn indices_stay_in_range(
            n in 4usize..24,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
            let ls: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let s = silhouette(&xs, &ls).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - silhouette_reference(&xs, &ls)).abs() < 1e-9);
            prop_assert!(davies_bouldin(&xs, &ls).unwrap() >= 0.0);
            let pr = participation_ratio(&xs).unwrap();
            prop_assert!(pr >= 1.0 && pr <= d as f64);
        }
    }
}
