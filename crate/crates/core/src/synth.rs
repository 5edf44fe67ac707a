//! Synthetic traces with planted minimal cores.
//!
//! Every generated trace carries a `[planted ...]` header in its input that
//! the [`PlantedOracle`] reads, so the answer of any subset is known in
//! closed form. Key steps are tagged `key:<value>`, fillers `Note <id>:`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::oracle::{OracleSpec, PlantedHeader, PlantedOracle, PlantedRuleKind};
use crate::trace::{Subset, Trace};

pub const EMBEDDING_SIGMA: f64 = 0.3;
const MAX_KEY_VALUE: usize = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedRule {
    SumOfKeys,
    AllOfKeysRequired,
    /// The key steps form one substitutable group; any `threshold` of them
    /// suffice.
    AnyKOfKeys {
        threshold: usize,
    },
}

impl PlantedRule {
    fn header_kind(&self) -> PlantedRuleKind {
        match *self {
            PlantedRule::SumOfKeys => PlantedRuleKind::SumOfKeys,
            PlantedRule::AllOfKeysRequired => PlantedRuleKind::AllOfKeys,
            PlantedRule::AnyKOfKeys { threshold } => PlantedRuleKind::AnyKOfKeys { threshold },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlantedRule::SumOfKeys => "sum_of_keys",
            PlantedRule::AllOfKeysRequired => "all_of_keys_required",
            PlantedRule::AnyKOfKeys { .. } => "any_k_of_keys",
        }
    }

    /// Rules where every key is individually required.
    pub fn is_non_interacting(&self) -> bool {
        !matches!(self, PlantedRule::AnyKOfKeys { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub t: usize,
    pub key_indices: Vec<usize>,
    pub rule: PlantedRule,
    #[serde(default)]
    pub filler_style: usize,
    pub seed: u64,
}

const KEY_TEMPLATES: &[&[&str]] = &[
    &[
        "Take the quantity key:{v} from the statement.",
        "Record key:{v} for the total.",
        "The given value key:{v} is needed.",
    ],
    &[
        "Reading the problem carefully, the relevant quantity is key:{v} and it must be kept.",
        "Another term enters the computation: key:{v} as stated in the question.",
    ],
];

const FILLER_TEMPLATES: &[&[&str]] = &[
    &[
        "Let me restate the question.",
        "This looks like a simple problem.",
        "I should be careful with the arithmetic.",
        "Double checking the setup before moving on.",
        "Okay, continuing with the plan.",
    ],
    &[
        "Let me think about what the question is really asking before doing anything else.",
        "It is worth pausing here to make sure nothing in the statement was overlooked.",
        "There may be a trick in the wording, but it seems straightforward on a second reading.",
        "Writing things down step by step tends to avoid careless mistakes in problems like this.",
    ],
];

fn template<'a>(set: &'a [&'a [&'a str]], style: usize, pick: usize) -> &'a str {
    let list = set[style % set.len()];
    list[pick % list.len()]
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InvalidSpec("trace length must be at least 1".into()));
        }
        if self.key_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("key indices must be strictly increasing".into()));
        }
        if self.key_indices.last().is_some_and(|&k| k >= self.t) {
            return Err(Error::InvalidSpec(format!("key index out of range for T={}", self.t)));
        }
        if self.key_indices.len() > MAX_KEY_VALUE {
            return Err(Error::InvalidSpec("too many keys".into()));
        }
        if let PlantedRule::AnyKOfKeys { threshold } = self.rule {
            if threshold > self.key_indices.len() {
                return Err(Error::InvalidSpec(format!(
                    "threshold {threshold} exceeds group size {}",
                    self.key_indices.len()
                )));
            }
        }
        Ok(())
    }

    /// The lexicographically first minimum sufficient subset.
    pub fn planted_core(&self) -> Subset {
        let keep = match self.rule {
            PlantedRule::AnyKOfKeys { threshold } => self.key_indices[..threshold].to_vec(),
            _ => self.key_indices.clone(),
        };
        Subset::new(keep, self.t).expect("validated spec")
    }

    pub fn ground_truth_cr(&self) -> f64 {
        self.planted_core().len() as f64 / self.t as f64
    }
}

/// Builds the trace and the oracle that answers it in closed form.
pub fn generate(spec: &PlantedSpec) -> Result<(Trace, OracleSpec)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values: Vec<u64> =
        sample(&mut rng, MAX_KEY_VALUE, spec.key_indices.len()).into_iter().map(|v| v as u64 + 1).collect();
    let mut texts = Vec::with_capacity(spec.t);
    let mut notes = Vec::new();
    let mut key_iter = values.iter();
    for i in 0..spec.t {
        let pick = rng.random_range(0..64);
        if spec.key_indices.binary_search(&i).is_ok() {
            let v = key_iter.next().expect("one value per key");
            texts.push(template(KEY_TEMPLATES, spec.filler_style, pick).replace("{v}", &v.to_string()));
        } else {
            let id = notes.len() as u64 + 1;
            notes.push(id);
            texts.push(format!("Note {id}: {}", template(FILLER_TEMPLATES, spec.filler_style, pick)));
        }
    }
    let answer: u64 = values.iter().sum();
    let header = PlantedHeader { rule: spec.rule.header_kind(), keys: values, notes, answer: answer.to_string() };
    let input = format!("Problem {}: combine the marked quantities. {}", spec.seed, header.render());
    let trace = Trace::from_texts(format!("planted-{}", spec.seed), input, texts, answer.to_string())?
        .with_meta("rule", json!(spec.rule.name()))
        .with_meta("planted_core", json!(spec.planted_core().indices()));
    Ok((trace, OracleSpec::PlantedRule(PlantedOracle::default())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleTemplate {
    Sum,
    All,
    /// Threshold drawn uniformly from `1..group size` (strictly below it).
    AnyK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDistribution {
    pub lengths: Vec<usize>,
    /// Share of steps that are keys; also used as the difficulty tag.
    pub key_fractions: Vec<f64>,
    pub rules: Vec<RuleTemplate>,
    #[serde(default)]
    pub filler_styles: Vec<usize>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    /// Magnitude of the label direction in key-step embeddings.
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_dim() -> usize {
    16
}

fn default_signal() -> f64 {
    0.25
}

fn default_sigma() -> f64 {
    EMBEDDING_SIGMA
}

impl CorpusDistribution {
    pub fn fixed(t: usize, keys: usize, rule: RuleTemplate) -> Self {
        Self {
            lengths: vec![t],
            key_fractions: vec![keys as f64 / t as f64],
            rules: vec![rule],
            filler_styles: vec![0],
            embedding_dim: default_dim(),
            signal: default_signal(),
            sigma: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpus {
    pub traces: Vec<Trace>,
    pub specs: Vec<PlantedSpec>,
    /// Per trace, one vector per step.
    pub embeddings: Vec<Vec<Vec<f64>>>,
    pub oracle: OracleSpec,
}

impl PlantedCorpus {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn mean_ground_truth_cr(&self) -> f64 {
        self.specs.iter().map(PlantedSpec::ground_truth_cr).sum::<f64>() / self.specs.len().max(1) as f64
    }

    /// Ground-truth CR grouped by difficulty tag.
    pub fn cr_by_difficulty(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (trace, spec) in self.traces.iter().zip(&self.specs) {
            let tag = trace.metadata.get("difficulty").and_then(|v| v.as_str()).unwrap_or("").to_string();
            let e = acc.entry(tag).or_default();
            e.0 += spec.ground_truth_cr();
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

fn choose<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> Result<&'a T> {
    if items.is_empty() {
        return Err(Error::InvalidSpec("empty choice list in corpus distribution".into()));
    }
    Ok(&items[rng.random_range(0..items.len())])
}

/// `n` independent planted traces. Labels are fair coin flips; key-step
/// embeddings are `label_sign * signal * e1` plus isotropic noise, fillers
/// pure noise.
pub fn generate_corpus(n: usize, dist: &CorpusDistribution, seed: u64) -> Result<PlantedCorpus> {
    if n == 0 {
        return Err(Error::InvalidSpec("corpus size must be at least 1".into()));
    }
    if dist.embedding_dim == 0 || dist.sigma < 0.0 {
        return Err(Error::InvalidSpec("embedding_dim must be >= 1 and sigma >= 0".into()));
    }
    let noise = Normal::new(0.0, dist.sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles = if dist.filler_styles.is_empty() { vec![0] } else { dist.filler_styles.clone() };
    let mut corpus = PlantedCorpus {
        traces: Vec::with_capacity(n),
        specs: Vec::with_capacity(n),
        embeddings: Vec::with_capacity(n),
        oracle: OracleSpec::PlantedRule(PlantedOracle::default()),
    };
    for i in 0..n {
        let t = *choose(&mut rng, &dist.lengths)?;
        if t == 0 {
            return Err(Error::InvalidSpec("trace length must be at least 1".into()));
        }
        let fraction = *choose(&mut rng, &dist.key_fractions)?;
        let keys = ((fraction * t as f64).round() as usize).min(t);
        let mut key_indices = sample(&mut rng, t, keys).into_vec();
        key_indices.sort_unstable();
        let rule = match choose(&mut rng, &dist.rules)? {
            RuleTemplate::Sum => PlantedRule::SumOfKeys,
            RuleTemplate::All => PlantedRule::AllOfKeysRequired,
            RuleTemplate::AnyK if keys >= 2 => PlantedRule::AnyKOfKeys { threshold: rng.random_range(1..keys) },
            RuleTemplate::AnyK => PlantedRule::AnyKOfKeys { threshold: keys },
        };
        let spec = PlantedSpec {
            t,
            key_indices,
            rule,
            filler_style: *choose(&mut rng, &styles)?,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        };
        let label: bool = rng.random_bool(0.5);
        let (mut trace, _) = generate(&spec)?;
        trace.id = format!("planted-{seed}-{i:05}");
        trace.correct_label = Some(label);
        trace.metadata.insert("difficulty".into(), json!(format!("{fraction:.1}")));

        let sign = if label { 1.0 } else { -1.0 };
        let vectors = (0..t)
            .map(|step| {
                let mut v: Vec<f64> = (0..dist.embedding_dim).map(|_| noise.sample(&mut rng)).collect();
                if spec.key_indices.binary_search(&step).is_ok() {
                    v[0] += sign * dist.signal;
                }
                v
            })
            .collect();
        corpus.traces.push(trace);
        corpus.specs.push(spec);
        corpus.embeddings.push(vectors);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::exhaustive_minimum;
    use crate::oracle::CachedOracle;
    use crate::sufficiency::{Judge, SufficiencyCriterion};
    use crate::trace::{render_numbered, segment, SegmentationKind, SegmentationRule};

    fn spec(t: usize, keys: &[usize], rule: PlantedRule) -> PlantedSpec {
        PlantedSpec { t, key_indices: keys.to_vec(), rule, filler_style: 0, seed: 3 }
    }

    fn oracle(o: &OracleSpec) -> CachedOracle {
        CachedOracle::from_spec(o).unwrap()
    }

    #[test]
    fn all_of_keys_core_is_the_key_set() {
        let s = spec(4, &[0, 2], PlantedRule::AllOfKeysRequired);
        let (trace, o) = generate(&s).unwrap();
        let o = oracle(&o);
        let judge = Judge::new(&o, &trace, SufficiencyCriterion::Answer);
        for mask in 0u32..16 {
            let sub = Subset::new((0..4).filter(|i| mask >> i & 1 == 1).collect(), 4).unwrap();
            let expected = sub.contains(0) && sub.contains(2);
            assert_eq!(judge.is_sufficient(&sub).unwrap(), expected, "{mask:b}");
        }
        let r = exhaustive_minimum(&trace, &o, SufficiencyCriterion::Answer, 14).unwrap();
        assert_eq!(r.core.indices(), [0, 2]);
    }

    #[test]
    fn keyless_trace_has_empty_core() {
        let (trace, o) = generate(&spec(3, &[], PlantedRule::SumOfKeys)).unwrap();
        let r = exhaustive_minimum(&trace, &oracle(&o), SufficiencyCriterion::Answer, 14).unwrap();
        assert!(r.core.is_empty());
        assert_eq!(crate::metrics::compression(&r.core).1, 1.0);
    }

    #[test]
    fn substitutable_pair_has_two_minimal_cores() {
        let s = spec(3, &[0, 1], PlantedRule::AnyKOfKeys { threshold: 1 });
        let (trace, o) = generate(&s).unwrap();
        let o = oracle(&o);
        let judge = Judge::new(&o, &trace, SufficiencyCriterion::Answer);
        assert!(judge.is_sufficient(&Subset::new(vec![0], 3).unwrap()).unwrap());
        assert!(judge.is_sufficient(&Subset::new(vec![1], 3).unwrap()).unwrap());
        assert!(!judge.is_sufficient(&Subset::new(vec![2], 3).unwrap()).unwrap());
        let r = exhaustive_minimum(&trace, &o, SufficiencyCriterion::Answer, 14).unwrap();
        assert_eq!(r.core.indices(), [0]);
        assert_eq!(s.planted_core().indices(), [0]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            spec(0, &[], PlantedRule::SumOfKeys),
            spec(3, &[3], PlantedRule::SumOfKeys),
            spec(3, &[1, 1], PlantedRule::SumOfKeys),
            spec(3, &[0, 1], PlantedRule::AnyKOfKeys { threshold: 3 }),
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))), "{s:?}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_segments_back() {
        let s = spec(6, &[1, 4], PlantedRule::SumOfKeys);
        let (a, _) = generate(&s).unwrap();
        let (b, _) = generate(&s).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let raw = render_numbered(&a.steps);
        let steps = segment(&raw, &SegmentationRule::new(SegmentationKind::Numbered)).unwrap();
        assert_eq!(steps.iter().map(|s| &s.text).collect::<Vec<_>>(), a.step_texts());
        let prose = a.step_texts().join(" ");
        let sentences =
            segment(&prose, &SegmentationRule { kind: SegmentationKind::Sentence, merge_min_chars: 0 }).unwrap();
        assert_eq!(sentences.len(), 6);
    }

    #[test]
    fn corpus_ground_truth() {
        let corpus = generate_corpus(100, &CorpusDistribution::fixed(8, 4, RuleTemplate::All), 1).unwrap();
        assert_eq!(corpus.len(), 100);
        assert_eq!(corpus.mean_ground_truth_cr(), 0.5);
        let labels = corpus.traces.iter().filter(|t| t.correct_label == Some(true)).count();
        assert!((30..=70).contains(&labels));

        let single = generate_corpus(1, &CorpusDistribution::fixed(5, 2, RuleTemplate::Sum), 9).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.embeddings[0].len(), 5);

        let again = generate_corpus(100, &CorpusDistribution::fixed(8, 4, RuleTemplate::All), 1).unwrap();
        assert_eq!(serde_json::to_string(&corpus).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn difficulty_strata_follow_key_fraction() {
        let dist = CorpusDistribution {
            lengths: vec![10],
            key_fractions: vec![0.3, 0.5, 0.7],
            rules: vec![RuleTemplate::All],
            ..CorpusDistribution::fixed(10, 5, RuleTemplate::All)
        };
        let corpus = generate_corpus(60, &dist, 4).unwrap();
        let strata = corpus.cr_by_difficulty();
        assert_eq!(strata.len(), 3);
        for (tag, cr) in [("0.3", 0.3), ("0.5", 0.5), ("0.7", 0.7)] {
            assert!((strata[tag] - cr).abs() < 1e-12, "{tag}: {}", strata[tag]);
        }
    }

    #[test]
    fn any_k_threshold_is_below_group_size() {
        let corpus = generate_corpus(50, &CorpusDistribution::fixed(8, 4, RuleTemplate::AnyK), 2).unwrap();
        for s in &corpus.specs {
            let PlantedRule::AnyKOfKeys { threshold } = s.rule else { panic!() };
            assert!((1..4).contains(&threshold));
        }
    }
}
