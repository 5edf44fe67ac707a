//! Extraction checked against brute-force enumeration of every subset.

use proptest::prelude::*;
use tracecore::extraction::{
    budget_matched_subset, exhaustive_minimum, greedy_with_judge, necessity_guided_with_judge, random_deletion,
};
use tracecore::metrics::necessity_profile;
use tracecore::synth::{generate, PlantedRule, PlantedSpec};
use tracecore::{CachedOracle, Judge, SufficiencyCriterion};

fn sufficient(spec: &PlantedSpec, kept: &[usize]) -> bool {
    let present = spec.key_indices.iter().filter(|k| kept.contains(k)).count();
    match spec.rule {
        PlantedRule::AnyKOfKeys { threshold } => present >= threshold,
        _ => present == spec.key_indices.len(),
    }
}

/// Smallest sufficient subsets by bitmask; the first in lexicographic order
/// of sorted indices.
fn brute_force_minimum(spec: &PlantedSpec) -> Vec<usize> {
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << spec.t) {
        let kept: Vec<usize> = (0..spec.t).filter(|i| mask >> i & 1 == 1).collect();
        if !sufficient(spec, &kept) {
            continue;
        }
        best = match best {
            Some(b) if b.len() < kept.len() || (b.len() == kept.len() && b <= kept) => Some(b),
            _ => Some(kept),
        };
    }
    best.expect("the full trace is sufficient")
}

fn spec_strategy() -> impl Strategy<Value = PlantedSpec> {
    (1usize..=10, any::<u64>(), 0u8..3, 0usize..2)
        .prop_flat_map(|(t, seed, rule, style)| {
            (
                Just(t),
                proptest::sample::subsequence((0..t).collect::<Vec<_>>(), 0..=t),
                Just(seed),
                Just(rule),
                Just(style),
            )
        })
        .prop_flat_map(|(t, keys, seed, rule, style)| {
            let n = keys.len();
            (Just(t), Just(keys), Just(seed), Just(rule), Just(style), 0..=n)
        })
        .prop_map(|(t, key_indices, seed, rule, filler_style, threshold)| PlantedSpec {
            t,
            rule: match rule {
                0 => PlantedRule::SumOfKeys,
                1 => PlantedRule::AllOfKeysRequired,
                _ => PlantedRule::AnyKOfKeys { threshold },
            },
            key_indices,
            filler_style,
            seed,
        })
}

fn build(spec: &PlantedSpec) -> (tracecore::Trace, CachedOracle) {
    let (trace, oracle) = generate(spec).unwrap();
    (trace, CachedOracle::from_spec(&oracle).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exhaustive_matches_brute_force(spec in spec_strategy()) {
        let (trace, oracle) = build(&spec);
        let exact = exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 14).unwrap();
        let expected = brute_force_minimum(&spec);
        prop_assert_eq!(exact.core.indices(), expected.as_slice());
    }

    #[test]
    fn greedy_core_is_sufficient_irreducible_and_bounded(spec in spec_strategy()) {
        let (trace, oracle) = build(&spec);
        let judge = Judge::new(&oracle, &trace, SufficiencyCriterion::Answer);
        let r = greedy_with_judge(&judge).unwrap();
        prop_assert!(sufficient(&spec, r.core.indices()));
        for &s in r.core.indices() {
            prop_assert!(!sufficient(&spec, r.core.without(s).indices()));
        }
        prop_assert!(r.core.len() >= brute_force_minimum(&spec).len());
        let t = spec.t;
        prop_assert!(r.sufficiency_checks <= t * (t + 1) / 2 + t);
        // Every point on the deletion path is sufficient and nested.
        for k in 0..=r.path.len() {
            let point = r.path_point(k);
            prop_assert_eq!(point.len(), t - k);
            prop_assert!(sufficient(&spec, point.indices()));
        }
        prop_assert_eq!(r.path_point(r.path.len()), r.core);
    }

    #[test]
    fn necessity_guided_core_is_sufficient(spec in spec_strategy()) {
        let (trace, oracle) = build(&spec);
        let profile = necessity_profile(&trace, &oracle).unwrap();
        let judge = Judge::new(&oracle, &trace, SufficiencyCriterion::Answer);
        let r = necessity_guided_with_judge(&judge, &profile).unwrap();
        prop_assert!(sufficient(&spec, r.core.indices()));
        prop_assert!(r.sufficiency_checks <= spec.t + 1);
    }

    #[test]
    fn random_deletion_removes_floor_of_rate(spec in spec_strategy(), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let (trace, oracle) = build(&spec);
        let a = random_deletion(&trace, &oracle, SufficiencyCriterion::Answer, rate, seed).unwrap();
        let b = random_deletion(&trace, &oracle, SufficiencyCriterion::Answer, rate, seed).unwrap();
        prop_assert_eq!(&a.core, &b.core);
        prop_assert_eq!(spec.t - a.core.len(), (rate * spec.t as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(a.sufficient, sufficient(&spec, a.core.indices()));
    }

    #[test]
    fn budget_match_picks_nearest_path_point(spec in spec_strategy(), budget in 0.0f64..=1.0) {
        let (trace, oracle) = build(&spec);
        let r = greedy_with_judge(&Judge::new(&oracle, &trace, SufficiencyCriterion::Answer)).unwrap();
        let s = budget_matched_subset(&r, budget).unwrap();
        let k = spec.t - s.len();
        let gap = (k as f64 - budget * spec.t as f64).abs();
        for j in 0..=r.path.len() {
            let other = (j as f64 - budget * spec.t as f64).abs();
            prop_assert!(gap <= other + 1e-9);
            if (other - gap).abs() <= 1e-9 {
                prop_assert!(k <= j);
            }
        }
        prop_assert_eq!(s, r.path_point(k));
    }
}

#[test]
fn exhaustive_refuses_long_traces() {
    let spec = PlantedSpec { t: 15, key_indices: vec![0], rule: PlantedRule::SumOfKeys, filler_style: 0, seed: 1 };
    let (trace, oracle) = build(&spec);
    assert!(exhaustive_minimum(&trace, &oracle, SufficiencyCriterion::Answer, 14).is_err());
}
