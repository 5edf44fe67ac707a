use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracecore::sufficiency::KlDirection;
use tracecore::trace::SegmentationKind;
use tracecore::{CachedOracle, SufficiencyCriterion, Trace};

use super::{build_row, check_full, extract_core, profile_for, skip, Outcome, RowContext, Session, Skipped};
use crate::config::VERSION;
use crate::error::{HarnessError, Result};
use crate::report::{Aggregate, ReportRow, Stat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AblationAxis {
    CriterionEpsilon,
    Segmentation,
    DifficultyTag,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::CriterionEpsilon => "criterion_epsilon",
            AblationAxis::Segmentation => "segmentation",
            AblationAxis::DifficultyTag => "difficulty_tag",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_epsilon")]
    pub epsilon: Option<f64>,
    pub mean_t: f64,
    pub aggregate: Aggregate,
}

mod opt_epsilon {
    use serde::{Deserialize, Deserializer, Serializer};
    use tracecore::sufficiency::epsilon_serde;

    #[derive(Deserialize)]
    struct Wrapped(#[serde(with = "epsilon_serde")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => epsilon_serde::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrapped>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub version: String,
    pub axis: AblationAxis,
    pub strata: Vec<Stratum>,
    /// Whether CR moves in the expected direction across strata: up with
    /// stricter tolerance, down with finer segmentation. Not defined for
    /// difficulty tags.
    pub monotone: Option<bool>,
    #[serde(skip)]
    pub outcome: Outcome,
}

fn extract_stratum(
    session: &Session,
    traces: &[std::result::Result<Trace, Skipped>],
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
) -> (Vec<ReportRow>, Vec<Skipped>) {
    let cfg = &session.config;
    let name = cfg.oracles[0].name();
    let ctx = RowContext {
        config_hash: &session.hash,
        oracle_name: &name,
        criterion,
        gamma: cfg.extraction.gamma,
        record_runtime: false,
    };
    let method = cfg.extraction.method;
    let seed = cfg.seeds().first().copied();
    let results: Vec<std::result::Result<ReportRow, Skipped>> = session.par_map(|i, _| {
        let trace = traces[i].as_ref().map_err(Clone::clone)?;
        check_full(trace, oracle, criterion).map_err(|r| skip(trace, r))?;
        let profile = profile_for(trace, oracle, &trace.full_answer);
        extract_core(trace, oracle, criterion, &cfg.extraction, method, seed, profile.as_ref())
            .and_then(|r| build_row(&ctx, trace, oracle, &r, profile.as_ref(), Instant::now()))
            .map_err(|e| skip(trace, e))
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => skipped.push(s),
        }
    }
    (rows, skipped)
}

fn stratum(label: String, epsilon: Option<f64>, session: &Session, rows: &[ReportRow]) -> Stratum {
    let refs: Vec<&ReportRow> = rows.iter().collect();
    Stratum {
        label,
        epsilon,
        mean_t: Stat::of(rows.iter().map(|r| r.t as f64)).map_or(0.0, |s| s.mean),
        aggregate: Aggregate::of(session.config.extraction.method, &refs),
    }
}

fn cr(s: &Stratum) -> f64 {
    s.aggregate.cr.map_or(f64::NAN, |c| c.mean)
}

/// Re-runs extraction per setting of one axis and reports CR, RM,
/// retention and Top-3 mass per stratum.
pub fn run_ablation(session: &Session, axis: AblationAxis) -> Result<AblationReport> {
    let cfg = &session.config;
    let all: Vec<std::result::Result<Trace, Skipped>> = session.corpus.traces().cloned().map(Ok).collect();
    let mut strata = Vec::new();
    let mut outcome = Outcome::default();
    let monotone = match axis {
        AblationAxis::CriterionEpsilon => {
            let direction = match cfg.criterion {
                SufficiencyCriterion::Distribution { direction, .. } => direction,
                SufficiencyCriterion::Answer => KlDirection::default(),
            };
            let oracle = CachedOracle::from_spec(&cfg.oracles[0])
                .map_err(HarnessError::OracleUnavailable)?
                .with_distributions(true);
            let mut eps = cfg.ablation.epsilons.clone();
            eps.sort_by(|a, b| b.total_cmp(a));
            for e in eps {
                let (rows, skipped) = extract_stratum(
                    session,
                    &all,
                    &oracle,
                    SufficiencyCriterion::Distribution { epsilon: e, direction },
                );
                outcome.skipped.extend(skipped);
                strata.push(stratum(epsilon_label(e), Some(e), session, &rows));
            }
            // Tolerances run from loose to strict, so CR must not decrease.
            Some(strata.windows(2).all(|w| cr(&w[1]) >= cr(&w[0]) - 1e-12))
        }
        AblationAxis::Segmentation => {
            if session.corpus.records.iter().any(|r| r.raw_trace.is_none()) {
                return Err(HarnessError::MissingMetadata("segmentation ablation needs raw_trace on every row".into()));
            }
            for rule in &cfg.ablation.segmentations {
                let traces: Vec<std::result::Result<Trace, Skipped>> =
                    session.corpus.records.iter().map(|r| r.resegment(rule).map_err(|e| skip(&r.trace, e))).collect();
                let (rows, skipped) = extract_stratum(session, &traces, &session.oracles[0], cfg.criterion);
                outcome.skipped.extend(skipped);
                let kind = match rule.kind {
                    SegmentationKind::Numbered => "numbered",
                    SegmentationKind::Sentence => "sentence",
                    SegmentationKind::Paragraph => "paragraph",
                };
                strata.push(stratum(format!("{kind}/merge{}", rule.merge_min_chars), None, session, &rows));
            }
            // Coarse to fine by mean step count; CR must not increase.
            strata.sort_by(|a, b| a.mean_t.total_cmp(&b.mean_t));
            Some(strata.windows(2).all(|w| cr(&w[1]) <= cr(&w[0]) + 1e-12))
        }
        AblationAxis::DifficultyTag => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, t) in session.corpus.traces().enumerate() {
                let tag = match t.metadata.get("difficulty") {
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(v @ serde_json::Value::Number(_)) => v.to_string(),
                    _ => return Err(HarnessError::MissingMetadata(format!("trace {} has no difficulty tag", t.id))),
                };
                groups.entry(tag).or_default().push(i);
            }
            let (rows, skipped) = extract_stratum(session, &all, &session.oracles[0], cfg.criterion);
            outcome.skipped.extend(skipped);
            for (tag, members) in groups {
                let ids: Vec<&str> = members.iter().map(|&i| session.corpus.records[i].trace.id.as_str()).collect();
                let in_stratum: Vec<ReportRow> =
                    rows.iter().filter(|r| ids.contains(&r.trace_id.as_str())).cloned().collect();
                strata.push(stratum(tag, None, session, &in_stratum));
            }
            None
        }
    };
    outcome.skipped.sort_by(|a, b| a.trace_id.cmp(&b.trace_id).then(a.reason.cmp(&b.reason)));
    outcome.skipped.dedup();

    let report = AblationReport {
        config_hash: session.hash.clone(),
        version: VERSION.to_string(),
        axis,
        strata,
        monotone,
        outcome: Outcome::default(),
    };
    let writer = session.writer("ablation")?;
    outcome.files.push(writer.json(&format!("{}.json", axis.as_str()), &report)?);
    let cell = |s: Option<Stat>| s.map(|s| s.mean.to_string()).unwrap_or_default();
    outcome.add(writer.csv(
        &format!("{}.csv", axis.as_str()),
        &["stratum", "n", "mean_t", "cr_mean", "cr_std", "rm_mean", "retention_mean", "top3_mean"],
        report.strata.iter().map(|s| {
            let a = &s.aggregate;
            vec![
                s.label.clone(),
                a.n.to_string(),
                s.mean_t.to_string(),
                cell(a.cr),
                a.cr.map(|c| c.std.to_string()).unwrap_or_default(),
                cell(a.rm),
                cell(a.retention),
                cell(a.top3),
            ]
        }),
    )?);
    outcome.write_skipped(&writer)?;
    Ok(AblationReport { outcome, ..report })
}

fn epsilon_label(e: f64) -> String {
    if e.is_infinite() {
        "eps=inf".to_string()
    } else {
        format!("eps={e}")
    }
}
