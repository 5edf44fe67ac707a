use serde::{Deserialize, Serialize};
use tracecore::answers_match;
use tracecore::extraction::{budget_matched_subset, greedy_with_judge, necessity_blind, random_deletion};
use tracecore::Judge;

use super::{answer_of, check_full, profile_for, skip, Outcome, Session, Skipped};
use crate::config::VERSION;
use crate::error::Result;
use crate::report::Stat;

pub const GREEDY_PATH: &str = "greedy_path";
pub const NECESSITY_BLIND: &str = "necessity_blind";
pub const RANDOM: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub version: String,
    pub trace_id: String,
    pub budget: f64,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub removal_fraction: f64,
    pub retention: bool,
}

/// Mean retention for one (budget, method) pair. Random deletion is
/// averaged per seed first, so its spread is across seeds; the other
/// methods spread across traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub budget: f64,
    pub method: String,
    pub retention: Stat,
    pub spread_over: String,
    pub mean_removal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub table: Vec<SweepCell>,
    pub outcome: Outcome,
}

impl SweepReport {
    pub fn cell(&self, budget: f64, method: &str) -> Option<&SweepCell> {
        self.table.iter().find(|c| c.method == method && (c.budget - budget).abs() < 1e-9)
    }
}

/// Retention at matched removal budgets for the greedy deletion path,
/// necessity-blind pruning, and seeded random deletion.
pub fn run_budget_sweep(session: &Session) -> Result<SweepReport> {
    let cfg = &session.config;
    let oracle = &session.oracles[0];
    let budgets = &cfg.extraction.budgets;
    let seeds = cfg.seeds();
    let row = |trace_id: &str, budget: f64, method: &str, seed: Option<u64>, removal_fraction: f64, retention: bool| {
        SweepRow {
            config_hash: session.hash.clone(),
            version: VERSION.to_string(),
            trace_id: trace_id.to_string(),
            budget,
            method: method.to_string(),
            seed,
            removal_fraction,
            retention,
        }
    };

    let per_trace: Vec<std::result::Result<Vec<SweepRow>, Skipped>> = session.par_map(|_, record| {
        let trace = &record.trace;
        let reference = trace.full_answer.as_str();
        check_full(trace, oracle, cfg.criterion).map_err(|r| skip(trace, r))?;
        let run = || -> tracecore::Result<Vec<SweepRow>> {
            let greedy = greedy_with_judge(&Judge::new(oracle, trace, cfg.criterion))?;
            let profile = profile_for(trace, oracle, reference);
            let keeps =
                |s: &tracecore::Subset| answer_of(trace, oracle, s, reference).map(|a| answers_match(&a, reference));
            let mut out = Vec::new();
            for &b in budgets {
                let s = budget_matched_subset(&greedy, b)?;
                out.push(row(&trace.id, b, GREEDY_PATH, None, s.removal_fraction(), keeps(&s)?));
                if let Some(p) = &profile {
                    let r = necessity_blind(trace, oracle, cfg.criterion, p, b)?;
                    out.push(row(&trace.id, b, NECESSITY_BLIND, None, r.core.removal_fraction(), keeps(&r.core)?));
                }
                for &seed in &seeds {
                    let r = random_deletion(trace, oracle, cfg.criterion, b, seed)?;
                    out.push(row(&trace.id, b, RANDOM, Some(seed), r.core.removal_fraction(), keeps(&r.core)?));
                }
            }
            Ok(out)
        };
        run().map_err(|e| skip(trace, e))
    });

    let mut rows = Vec::new();
    let mut outcome = Outcome::default();
    for r in per_trace {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(s) => outcome.skipped.push(s),
        }
    }

    let mut table = Vec::new();
    for &b in budgets {
        for method in [GREEDY_PATH, NECESSITY_BLIND, RANDOM] {
            let cell_rows: Vec<&SweepRow> =
                rows.iter().filter(|r| r.method == method && (r.budget - b).abs() < 1e-12).collect();
            if cell_rows.is_empty() {
                continue;
            }
            let flag = |r: &&SweepRow| f64::from(u8::from(r.retention));
            let (retention, spread_over) = if method == RANDOM {
                let per_seed = seeds.iter().filter_map(|&s| {
                    let v: Vec<f64> = cell_rows.iter().filter(|r| r.seed == Some(s)).map(flag).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                });
                (Stat::of(per_seed), "seeds")
            } else {
                (Stat::of(cell_rows.iter().map(flag)), "traces")
            };
            let mean_removal_fraction =
                cell_rows.iter().map(|r| r.removal_fraction).sum::<f64>() / cell_rows.len() as f64;
            table.push(SweepCell {
                budget: b,
                method: method.to_string(),
                retention: retention.expect("non-empty cell"),
                spread_over: spread_over.to_string(),
                mean_removal_fraction,
            });
        }
    }

    let writer = session.writer("sweep")?;
    outcome.add(writer.jsonl("rows.jsonl", &rows)?);
    outcome.add(writer.csv(
        "table.csv",
        &["budget", "method", "retention_mean", "retention_std", "n", "spread_over", "mean_removal_fraction"],
        table.iter().map(|c| {
            vec![
                c.budget.to_string(),
                c.method.clone(),
                c.retention.mean.to_string(),
                c.retention.std.to_string(),
                c.retention.n.to_string(),
                c.spread_over.clone(),
                c.mean_removal_fraction.to_string(),
            ]
        }),
    )?);
    outcome.write_skipped(&writer)?;
    Ok(SweepReport { rows, table, outcome })
}
