use serde::{Deserialize, Serialize};
use tracecore::metrics::{gini, nmass_k, NecessitySource};

use super::{profile_for, skip, Outcome, Session, Skipped};
use crate::config::VERSION;
use crate::error::Result;
use crate::report::{stat_cells, Stat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessityRow {
    pub config_hash: String,
    pub version: String,
    pub trace_id: String,
    pub t: usize,
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
    pub source: NecessitySource,
    /// `NMass_k` for `k = 1..=T`.
    pub cumulative_mass: Vec<f64>,
    pub gini: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NecessityReport {
    pub rows: Vec<NecessityRow>,
    pub outcome: Outcome,
}

/// Leave-one-out necessity profiles under the first oracle.
pub fn run_necessity(session: &Session) -> Result<NecessityReport> {
    let oracle = &session.oracles[0];
    let per_trace: Vec<std::result::Result<NecessityRow, Skipped>> = session.par_map(|_, record| {
        let trace = &record.trace;
        let p = profile_for(trace, oracle, &trace.full_answer)
            .ok_or_else(|| skip(trace, "oracle returned neither losses nor harm signals"))?;
        Ok(NecessityRow {
            config_hash: session.hash.clone(),
            version: VERSION.to_string(),
            trace_id: trace.id.clone(),
            t: p.len(),
            cumulative_mass: (1..=p.len()).map(|k| nmass_k(&p, k)).collect(),
            gini: gini(&p).ok(),
            degenerate: p.degenerate,
            source: p.source,
            deltas: p.deltas,
            weights: p.weights,
        })
    });
    let mut rows = Vec::new();
    let mut outcome = Outcome::default();
    for r in per_trace {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => outcome.skipped.push(s),
        }
    }
    let writer = session.writer("necessity")?;
    outcome.add(writer.jsonl("profiles.jsonl", &rows)?);
    let live: Vec<&NecessityRow> = rows.iter().filter(|r| !r.degenerate).collect();
    let mass = |k: usize| {
        Stat::of(live.iter().map(|r| r.cumulative_mass.get(k - 1).or(r.cumulative_mass.last()).copied().unwrap_or(0.0)))
    };
    let mut record = vec![rows.len().to_string(), (rows.len() - live.len()).to_string()];
    for s in [mass(1), mass(3), mass(5), Stat::of(live.iter().filter_map(|r| r.gini))] {
        record.extend(stat_cells(s));
    }
    outcome.add(writer.csv(
        "aggregate.csv",
        &[
            "n",
            "degenerate",
            "nmass1_mean",
            "nmass1_std",
            "nmass3_mean",
            "nmass3_std",
            "nmass5_mean",
            "nmass5_std",
            "gini_mean",
            "gini_std",
        ],
        [record],
    )?);
    outcome.write_skipped(&writer)?;
    Ok(NecessityReport { rows, outcome })
}
