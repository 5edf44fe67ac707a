use std::time::Instant;

use tracecore::extraction::Method;

use super::{build_row, check_full, extract_core, profile_for, skip, Outcome, RowContext, Session, Skipped};
use crate::error::Result;
use crate::report::{aggregate, Aggregate, ReportRow};

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub outcome: Outcome,
}

/// Extracts a core per trace (one per seed for random deletion) with the
/// first configured oracle.
pub fn run_extract(session: &Session) -> Result<ExtractReport> {
    let cfg = &session.config;
    let oracle = &session.oracles[0];
    let oracle_name = cfg.oracles[0].name();
    let method = cfg.extraction.method;
    let seeds: Vec<Option<u64>> =
        if method == Method::Random { cfg.seeds().into_iter().map(Some).collect() } else { vec![None] };
    let ctx = RowContext {
        config_hash: &session.hash,
        oracle_name: &oracle_name,
        criterion: cfg.criterion,
        gamma: cfg.extraction.gamma,
        record_runtime: cfg.record_runtime,
    };

    let per_trace: Vec<std::result::Result<Vec<ReportRow>, Skipped>> = session.par_map(|_, record| {
        let trace = &record.trace;
        let started = Instant::now();
        check_full(trace, oracle, cfg.criterion).map_err(|r| skip(trace, r))?;
        let profile = profile_for(trace, oracle, &trace.full_answer);
        seeds
            .iter()
            .map(|&seed| {
                let result =
                    extract_core(trace, oracle, cfg.criterion, &cfg.extraction, method, seed, profile.as_ref())?;
                build_row(&ctx, trace, oracle, &result, profile.as_ref(), started)
            })
            .collect::<tracecore::Result<Vec<_>>>()
            .map_err(|e| skip(trace, e))
    });

    let mut rows = Vec::new();
    let mut outcome = Outcome::default();
    for r in per_trace {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(s) => outcome.skipped.push(s),
        }
    }
    let aggregates = aggregate(&rows);
    let writer = session.writer("extract")?;
    outcome.add(writer.jsonl("rows.jsonl", &rows)?);
    outcome.add(writer.aggregates("aggregate.csv", &aggregates)?);
    outcome.write_skipped(&writer)?;
    Ok(ExtractReport { rows, aggregates, outcome })
}
