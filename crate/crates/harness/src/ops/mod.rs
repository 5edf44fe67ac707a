//! Batch operations behind the CLI subcommands.

mod ablation;
mod extract;
mod geometry;
mod necessity;
mod plot;
mod sweep;
mod transfer;

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracecore::extraction::{
    exhaustive_minimum, greedy_with_judge, necessity_blind, necessity_guided_with_judge, random_deletion, CoreResult,
    Method,
};
use tracecore::metrics::{
    gini, necessity_profile_with, nmass_k, overcompleteness_certificate, signal_profile, sparse_necessity_certificate,
    NecessityProfile, DEFAULT_ETA,
};
use tracecore::{answers_match, CachedOracle, Judge, Subset, SufficiencyCriterion, Trace};

pub use ablation::{run_ablation, AblationAxis, AblationReport, Stratum};
pub use extract::{run_extract, ExtractReport};
pub use geometry::{run_geometry, GeometryFile, GeometryRun};
pub use necessity::{run_necessity, NecessityReport, NecessityRow};
pub use plot::{emit_plot_data, least_squares, PlotReport};
pub use sweep::{run_budget_sweep, SweepCell, SweepReport, SweepRow};
pub use transfer::{run_transfer, TransferReport};

use crate::config::{ExtractionConfig, RunConfig, VERSION};
use crate::corpus::{Corpus, CorpusRecord};
use crate::error::{HarnessError, Result};
use crate::report::{ReportRow, ReportWriter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub trace_id: String,
    pub reason: String,
}

/// Loaded corpus, built oracles and a bounded worker pool for one config.
pub struct Session {
    pub config: RunConfig,
    pub hash: String,
    pub corpus: Corpus,
    pub oracles: Vec<CachedOracle>,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::load(&config.corpus, &config.segmentation, config.seed)?;
        let want = config.criterion.needs_distributions();
        let oracles = config
            .oracles
            .iter()
            .map(|spec| CachedOracle::from_spec(spec).map(|o| o.with_distributions(want)))
            .collect::<tracecore::Result<Vec<_>>>()
            .map_err(HarnessError::OracleUnavailable)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        std::fs::create_dir_all(&config.out_dir).map_err(HarnessError::io(&config.out_dir))?;
        config.save(&config.out_dir.join("config.json"))?;
        Ok(Self { hash: config.hash(), config, corpus, oracles, pool })
    }

    pub fn writer(&self, sub: &str) -> Result<ReportWriter> {
        ReportWriter::new(
            self.config.out_dir.join(sub),
            self.hash.clone(),
            VERSION.to_string(),
            self.config.formats.clone(),
        )
    }

    /// Maps over corpus records on the worker pool, preserving corpus order.
    pub fn par_map<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &CorpusRecord) -> T + Sync + Send,
    {
        self.pool.install(|| self.corpus.records.par_iter().enumerate().map(|(i, r)| f(i, r)).collect())
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

pub(crate) fn skip(trace: &Trace, reason: impl ToString) -> Skipped {
    let reason = reason.to_string();
    log::warn!("skipping trace {}: {reason}", trace.id);
    Skipped { trace_id: trace.id.clone(), reason }
}

/// Fails when the oracle does not reproduce the recorded answer from the
/// full trace under `criterion`.
pub(crate) fn check_full(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
) -> std::result::Result<(), String> {
    let judge = Judge::new(oracle, trace, criterion);
    match judge.is_sufficient(&trace.full_subset()) {
        Ok(true) => Ok(()),
        Ok(false) => {
            let got = judge.response(&trace.full_subset()).map(|r| r.answer).unwrap_or_default();
            Err(format!("full trace is not sufficient (oracle answered {got:?}, recorded {:?})", trace.full_answer))
        }
        Err(e) => Err(e.to_string()),
    }
}

/// Loss-based necessity profile, falling back to harm signals.
pub(crate) fn profile_for(trace: &Trace, oracle: &CachedOracle, reference: &str) -> Option<NecessityProfile> {
    necessity_profile_with(trace, oracle, reference, DEFAULT_ETA)
        .or_else(|_| signal_profile(trace, oracle, reference))
        .ok()
}

pub(crate) fn answer_of(
    trace: &Trace,
    oracle: &CachedOracle,
    subset: &Subset,
    reference: &str,
) -> tracecore::Result<String> {
    Ok(oracle.query_subset(trace, subset, Some(reference))?.answer)
}

pub(crate) fn extract_core(
    trace: &Trace,
    oracle: &CachedOracle,
    criterion: SufficiencyCriterion,
    cfg: &ExtractionConfig,
    method: Method,
    seed: Option<u64>,
    profile: Option<&NecessityProfile>,
) -> tracecore::Result<CoreResult> {
    let judge = Judge::new(oracle, trace, criterion);
    match method {
        Method::Greedy => greedy_with_judge(&judge),
        Method::NecessityGuided => {
            necessity_guided_with_judge(&judge, profile.ok_or(tracecore::Error::LossUnavailable)?)
        }
        Method::NecessityBlind => necessity_blind(
            trace,
            oracle,
            criterion,
            profile.ok_or(tracecore::Error::LossUnavailable)?,
            cfg.removal_rate,
        ),
        Method::Random => random_deletion(trace, oracle, criterion, cfg.removal_rate, seed.unwrap_or(0)),
        Method::Exhaustive => exhaustive_minimum(trace, oracle, criterion, cfg.max_exhaustive_len),
    }
}

pub(crate) struct RowContext<'a> {
    pub config_hash: &'a str,
    pub oracle_name: &'a str,
    pub criterion: SufficiencyCriterion,
    pub gamma: f64,
    pub record_runtime: bool,
}

pub(crate) fn build_row(
    ctx: &RowContext<'_>,
    trace: &Trace,
    oracle: &CachedOracle,
    result: &CoreResult,
    profile: Option<&NecessityProfile>,
    started: Instant,
) -> tracecore::Result<ReportRow> {
    let reference = trace.full_answer.as_str();
    let retained = answer_of(trace, oracle, &result.core, reference)?;
    let (cr, rm) = tracecore::metrics::compression(&result.core);
    let usable = profile.filter(|p| !p.degenerate);
    let mut certificates = Vec::new();
    if result.sufficient && !result.core.is_full() {
        let deletion = result.core.complement();
        if let Some(c) = overcompleteness_certificate(trace, oracle, ctx.criterion, deletion.indices())? {
            certificates.push(c);
        }
    }
    if let Some(p) = usable {
        if let Some(c) = sparse_necessity_certificate(p, result.core.indices(), ctx.gamma)? {
            certificates.push(c);
        }
    }
    Ok(ReportRow {
        config_hash: ctx.config_hash.to_string(),
        version: VERSION.to_string(),
        trace_id: trace.id.clone(),
        method: result.method,
        seed: result.seed,
        oracle: ctx.oracle_name.to_string(),
        t: trace.len(),
        core_len: result.core.len(),
        cr,
        rm,
        core: result.core.indices().to_vec(),
        reference_answer: reference.to_string(),
        retention: answers_match(&retained, reference),
        retained_answer: retained,
        sufficient: result.sufficient,
        irreducible: result.irreducible,
        nmass_1: usable.map(|p| nmass_k(p, 1)),
        nmass_3: usable.map(|p| nmass_k(p, 3)),
        nmass_5: usable.map(|p| nmass_k(p, 5)),
        gini: usable.and_then(|p| gini(p).ok()),
        certificates,
        checks: result.sufficiency_checks,
        runtime_ms: ctx.record_runtime.then(|| started.elapsed().as_secs_f64() * 1e3),
    })
}

/// Result files of a run plus the traces that were left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub skipped: Vec<Skipped>,
}

impl Outcome {
    pub fn add(&mut self, path: Option<PathBuf>) {
        self.files.extend(path);
    }

    pub fn exit_code(&self) -> i32 {
        if self.skipped.is_empty() {
            0
        } else {
            1
        }
    }

    pub(crate) fn write_skipped(&mut self, writer: &ReportWriter) -> Result<()> {
        if !self.skipped.is_empty() {
            let path = writer.path("skipped.jsonl");
            crate::corpus::write_jsonl(&path, &self.skipped)?;
            self.files.push(path);
        }
        Ok(())
    }
}
