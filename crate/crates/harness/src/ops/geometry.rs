use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tracecore::extraction::Method;
use tracecore::geometry::{
    embed_steps, geometry_report, trace_embeddings, GeometryReport, HashEmbedder, Measured, TraceEmbeddings,
};
use tracecore::metrics::{NecessityProfile, DEFAULT_ETA};

use super::{check_full, extract_core, profile_for, skip, Outcome, Session, Skipped};
use crate::config::{EmbedderSource, VERSION};
use crate::corpus::read_embeddings;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryFile {
    pub config_hash: String,
    pub version: String,
    pub traces: usize,
    pub report: GeometryReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryRun {
    pub file: GeometryFile,
    pub outcome: Outcome,
}

enum Vectors {
    Planted,
    File(BTreeMap<String, Vec<Vec<f64>>>),
    Hash(HashEmbedder),
}

fn resolve_embedder(session: &Session) -> Result<Vectors> {
    let source = match &session.config.embedder {
        Some(s) => s.clone(),
        None if session.corpus.planted.is_some() => EmbedderSource::Planted,
        None => return Err(HarnessError::MissingEmbeddings("no embedder configured".into())),
    };
    Ok(match source {
        EmbedderSource::Planted => {
            if session.corpus.planted.is_none() {
                return Err(HarnessError::MissingEmbeddings("planted embeddings need a synthetic corpus".into()));
            }
            Vectors::Planted
        }
        EmbedderSource::File { path } => Vectors::File(read_embeddings(&path)?),
        EmbedderSource::Hash { dim, ngram } => Vectors::Hash(HashEmbedder { dim, ngram }),
    })
}

/// Group geometry of full traces, cores, removed steps and
/// necessity-weighted embeddings over labelled traces.
pub fn run_geometry(session: &Session) -> Result<GeometryRun> {
    let cfg = &session.config;
    let oracle = &session.oracles[0];
    if session.corpus.traces().all(|t| t.correct_label.is_none()) {
        return Err(HarnessError::MissingLabels);
    }
    let vectors = resolve_embedder(session)?;
    if let Vectors::File(map) = &vectors {
        for t in session.corpus.traces() {
            match map.get(&t.id) {
                Some(v) if v.len() == t.len() => {}
                Some(v) => {
                    return Err(HarnessError::MissingEmbeddings(format!(
                        "trace {} has {} steps but {} vectors",
                        t.id,
                        t.len(),
                        v.len()
                    )))
                }
                None => return Err(HarnessError::MissingEmbeddings(format!("no vectors for trace {}", t.id))),
            }
        }
    }
    let method = cfg.extraction.method;
    let seed = (method == Method::Random).then(|| cfg.seeds()[0]);

    let per_trace: Vec<std::result::Result<(TraceEmbeddings, bool), Skipped>> = session.par_map(|i, record| {
        let trace = &record.trace;
        let label = trace.correct_label.ok_or_else(|| skip(trace, "no correctness label"))?;
        check_full(trace, oracle, cfg.criterion).map_err(|r| skip(trace, r))?;
        let step_vecs = match &vectors {
            Vectors::Planted => session.corpus.planted.as_ref().expect("checked").embeddings[i].clone(),
            Vectors::File(map) => map[&trace.id].clone(),
            Vectors::Hash(e) => embed_steps(trace, e).map_err(|e| skip(trace, e))?,
        };
        let profile = profile_for(trace, oracle, &trace.full_answer)
            .unwrap_or_else(|| NecessityProfile::from_deltas(vec![0.0; trace.len()], DEFAULT_ETA));
        let result = extract_core(trace, oracle, cfg.criterion, &cfg.extraction, method, seed, Some(&profile))
            .map_err(|e| skip(trace, e))?;
        let e = trace_embeddings(&step_vecs, &result.core, &profile).map_err(|e| skip(trace, e))?;
        Ok((e, label))
    });

    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    let mut outcome = Outcome::default();
    for r in per_trace {
        match r {
            Ok((e, l)) => {
                embeddings.push(e);
                labels.push(l);
            }
            Err(s) => outcome.skipped.push(s),
        }
    }
    let report = geometry_report(&embeddings, &labels, cfg.split_seed(), cfg.geometry.knn_k)?;
    let file = GeometryFile {
        config_hash: session.hash.clone(),
        version: VERSION.to_string(),
        traces: embeddings.len(),
        report,
    };

    let writer = session.writer("geometry")?;
    outcome.files.push(writer.json("report.json", &file)?);
    let cell = |m: &Measured| m.value.map(|v| v.to_string()).unwrap_or_default();
    outcome.add(writer.csv(
        "groups.csv",
        &[
            "group",
            "n",
            "excluded",
            "variance",
            "relative_variance",
            "probe",
            "knn",
            "silhouette",
            "davies_bouldin",
            "intrinsic_dim",
        ],
        file.report.groups.iter().map(|g| {
            vec![
                g.group.as_str().to_string(),
                g.n.to_string(),
                g.excluded.to_string(),
                cell(&g.variance),
                cell(&g.relative_variance),
                cell(&g.probe_accuracy),
                cell(&g.knn_accuracy),
                cell(&g.silhouette),
                cell(&g.davies_bouldin),
                cell(&g.intrinsic_dim),
            ]
        }),
    )?);
    let c = &file.report.cosine;
    outcome.add(
        writer.csv(
            "cosine.csv",
            &["pair", "mean", "std", "n"],
            [
                ("weighted_vs_core", c.weighted_vs_core),
                ("weighted_vs_removed", c.weighted_vs_removed),
                ("full_vs_core", c.full_vs_core),
                ("full_vs_removed", c.full_vs_removed),
            ]
            .into_iter()
            .map(|(name, s)| {
                vec![
                    name.to_string(),
                    s.map(|s| s.mean.to_string()).unwrap_or_default(),
                    s.map(|s| s.std.to_string()).unwrap_or_default(),
                    s.map_or(0, |s| s.n).to_string(),
                ]
            }),
        )?,
    );
    outcome.write_skipped(&writer)?;
    log::info!("geometry over {} traces, {} skipped", file.traces, outcome.skipped.len());
    Ok(GeometryRun { file, outcome })
}
