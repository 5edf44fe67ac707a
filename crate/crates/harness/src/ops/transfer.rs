use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracecore::answers_match;
use tracecore::extraction::Method;
use tracecore::oracle::fnv1a;
use tracecore::sufficiency::fresh_full_answer;
use tracecore::Subset;

use super::{answer_of, check_full, extract_core, profile_for, skip, Outcome, Session, Skipped};
use crate::config::VERSION;
use crate::error::{HarnessError, Result};
use crate::report::Stat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub config_hash: String,
    pub version: String,
    pub oracles: Vec<String>,
    /// `matrix[source][target]`: retention of source cores under the target.
    pub matrix: Vec<Vec<Stat>>,
    pub diagonal_mean: f64,
    pub off_diagonal_mean: f64,
    /// Per target, retention of random subsets with the source cores' lengths.
    pub random_baseline: Vec<Stat>,
    #[serde(skip)]
    pub outcome: Outcome,
}

struct SourceCores {
    /// Per trace, the source core or the reason it is missing.
    cores: Vec<std::result::Result<Subset, Skipped>>,
}

/// Cores extracted under each oracle, scored by every oracle against that
/// oracle's own full-trace answer.
pub fn run_transfer(session: &Session) -> Result<TransferReport> {
    let cfg = &session.config;
    let k = session.oracles.len();
    if k < 2 {
        return Err(HarnessError::Config("transfer needs at least two oracles".into()));
    }
    let method = cfg.extraction.method;
    let seed = (method == Method::Random).then(|| cfg.seeds()[0]);
    let baseline_seed = cfg.seeds().first().copied().unwrap_or(cfg.seed);

    let sources: Vec<SourceCores> = session
        .oracles
        .iter()
        .map(|oracle| SourceCores {
            cores: session.par_map(|_, record| {
                let trace = &record.trace;
                check_full(trace, oracle, cfg.criterion).map_err(|r| skip(trace, r))?;
                let profile = profile_for(trace, oracle, &trace.full_answer);
                extract_core(trace, oracle, cfg.criterion, &cfg.extraction, method, seed, profile.as_ref())
                    .map(|r| r.core)
                    .map_err(|e| skip(trace, e))
            }),
        })
        .collect();

    // Per target and trace: the target's own full-trace answer.
    let references: Vec<Vec<Option<String>>> = session
        .oracles
        .iter()
        .map(|oracle| session.par_map(|_, record| fresh_full_answer(oracle, &record.trace).ok()))
        .collect();

    let mut matrix = vec![Vec::with_capacity(k); k];
    let mut baseline_flags: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (i, source) in sources.iter().enumerate() {
        for (j, target) in session.oracles.iter().enumerate() {
            let flags: Vec<(f64, f64)> = session
                .par_map(|n, record| {
                    let trace = &record.trace;
                    let (Ok(core), Some(reference)) = (&source.cores[n], &references[j][n]) else { return None };
                    let kept = answer_of(trace, target, core, reference).ok().map(|a| answers_match(&a, reference))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(baseline_seed ^ fnv1a(trace.id.as_bytes()) ^ i as u64);
                    let mut random = sample(&mut rng, trace.len(), core.len()).into_vec();
                    random.sort_unstable();
                    let random = Subset::new(random, trace.len()).ok()?;
                    let random_kept =
                        answer_of(trace, target, &random, reference).ok().map(|a| answers_match(&a, reference))?;
                    Some((f64::from(u8::from(kept)), f64::from(u8::from(random_kept))))
                })
                .into_iter()
                .flatten()
                .collect();
            matrix[i].push(Stat::of(flags.iter().map(|f| f.0)).unwrap_or(Stat { mean: 0.0, std: 0.0, n: 0 }));
            baseline_flags[j].extend(flags.iter().map(|f| f.1));
        }
    }
    let diagonal: Vec<f64> = (0..k).map(|i| matrix[i][i].mean).collect();
    let off: Vec<f64> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| matrix[i][j].mean)
        .collect();

    let mut outcome = Outcome::default();
    for s in &sources {
        for c in &s.cores {
            if let Err(skipped) = c {
                if !outcome.skipped.contains(skipped) {
                    outcome.skipped.push(skipped.clone());
                }
            }
        }
    }
    let report = TransferReport {
        config_hash: session.hash.clone(),
        version: VERSION.to_string(),
        oracles: cfg.oracles.iter().map(|o| o.name()).collect(),
        diagonal_mean: diagonal.iter().sum::<f64>() / k as f64,
        off_diagonal_mean: off.iter().sum::<f64>() / off.len() as f64,
        random_baseline: baseline_flags
            .iter()
            .map(|f| Stat::of(f.iter().copied()).unwrap_or(Stat { mean: 0.0, std: 0.0, n: 0 }))
            .collect(),
        matrix,
        outcome: Outcome::default(),
    };

    let writer = session.writer("transfer")?;
    outcome.files.push(writer.json("summary.json", &report)?);
    let mut csv_rows = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let s = report.matrix[i][j];
            csv_rows.push(vec![
                i.to_string(),
                report.oracles[i].clone(),
                j.to_string(),
                report.oracles[j].clone(),
                s.mean.to_string(),
                s.n.to_string(),
            ]);
        }
    }
    for (j, s) in report.random_baseline.iter().enumerate() {
        csv_rows.push(vec![
            String::new(),
            "random".into(),
            j.to_string(),
            report.oracles[j].clone(),
            s.mean.to_string(),
            s.n.to_string(),
        ]);
    }
    outcome.add(writer.csv(
        "matrix.csv",
        &["source", "source_name", "target", "target_name", "retention", "n"],
        csv_rows,
    )?);
    outcome.write_skipped(&writer)?;
    Ok(TransferReport { outcome, ..report })
}
