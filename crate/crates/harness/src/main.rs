use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use harness::config::RunConfig;
use harness::corpus::{paired_raw_text, write_corpus, write_embeddings, write_jsonl, CorpusRecord};
use harness::error::{HarnessError, Result};
use harness::ops::{
    emit_plot_data, run_ablation, run_budget_sweep, run_extract, run_geometry, run_necessity, run_transfer,
    AblationAxis, Outcome, Session,
};
use tracecore::synth::{generate_corpus, CorpusDistribution, RuleTemplate};

#[derive(Parser)]
#[command(name = "tracecore", version, about = "Minimal sufficient cores of reasoning traces")]
struct Cli {
    /// Run configuration, JSON or TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed offset added to every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Endpoint for the HTTP oracle.
    #[arg(long, global = true)]
    oracle_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract cores with the configured method.
    Extract,
    /// Retention at matched removal budgets.
    Sweep,
    /// Leave-one-out necessity profiles.
    Necessity,
    /// Representation geometry of full, core, removed and weighted embeddings.
    Geometry,
    /// Cross-oracle transfer of extracted cores.
    Transfer,
    /// Re-run extraction along one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
    /// Generate a planted corpus with embeddings and specs.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 12, 16])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25f64, 0.5])]
        key_fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec!["sum".to_string(), "all".to_string(), "any_k".to_string()])]
        rules: Vec<String>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Flatten existing reports into plotting CSVs.
    PlotData {
        /// Report directory; defaults to `--out` or the config's output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(url) = &cli.oracle_url {
        config.override_oracle_url(url);
    }
    Ok(config)
}

fn parse_rule(name: &str) -> Result<RuleTemplate> {
    match name.trim() {
        "sum" => Ok(RuleTemplate::Sum),
        "all" => Ok(RuleTemplate::All),
        "any_k" | "anyk" | "any" => Ok(RuleTemplate::AnyK),
        other => Err(HarnessError::Config(format!("unknown rule {other:?}; expected sum, all or any_k"))),
    }
}

fn report(outcome: &Outcome) -> i32 {
    for f in &outcome.files {
        println!("{}", f.display());
    }
    if !outcome.skipped.is_empty() {
        eprintln!("{} trace(s) skipped", outcome.skipped.len());
    }
    outcome.exit_code()
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth { n, lengths, key_fractions, rules, dim } => {
            let dist = CorpusDistribution {
                lengths: lengths.clone(),
                key_fractions: key_fractions.clone(),
                rules: rules.iter().map(|r| parse_rule(r)).collect::<Result<_>>()?,
                filler_styles: vec![0, 1, 2],
                embedding_dim: *dim,
                ..CorpusDistribution::fixed(1, 1, RuleTemplate::Sum)
            };
            let corpus =
                generate_corpus(*n, &dist, cli.seed.unwrap_or(0)).map_err(|e| HarnessError::Config(e.to_string()))?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            std::fs::create_dir_all(&out).map_err(HarnessError::io(&out))?;
            let records: Vec<CorpusRecord> = corpus
                .traces
                .iter()
                .map(|t| CorpusRecord { trace: t.clone(), raw_trace: Some(paired_raw_text(t)) })
                .collect();
            write_corpus(&out.join("corpus.jsonl"), &records)?;
            write_embeddings(&out.join("embeddings.jsonl"), &corpus.traces, &corpus.embeddings)?;
            write_jsonl(&out.join("specs.jsonl"), &corpus.specs)?;
            for f in ["corpus.jsonl", "embeddings.jsonl", "specs.jsonl"] {
                println!("{}", out.join(f).display());
            }
            Ok(0)
        }
        Command::PlotData { dir } => {
            let dir = match (dir, &cli.out) {
                (Some(d), _) => d.clone(),
                (None, Some(o)) => o.clone(),
                (None, None) => load_config(cli)?.out_dir,
            };
            let r = emit_plot_data(&dir)?;
            for f in &r.files {
                println!("{}", f.display());
            }
            for m in &r.missing {
                log::info!("no report at {}", m.display());
            }
            Ok(0)
        }
        cmd => {
            let session = Session::open(load_config(cli)?)?;
            let outcome = match cmd {
                Command::Extract => run_extract(&session)?.outcome,
                Command::Sweep => run_budget_sweep(&session)?.outcome,
                Command::Necessity => run_necessity(&session)?.outcome,
                Command::Geometry => run_geometry(&session)?.outcome,
                Command::Transfer => run_transfer(&session)?.outcome,
                Command::Ablate { axis } => run_ablation(&session, *axis)?.outcome,
                Command::Synth { .. } | Command::PlotData { .. } => unreachable!("handled above"),
            };
            Ok(report(&outcome))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
