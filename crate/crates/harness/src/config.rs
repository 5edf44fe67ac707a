use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracecore::extraction::{Method, DEFAULT_MAX_EXHAUSTIVE_LEN};
use tracecore::geometry::DEFAULT_KNN_K;
use tracecore::oracle::{HttpOracleConfig, OracleSpec};
use tracecore::sufficiency::epsilon_serde;
use tracecore::synth::CorpusDistribution;
use tracecore::trace::{SegmentationKind, SegmentationRule};
use tracecore::SufficiencyCriterion;

use crate::error::{HarnessError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    File { path: PathBuf },
    Synth { n: usize, seed: u64, distribution: CorpusDistribution },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSource {
    Hash {
        dim: usize,
        #[serde(default = "default_ngram")]
        ngram: usize,
    },
    /// Embedding JSONL keyed by trace id and step index.
    File { path: PathBuf },
    /// Vectors emitted by the synthetic corpus generator.
    Planted,
}

fn default_ngram() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Seeds for random deletion; each yields its own row.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Removal fractions for budget sweeps.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    /// Removal fraction used by `random` and `necessity_blind` in extract runs.
    #[serde(default = "default_removal_rate")]
    pub removal_rate: f64,
    #[serde(default = "default_max_exhaustive")]
    pub max_exhaustive_len: usize,
    /// Tolerance for the sparse-necessity certificate on the core.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_method() -> Method {
    Method::Greedy
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_budgets() -> Vec<f64> {
    (0..=7).map(|i| i as f64 / 10.0).collect()
}

fn default_removal_rate() -> f64 {
    0.5
}

fn default_max_exhaustive() -> usize {
    DEFAULT_MAX_EXHAUSTIVE_LEN
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            seeds: default_seeds(),
            budgets: default_budgets(),
            removal_rate: default_removal_rate(),
            max_exhaustive_len: default_max_exhaustive(),
            gamma: default_gamma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
}

fn default_knn_k() -> usize {
    DEFAULT_KNN_K
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { split_seed: 0, knn_k: DEFAULT_KNN_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default = "default_epsilons", with = "epsilon_serde::vec")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_segmentations")]
    pub segmentations: Vec<SegmentationRule>,
}

fn default_epsilons() -> Vec<f64> {
    vec![f64::INFINITY, 1.0, 0.1, 0.01, 0.0]
}

fn default_segmentations() -> Vec<SegmentationRule> {
    vec![
        SegmentationRule { kind: SegmentationKind::Paragraph, merge_min_chars: 0 },
        SegmentationRule { kind: SegmentationKind::Sentence, merge_min_chars: 0 },
    ]
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { epsilons: default_epsilons(), segmentations: default_segmentations() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub oracles: Vec<OracleSpec>,
    #[serde(default)]
    pub criterion: SufficiencyCriterion,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub segmentation: SegmentationRule,
    #[serde(default)]
    pub embedder: Option<EmbedderSource>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    /// Offset added to every configured seed.
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock timings make report files differ between runs, so they
    /// are opt-in.
    #[serde(default)]
    pub record_runtime: bool,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    8
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Jsonl, ReportFormat::Csv]
}

impl RunConfig {
    pub fn new(corpus: CorpusSource, oracles: Vec<OracleSpec>) -> Self {
        Self {
            corpus,
            oracles,
            criterion: SufficiencyCriterion::Answer,
            extraction: ExtractionConfig::default(),
            segmentation: SegmentationRule::default(),
            embedder: None,
            out_dir: default_out(),
            parallelism: default_parallelism(),
            formats: default_formats(),
            seed: 0,
            record_runtime: false,
            geometry: GeometryConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let config: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(HarnessError::io(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.oracles.is_empty() {
            return Err(HarnessError::Config("at least one oracle is required".into()));
        }
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be at least 1".into()));
        }
        if let SufficiencyCriterion::Distribution { epsilon, .. } = self.criterion {
            if epsilon.is_nan() || epsilon < 0.0 {
                return Err(HarnessError::Config(format!("invalid epsilon {epsilon}")));
            }
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.extraction.removal_rate) || !self.extraction.budgets.iter().all(|&b| rate_ok(b)) {
            return Err(HarnessError::Config("removal rates and budgets must lie in [0, 1]".into()));
        }
        if self.extraction.method == Method::Random && self.extraction.seeds.is_empty() {
            return Err(HarnessError::Config("random deletion needs at least one seed".into()));
        }
        Ok(())
    }

    /// Points every HTTP oracle at `url`; with none configured, replaces the
    /// oracle list by a single HTTP oracle.
    pub fn override_oracle_url(&mut self, url: &str) {
        let mut any = false;
        for spec in &mut self.oracles {
            if let OracleSpec::Http(http) = spec {
                http.url = url.to_string();
                any = true;
            }
        }
        if !any {
            self.oracles = vec![OracleSpec::Http(HttpOracleConfig::new(url))];
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.extraction.seeds.iter().map(|s| s.wrapping_add(self.seed)).collect()
    }

    pub fn split_seed(&self) -> u64 {
        self.geometry.split_seed.wrapping_add(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tracecore::oracle::PlantedOracle;
    use tracecore::synth::RuleTemplate;

    fn sample() -> RunConfig {
        RunConfig::new(
            CorpusSource::Synth { n: 4, seed: 1, distribution: CorpusDistribution::fixed(8, 4, RuleTemplate::All) },
            vec![OracleSpec::PlantedRule(PlantedOracle::default())],
        )
    }

    #[test]
    fn json_round_trip_keeps_infinite_epsilon() {
        let mut c = sample();
        c.criterion = SufficiencyCriterion::distribution(f64::INFINITY);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn toml_config_with_defaults() {
        let text = r#"
            oracles = [{ kind = "planted_rule" }]
            [corpus]
            kind = "file"
            path = "corpus.jsonl"
            [criterion]
            kind = "distribution"
            epsilon = 0.05
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.parallelism, 8);
        assert_eq!(c.extraction.budgets.len(), 8);
        assert_eq!(c.criterion, SufficiencyCriterion::distribution(0.05));
        c.validate().unwrap();
    }

    #[test]
    fn validation_and_overrides() {
        let mut c = sample();
        c.extraction.budgets.push(1.5);
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        let mut c = sample();
        c.override_oracle_url("http://localhost:9/score");
        assert!(matches!(&c.oracles[0], OracleSpec::Http(h) if h.url == "http://localhost:9/score"));
        let mut a = sample();
        let b = sample();
        assert_eq!(a.hash(), b.hash());
        a.seed = 3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.seeds(), [3, 4, 5, 6, 7]);
    }
}
