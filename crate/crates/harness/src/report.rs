use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracecore::extraction::Method;
use tracecore::metrics::CertificateRecord;

use crate::config::ReportFormat;
use crate::corpus::write_jsonl;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub version: String,
    pub trace_id: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub oracle: String,
    pub t: usize,
    pub core_len: usize,
    pub cr: f64,
    pub rm: f64,
    pub core: Vec<usize>,
    pub reference_answer: String,
    pub retained_answer: String,
    pub retention: bool,
    pub sufficient: bool,
    pub irreducible: bool,
    pub nmass_1: Option<f64>,
    pub nmass_3: Option<f64>,
    pub nmass_5: Option<f64>,
    pub gini: Option<f64>,
    pub certificates: Vec<CertificateRecord>,
    pub checks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// Population mean and standard deviation; `None` for no values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub n: usize,
    pub full_len: Option<Stat>,
    pub core_len: Option<Stat>,
    pub cr: Option<Stat>,
    pub rm: Option<Stat>,
    pub top3: Option<Stat>,
    pub retention: Option<Stat>,
}

impl Aggregate {
    pub fn of(method: Method, rows: &[&ReportRow]) -> Self {
        Self {
            method,
            n: rows.len(),
            full_len: Stat::of(rows.iter().map(|r| r.t as f64)),
            core_len: Stat::of(rows.iter().map(|r| r.core_len as f64)),
            cr: Stat::of(rows.iter().map(|r| r.cr)),
            rm: Stat::of(rows.iter().map(|r| r.rm)),
            top3: Stat::of(rows.iter().filter_map(|r| r.nmass_3)),
            retention: Stat::of(rows.iter().map(|r| f64::from(u8::from(r.retention)))),
        }
    }
}

/// One aggregate per method, in first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let subset: Vec<&ReportRow> = rows.iter().filter(|r| r.method == m).collect();
            Aggregate::of(m, &subset)
        })
        .collect()
}

fn cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the stat columns `<name>_mean,<name>_std` for each named stat.
pub fn stat_cells(stat: Option<Stat>) -> [String; 2] {
    [cell(stat.map(|s| s.mean)), cell(stat.map(|s| s.std))]
}

pub struct ReportWriter {
    pub dir: PathBuf,
    pub config_hash: String,
    pub version: String,
    pub formats: Vec<ReportFormat>,
}

impl ReportWriter {
    pub fn new(dir: PathBuf, config_hash: String, version: String, formats: Vec<ReportFormat>) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
        Ok(Self { dir, config_hash, version, formats })
    }

    pub fn wants(&self, format: ReportFormat) -> bool {
        self.formats.contains(&format)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn jsonl<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<Option<PathBuf>> {
        if !self.wants(ReportFormat::Jsonl) {
            return Ok(None);
        }
        let path = self.path(name);
        write_jsonl(&path, rows)?;
        Ok(Some(path))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(HarnessError::io(&path))?;
        Ok(path)
    }

    /// CSV with leading `config_hash,version` columns on every row.
    pub fn csv(
        &self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<Option<PathBuf>> {
        if !self.wants(ReportFormat::Csv) {
            return Ok(None);
        }
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        let mut full_header = vec!["config_hash", "version"];
        full_header.extend_from_slice(header);
        w.write_record(&full_header)?;
        for row in rows {
            let mut record = vec![self.config_hash.clone(), self.version.clone()];
            record.extend(row);
            w.write_record(&record)?;
        }
        w.flush().map_err(HarnessError::io(&path))?;
        Ok(Some(path))
    }

    pub fn aggregates(&self, name: &str, aggregates: &[Aggregate]) -> Result<Option<PathBuf>> {
        let header = [
            "method",
            "n",
            "full_len_mean",
            "full_len_std",
            "core_len_mean",
            "core_len_std",
            "cr_mean",
            "cr_std",
            "rm_mean",
            "rm_std",
            "top3_mean",
            "top3_std",
            "retention_mean",
            "retention_std",
        ];
        let rows = aggregates.iter().map(|a| {
            let mut r = vec![a.method.as_str().to_string(), a.n.to_string()];
            for s in [a.full_len, a.core_len, a.cr, a.rm, a.top3, a.retention] {
                r.extend(stat_cells(s));
            }
            r
        });
        self.csv(name, &header, rows)
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(HarnessError::MissingReport(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
