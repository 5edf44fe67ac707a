//! Trace corpus and embedding JSONL files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracecore::synth::{generate_corpus, PlantedCorpus};
use tracecore::trace::{segment, SegmentationRule, Step};
use tracecore::Trace;

use crate::config::CorpusSource;
use crate::error::{HarnessError, Result};

/// One line of a corpus file. Exactly one of `steps` and `raw_trace` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub id: String,
    pub input: String,
    pub steps: Option<Vec<String>>,
    pub raw_trace: Option<String>,
    pub full_answer: String,
    pub correct_label: Option<bool>,
    #[serde(default)]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub trace: Trace,
    /// Unsegmented text, kept for segmentation ablations.
    pub raw_trace: Option<String>,
}

impl CorpusRecord {
    pub fn to_row(&self) -> CorpusRow {
        let t = &self.trace;
        CorpusRow {
            id: t.id.clone(),
            input: t.input.clone(),
            steps: self.raw_trace.is_none().then(|| t.step_texts().into_iter().map(str::to_string).collect()),
            raw_trace: self.raw_trace.clone(),
            full_answer: t.full_answer.clone(),
            correct_label: t.correct_label,
            metadata: t.metadata.clone(),
        }
    }

    /// Same record with steps re-derived from the raw text under `rule`.
    pub fn resegment(&self, rule: &SegmentationRule) -> tracecore::Result<Trace> {
        let raw = self.raw_trace.as_deref().ok_or(tracecore::Error::EmptyText)?;
        let mut trace = self.trace.clone();
        trace.steps = segment(raw, rule)?;
        Ok(trace)
    }
}

pub fn row_to_record(row: CorpusRow, rule: &SegmentationRule) -> std::result::Result<CorpusRecord, String> {
    let steps = match (&row.steps, &row.raw_trace) {
        (Some(steps), None) => {
            steps.iter().enumerate().map(|(index, text)| Step { index, text: text.clone(), span: None }).collect()
        }
        (None, Some(raw)) => segment(raw, rule).map_err(|e| e.to_string())?,
        _ => return Err("exactly one of steps and raw_trace must be present".into()),
    };
    let trace = Trace {
        id: row.id,
        input: row.input,
        steps,
        full_answer: row.full_answer,
        correct_label: row.correct_label,
        metadata: row.metadata,
    };
    trace.validate().map_err(|e| e.to_string())?;
    Ok(CorpusRecord { trace, raw_trace: row.raw_trace })
}

pub fn parse_corpus<R: BufRead>(reader: R, source: &str, rule: &SegmentationRule) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line =
            line.map_err(|e| HarnessError::CorpusParse { path: source.into(), line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| HarnessError::CorpusParse { path: source.into(), line: line_no, message };
        let row: CorpusRow = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        records.push(row_to_record(row, rule).map_err(parse_err)?);
    }
    if records.is_empty() {
        return Err(HarnessError::EmptyCorpus);
    }
    Ok(records)
}

pub fn read_corpus(path: &Path, rule: &SegmentationRule) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path).map_err(HarnessError::io(path))?;
    parse_corpus(BufReader::new(file), &path.display().to_string(), rule)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    file.write_all(&out).map_err(HarnessError::io(path))
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records.iter().map(CorpusRecord::to_row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub trace_id: String,
    pub step_index: usize,
    pub vector: Vec<f64>,
}

/// Step vectors per trace id; every trace must cover steps `0..T` exactly
/// once and all vectors share one dimension.
pub fn read_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let file = std::fs::File::open(path).map_err(HarnessError::io(path))?;
    let source = path.display().to_string();
    let mut by_trace: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| HarnessError::CorpusParse { path: source.clone(), line: line_no, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if row.vector.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite vector component".into()));
        }
        match dim {
            None => dim = Some(row.vector.len()),
            Some(d) if d != row.vector.len() => {
                return Err(err(format!("dimension {} differs from {d}", row.vector.len())));
            }
            _ => {}
        }
        if by_trace.entry(row.trace_id.clone()).or_default().insert(row.step_index, row.vector).is_some() {
            return Err(err(format!("duplicate step {} for trace {}", row.step_index, row.trace_id)));
        }
    }
    let mut out = BTreeMap::new();
    for (id, steps) in by_trace {
        if steps.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(HarnessError::MissingEmbeddings(format!("trace {id} has gaps in step indices")));
        }
        out.insert(id, steps.into_values().collect());
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, traces: &[Trace], vectors: &[Vec<Vec<f64>>]) -> Result<()> {
    let rows = traces.iter().zip(vectors).flat_map(|(t, vs)| {
        vs.iter().enumerate().map(move |(step_index, v)| EmbeddingRow {
            trace_id: t.id.clone(),
            step_index,
            vector: v.clone(),
        })
    });
    write_jsonl(path, rows)
}

/// Loaded corpus plus planted embeddings when it was generated.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub planted: Option<PlantedCorpus>,
}

impl Corpus {
    pub fn load(source: &CorpusSource, rule: &SegmentationRule, seed_offset: u64) -> Result<Self> {
        match source {
            CorpusSource::File { path } => Ok(Self { records: read_corpus(path, rule)?, planted: None }),
            CorpusSource::Synth { n, seed, distribution } => {
                let planted = generate_corpus(*n, distribution, seed.wrapping_add(seed_offset))
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                let records = planted
                    .traces
                    .iter()
                    .map(|t| CorpusRecord { trace: t.clone(), raw_trace: Some(paired_raw_text(t)) })
                    .collect();
                Ok(Self { records, planted: Some(planted) })
            }
        }
    }

    pub fn traces(&self) -> impl Iterator<Item = &Trace> {
        self.records.iter().map(|r| &r.trace)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Prose rendering of a trace: steps joined by spaces, two per paragraph.
/// Sentence segmentation recovers the steps; paragraph segmentation yields
/// the pairs.
pub fn paired_raw_text(trace: &Trace) -> String {
    trace.step_texts().chunks(2).map(|pair| pair.join(" ")).collect::<Vec<_>>().join("\n\n")
}
