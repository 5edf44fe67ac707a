//! Traces, steps, ordered subsets, and deterministic segmentation.
//!
//! Steps are 0-based everywhere. A [`Subset`] is an ordered index set over a
//! trace's steps; the empty subset is valid and means "answer with no
//! retained reasoning".

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

impl Step {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Self { index, text: text.into(), span: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub input: String,
    pub steps: Vec<Step>,
    pub full_answer: String,
    #[serde(default)]
    pub correct_label: Option<bool>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Trace {
    /// Builds a trace from step texts, assigning indices `0..T`.
    pub fn from_texts<I, S>(
        id: impl Into<String>,
        input: impl Into<String>,
        texts: I,
        full_answer: impl Into<String>,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let steps = texts.into_iter().enumerate().map(|(i, t)| Step::new(i, t)).collect();
        let trace = Self {
            id: id.into(),
            input: input.into(),
            steps,
            full_answer: full_answer.into(),
            correct_label: None,
            metadata: BTreeMap::new(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn with_label(mut self, label: Option<bool>) -> Self {
        self.correct_label = label;
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidTrace(format!("trace {} has no steps", self.id)));
        }
        if self.full_answer.trim().is_empty() {
            return Err(Error::InvalidTrace(format!("trace {} has an empty answer", self.id)));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i {
                return Err(Error::InvalidTrace(format!(
                    "trace {}: step at position {i} carries index {}",
                    self.id, step.index
                )));
            }
            if step.text.trim().is_empty() {
                return Err(Error::InvalidTrace(format!("trace {}: step {i} is blank", self.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn full_subset(&self) -> Subset {
        Subset::full(self.len())
    }

    pub fn step_texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Strictly increasing indices into a trace of `trace_len` steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subset {
    indices: Vec<usize>,
    trace_len: usize,
}

impl Subset {
    pub fn new(indices: Vec<usize>, trace_len: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= trace_len) {
            return Err(Error::InvalidSubset(format!("index {bad} out of range for {trace_len} steps")));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSubset("indices must be strictly increasing".into()));
        }
        Ok(Self { indices, trace_len })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut indices: Vec<usize>, trace_len: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, trace_len)
    }

    pub fn full(trace_len: usize) -> Self {
        Self { indices: (0..trace_len).collect(), trace_len }
    }

    pub fn empty(trace_len: usize) -> Self {
        Self { indices: Vec::new(), trace_len }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn trace_len(&self) -> usize {
        self.trace_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.trace_len
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// The subset with `index` removed. Removing an absent index is a no-op.
    pub fn without(&self, index: usize) -> Self {
        let indices = self.indices.iter().copied().filter(|&i| i != index).collect();
        Self { indices, trace_len: self.trace_len }
    }

    pub fn without_all(&self, removed: &[usize]) -> Self {
        let indices = self.indices.iter().copied().filter(|i| !removed.contains(i)).collect();
        Self { indices, trace_len: self.trace_len }
    }

    pub fn complement(&self) -> Self {
        let indices = (0..self.trace_len).filter(|i| !self.contains(*i)).collect();
        Self { indices, trace_len: self.trace_len }
    }

    /// Fraction of the trace removed by this subset.
    pub fn removal_fraction(&self) -> f64 {
        if self.trace_len == 0 {
            0.0
        } else {
            (self.trace_len - self.indices.len()) as f64 / self.trace_len as f64
        }
    }
}

/// Steps at the subset's indices, in original order.
pub fn subsequence<'a>(trace: &'a Trace, subset: &Subset) -> Result<Vec<&'a Step>> {
    if subset.trace_len() != trace.len() {
        return Err(Error::LengthMismatch { subset: subset.trace_len(), trace: trace.len() });
    }
    Ok(subset.indices().iter().map(|&i| &trace.steps[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationKind {
    Numbered,
    Sentence,
    Paragraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRule {
    pub kind: SegmentationKind,
    #[serde(default = "default_merge_min_chars")]
    pub merge_min_chars: usize,
}

fn default_merge_min_chars() -> usize {
    20
}

impl SegmentationRule {
    pub fn new(kind: SegmentationKind) -> Self {
        Self { kind, merge_min_chars: default_merge_min_chars() }
    }
}

impl Default for SegmentationRule {
    fn default() -> Self {
        Self::new(SegmentationKind::Numbered)
    }
}

const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "approx.", "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "fig.", "eq.", "no.",
    "al.",
];

fn numbered_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?mi)^[ \t]*(?:step[ \t]+)?\d+[.):][ \t]+").unwrap())
}

fn blank_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t]*\n").unwrap())
}

/// Splits raw trace text into steps.
///
/// Explicitly numbered lines (`1.`, `2)`, `Step 3:`) are authoritative and
/// never merged. Text without numbering falls back to sentence splitting.
/// Sentence and paragraph fragments shorter than `merge_min_chars` are
/// merged into the preceding fragment.
pub fn segment(raw_text: &str, rule: &SegmentationRule) -> Result<Vec<Step>> {
    if raw_text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let spans = match rule.kind {
        SegmentationKind::Numbered => match numbered_spans(raw_text) {
            Some(spans) => spans,
            None => merge_short(raw_text, sentence_spans(raw_text), rule.merge_min_chars),
        },
        SegmentationKind::Sentence => merge_short(raw_text, sentence_spans(raw_text), rule.merge_min_chars),
        SegmentationKind::Paragraph => merge_short(raw_text, paragraph_spans(raw_text), rule.merge_min_chars),
    };
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Step { index, text: raw_text[start..end].to_string(), span: Some((start, end)) })
        .collect())
}

/// Renders steps as a numbered list, one per line, with internal whitespace
/// collapsed so that re-segmenting recovers the same step count.
pub fn render_numbered<'a, I>(steps: I) -> String
where
    I: IntoIterator<Item = &'a Step>,
{
    steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let flat: Vec<&str> = s.text.split_whitespace().collect();
            format!("{}. {}\n", i + 1, flat.join(" "))
        })
        .collect()
}

/// Trims a byte range to its non-whitespace content; `None` if blank.
fn trimmed(raw: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let slice = &raw[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let body = slice.trim();
    if body.is_empty() {
        None
    } else {
        Some((start + lead, start + lead + body.len()))
    }
}

fn numbered_spans(raw: &str) -> Option<Vec<(usize, usize)>> {
    let markers: Vec<_> = numbered_marker().find_iter(raw).collect();
    if markers.is_empty() {
        return None;
    }
    let mut spans = Vec::new();
    // Preamble before the first marker is kept as its own step.
    if let Some(span) = trimmed(raw, 0, markers[0].start()) {
        spans.push(span);
    }
    for (i, m) in markers.iter().enumerate() {
        let end = markers.get(i + 1).map_or(raw.len(), |n| n.start());
        if let Some(span) = trimmed(raw, m.end(), end) {
            spans.push(span);
        }
    }
    Some(spans)
}

fn sentence_spans(raw: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = raw.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut in_math = false;
    let mut prev = '\0';
    for (k, &(pos, c)) in chars.iter().enumerate() {
        if c == '$' && prev != '\\' {
            in_math = !in_math;
        }
        prev = c;
        if in_math || !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let Some(&(_, ws)) = chars.get(k + 1) else { continue };
        if !ws.is_whitespace() {
            continue;
        }
        let next = chars[k + 1..].iter().find(|(_, ch)| !ch.is_whitespace());
        let Some(&(_, next)) = next else { continue };
        if !(next.is_uppercase() || next.is_ascii_digit()) {
            continue;
        }
        let end = pos + c.len_utf8();
        if c == '.' && ends_with_abbreviation(&raw[start..end]) {
            continue;
        }
        if let Some(span) = trimmed(raw, start, end) {
            spans.push(span);
        }
        start = end;
    }
    if let Some(span) = trimmed(raw, start, raw.len()) {
        spans.push(span);
    }
    spans
}

fn ends_with_abbreviation(fragment: &str) -> bool {
    let word = fragment.rsplit(|c: char| c.is_whitespace() || c == '(').next().unwrap_or("").to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

fn paragraph_spans(raw: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for m in blank_line().find_iter(raw) {
        if let Some(span) = trimmed(raw, start, m.start()) {
            spans.push(span);
        }
        start = m.end();
    }
    if let Some(span) = trimmed(raw, start, raw.len()) {
        spans.push(span);
    }
    spans
}

fn merge_short(raw: &str, spans: Vec<(usize, usize)>, min_chars: usize) -> Vec<(usize, usize)> {
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (start, end) in spans {
        let short = raw[start..end].chars().count() < min_chars;
        match merged.last_mut() {
            Some(last) if short => last.1 = end,
            _ => merged.push((start, end)),
        }
    }
    merged
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(steps: &[Step]) -> Vec<&str> {
        steps.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn numbered_lines_split_exactly() {
        let rule = SegmentationRule::new(SegmentationKind::Numbered);
        let steps = segment("1. Use identity.\n2. Substitute.\n3. Conclude 58.", &rule).unwrap();
        assert_eq!(texts(&steps), ["Use identity.", "Substitute.", "Conclude 58."]);
        assert_eq!(steps.iter().map(|s| s.index).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn single_sentence_is_one_step() {
        let rule = SegmentationRule::new(SegmentationKind::Sentence);
        let steps = segment("Only one sentence.", &rule).unwrap();
        assert_eq!(texts(&steps), ["Only one sentence."]);
    }

    #[test]
    fn worked_algebra_example_has_six_steps() {
        let raw = "Step 1. Since the problem gives both the sum and product of two numbers, it is useful to look for a symmetric expression.\n\
Step 2. Use the identity $(a+b)^2=a^2+2ab+b^2$.\n\
Step 3. Substitute $a+b=10$ and $ab=21$: $100=a^2+b^2+42$.\n\
Step 4. Therefore, $a^2+b^2=100-42=58$.\n\
Step 5. We could also solve for $a$ and $b$ as roots of $t^2-10t+21=0$, giving $3$ and $7$.\n\
Step 6. Checking directly, $3^2+7^2=9+49=58$, which confirms the same result.";
        let steps = segment(raw, &SegmentationRule::new(SegmentationKind::Numbered)).unwrap();
        assert_eq!(steps.len(), 6);
        assert!(steps[3].text.starts_with("Therefore"));
    }

    #[test]
    fn sentence_rule_respects_abbreviations_math_and_case() {
        let rule = SegmentationRule { kind: SegmentationKind::Sentence, merge_min_chars: 0 };
        let raw = "We use a trick, e.g. The identity holds. Then $x = 3. Y$ is fixed. so this continues. 4 is next.";
        let steps = segment(raw, &rule).unwrap();
        assert_eq!(
            texts(&steps),
            ["We use a trick, e.g. The identity holds.", "Then $x = 3. Y$ is fixed. so this continues.", "4 is next."]
        );
    }

    #[test]
    fn short_sentences_merge_into_predecessor() {
        let rule = SegmentationRule::new(SegmentationKind::Sentence);
        let steps = segment("This is a long enough sentence. Ok. Another long sentence here.", &rule).unwrap();
        assert_eq!(texts(&steps), ["This is a long enough sentence. Ok.", "Another long sentence here."]);
    }

    #[test]
    fn paragraphs_split_on_blank_lines_only() {
        let rule = SegmentationRule { kind: SegmentationKind::Paragraph, merge_min_chars: 0 };
        let steps = segment("First line.\nSame paragraph.\n\n  \nSecond one.", &rule).unwrap();
        assert_eq!(texts(&steps), ["First line.\nSame paragraph.", "Second one."]);
    }

    #[test]
    fn numbered_without_markers_falls_back_to_sentences() {
        let rule = SegmentationRule { kind: SegmentationKind::Numbered, merge_min_chars: 0 };
        let steps = segment("First sentence here. Second sentence here.", &rule).unwrap();
        assert_eq!(steps.len(), 2);
    }

    #[test]
    fn blank_text_is_rejected() {
        let rule = SegmentationRule::default();
        assert_eq!(segment("  \n\t", &rule), Err(Error::EmptyText));
    }

    #[test]
    fn spans_point_at_step_text() {
        let raw = "1. Alpha step.\n2. Beta step.";
        let steps = segment(raw, &SegmentationRule::default()).unwrap();
        for s in &steps {
            let (a, b) = s.span.unwrap();
            assert_eq!(&raw[a..b], s.text);
        }
    }

    fn four_step_trace() -> Trace {
        Trace::from_texts("t", "x", ["a", "b", "c", "d"], "42").unwrap()
    }

    #[test]
    fn subsequence_selects_in_order() {
        let trace = four_step_trace();
        let picked = subsequence(&trace, &Subset::new(vec![0, 2], 4).unwrap()).unwrap();
        assert_eq!(picked.iter().map(|s| s.index).collect::<Vec<_>>(), [0, 2]);
        assert!(subsequence(&trace, &Subset::empty(4)).unwrap().is_empty());
        let all = subsequence(&trace, &Subset::full(4)).unwrap();
        assert_eq!(all.into_iter().cloned().collect::<Vec<_>>(), trace.steps);
    }

    #[test]
    fn subsequence_rejects_length_mismatch() {
        let trace = four_step_trace();
        let err = subsequence(&trace, &Subset::full(3)).unwrap_err();
        assert_eq!(err, Error::LengthMismatch { subset: 3, trace: 4 });
    }

    #[test]
    fn subset_validation() {
        assert!(Subset::new(vec![1, 1], 3).is_err());
        assert!(Subset::new(vec![2, 1], 3).is_err());
        assert!(Subset::new(vec![3], 3).is_err());
        assert!(Subset::new(vec![], 3).is_ok());
        let s = Subset::from_unsorted(vec![2, 0, 2], 3).unwrap();
        assert_eq!(s.indices(), [0, 2]);
        assert_eq!(s.complement().indices(), [1]);
        assert_eq!(s.without(0).indices(), [2]);
    }

    #[test]
    fn trace_validation() {
        assert!(Trace::from_texts("t", "x", Vec::<String>::new(), "1").is_err());
        assert!(Trace::from_texts("t", "x", ["a", " "], "1").is_err());
        assert!(Trace::from_texts("t", "x", ["a"], "  ").is_err());
    }
}
