//! The model as a query interface.
//!
//! An [`Oracle`] maps `(input, retained step texts)` to an [`OracleResponse`].
//! [`CachedOracle`] wraps any oracle with a content-addressed cache so that
//! repeated sufficiency checks (and remote sampling noise) collapse onto the
//! first response seen for a given context.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::{answers_match, canonicalize};
use crate::error::{Error, Result};
use crate::trace::{subsequence, Subset, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub answer: String,
    #[serde(default)]
    pub distribution: Option<Vec<Candidate>>,
    #[serde(default)]
    pub answer_loss: Option<f64>,
    #[serde(default)]
    pub harm_signal: Option<f64>,
}

impl OracleResponse {
    pub fn answer_only(answer: impl Into<String>) -> Self {
        Self { answer: answer.into(), distribution: None, answer_loss: None, harm_signal: None }
    }

    /// Checks the response invariants: probabilities in `[0, 1]` summing to
    /// one, answer equal to the argmax candidate, finite non-negative loss.
    pub fn validate(&self) -> Result<()> {
        if let Some(dist) = &self.distribution {
            if dist.is_empty() {
                return Err(Error::ProtocolError("empty distribution".into()));
            }
            if dist.iter().any(|c| !(0.0..=1.0).contains(&c.p)) {
                return Err(Error::ProtocolError("probability outside [0, 1]".into()));
            }
            let total: f64 = dist.iter().map(|c| c.p).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::ProtocolError(format!("distribution sums to {total}")));
            }
            let top = argmax_candidate(dist).expect("non-empty");
            if !answers_match(&top.answer, &self.answer) {
                return Err(Error::ProtocolError(format!(
                    "answer {:?} is not the argmax candidate {:?}",
                    self.answer, top.answer
                )));
            }
        }
        if let Some(loss) = self.answer_loss {
            if !loss.is_finite() || loss < 0.0 {
                return Err(Error::ProtocolError(format!("invalid answer loss {loss}")));
            }
        }
        if let Some(h) = self.harm_signal {
            if !h.is_finite() {
                return Err(Error::ProtocolError("non-finite harm signal".into()));
            }
        }
        Ok(())
    }
}

/// Highest-probability candidate; ties go to the lexicographically smallest
/// canonical answer.
pub fn argmax_candidate(dist: &[Candidate]) -> Option<&Candidate> {
    dist.iter().min_by(|a, b| {
        b.p.partial_cmp(&a.p)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| canonicalize(&a.answer).cmp(&canonicalize(&b.answer)))
    })
}

/// One oracle request.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub input: &'a str,
    pub steps: Vec<&'a str>,
    /// Answer whose loss should be reported (the full-trace answer).
    pub target_answer: Option<&'a str>,
    pub want_distribution: bool,
}

pub trait Oracle: Send + Sync {
    /// Stable identity string; part of every cache key.
    fn identity(&self) -> String;
    fn respond(&self, query: &Query<'_>) -> Result<OracleResponse>;
}

/// Serializable description of an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    PlantedRule(PlantedOracle),
    LookupTable(LookupOracle),
    Http(HttpOracleConfig),
}

impl OracleSpec {
    pub fn build(&self) -> Result<Box<dyn Oracle>> {
        Ok(match self {
            OracleSpec::PlantedRule(o) => Box::new(o.clone()),
            OracleSpec::LookupTable(o) => Box::new(o.clone()),
            OracleSpec::Http(cfg) => Box::new(HttpOracle::new(cfg.clone())),
        })
    }

    pub fn name(&self) -> String {
        match self {
            OracleSpec::PlantedRule(o) => o.name.clone(),
            OracleSpec::LookupTable(o) => o.name.clone(),
            OracleSpec::Http(cfg) => cfg.name.clone().unwrap_or_else(|| cfg.url.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Planted-rule oracle

/// Rule-based oracle over tagged step texts.
///
/// Key steps carry `key:<n>` and filler steps `note <n>:`. The input may
/// carry a header `[planted rule=all keys=3,5 notes=1,2 answer=8]` naming
/// the rule, the required key values, the filler ids present in the full
/// trace, and the full-trace answer. Without a header the rule is a plain
/// sum of the retained key values.
///
/// Probability of the reference answer is 0.9 when the rule is satisfied and
/// `0.1 * satisfied_fraction + 0.05` otherwise; the loss is `-ln p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOracle {
    #[serde(default = "default_planted_name")]
    pub name: String,
    /// Fraction of filler ids this oracle additionally requires.
    #[serde(default)]
    pub filler_sensitivity: f64,
    #[serde(default)]
    pub salt: u64,
    /// Confidence lost, at most 0.4, when every filler is missing from a
    /// satisfying context. Zero keeps the pinned two-level loss.
    #[serde(default)]
    pub context_sensitivity: f64,
}

fn default_planted_name() -> String {
    "planted".to_string()
}

impl Default for PlantedOracle {
    fn default() -> Self {
        Self { name: default_planted_name(), filler_sensitivity: 0.0, salt: 0, context_sensitivity: 0.0 }
    }
}

pub const SATISFIED_P: f64 = 0.9;
const OTHER: &str = "<other>";
const UNDETERMINED: &str = "undetermined";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantedRuleKind {
    SumOfKeys,
    AllOfKeys,
    AnyKOfKeys { threshold: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedHeader {
    pub rule: PlantedRuleKind,
    pub keys: Vec<u64>,
    pub notes: Vec<u64>,
    pub answer: String,
}

impl PlantedHeader {
    pub fn render(&self) -> String {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let rule = match self.rule {
            PlantedRuleKind::SumOfKeys => "sum".to_string(),
            PlantedRuleKind::AllOfKeys => "all".to_string(),
            PlantedRuleKind::AnyKOfKeys { threshold } => format!("any threshold={threshold}"),
        };
        format!("[planted rule={rule} keys={} notes={} answer={}]", join(&self.keys), join(&self.notes), self.answer)
    }

    pub fn parse(input: &str) -> Result<Option<Self>> {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| Regex::new(r"\[planted ([^\]]*)\]").unwrap());
        let Some(cap) = re.captures(input) else { return Ok(None) };
        let mut fields = HashMap::new();
        for token in cap[1].split_whitespace() {
            let (k, v) =
                token.split_once('=').ok_or_else(|| Error::ProtocolError(format!("bad header token {token:?}")))?;
            fields.insert(k, v);
        }
        let list = |name: &str| -> Result<Vec<u64>> {
            match fields.get(name) {
                None | Some(&"") => Ok(Vec::new()),
                Some(v) => v
                    .split(',')
                    .map(|x| x.parse().map_err(|_| Error::ProtocolError(format!("bad {name} value {x:?}"))))
                    .collect(),
            }
        };
        let rule = match fields.get("rule").copied() {
            Some("sum") | None => PlantedRuleKind::SumOfKeys,
            Some("all") => PlantedRuleKind::AllOfKeys,
            Some("any") => {
                let threshold = fields
                    .get("threshold")
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::ProtocolError("any rule needs threshold".into()))?;
                PlantedRuleKind::AnyKOfKeys { threshold }
            }
            Some(other) => return Err(Error::ProtocolError(format!("unknown rule {other:?}"))),
        };
        let keys = list("keys")?;
        let answer = match fields.get("answer") {
            Some(a) => a.to_string(),
            None => keys.iter().sum::<u64>().to_string(),
        };
        Ok(Some(Self { rule, keys, notes: list("notes")?, answer }))
    }
}

fn key_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bkey:(\d+)").unwrap())
}

fn note_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bnote (\d+):").unwrap())
}

/// Values of every `key:<n>` tag in the texts, in order of appearance.
pub fn key_values<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vec<u64> {
    texts.into_iter().flat_map(|t| key_tag().captures_iter(t).filter_map(|c| c[1].parse().ok())).collect()
}

fn note_ids<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vec<u64> {
    texts.into_iter().flat_map(|t| note_tag().captures_iter(t).filter_map(|c| c[1].parse().ok())).collect()
}

/// FNV-1a; fixed so that planted behaviour never depends on the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Outcome of evaluating a planted rule on a retained context.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEvaluation {
    pub answer: String,
    pub satisfied: bool,
    /// Share of required units present, in `[0, 1]`.
    pub satisfied_fraction: f64,
    /// Share of the full trace's fillers present, in `[0, 1]`.
    pub filler_fraction: f64,
}

impl PlantedOracle {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn is_sensitive_note(&self, id: u64) -> bool {
        if self.filler_sensitivity <= 0.0 {
            return false;
        }
        let mut bytes = self.salt.to_le_bytes().to_vec();
        bytes.extend_from_slice(&id.to_le_bytes());
        let u = (fnv1a(&bytes) >> 11) as f64 / (1u64 << 53) as f64;
        u < self.filler_sensitivity
    }

    pub fn evaluate(&self, input: &str, steps: &[&str], target: Option<&str>) -> Result<PlantedEvaluation> {
        let header = PlantedHeader::parse(input)?;
        let keys = key_values(steps.iter().copied());
        let notes = note_ids(steps.iter().copied());
        let retained_sum: u64 = keys.iter().sum();

        let Some(header) = header else {
            let answer = retained_sum.to_string();
            let satisfied = target.is_some_and(|t| answers_match(t, &answer));
            return Ok(PlantedEvaluation {
                answer,
                satisfied,
                satisfied_fraction: if satisfied { 1.0 } else { 0.0 },
                filler_fraction: 1.0,
            });
        };

        let sensitive: Vec<u64> = header.notes.iter().copied().filter(|&n| self.is_sensitive_note(n)).collect();
        let notes_present = sensitive.iter().filter(|n| notes.contains(n)).count();
        let keys_present = header.keys.iter().filter(|k| keys.contains(k)).count();

        let (key_units, key_need) = match header.rule {
            PlantedRuleKind::AnyKOfKeys { threshold } => (keys_present.min(threshold), threshold),
            _ => (keys_present, header.keys.len()),
        };
        let need = key_need + sensitive.len();
        let have = key_units + notes_present;
        let satisfied = have == need;
        let satisfied_fraction = if need == 0 { 1.0 } else { have as f64 / need as f64 };

        let answer = if satisfied {
            header.answer.clone()
        } else if header.rule == PlantedRuleKind::SumOfKeys && !answers_match(&retained_sum.to_string(), &header.answer)
        {
            retained_sum.to_string()
        } else {
            UNDETERMINED.to_string()
        };
        let filler_fraction = if header.notes.is_empty() {
            1.0
        } else {
            header.notes.iter().filter(|n| notes.contains(n)).count() as f64 / header.notes.len() as f64
        };
        Ok(PlantedEvaluation { answer, satisfied, satisfied_fraction, filler_fraction })
    }

    fn reference_probability(&self, eval: &PlantedEvaluation) -> f64 {
        if eval.satisfied {
            let decay = self.context_sensitivity.clamp(0.0, 0.4);
            SATISFIED_P - decay * (1.0 - eval.filler_fraction)
        } else {
            0.1 * eval.satisfied_fraction + 0.05
        }
    }
}

impl Oracle for PlantedOracle {
    fn identity(&self) -> String {
        format!("planted:{}:{}:{}:{}", self.name, self.filler_sensitivity, self.salt, self.context_sensitivity)
    }

    fn respond(&self, query: &Query<'_>) -> Result<OracleResponse> {
        let eval = self.evaluate(query.input, &query.steps, query.target_answer)?;
        let header = PlantedHeader::parse(query.input)?;
        let reference = header.map(|h| h.answer).or_else(|| query.target_answer.map(str::to_string));
        let p = self.reference_probability(&eval);

        let (distribution, loss) = match &reference {
            Some(reference) if !answers_match(reference, &eval.answer) => (
                vec![Candidate { answer: reference.clone(), p }, Candidate { answer: eval.answer.clone(), p: 1.0 - p }],
                Some(-p.ln()),
            ),
            Some(_) => (
                vec![Candidate { answer: eval.answer.clone(), p }, Candidate { answer: OTHER.to_string(), p: 1.0 - p }],
                Some(-p.ln()),
            ),
            None => (
                vec![
                    Candidate { answer: eval.answer.clone(), p: SATISFIED_P },
                    Candidate { answer: OTHER.to_string(), p: 1.0 - SATISFIED_P },
                ],
                None,
            ),
        };
        // A loss target other than the reference answer gets its probability
        // from the distribution (floored).
        let loss = match (query.target_answer, &reference) {
            (Some(t), Some(r)) if !answers_match(t, r) => {
                let pt = distribution.iter().find(|c| answers_match(&c.answer, t)).map_or(1e-12, |c| c.p.max(1e-12));
                Some(-pt.ln())
            }
            _ => loss,
        };
        let harm_signal = loss.map(|l| 1.0 - (-l).exp());
        Ok(OracleResponse {
            answer: eval.answer,
            distribution: query.want_distribution.then_some(distribution),
            answer_loss: loss,
            harm_signal,
        })
    }
}

// ---------------------------------------------------------------------------
// Lookup-table oracle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupEntry {
    pub input: String,
    pub steps: Vec<String>,
    pub response: OracleResponse,
}

/// Returns stored responses verbatim, keyed by exact `(input, steps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupOracle {
    #[serde(default = "default_lookup_name")]
    pub name: String,
    pub entries: Vec<LookupEntry>,
    #[serde(default)]
    pub default: Option<OracleResponse>,
    #[serde(skip)]
    index: OnceLock<HashMap<String, usize>>,
}

fn default_lookup_name() -> String {
    "lookup".to_string()
}

impl LookupOracle {
    pub fn new(name: impl Into<String>, entries: Vec<LookupEntry>, default: Option<OracleResponse>) -> Self {
        Self { name: name.into(), entries, default, index: OnceLock::new() }
    }

    fn key<S: AsRef<str>>(input: &str, steps: &[S]) -> String {
        let mut key = String::from(input);
        for s in steps {
            key.push(RECORD_SEP);
            key.push_str(s.as_ref());
        }
        key
    }

    fn index(&self) -> &HashMap<String, usize> {
        self.index.get_or_init(|| {
            let mut map = HashMap::new();
            for (i, e) in self.entries.iter().enumerate() {
                map.entry(Self::key(&e.input, &e.steps)).or_insert(i);
            }
            map
        })
    }
}

impl Oracle for LookupOracle {
    fn identity(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&(&self.entries, &self.default)).unwrap_or_default());
        format!("lookup:{}:{}", self.name, hex::encode(&hasher.finalize()[..8]))
    }

    fn respond(&self, query: &Query<'_>) -> Result<OracleResponse> {
        let key = Self::key(query.input, &query.steps);
        match self.index().get(&key) {
            Some(&i) => Ok(self.entries[i].response.clone()),
            None => self.default.clone().ok_or(Error::LookupMiss),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP oracle

pub const TOKEN_ENV: &str = "TRACECORE_ORACLE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpOracleConfig {
    pub url: String,
    #[serde(default)]
    pub name: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_token_env() -> String {
    TOKEN_ENV.to_string()
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}

impl HttpOracleConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            name: None,
            token_env: default_token_env(),
            timeout_secs: default_timeout_secs(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

/// Request body of the remote oracle protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub input: String,
    pub steps: Vec<String>,
    pub want_distribution: bool,
    pub target_answer: Option<String>,
}

/// Response body of the remote oracle protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub answer: String,
    pub distribution: Option<Vec<Candidate>>,
    pub answer_loss: Option<f64>,
    pub harm_signal: Option<f64>,
}

impl From<WireResponse> for OracleResponse {
    fn from(w: WireResponse) -> Self {
        Self { answer: w.answer, distribution: w.distribution, answer_loss: w.answer_loss, harm_signal: w.harm_signal }
    }
}

pub struct HttpOracle {
    config: HttpOracleConfig,
    agent: ureq::Agent,
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(config.timeout_secs))).build().into();
        Self { config, agent }
    }

    fn attempt(&self, body: &WireRequest) -> std::result::Result<OracleResponse, AttemptError> {
        let mut request = self.agent.post(&self.config.url);
        if let Ok(token) = std::env::var(&self.config.token_env) {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| AttemptError::Transport(e.to_string()))?;
        let text = response.body_mut().read_to_string().map_err(|e| AttemptError::Transport(e.to_string()))?;
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| AttemptError::Protocol(format!("{e}: {text}")))?;
        let out = OracleResponse::from(wire);
        out.validate().map_err(|e| AttemptError::Protocol(e.to_string()))?;
        Ok(out)
    }
}

enum AttemptError {
    Transport(String),
    Protocol(String),
}

impl Oracle for HttpOracle {
    fn identity(&self) -> String {
        format!("http:{}", self.config.name.as_deref().unwrap_or(&self.config.url))
    }

    fn respond(&self, query: &Query<'_>) -> Result<OracleResponse> {
        let body = WireRequest {
            input: query.input.to_string(),
            steps: query.steps.iter().map(|s| s.to_string()).collect(),
            want_distribution: query.want_distribution,
            target_answer: query.target_answer.map(str::to_string),
        };
        let attempts = self.config.max_attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(AttemptError::Protocol(msg)) => return Err(Error::ProtocolError(msg)),
                Err(AttemptError::Transport(msg)) => {
                    log::warn!("oracle request attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                }
            }
            if attempt < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::RemoteError { attempts, message: last })
    }
}

// ---------------------------------------------------------------------------
// Cache

const RECORD_SEP: char = '\u{1e}';
const UNIT_SEP: char = '\u{1f}';

type Slot = Arc<Mutex<Option<OracleResponse>>>;

/// Any oracle plus a first-response-wins cache keyed by content hash.
///
/// Reads are concurrent; two callers asking for the same key serialize on
/// that key's slot, so at most one request per key is in flight.
pub struct CachedOracle {
    inner: Box<dyn Oracle>,
    identity: String,
    want_distribution: bool,
    slots: RwLock<HashMap<String, Slot>>,
    lookups: AtomicU64,
    calls: AtomicU64,
}

impl CachedOracle {
    pub fn new(inner: Box<dyn Oracle>) -> Self {
        let identity = inner.identity();
        Self {
            inner,
            identity,
            want_distribution: true,
            slots: RwLock::new(HashMap::new()),
            lookups: AtomicU64::new(0),
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_spec(spec: &OracleSpec) -> Result<Self> {
        Ok(Self::new(spec.build()?))
    }

    /// Whether distributions are requested from the underlying oracle.
    pub fn with_distributions(mut self, want: bool) -> Self {
        self.want_distribution = want;
        self
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn cache_key(&self, input: &str, steps: &[&str], target: Option<&str>) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.identity.as_bytes());
        hasher.update([RECORD_SEP as u8]);
        hasher.update(input.as_bytes());
        hasher.update([RECORD_SEP as u8]);
        for s in steps {
            hasher.update(s.as_bytes());
            hasher.update([UNIT_SEP as u8]);
        }
        hasher.update([RECORD_SEP as u8]);
        match target {
            Some(t) => {
                hasher.update([1]);
                hasher.update(t.as_bytes());
            }
            None => hasher.update([0]),
        }
        hasher.update([self.want_distribution as u8]);
        hex::encode(hasher.finalize())
    }

    pub fn query(&self, input: &str, steps: &[&str], target: Option<&str>) -> Result<OracleResponse> {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        let key = self.cache_key(input, steps, target);
        let slot = {
            let read = self.slots.read().expect("cache lock poisoned");
            read.get(&key).cloned()
        };
        let slot = match slot {
            Some(slot) => slot,
            None => {
                let mut write = self.slots.write().expect("cache lock poisoned");
                write.entry(key).or_default().clone()
            }
        };
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(hit) = guard.as_ref() {
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let query =
            Query { input, steps: steps.to_vec(), target_answer: target, want_distribution: self.want_distribution };
        let response = self.inner.respond(&query)?;
        *guard = Some(response.clone());
        Ok(response)
    }

    /// Queries the trace's input with the retained steps of `subset`, asking
    /// for the loss of `target`.
    pub fn query_subset(&self, trace: &Trace, subset: &Subset, target: Option<&str>) -> Result<OracleResponse> {
        let steps: Vec<&str> = subsequence(trace, subset)?.into_iter().map(|s| s.text.as_str()).collect();
        self.query(&trace.input, &steps, target)
    }

    /// Responses aligned with `subsets`; errors carry the failing position.
    pub fn batch_query(&self, trace: &Trace, subsets: &[Subset], target: Option<&str>) -> Result<Vec<OracleResponse>> {
        for (index, s) in subsets.iter().enumerate() {
            if s.trace_len() != trace.len() {
                return Err(Error::BatchItem {
                    index,
                    source: Box::new(Error::LengthMismatch { subset: s.trace_len(), trace: trace.len() }),
                });
            }
        }
        subsets
            .par_iter()
            .enumerate()
            .map(|(index, s)| {
                self.query_subset(trace, s, target).map_err(|e| Error::BatchItem { index, source: Box::new(e) })
            })
            .collect()
    }

    pub fn clear_cache(&self) {
        self.slots.write().expect("cache lock poisoned").clear();
    }

    pub fn cache_len(&self) -> usize {
        self.slots.read().expect("cache lock poisoned").len()
    }

    /// (queries answered, underlying oracle calls)
    pub fn stats(&self) -> (u64, u64) {
        (self.lookups.load(Ordering::Relaxed), self.calls.load(Ordering::Relaxed))
    }
}

/// Lookup entries for building a table from arbitrary responses.
pub fn lookup_entries<I>(items: I) -> Vec<LookupEntry>
where
    I: IntoIterator<Item = (String, Vec<String>, OracleResponse)>,
{
    items.into_iter().map(|(input, steps, response)| LookupEntry { input, steps, response }).collect()
}

/// Distribution as an ordered map from canonical answer to probability.
pub fn canonical_distribution(dist: &[Candidate]) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    for c in dist {
        *map.entry(canonicalize(&c.answer)).or_insert(0.0) += c.p;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted() -> CachedOracle {
        CachedOracle::new(Box::new(PlantedOracle::default()))
    }

    #[test]
    fn planted_sum_over_tagged_steps() {
        let trace = Trace::from_texts("t", "add", ["key:3", "note", "key:4"], "7").unwrap();
        let o = planted();
        let r = o.query_subset(&trace, &Subset::new(vec![0, 2], 3).unwrap(), None).unwrap();
        assert_eq!(r.answer, "7");
        let r = o.query_subset(&trace, &Subset::new(vec![1], 3).unwrap(), None).unwrap();
        assert_eq!(r.answer, "0");
    }

    #[test]
    fn planted_header_rules() {
        let header =
            PlantedHeader { rule: PlantedRuleKind::AllOfKeys, keys: vec![3, 5], notes: vec![1], answer: "8".into() };
        let input = format!("Combine. {}", header.render());
        assert_eq!(PlantedHeader::parse(&input).unwrap(), Some(header));
        let o = PlantedOracle::default();
        let full = o.evaluate(&input, &["key:3 a", "Note 1: b", "key:5 c"], None).unwrap();
        assert!(full.satisfied);
        assert_eq!(full.answer, "8");
        let part = o.evaluate(&input, &["key:3 a"], None).unwrap();
        assert!(!part.satisfied);
        assert_eq!(part.answer, "undetermined");
        assert!((part.satisfied_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn planted_loss_levels() {
        let input = "[planted rule=all keys=3,5 notes= answer=8]";
        let o = PlantedOracle::default();
        let q = |steps: Vec<&'static str>| Query { input, steps, target_answer: Some("8"), want_distribution: true };
        let sat = o.respond(&q(vec!["key:3", "key:5"])).unwrap();
        assert!((sat.answer_loss.unwrap() + 0.9f64.ln()).abs() < 1e-12);
        sat.validate().unwrap();
        let half = o.respond(&q(vec!["key:3"])).unwrap();
        assert!((half.answer_loss.unwrap() + 0.1f64.ln()).abs() < 1e-12);
        half.validate().unwrap();
        let none = o.respond(&q(vec![])).unwrap();
        assert!((none.answer_loss.unwrap() + 0.05f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sensitive_fillers_are_required() {
        let o = PlantedOracle { filler_sensitivity: 1.0, ..PlantedOracle::default() };
        let input = "[planted rule=all keys=3 notes=1 answer=3]";
        assert!(!o.evaluate(input, &["key:3"], None).unwrap().satisfied);
        assert!(o.evaluate(input, &["key:3", "Note 1: x"], None).unwrap().satisfied);
    }

    #[test]
    fn lookup_returns_stored_response_verbatim() {
        let stored =
            OracleResponse { answer: "B".into(), distribution: None, answer_loss: Some(1.25), harm_signal: Some(-0.5) };
        let table =
            LookupOracle::new("t", lookup_entries([("x".to_string(), vec!["s1".to_string()], stored.clone())]), None);
        let o = CachedOracle::new(Box::new(table));
        assert_eq!(o.query("x", &["s1"], None).unwrap(), stored);
        assert_eq!(o.query("x", &[], None), Err(Error::LookupMiss));
    }

    #[test]
    fn cache_is_transparent_and_counts_calls() {
        let trace = Trace::from_texts("t", "add", ["key:1", "key:2", "x", "key:4", "y"], "7").unwrap();
        let o = planted();
        let subsets: Vec<Subset> = (0..5).map(|t| trace.full_subset().without(t)).collect();
        let warm = o.batch_query(&trace, &subsets, Some("7")).unwrap();
        let sequential: Vec<_> = subsets.iter().map(|s| o.query_subset(&trace, s, Some("7")).unwrap()).collect();
        assert_eq!(warm, sequential);
        assert_eq!(o.stats().1, 5);
        o.clear_cache();
        let cold = o.batch_query(&trace, &subsets, Some("7")).unwrap();
        assert_eq!(cold, warm);
        let twice = o.batch_query(&trace, &[subsets[0].clone(), subsets[0].clone()], Some("7")).unwrap();
        assert_eq!(twice[0], twice[1]);
        assert!(o.batch_query(&trace, &[], None).unwrap().is_empty());
    }

    #[test]
    fn batch_errors_carry_index() {
        let trace = Trace::from_texts("t", "x", ["a", "b"], "0").unwrap();
        let table = LookupOracle::new(
            "t",
            lookup_entries([(
                "x".to_string(),
                vec!["a".to_string(), "b".to_string()],
                OracleResponse::answer_only("0"),
            )]),
            None,
        );
        let o = CachedOracle::new(Box::new(table));
        let err = o.batch_query(&trace, &[Subset::full(2), Subset::empty(2)], None).unwrap_err();
        assert!(matches!(err, Error::BatchItem { index: 1, .. }));
    }

    #[test]
    fn response_validation() {
        let mut r = OracleResponse {
            answer: "a".into(),
            distribution: Some(vec![
                Candidate { answer: "a".into(), p: 0.5 },
                Candidate { answer: "b".into(), p: 0.5 },
            ]),
            answer_loss: Some(0.1),
            harm_signal: None,
        };
        r.validate().unwrap();
        r.answer = "b".into();
        assert!(r.validate().is_err(), "lexicographic tie-break picks a");
        r.answer = "a".into();
        r.answer_loss = Some(-1.0);
        assert!(r.validate().is_err());
    }
}
