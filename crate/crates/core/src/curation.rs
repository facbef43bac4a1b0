//! Dialogue curation through an external chat-completion service: render a
//! prompt, call the service, validate the reply against deterministic
//! rules, retry up to a budget and quarantine what never passes.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dialogue::Role;

/// The raw-dialogue slot in a template.
pub const PLACEHOLDER: &str = "{d}";
pub const TOKEN_ENV: &str = "MEDCONSULT_CHAT_TOKEN";

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("template must contain exactly one {PLACEHOLDER} placeholder, found {0}")]
    Placeholder(usize),
    #[error("template fixture: {0}")]
    Fixture(String),
    #[error("duplicate record id {0}")]
    Duplicate(String),
    #[error("max_checks must be at least 1")]
    Budget,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SingleTurn,
    MultiTurn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub text: String,
    pub precautions: Vec<String>,
}

#[derive(Deserialize)]
struct Fixture {
    kind: TemplateKind,
    intro: String,
    precautions: Vec<String>,
}

impl PromptTemplate {
    /// A free-form template; it must hold exactly one placeholder.
    pub fn new(kind: TemplateKind, text: impl Into<String>) -> Result<Self, CurationError> {
        let text = text.into();
        let n = text.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(CurationError::Placeholder(n));
        }
        Ok(Self {
            kind,
            text,
            precautions: Vec::new(),
        })
    }

    /// Parses a TOML fixture with `kind`, `intro` and `precautions`.
    pub fn from_fixture(body: &str) -> Result<Self, CurationError> {
        let f: Fixture = toml::from_str(body).map_err(|e| CurationError::Fixture(e.to_string()))?;
        let mut text = format!("{}\n\n原始对话：{PLACEHOLDER}\n\n注意事项：\n", f.intro.trim());
        for (i, p) in f.precautions.iter().enumerate() {
            text.push_str(&format!("{}. {}；\n", i + 1, p.trim()));
        }
        let mut t = Self::new(f.kind, text)?;
        t.precautions = f.precautions;
        Ok(t)
    }

    pub fn builtin(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::MultiTurn => include_str!("../templates/multi_turn.toml"),
            TemplateKind::SingleTurn => include_str!("../templates/single_turn.toml"),
        };
        Self::from_fixture(body).expect("bundled template fixture is valid")
    }

    pub fn render(&self, raw: &str) -> Result<String, CurationError> {
        render_prompt(raw, &self.text)
    }
}

/// Substitutes `raw` for the single placeholder, leaving everything else
/// (including braces inside `raw`) untouched.
pub fn render_prompt(raw: &str, template: &str) -> Result<String, CurationError> {
    let parts: Vec<&str> = template.split(PLACEHOLDER).collect();
    if parts.len() != 2 {
        return Err(CurationError::Placeholder(parts.len().saturating_sub(1)));
    }
    Ok(format!("{}{raw}{}", parts[0], parts[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleId {
    Schema,
    RoundCount,
    Alternation,
    TurnLength,
    Privacy,
    Colloquial,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::Schema => "schema",
            RuleId::RoundCount => "round_count",
            RuleId::Alternation => "alternation",
            RuleId::TurnLength => "turn_length",
            RuleId::Privacy => "privacy",
            RuleId::Colloquial => "colloquial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFailure {
    pub rule: RuleId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub failures: Vec<RuleFailure>,
    /// The parsed dialogue when the schema check passed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Value>,
}

impl Verdict {
    pub fn failed_rules(&self) -> Vec<RuleId> {
        self.failures.iter().map(|f| f.rule).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    /// A patient utterance plus the doctor reply is one round.
    #[default]
    Exchanges,
    /// Every utterance is a round.
    Utterances,
}

/// Validation settings. Patterns are regular expressions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleSet {
    pub round_mode: RoundMode,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub max_chars: usize,
    pub deny_patterns: Vec<String>,
    pub deny_terms: Vec<String>,
    pub colloquial_markers: Vec<String>,
}

impl Default for RuleSet {
    fn default() -> Self {
        Self {
            round_mode: RoundMode::Exchanges,
            min_rounds: 10,
            max_rounds: 15,
            max_chars: 30,
            deny_patterns: vec![
                // mobile numbers
                r"1[3-9]\d{9}".into(),
                // resident id numbers
                r"\d{17}[\dXx]".into(),
                // surname plus title, e.g. a named doctor
                r"[王李张刘陈杨黄赵周吴徐孙马朱胡郭何林罗高郑梁谢宋唐][\p{Han}]?(医生|大夫|主任|教授)".into(),
                r"\p{Han}{2,8}(人民医院|眼科医院|附属医院|中心医院|中医院)".into(),
            ],
            deny_terms: Vec::new(),
            colloquial_markers: ["哈哈", "呵呵", "嘿嘿", "呗", "咋", "俺", "木有", "神马"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// A rule set with its patterns compiled once.
pub struct Validator {
    rules: RuleSet,
    deny: Vec<Regex>,
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn fail(rule: RuleId, message: impl Into<String>) -> RuleFailure {
    RuleFailure {
        rule,
        message: message.into(),
    }
}

impl Validator {
    pub fn new(rules: RuleSet) -> Result<Self, regex::Error> {
        let deny = rules.deny_patterns.iter().map(|p| Regex::new(p)).collect::<Result<_, _>>()?;
        Ok(Self { rules, deny })
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    fn privacy_hit(&self, text: &str) -> Option<String> {
        if let Some(m) = self.deny.iter().find_map(|r| r.find(text)) {
            return Some(m.as_str().to_string());
        }
        self.rules.deny_terms.iter().find(|t| !t.is_empty() && text.contains(t.as_str())).cloned()
    }

    pub fn validate(&self, kind: TemplateKind, response: &str) -> Verdict {
        match kind {
            TemplateKind::MultiTurn => self.validate_multi_turn(response),
            TemplateKind::SingleTurn => self.validate_single_turn(response),
        }
    }

    /// Schema, round count, alternation, utterance length, privacy, in that
    /// order. A schema failure stops the remaining checks.
    pub fn validate_multi_turn(&self, response: &str) -> Verdict {
        let turns = match parse_turns(strip_fences(response)) {
            Ok(t) => t,
            Err(msg) => {
                return Verdict {
                    passed: false,
                    failures: vec![fail(RuleId::Schema, msg)],
                    parsed: None,
                }
            }
        };
        let mut failures = Vec::new();
        let rounds = match self.rules.round_mode {
            RoundMode::Exchanges => turns.len() / 2,
            RoundMode::Utterances => turns.len(),
        };
        if !(self.rules.min_rounds..=self.rules.max_rounds).contains(&rounds) {
            failures.push(fail(
                RuleId::RoundCount,
                format!(
                    "{rounds} rounds, expected {}..={}",
                    self.rules.min_rounds, self.rules.max_rounds
                ),
            ));
        }
        if let Some(i) = turns.iter().enumerate().position(|(i, (role, _))| {
            *role != if i % 2 == 0 { Role::Patient } else { Role::Doctor }
        }) {
            failures.push(fail(RuleId::Alternation, format!("utterance {} breaks patient/doctor alternation", i + 1)));
        }
        if let Some(i) = turns.iter().position(|(_, t)| t.trim().chars().count() > self.rules.max_chars) {
            failures.push(fail(
                RuleId::TurnLength,
                format!(
                    "utterance {} has {} characters, limit {}",
                    i + 1,
                    turns[i].1.trim().chars().count(),
                    self.rules.max_chars
                ),
            ));
        }
        if let Some(hit) = turns.iter().find_map(|(_, t)| self.privacy_hit(t)) {
            failures.push(fail(RuleId::Privacy, format!("sensitive content: {hit}")));
        }
        let parsed = Value::Array(
            turns
                .iter()
                .map(|(r, t)| serde_json::json!({ "role": r.as_str(), "text": t.trim() }))
                .collect(),
        );
        Verdict {
            passed: failures.is_empty(),
            failures,
            parsed: Some(parsed),
        }
    }

    /// One patient question and one doctor answer, both non-empty, free of
    /// sensitive content and colloquial markers.
    pub fn validate_single_turn(&self, response: &str) -> Verdict {
        let v: Value = match serde_json::from_str(strip_fences(response)) {
            Ok(v) => v,
            Err(e) => {
                return Verdict {
                    passed: false,
                    failures: vec![fail(RuleId::Schema, format!("not json: {e}"))],
                    parsed: None,
                }
            }
        };
        let field = |name: &str| v.get(name).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty());
        let (patient, doctor) = match (field("patient"), field("doctor")) {
            (Some(p), Some(d)) => (p, d),
            (p, _) => {
                let missing = if p.is_none() { "patient" } else { "doctor" };
                return Verdict {
                    passed: false,
                    failures: vec![fail(RuleId::Schema, format!("missing or empty field {missing}"))],
                    parsed: None,
                };
            }
        };
        let mut failures = Vec::new();
        if let Some(hit) = [patient, doctor].iter().find_map(|t| self.privacy_hit(t)) {
            failures.push(fail(RuleId::Privacy, format!("sensitive content: {hit}")));
        }
        if let Some(m) = self
            .rules
            .colloquial_markers
            .iter()
            .find(|m| !m.is_empty() && (patient.contains(m.as_str()) || doctor.contains(m.as_str())))
        {
            failures.push(fail(RuleId::Colloquial, format!("colloquial marker {m}")));
        }
        Verdict {
            passed: failures.is_empty(),
            failures,
            parsed: Some(serde_json::json!({ "patient": patient, "doctor": doctor })),
        }
    }
}

/// Accepts `[{role, text}, ...]` or `{"turns": [...]}`; roles may be given
/// in English or Chinese.
fn parse_turns(s: &str) -> Result<Vec<(Role, String)>, String> {
    let v: Value = serde_json::from_str(s).map_err(|e| format!("not json: {e}"))?;
    let arr = match &v {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("turns")
            .or_else(|| o.get("dialogue"))
            .and_then(Value::as_array)
            .ok_or("object without a turns array")?,
        _ => return Err("expected an array of turns".into()),
    };
    if arr.is_empty() {
        return Err("no turns".into());
    }
    arr.iter()
        .enumerate()
        .map(|(i, t)| {
            let role = t.get("role").and_then(Value::as_str).ok_or(format!("turn {} lacks role", i + 1))?;
            let role = match role.trim().to_lowercase().as_str() {
                "patient" | "患者" | "病人" => Role::Patient,
                "doctor" | "医生" => Role::Doctor,
                other => return Err(format!("turn {} has unknown role {other}", i + 1)),
            };
            let text = t
                .get("text")
                .or_else(|| t.get("content"))
                .and_then(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .ok_or(format!("turn {} lacks text", i + 1))?;
            Ok((role, text.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest<'a> {
    pub record_id: &'a str,
    /// 1-based.
    pub attempt: usize,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

pub trait ChatClient: Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError>;
}

/// Chat-completion over HTTP: `{model, messages, temperature}` in,
/// `choices[0].message.content` out.
pub struct HttpChatClient {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    /// Reads the bearer token from [`TOKEN_ENV`] if set.
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.0,
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": self.temperature,
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError(format!("status {status}")));
        }
        let v: Value = resp.json().map_err(|e| TransportError(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError("response without choices[0].message.content".into()))
    }
}

/// A scripted reply: text, or a simulated transport failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Failure { transport_error: String },
}

#[derive(Debug, Clone, Deserialize)]
struct StubLine {
    id: String,
    responses: Vec<ScriptedReply>,
}

/// Replies by record id and attempt; the last reply repeats once the script
/// runs out. Unknown ids get a transport failure.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    scripts: BTreeMap<String, Vec<ScriptedReply>>,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(mut self, id: impl Into<String>, replies: Vec<ScriptedReply>) -> Self {
        self.scripts.insert(id.into(), replies);
        self
    }

    /// Loads `{"id": ..., "responses": [...]}` lines.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CurationError> {
        let mut c = Self::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: StubLine = serde_json::from_str(&line)?;
            c.scripts.insert(s.id, s.responses);
        }
        Ok(c)
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let script = self
            .scripts
            .get(request.record_id)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| TransportError(format!("no script for {}", request.record_id)))?;
        match &script[(request.attempt - 1).min(script.len() - 1)] {
            ScriptedReply::Text(t) => Ok(t.clone()),
            ScriptedReply::Failure { transport_error } => Err(TransportError(transport_error.clone())),
        }
    }
}

/// One input line: an id and the raw dialogue (a string, or any JSON that
/// is rendered compactly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub raw: Value,
}

impl RawRecord {
    pub fn raw_text(&self) -> String {
        match &self.raw {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport_error: Option<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Accepted,
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub raw: Value,
    pub prompt: String,
    pub attempts: Vec<Attempt>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateConfig {
    pub max_checks: usize,
    /// First transport-retry delay; doubles per failure.
    pub backoff_ms: u64,
    /// Records in flight at once.
    pub parallelism: usize,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            max_checks: 3,
            backoff_ms: 500,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationOutcome {
    pub accepted: Vec<CurationRecord>,
    pub quarantined: Vec<CurationRecord>,
}

impl CurationOutcome {
    pub fn len(&self) -> usize {
        self.accepted.len() + self.quarantined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs one record through render → call → validate until it passes or
/// the budget is spent.
pub fn curate_one(
    record: &RawRecord,
    template: &PromptTemplate,
    validator: &Validator,
    client: &dyn ChatClient,
    config: &CurateConfig,
) -> Result<CurationRecord, CurationError> {
    if config.max_checks == 0 {
        return Err(CurationError::Budget);
    }
    let prompt = template.render(&record.raw_text())?;
    let mut attempts = Vec::new();
    let mut transport_failures = 0u32;
    for attempt in 1..=config.max_checks {
        let req = ChatRequest {
            record_id: &record.id,
            attempt,
            prompt: &prompt,
        };
        match client.complete(&req) {
            Ok(text) => {
                let verdict = validator.validate(template.kind, &text);
                let passed = verdict.passed;
                let output = verdict.parsed.clone();
                attempts.push(Attempt {
                    response: Some(text),
                    transport_error: None,
                    verdict,
                });
                if passed {
                    return Ok(CurationRecord {
                        id: record.id.clone(),
                        raw: record.raw.clone(),
                        prompt,
                        attempts,
                        status: Status::Accepted,
                        output,
                    });
                }
            }
            Err(e) => {
                tracing::warn!(id = %record.id, attempt, error = %e, "chat call failed");
                attempts.push(Attempt {
                    response: None,
                    transport_error: Some(e.0),
                    verdict: Verdict {
                        passed: false,
                        failures: Vec::new(),
                        parsed: None,
                    },
                });
                if attempt < config.max_checks && config.backoff_ms > 0 {
                    std::thread::sleep(Duration::from_millis(config.backoff_ms << transport_failures.min(10)));
                }
                transport_failures += 1;
            }
        }
    }
    Ok(CurationRecord {
        id: record.id.clone(),
        raw: record.raw.clone(),
        prompt,
        attempts,
        status: Status::Quarantined,
        output: None,
    })
}

/// Append-only log of finished records, used to resume a run.
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CurationError> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn records(&self) -> Result<Vec<CurationRecord>, CurationError> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(&self.path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(r) => out.push(r),
                // A torn final line from an interrupted run.
                Err(e) => tracing::warn!(error = %e, "skipping unreadable journal line"),
            }
        }
        Ok(out)
    }

    pub fn append(&self, record: &CurationRecord) -> Result<(), CurationError> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Curates every record exactly once. Records already in `journal` are
/// taken from it as they are; new results are appended as they finish.
pub fn curate(
    records: &[RawRecord],
    template: &PromptTemplate,
    validator: &Validator,
    client: &dyn ChatClient,
    config: &CurateConfig,
    journal: Option<&Journal>,
) -> Result<CurationOutcome, CurationError> {
    if config.max_checks == 0 {
        return Err(CurationError::Budget);
    }
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(CurationError::Duplicate(r.id.clone()));
        }
    }
    let mut done: BTreeMap<String, CurationRecord> = BTreeMap::new();
    if let Some(j) = journal {
        for r in j.records()? {
            if ids.contains(r.id.as_str()) {
                done.insert(r.id.clone(), r);
            }
        }
    }
    let pending: Vec<&RawRecord> = records.iter().filter(|r| !done.contains_key(&r.id)).collect();
    let results = Mutex::new(Vec::with_capacity(pending.len()));
    for chunk in pending.chunks(config.parallelism.max(1)) {
        std::thread::scope(|s| -> Result<(), CurationError> {
            let handles: Vec<_> = chunk
                .iter()
                .map(|r| s.spawn(|| curate_one(r, template, validator, client, config)))
                .collect();
            for h in handles {
                let rec = h.join().expect("curation worker panicked")?;
                if let Some(j) = journal {
                    j.append(&rec)?;
                }
                results.lock().expect("results lock").push(rec);
            }
            Ok(())
        })?;
    }
    for r in results.into_inner().expect("results lock") {
        done.insert(r.id.clone(), r);
    }
    let mut out = CurationOutcome::default();
    for r in records {
        let rec = done.remove(&r.id).expect("every record processed");
        match rec.status {
            Status::Accepted => out.accepted.push(rec),
            Status::Quarantined => out.quarantined.push(rec),
        }
    }
    Ok(out)
}

/// A reviewer's corrected output for a quarantined record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewedRecord {
    pub id: String,
    pub output: Value,
}

/// Validates reviewed outputs and moves the ones that pass from the
/// quarantine into the accepted set. Returns ids that still fail.
pub fn import_reviewed(
    outcome: &mut CurationOutcome,
    reviewed: &[ReviewedRecord],
    kind: TemplateKind,
    validator: &Validator,
) -> Vec<(String, Vec<RuleFailure>)> {
    let mut rejected = Vec::new();
    for rv in reviewed {
        let Some(pos) = outcome.quarantined.iter().position(|q| q.id == rv.id) else {
            rejected.push((rv.id.clone(), vec![fail(RuleId::Schema, "not in quarantine")]));
            continue;
        };
        let text = rv.output.to_string();
        let verdict = validator.validate(kind, &text);
        if !verdict.passed {
            rejected.push((rv.id.clone(), verdict.failures));
            continue;
        }
        let mut rec = outcome.quarantined.remove(pos);
        rec.output = verdict.parsed.clone();
        rec.status = Status::Accepted;
        rec.attempts.push(Attempt {
            response: Some(text),
            transport_error: None,
            verdict,
        });
        outcome.accepted.push(rec);
    }
    rejected
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue_json(rounds: usize, len: usize) -> String {
        let mut turns = Vec::new();
        for i in 0..rounds {
            turns.push(serde_json::json!({ "role": "patient", "text": "眼".repeat(len.max(1)) + &i.to_string() }));
            turns.push(serde_json::json!({ "role": "doctor", "text": "建议热敷" }));
        }
        Value::Array(turns).to_string()
    }

    fn validator() -> Validator {
        Validator::new(RuleSet::default()).unwrap()
    }

    #[test]
    fn render_substitutes_once() {
        assert_eq!(render_prompt("X", "A{d}B").unwrap(), "AXB");
        assert_eq!(render_prompt("{d}{x}", "A{d}B").unwrap(), "A{d}{x}B");
        assert!(render_prompt("X", "AB").is_err());
        assert!(PromptTemplate::new(TemplateKind::SingleTurn, "{d}{d}").is_err());
    }

    #[test]
    fn builtin_multi_turn_lists_every_precaution() {
        let t = PromptTemplate::builtin(TemplateKind::MultiTurn);
        assert_eq!(t.precautions.len(), 8);
        let p = t.render("原始内容").unwrap();
        for pre in &t.precautions {
            assert!(p.contains(pre.as_str()), "{pre}");
        }
        assert!(p.contains("原始内容"));
    }

    #[test]
    fn round_boundaries() {
        let v = validator();
        assert!(v.validate_multi_turn(&dialogue_json(12, 5)).passed);
        assert!(v.validate_multi_turn(&dialogue_json(10, 5)).passed);
        assert_eq!(v.validate_multi_turn(&dialogue_json(9, 5)).failed_rules(), vec![RuleId::RoundCount]);
        assert_eq!(v.validate_multi_turn(&dialogue_json(16, 5)).failed_rules(), vec![RuleId::RoundCount]);
    }

    #[test]
    fn utterance_mode_counts_each_line() {
        let v = Validator::new(RuleSet {
            round_mode: RoundMode::Utterances,
            ..RuleSet::default()
        })
        .unwrap();
        assert!(v.validate_multi_turn(&dialogue_json(6, 5)).passed);
        assert!(!v.validate_multi_turn(&dialogue_json(10, 5)).passed);
    }

    #[test]
    fn length_boundary() {
        let v = validator();
        // 28 characters plus a two-digit index.
        assert!(v.validate_multi_turn(&dialogue_json(12, 28)).passed);
        assert_eq!(v.validate_multi_turn(&dialogue_json(12, 29)).failed_rules(), vec![RuleId::TurnLength]);
    }

    #[test]
    fn alternation_and_schema() {
        let v = validator();
        let bad = r#"[{"role":"doctor","text":"你好"},{"role":"patient","text":"眼痛"}]"#;
        let r = v.validate_multi_turn(bad).failed_rules();
        assert!(r.contains(&RuleId::Alternation));
        assert_eq!(v.validate_multi_turn("not json").failed_rules(), vec![RuleId::Schema]);
    }

    #[test]
    fn single_turn_rules() {
        let v = validator();
        assert!(v.validate_single_turn(r#"{"patient":"眼睛红肿三天","doctor":"考虑麦粒肿，建议热敷"}"#).passed);
        assert_eq!(v.validate_single_turn(r#"{"patient":"眼睛红肿"}"#).failed_rules(), vec![RuleId::Schema]);
        assert_eq!(
            v.validate_single_turn(r#"{"patient":"黄医生你好，我眼睛红","doctor":"建议热敷"}"#).failed_rules(),
            vec![RuleId::Privacy]
        );
        assert_eq!(
            v.validate_single_turn(r#"{"patient":"眼睛红咋办","doctor":"建议热敷"}"#).failed_rules(),
            vec![RuleId::Colloquial]
        );
    }

    #[test]
    fn fenced_json_is_accepted() {
        let v = validator();
        let r = format!("```json\n{}\n```", r#"{"patient":"眼睛干涩","doctor":"可用人工泪液"}"#);
        assert!(v.validate_single_turn(&r).passed);
    }

    #[test]
    fn validation_is_repeatable() {
        let v = validator();
        let r = dialogue_json(9, 3);
        assert_eq!(v.validate_multi_turn(&r), v.validate_multi_turn(&r));
    }
}
