//! HTTP consultation service: sessions, per-turn retrieval, role encoding
//! and generation, plus knowledge-base administration.
//!
//! Routes (JSON bodies):
//!
//! ```text
//! POST /v1/sessions                 create, optional ablation overrides
//! POST /v1/sessions/{id}/turns      {"text": ...} -> doctor reply
//! GET  /v1/sessions/{id}            transcript with evidence and traces
//! POST /v1/kb/docs                  add a document (admin)
//! GET  /v1/kb/search?q=..&k=..      ranked similarities (admin)
//! GET  /v1/health
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{assemble_input, Ablation, AdaptedModel, DecodeMode, GenerateOptions, PrefixSource, RoleCls};
use crate::dialogue::{Dialogue, Role, Turn};
use crate::encoder::DiagEncoder;
use crate::error::{ModelError, ModelResult};
use crate::kb::{compose_document, DiseaseDoc, KbError, KbIndex, RetrievalResult};
use crate::roles::{role_cls, split_history, RoleEncoding};

pub const ADMIN_TOKEN_ENV: &str = "MEDCONSULT_ADMIN_TOKEN";
pub const DISCLAIMER: &str =
    "Research prototype. Replies are machine-generated and are not medical advice; consult a qualified ophthalmologist.";
/// Used when decoding yields nothing, so a reply is never empty.
pub const FALLBACK_REPLY: &str = "抱歉，暂时无法给出建议，请尽快到眼科门诊就诊。";

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// 128 random bits from the OS-seeded generator, hex encoded.
pub fn new_session_id() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    hex::encode(bytes)
}

/// Retrieved document shown alongside a reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_id: u64,
    pub similarity: f64,
    pub low_confidence: bool,
    pub document: DiseaseDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn_index: usize,
    pub checkpoint_hash: String,
    pub kb_version: String,
    pub config: Ablation,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    /// 1-based index of the doctor turn within the transcript.
    pub turn_index: usize,
    pub reply: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Evidence>,
    pub timing_ms: u64,
    pub trace: TurnTrace,
    pub disclaimer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dialogue: Dialogue,
    pub config: Ablation,
    /// One entry per doctor turn; `None` when nothing was retrieved.
    pub evidence: Vec<Option<Evidence>>,
    pub traces: Vec<TurnTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_retrieval: Option<RetrievalResult>,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Role encoding of the current history; rebuilt after every turn.
    #[serde(skip)]
    pub role_encoding: Option<RoleEncoding>,
}

impl Session {
    pub fn new(config: Ablation) -> Self {
        let id = new_session_id();
        let t = now_ms();
        Self {
            dialogue: Dialogue::new(id.clone(), Vec::new()),
            id,
            config,
            evidence: Vec::new(),
            traces: Vec::new(),
            last_retrieval: None,
            created_ms: t,
            updated_ms: t,
            role_encoding: None,
        }
    }

    fn doctor_pending(&self) -> bool {
        self.dialogue.turns.last().is_some_and(|t| t.role == Role::Patient)
    }
}

/// What one patient turn produces before it is committed to a session.
#[derive(Debug, Clone)]
pub struct Reply {
    pub text: String,
    pub fallback: bool,
    pub retrieval: Option<RetrievalResult>,
    pub evidence: Option<Evidence>,
    pub role_encoding: Option<RoleEncoding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: DecodeMode::Greedy,
        }
    }
}

/// Loaded model, encoder and knowledge base.
pub struct Engine {
    model: AdaptedModel,
    encoder: DiagEncoder,
    kb: RwLock<KbIndex>,
    kb_revision: Mutex<u64>,
    checkpoint_hash: String,
    config: EngineConfig,
}

impl Engine {
    /// `checkpoint_hash` identifies the weights in traces; pass the digest
    /// of the loaded checkpoint file.
    pub fn new(
        model: AdaptedModel,
        encoder: DiagEncoder,
        kb: KbIndex,
        checkpoint_hash: impl Into<String>,
        config: EngineConfig,
    ) -> ModelResult<Self> {
        if kb.encoder_version() != encoder.version() && !kb.is_empty() {
            return Err(ModelError::Config("knowledge base was indexed with a different encoder".into()));
        }
        Ok(Self {
            model,
            encoder,
            kb: RwLock::new(kb),
            kb_revision: Mutex::new(0),
            checkpoint_hash: checkpoint_hash.into(),
            config,
        })
    }

    pub fn model(&self) -> &AdaptedModel {
        &self.model
    }

    pub fn encoder(&self) -> &DiagEncoder {
        &self.encoder
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn kb_version(&self) -> String {
        let kb = self.kb.read().expect("kb lock");
        format!("r{}-n{}", *self.kb_revision.lock().expect("revision lock"), kb.len())
    }

    pub fn kb_len(&self) -> usize {
        self.kb.read().expect("kb lock").len()
    }

    /// Indexes a document live; later turns can retrieve it immediately.
    pub fn add_document(&self, doc: DiseaseDoc) -> Result<u64, KbError> {
        let mut kb = self.kb.write().expect("kb lock");
        let id = kb.index_document(&self.encoder, doc)?;
        *self.kb_revision.lock().expect("revision lock") += 1;
        Ok(id)
    }

    /// Top `k` documents for a free-text query.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(u64, String, f64)>, KbError> {
        let kb = self.kb.read().expect("kb lock");
        if kb.is_empty() {
            return Ok(Vec::new());
        }
        let q = crate::kb::embed_dialogue(&self.encoder, query)?;
        Ok(kb
            .rank(&q)
            .into_iter()
            .take(k)
            .map(|(id, s)| (id, kb.get(id).map(|e| e.doc.name.clone()).unwrap_or_default(), s))
            .collect())
    }

    /// Retrieval over the whole history, role encoding, input assembly and
    /// decoding for the doctor turn that follows `dialogue`.
    pub fn respond(&self, dialogue: &Dialogue, ablation: Ablation) -> ModelResult<Reply> {
        ablation.validate()?;
        let upto = dialogue.turns.len() + 1;
        let (retrieval, evidence, knowledge) = if ablation.use_kb() {
            let kb = self.kb.read().expect("kb lock");
            match kb
                .retrieve_top1(&self.encoder, &dialogue.history_text(upto))
                .map_err(|e| ModelError::Contract(e.to_string()))?
            {
                Some(hit) => {
                    let doc = kb.get(hit.doc_id).expect("retrieved id exists").doc.clone();
                    let text = compose_document(&doc).map_err(|e| ModelError::Contract(e.to_string()))?;
                    let ev = Evidence {
                        doc_id: hit.doc_id,
                        similarity: hit.similarity,
                        low_confidence: hit.low_confidence,
                        document: doc,
                    };
                    (Some(hit), Some(ev), Some(text))
                }
                None => (None, None, None),
            }
        } else {
            (None, None, None)
        };
        let source = ablation.prefix_source();
        let cls = if source == PrefixSource::Roles && self.model.roles().prefix_len() > 0 {
            let (doctor, patient) = role_cls(&self.encoder, &split_history(dialogue, upto))?;
            Some(RoleCls { doctor, patient })
        } else {
            None
        };
        let prefixes = self.model.prefix_encoding(source, cls.as_ref())?;
        let input = assemble_input(
            knowledge.as_deref(),
            &dialogue.turns,
            self.model.vocab(),
            self.model.input_budget(self.config.max_new_tokens),
        );
        let text = self.model.generate(
            &input,
            prefixes.as_ref(),
            ablation.use_lora(),
            GenerateOptions {
                max_new_tokens: self.config.max_new_tokens,
                mode: self.config.mode,
            },
        )?;
        let text = text.trim().to_string();
        let fallback = text.is_empty();
        Ok(Reply {
            text: if fallback { FALLBACK_REPLY.to_string() } else { text },
            fallback,
            retrieval,
            evidence,
            role_encoding: prefixes,
        })
    }
}

/// Durable session snapshots: one JSON line per committed change, replayed
/// on open (last line per id wins) and compacted on open.
pub struct SessionJournal {
    path: PathBuf,
    file: Mutex<File>,
}

impl SessionJournal {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<(Self, Vec<Session>)> {
        let path = path.into();
        let mut latest: HashMap<String, Session> = HashMap::new();
        let mut order = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Session>(&line) {
                    Ok(s) => {
                        if !latest.contains_key(&s.id) {
                            order.push(s.id.clone());
                        }
                        latest.insert(s.id.clone(), s);
                    }
                    Err(e) => tracing::warn!(error = %e, "skipping torn session journal line"),
                }
            }
        }
        let sessions: Vec<Session> = order.into_iter().filter_map(|id| latest.remove(&id)).collect();
        let tmp = path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            for s in &sessions {
                writeln!(f, "{}", serde_json::to_string(s)?)?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok((
            Self {
                path,
                file: Mutex::new(file),
            },
            sessions,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, session: &Session) -> std::io::Result<()> {
        let line = serde_json::to_string(session)? + "\n";
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    #[serde(skip_serializing)]
    pub admin_token: Option<String>,
    pub journal: Option<PathBuf>,
    pub default_config: Ablation,
    pub disclaimer: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            admin_token: None,
            journal: None,
            default_config: Ablation::default(),
            disclaimer: DISCLAIMER.to_string(),
        }
    }
}

impl ServiceConfig {
    /// Fills the admin token from [`ADMIN_TOKEN_ENV`] when unset.
    pub fn with_env(mut self) -> Self {
        if self.admin_token.is_none() {
            self.admin_token = std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        }
        self
    }
}

type SessionSlot = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    engine: Option<Arc<Engine>>,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    journal: Option<SessionJournal>,
    config: ServiceConfig,
}

impl AppState {
    /// `engine = None` starts a service that answers 503 until restarted
    /// with a model.
    pub fn new(engine: Option<Engine>, config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        let (journal, restored) = match &config.journal {
            Some(p) => {
                let (j, s) = SessionJournal::open(p)?;
                (Some(j), s)
            }
            None => (None, Vec::new()),
        };
        let sessions = restored
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(tokio::sync::Mutex::new(s))))
            .collect();
        Ok(Arc::new(Self {
            engine: engine.map(Arc::new),
            sessions: RwLock::new(sessions),
            journal,
            config,
        }))
    }

    pub fn engine(&self) -> Option<&Arc<Engine>> {
        self.engine.as_ref()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("sessions lock").len()
    }

    fn slot(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    fn persist(&self, s: &Session) -> Result<(), ApiError> {
        if let Some(j) = &self.journal {
            j.write(s).map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_fields: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                missing_fields: Vec::new(),
            },
        }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", m)
    }

    fn invalid(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", m)
    }

    fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", "no model is loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_transcript))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/kb/docs", post(kb_add))
        .route("/v1/kb/search", get(kb_search))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "model_loaded": st.engine.is_some(),
        "sessions": st.session_count(),
        "kb_version": st.engine.as_ref().map(|e| e.kb_version()),
    }))
}

fn parse_body<T: serde::de::DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed body: {e}")))
}

#[derive(Debug, Serialize)]
struct SessionCreated {
    id: String,
    config: Ablation,
    turns: usize,
    created_ms: u64,
    disclaimer: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    if st.engine.is_none() {
        return Err(ApiError::unavailable());
    }
    let overrides: serde_json::Value = parse_body::<Option<serde_json::Value>>(&body)?.unwrap_or_default();
    let mut config = serde_json::to_value(st.config.default_config).expect("ablation serializes");
    if let (Some(base), Some(o)) = (config.as_object_mut(), overrides.as_object()) {
        for (k, v) in o {
            if !base.contains_key(k) {
                return Err(ApiError::invalid(format!("unknown override {k}")));
            }
            base.insert(k.clone(), v.clone());
        }
    } else if !overrides.is_null() {
        return Err(ApiError::invalid("overrides must be an object"));
    }
    let config: Ablation = serde_json::from_value(config).map_err(|e| ApiError::invalid(e.to_string()))?;
    config.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    let session = Session::new(config);
    st.persist(&session)?;
    let out = SessionCreated {
        id: session.id.clone(),
        config,
        turns: 0,
        created_ms: session.created_ms,
        disclaimer: st.config.disclaimer.clone(),
    };
    st.sessions
        .write()
        .expect("sessions lock")
        .insert(session.id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct TurnRequest {
    #[serde(default)]
    text: String,
}

async fn post_turn(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<TurnResponse>, ApiError> {
    let slot = st.slot(&id)?;
    let req: TurnRequest = parse_body(&body)?;
    let text = req.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::invalid("text must not be empty"));
    }
    let Some(engine) = st.engine.clone() else {
        return Err(ApiError::unavailable());
    };
    // A post already running for this session means the doctor turn is
    // still pending.
    let mut session = slot
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "turn_pending", "a reply for this session is in progress"))?;
    if session.doctor_pending() {
        return Err(ApiError::new(StatusCode::CONFLICT, "turn_pending", "awaiting the doctor turn"));
    }
    let mut dialogue = session.dialogue.clone();
    dialogue.turns.push(Turn::patient(text));
    let config = session.config;
    let started = Instant::now();
    let (reply, dialogue) = tokio::task::spawn_blocking(move || {
        let r = engine.respond(&dialogue, config);
        (r, dialogue)
    })
    .await
    .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))?;
    let reply = reply.map_err(|e| ApiError::internal(e.to_string()))?;
    let engine = st.engine.as_ref().expect("checked above");
    let trace = TurnTrace {
        turn_index: dialogue.turns.len() + 1,
        checkpoint_hash: engine.checkpoint_hash().to_string(),
        kb_version: engine.kb_version(),
        config,
        fallback: reply.fallback,
    };
    let mut updated = session.clone();
    updated.dialogue = dialogue;
    updated.dialogue.turns.push(Turn::doctor(reply.text.clone()));
    updated.evidence.push(reply.evidence.clone());
    updated.traces.push(trace.clone());
    updated.last_retrieval = reply.retrieval;
    updated.role_encoding = reply.role_encoding;
    updated.updated_ms = now_ms();
    st.persist(&updated)?;
    *session = updated;
    Ok(Json(TurnResponse {
        session_id: session.id.clone(),
        turn_index: trace.turn_index,
        reply: reply.text,
        evidence: reply.evidence,
        timing_ms: started.elapsed().as_millis() as u64,
        trace,
        disclaimer: st.config.disclaimer.clone(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub config: Ablation,
    pub turns: Vec<Turn>,
    /// Evidence for doctor turns that had a retrieval.
    pub evidence: Vec<Evidence>,
    pub traces: Vec<TurnTrace>,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub disclaimer: String,
}

async fn get_transcript(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Transcript>, ApiError> {
    let slot = st.slot(&id)?;
    let s = slot.lock().await;
    Ok(Json(Transcript {
        id: s.id.clone(),
        config: s.config,
        turns: s.dialogue.turns.clone(),
        evidence: s.evidence.iter().flatten().cloned().collect(),
        traces: s.traces.clone(),
        created_ms: s.created_ms,
        updated_ms: s.updated_ms,
        disclaimer: st.config.disclaimer.clone(),
    }))
}

fn authorize(st: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = st.config.admin_token.as_deref() else {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "admin_disabled", "no admin token configured"));
    };
    let given = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(expected) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "admin token required"));
    }
    Ok(())
}

async fn kb_add(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    authorize(&st, &headers)?;
    let engine = st.engine.clone().ok_or_else(ApiError::unavailable)?;
    let doc: DiseaseDoc = parse_body(&body)?;
    let result = tokio::task::spawn_blocking(move || engine.add_document(doc).map(|id| (id, engine.kb_version())))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    match result {
        Ok((id, version)) => {
            Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id, "kb_version": version }))).into_response())
        }
        Err(KbError::Invalid(fields)) => {
            let mut e = ApiError::invalid(format!("document is missing required fields: {fields:?}"));
            e.body.missing_fields = fields;
            Err(e)
        }
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

#[derive(Debug, Deserialize)]
struct SearchQuery {
    #[serde(default)]
    q: String,
    k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: u64,
    pub name: String,
    pub similarity: f64,
}

async fn kb_search(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<SearchQuery>,
) -> Result<Json<Vec<SearchHit>>, ApiError> {
    authorize(&st, &headers)?;
    let engine = st.engine.clone().ok_or_else(ApiError::unavailable)?;
    if q.q.trim().is_empty() {
        return Err(ApiError::invalid("query must not be empty"));
    }
    let k = q.k.unwrap_or(5).max(1);
    let hits = tokio::task::spawn_blocking(move || engine.search(&q.q, k))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(
        hits.into_iter()
            .map(|(doc_id, name, similarity)| SearchHit { doc_id, name, similarity })
            .collect(),
    ))
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "consultation service listening");
    axum::serve(listener, router(state)).await
}
