//! HTTP routes. Request and response bodies are JSON; unknown input
//! fields are ignored.

use std::collections::{BTreeMap, BTreeSet};

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Path, Request, State};
use axum::http::header::{self, HeaderMap, HeaderValue};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use chrono::{DateTime, Duration, FixedOffset, NaiveDate, Offset, Utc};
use emistudy_core::activity::{ActionDraft, ActionError, InterventionAction};
use emistudy_core::adherence::{per_user_csv, AdherenceAccumulator, AdherenceFilter};
use emistudy_core::content::{
    chapter_unlock_state, fetch_asset, get_manifest, latest_bundles, publish_bundle, BundleFile, BundleKind, ByteRange, ChapterProgress,
    ChapterState, ContentCatalog, ContentManifest, FetchError,
};
use emistudy_core::feedback::{compute_metrics, evaluate, ActivityLog, FeedbackMessage, UserMetrics};
use emistudy_core::schema::{is_language_code, resolve_language, Artifact, ArtifactKind, LocalizedSchema};
use emistudy_core::study::{modules_for, window_at, Assignment, AssignError, AuthMode, User, WindowStatus};
use emistudy_core::submission::{check_answers, offset_in_range, SubmissionEnvelope};
use emistudy_core::{Digest, Module, StudyArm};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::auth::{self, Participant, Researcher};
use crate::error::{ApiError, ApiResult};
use crate::state::AppState;
use crate::store::{ArtifactSummary, PutOutcome, StoredSubmission, StoreError};

/// Upper bound for admin uploads (base64 bundles).
pub const ADMIN_BODY_LIMIT: usize = 256 * 1024 * 1024;

pub const ABOUT_TITLE: &str = "About this study app";
pub const ABOUT_TEXT: &str = "This app accompanies a multi-center clinical study on tinnitus. \
Depending on your study group it offers a daily diary, psycho-education chapters with quizzes, \
sound stimulation and personal feedback. Your entries are stored pseudonymously and are used \
for research by the participating clinical centers only. Contact your study center for questions \
about participation or withdrawal.";

pub fn router(state: AppState) -> Router {
    let admin = Router::new()
        .route("/v1/admin/artifacts", post(put_artifact))
        .route("/v1/admin/bundles", post(put_bundle))
        .route("/v1/admin/catalog", put(set_catalog))
        .route("/v1/admin/export", get(export))
        .layer(DefaultBodyLimit::max(ADMIN_BODY_LIMIT));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/users", post(register))
        .route("/v1/users/anonymous", post(register_anonymous))
        .route("/v1/sessions", post(login))
        .route("/v1/config", get(config))
        .route("/v1/questionnaires/{id}", get(questionnaire))
        .route("/v1/submissions", post(submit))
        .route("/v1/actions", post(log_action))
        .route("/v1/feedback", get(feedback))
        .route("/v1/about", get(about))
        .route("/v1/stats/adherence", get(adherence))
        .route("/v1/content/manifest", get(content_manifest))
        .route("/v1/content/{hash}", get(content))
        .merge(admin)
        .with_state(state)
}

/// JSON body whose rejection uses the API error shape.
pub struct JsonBody<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(e) => Err(ApiError::new(e.status(), "invalid_body", e.body_text())),
        }
    }
}

/// Query string whose rejection uses the API error shape.
pub struct Params<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut axum::http::request::Parts, state: &S) -> Result<Self, Self::Rejection> {
        match axum::extract::Query::<T>::from_request_parts(parts, state).await {
            Ok(q) => Ok(Params(q.0)),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

fn created<T: Serialize>(inserted: bool, body: T) -> Response {
    let status = if inserted { StatusCode::CREATED } else { StatusCode::OK };
    (status, Json(body)).into_response()
}

// ---- enrollment ----

#[derive(Debug, Deserialize)]
pub struct RegisterRequest {
    pub login: String,
    pub password: String,
    pub center_id: String,
    #[serde(default)]
    pub language: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct AnonymousRequest {
    pub center_id: String,
    #[serde(default)]
    pub language: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Enrollment {
    pub user_id: String,
    pub auth_mode: AuthMode,
    pub center_id: String,
    pub language: String,
    pub arm: StudyArm,
    pub study_type: u8,
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub assignment: Assignment,
}

fn enrollment_language(state: &AppState, center_id: &str, language: Option<String>) -> ApiResult<String> {
    let center = state.center(center_id).ok_or_else(|| ApiError::not_found(format!("unknown center {center_id}")))?;
    match language {
        None => Ok(center.default_language.clone()),
        Some(l) if is_language_code(&l) => Ok(l),
        Some(l) => Err(ApiError::bad_request(format!("invalid language code {l:?}"))),
    }
}

/// Creates the user and the assignment in one store transaction, inside the
/// center's allocation lock.
fn enroll(state: &AppState, user: User, login: Option<(String, String)>) -> ApiResult<Enrollment> {
    let now = state.clock.now();
    let assignment = state.allocator.assign_with(&user, now, |a| {
        state.store.create_user(&user, login.as_ref().map(|(l, h)| (l.as_str(), h.as_str())), a).map_err(ApiError::from)
    })?;
    let (token, record) = auth::issue_token(state, &user.id, now)?;
    state.store.audit(now, "enroll", &format!("{} {} {}", user.id, assignment.center_id, assignment.arm))?;
    Ok(Enrollment {
        user_id: user.id,
        auth_mode: user.auth_mode,
        center_id: user.center_id,
        language: user.language,
        arm: assignment.arm,
        study_type: assignment.arm.study_type(),
        token,
        expires_at: record.expires_at,
        assignment,
    })
}

impl From<AssignError> for ApiError {
    fn from(e: AssignError) -> Self {
        match e {
            AssignError::UnknownCenter(c) => ApiError::not_found(format!("unknown center {c}")),
            other => ApiError::conflict("assignment", other.to_string()),
        }
    }
}

async fn register(State(state): State<AppState>, JsonBody(req): JsonBody<RegisterRequest>) -> ApiResult<Response> {
    if !auth::valid_login(&req.login) {
        return Err(ApiError::bad_request("login must be 3 to 64 characters of letters, digits, '.', '_', '@', '-'"));
    }
    if req.password.chars().count() < auth::MIN_PASSWORD_LEN {
        return Err(ApiError::bad_request(format!("password must have at least {} characters", auth::MIN_PASSWORD_LEN)));
    }
    let language = enrollment_language(&state, &req.center_id, req.language)?;
    let enrollment = state
        .blocking(move |s| {
            if s.store.login(&req.login)?.is_some() {
                return Err(StoreError::LoginTaken.into());
            }
            let hash = auth::hash_password(&req.password);
            let user = User::registered(Uuid::new_v4().to_string(), req.login.clone(), req.center_id, language, s.clock.now());
            enroll(s, user, Some((req.login, hash)))
        })
        .await?;
    Ok(created(true, enrollment))
}

async fn register_anonymous(State(state): State<AppState>, JsonBody(req): JsonBody<AnonymousRequest>) -> ApiResult<Response> {
    let language = enrollment_language(&state, &req.center_id, req.language)?;
    let enrollment = state
        .blocking(move |s| {
            let user = User::anonymous(Uuid::new_v4().to_string(), req.center_id, language, s.clock.now());
            enroll(s, user, None)
        })
        .await?;
    Ok(created(true, enrollment))
}

#[derive(Debug, Deserialize)]
pub struct LoginRequest {
    pub login: String,
    pub password: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

async fn login(State(state): State<AppState>, JsonBody(req): JsonBody<LoginRequest>) -> ApiResult<Json<Session>> {
    state
        .blocking(move |s| {
            let (user_id, hash) = s.store.login(&req.login)?.ok_or_else(ApiError::unauthorized)?;
            if !auth::verify_password(&req.password, &hash) {
                return Err(ApiError::unauthorized());
            }
            let (token, record) = auth::issue_token(s, &user_id, s.clock.now())?;
            Ok(Json(Session { user_id, token, expires_at: record.expires_at }))
        })
        .await
}

// ---- configuration and questionnaires ----

#[derive(Debug, Serialize, Deserialize)]
pub struct ParticipantConfig {
    pub user_id: String,
    pub center_id: String,
    pub language: String,
    pub arm: StudyArm,
    pub study_type: u8,
    pub modules: BTreeSet<Module>,
    pub window: WindowStatus,
    /// Expired windows keep read access; writes are rejected.
    pub read_only: bool,
    /// Latest seeded version of every artifact the arm may use.
    pub artifacts: Vec<ArtifactSummary>,
    pub content_manifest: String,
}

fn artifact_visible(a: &ArtifactSummary, modules: &BTreeSet<Module>) -> bool {
    a.module.is_some_and(|m| modules.contains(&m))
}

async fn config(State(state): State<AppState>, p: Participant) -> ApiResult<Json<ParticipantConfig>> {
    state
        .blocking(move |s| {
            let modules = modules_for(p.assignment.arm);
            let window = window_at(p.assignment.assigned_at, s.clock.now(), s.config.window_days);
            let artifacts = s.store.latest_artifacts()?.into_iter().filter(|a| artifact_visible(a, &modules)).collect();
            Ok(Json(ParticipantConfig {
                user_id: p.user.id,
                center_id: p.user.center_id,
                language: p.user.language,
                arm: p.assignment.arm,
                study_type: p.assignment.arm.study_type(),
                modules,
                read_only: !window.is_active(),
                window,
                artifacts,
                content_manifest: "/v1/content/manifest".into(),
            }))
        })
        .await
}

#[derive(Debug, Deserialize)]
pub struct QuestionnaireQuery {
    #[serde(default)]
    pub lang: Option<String>,
    #[serde(default)]
    pub version: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuestionnaireResponse {
    #[serde(flatten)]
    pub schema: LocalizedSchema,
    pub declared_languages: Vec<String>,
}

async fn questionnaire(
    State(state): State<AppState>,
    p: Participant,
    Path(id): Path<String>,
    Params(q): Params<QuestionnaireQuery>,
) -> ApiResult<Json<QuestionnaireResponse>> {
    state
        .blocking(move |s| {
            let Some(Artifact::Questionnaire(schema)) = s.store.questionnaire(&id, q.version)? else {
                return Err(ApiError::not_found(match q.version {
                    Some(v) => format!("no questionnaire {id} version {v}"),
                    None => format!("no questionnaire {id}"),
                }));
            };
            if !p.assignment.arm.has_module(schema.module) {
                return Err(ApiError::forbidden("module_not_assigned", format!("{} is not part of {}", schema.module, p.assignment.arm)));
            }
            let lang = q.lang.unwrap_or_else(|| p.user.language.clone());
            let center_default = center_language(s, &p.user);
            Ok(Json(QuestionnaireResponse { schema: schema.localize(&lang, &center_default), declared_languages: schema.languages.clone() }))
        })
        .await
}

fn center_language(state: &AppState, user: &User) -> String {
    state.center(&user.center_id).map_or_else(|| "en".to_owned(), |c| c.default_language.clone())
}

// ---- writes ----

/// Offset range, clock skew and the participation window, all checked on
/// the client's instant so offline replays are judged by when the entry
/// was made.
fn check_client_time(state: &AppState, assignment: &Assignment, client_time: &DateTime<FixedOffset>) -> ApiResult<()> {
    if !offset_in_range(client_time) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_offset", "UTC offset must be within -12:00..=+14:00"));
    }
    let instant = client_time.with_timezone(&Utc);
    let skew = Duration::seconds(state.config.max_clock_skew_seconds);
    if instant > state.clock.now() + skew {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "clock_skew", "client time is ahead of the server clock"));
    }
    if instant + skew < assignment.assigned_at {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "before_enrollment", "client time precedes enrollment"));
    }
    if !window_at(assignment.assigned_at, instant, state.config.window_days).is_active() {
        return Err(ApiError::forbidden("window_expired", format!("the {}-day participation window has ended", state.config.window_days)));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub accepted: bool,
    pub submission_id: Uuid,
    pub duplicate: bool,
}

async fn submit(State(state): State<AppState>, p: Participant, JsonBody(env): JsonBody<SubmissionEnvelope>) -> ApiResult<Response> {
    if env.user_id != p.user.id {
        return Err(ApiError::forbidden("user_mismatch", "envelope user does not match the token"));
    }
    state
        .blocking(move |s| {
            let ack = |duplicate| SubmissionAck { accepted: true, submission_id: env.submission_id, duplicate };
            if s.store.submission(&p.user.id, &env.submission_id)?.is_some() {
                return Ok(created(false, ack(true)));
            }
            check_client_time(s, &p.assignment, &env.client_time)?;
            let schema = match s.store.questionnaire(&env.schema_id, Some(env.schema_version))? {
                Some(Artifact::Questionnaire(schema)) => schema,
                _ if s.store.questionnaire(&env.schema_id, None)?.is_some() => {
                    return Err(ApiError::conflict(
                        "unknown_schema_version",
                        format!("{} has no version {}; refresh the configuration", env.schema_id, env.schema_version),
                    ))
                }
                _ => return Err(ApiError::not_found(format!("no questionnaire {}", env.schema_id))),
            };
            if schema.module != Module::Diary {
                return Err(ApiError::unprocessable(format!("{} is a {} artifact; report quizzes as actions", schema.id, schema.module)));
            }
            let findings = check_answers(&schema, &env.answers);
            if !findings.is_empty() {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_answers", "answers do not match the pinned schema")
                    .with_findings(findings));
            }
            let stored = StoredSubmission { envelope: env.clone(), schema_digest: schema.digest, received_at: s.clock.now() };
            let outcome = s.store.insert_submission(&stored)?;
            Ok(created(!outcome.is_duplicate(), ack(outcome.is_duplicate())))
        })
        .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionAck {
    pub action_id: i64,
    pub duplicate: bool,
}

impl From<ActionError> for ApiError {
    fn from(e: ActionError) -> Self {
        match e {
            ActionError::Gated { .. } => ApiError::forbidden("module_not_assigned", e.to_string()),
            other => ApiError::unprocessable(other.to_string()),
        }
    }
}

async fn log_action(State(state): State<AppState>, p: Participant, JsonBody(draft): JsonBody<ActionDraft>) -> ApiResult<Response> {
    state
        .blocking(move |s| {
            if let Some(existing) = s.store.action_by_dedup(&p.user.id, &draft.dedup_id)? {
                return Ok(created(false, ActionAck { action_id: existing.action_id, duplicate: true }));
            }
            check_client_time(s, &p.assignment, &draft.client_time)?;
            draft.check_for_arm(p.assignment.arm)?;
            let action = InterventionAction {
                action_id: 0,
                user_id: p.user.id.clone(),
                center_id: p.user.center_id.clone(),
                module: draft.module,
                payload: draft.payload,
                client_time: draft.client_time,
                dedup_id: draft.dedup_id,
                received_at: s.clock.now(),
            };
            let outcome = s.store.insert_action(&action)?;
            Ok(created(!outcome.is_duplicate(), ActionAck { duplicate: outcome.is_duplicate(), action_id: outcome.into_inner() }))
        })
        .await
}

// ---- feedback ----

#[derive(Debug, Deserialize)]
pub struct FeedbackQuery {
    #[serde(default)]
    pub lang: Option<String>,
    /// Client-local date; defaults to the server date at the offset of the
    /// user's latest diary entry.
    #[serde(default)]
    pub today: Option<NaiveDate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RuleSetRef {
    pub id: String,
    pub version: u32,
    pub digest: Digest,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub language: String,
    pub today: NaiveDate,
    pub metrics: UserMetrics,
    pub messages: Vec<FeedbackMessage>,
    pub rule_set: Option<RuleSetRef>,
}

async fn feedback(State(state): State<AppState>, p: Participant, Params(q): Params<FeedbackQuery>) -> ApiResult<Json<FeedbackResponse>> {
    state
        .blocking(move |s| {
            let submissions = s.store.submissions(&p.user.id)?;
            let diary_times: Vec<DateTime<FixedOffset>> = submissions.iter().map(|x| x.envelope.client_time).collect();
            let offset = diary_times.last().map_or_else(|| Utc.fix(), |t| *t.offset());
            let today = q.today.unwrap_or_else(|| s.clock.now().with_timezone(&offset).date_naive());
            let enrolled_on = p.assignment.assigned_at.with_timezone(&offset).date_naive();
            let actions = s.store.actions_for(&p.user.id)?;
            let catalog = s.store.catalog()?;
            let log = ActivityLog { actions: &actions, diary_times: &diary_times, chapters: &catalog.chapters };
            let metrics = compute_metrics(log, enrolled_on, today);
            let requested = q.lang.unwrap_or_else(|| p.user.language.clone());
            let center_default = center_language(s, &p.user);
            let (language, messages, rule_set) = match s.store.latest_feedback_rules()? {
                Some(Artifact::FeedbackRules(rules)) => {
                    let language = resolve_language(&rules.languages, &requested, &center_default).unwrap_or(&requested).to_owned();
                    let messages = evaluate(&rules, &metrics, &requested, &center_default);
                    (language, messages, Some(RuleSetRef { id: rules.id, version: rules.version, digest: rules.digest }))
                }
                _ => (requested, Vec::new(), None),
            };
            Ok(Json(FeedbackResponse { language, today, metrics, messages, rule_set }))
        })
        .await
}

// ---- about ----

#[derive(Debug, Serialize, Deserialize)]
pub struct AboutDocument {
    /// Digest of the about-page bundles, or of the built-in text.
    pub version: String,
    pub title: String,
    pub text: String,
    pub bundles: Vec<emistudy_core::content::ContentBundle>,
}

async fn about(State(state): State<AppState>) -> ApiResult<Response> {
    let bundles = state.blocking(|s| Ok(s.store.bundles()?)).await?;
    let about: Vec<_> = latest_bundles(&bundles).into_iter().filter(|b| b.kind == BundleKind::AboutPage).collect();
    let version = match about.as_slice() {
        [] => Digest::of(format!("{ABOUT_TITLE}\n{ABOUT_TEXT}").as_bytes()),
        [one] => one.digest,
        many => {
            let joined: Vec<u8> = many.iter().flat_map(|b| b.digest.as_bytes().to_vec()).collect();
            Digest::of(&joined)
        }
    };
    let doc = AboutDocument { version: version.to_hex(), title: ABOUT_TITLE.into(), text: ABOUT_TEXT.into(), bundles: about };
    let mut response = Json(doc).into_response();
    if let Ok(etag) = HeaderValue::from_str(&format!("\"{}\"", version.to_hex())) {
        response.headers_mut().insert(header::ETAG, etag);
    }
    Ok(response)
}

// ---- adherence ----

#[derive(Debug, Deserialize)]
pub struct AdherenceQuery {
    #[serde(default)]
    pub module: Option<String>,
    #[serde(default)]
    pub center: Option<String>,
    #[serde(default)]
    pub from: Option<NaiveDate>,
    #[serde(default)]
    pub to: Option<NaiveDate>,
    #[serde(default)]
    pub format: Option<String>,
}

async fn adherence(State(state): State<AppState>, _r: Researcher, Params(q): Params<AdherenceQuery>) -> ApiResult<Response> {
    let module = match q.module.as_deref().filter(|m| !m.is_empty()) {
        None => None,
        Some(m) => Some(Module::parse(m).ok_or_else(|| ApiError::bad_request(format!("unknown module {m:?}")))?),
    };
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    };
    let filter = AdherenceFilter::new(module, q.center.filter(|c| !c.is_empty()), q.from, q.to)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let summary = state
        .blocking(move |s| {
            let mut acc = AdherenceAccumulator::new(filter).map_err(|e| ApiError::unprocessable(e.to_string()))?;
            s.store.for_each_action(&mut |a| acc.push(&a))?;
            Ok(acc.finish())
        })
        .await?;
    if csv {
        Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], per_user_csv(&summary)).into_response())
    } else {
        Ok(Json(summary).into_response())
    }
}

// ---- content ----

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestResponse {
    #[serde(flatten)]
    pub manifest: ContentManifest,
    /// Unlock state of each visible chapter for this user.
    pub chapter_states: BTreeMap<String, ChapterState>,
}

async fn content_manifest(State(state): State<AppState>, p: Participant) -> ApiResult<Json<ManifestResponse>> {
    state
        .blocking(move |s| {
            let bundles = s.store.bundles()?;
            let catalog = s.store.catalog()?;
            let manifest = get_manifest(p.assignment.arm, &bundles, &catalog);
            let actions = s.store.actions_for(&p.user.id)?;
            let chapter_states = chapter_unlock_state(&ChapterProgress::from_actions(&actions), &manifest.chapters);
            Ok(Json(ManifestResponse { manifest, chapter_states }))
        })
        .await
}

fn content_type(path: &str) -> &'static str {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "html" | "htm" => "text/html; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "js" => "text/javascript; charset=utf-8",
        "json" => "application/json",
        "txt" | "md" => "text/plain; charset=utf-8",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "mp3" => "audio/mpeg",
        "wav" => "audio/wav",
        "ogg" => "audio/ogg",
        "m4a" => "audio/mp4",
        _ => "application/octet-stream",
    }
}

async fn content(State(state): State<AppState>, p: Participant, Path(hash): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let digest: Digest = hash.parse().map_err(|_| ApiError::bad_request("content hash must be 64 hex digits"))?;
    let etag = format!("\"{}\"", digest.to_hex());
    let range_header = headers.get(header::RANGE).and_then(|v| v.to_str().ok()).map(str::to_owned);
    let not_modified = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let arm = p.assignment.arm;
    let (path, fetched) = state
        .blocking(move |s| {
            // only bundles the arm may see; unknown and hidden look alike
            let path = s
                .store
                .bundles()?
                .into_iter()
                .filter(|b| b.kind.visible_to(arm))
                .find_map(|b| b.files.into_iter().find(|f| f.digest == digest).map(|f| f.path))
                .ok_or_else(|| ApiError::not_found(format!("no asset {}", digest.to_hex())))?;
            if not_modified {
                return Ok((path, None));
            }
            let range = range_header.as_deref().and_then(ByteRange::parse);
            match fetch_asset(s.blobs.as_ref(), &digest, range) {
                Ok(f) => Ok((path, Some(Ok(f)))),
                Err(FetchError::RangeNotSatisfiable { len }) => Ok((path, Some(Err(len)))),
                Err(FetchError::NotFound(_)) => Err(ApiError::not_found(format!("no asset {}", digest.to_hex()))),
                Err(FetchError::Corrupt(d)) => {
                    tracing::error!(digest = %d.to_hex(), "stored asset fails its digest");
                    Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_asset", "stored asset failed integrity check"))
                }
                Err(FetchError::Io(e)) => Err(ApiError::internal(format!("asset read failed: {e}"))),
            }
        })
        .await?;
    let builder = Response::builder()
        .header(header::ETAG, &etag)
        .header(header::ACCEPT_RANGES, "bytes")
        .header(header::CACHE_CONTROL, "public, max-age=31536000, immutable");
    let response = match fetched {
        None => builder.status(StatusCode::NOT_MODIFIED).body(Body::empty()),
        Some(Err(len)) => builder
            .status(StatusCode::RANGE_NOT_SATISFIABLE)
            .header(header::CONTENT_RANGE, format!("bytes */{len}"))
            .body(Body::empty()),
        Some(Ok(f)) => {
            let builder = builder.header(header::CONTENT_TYPE, content_type(&path));
            match f.range {
                Some((start, end)) => builder
                    .status(StatusCode::PARTIAL_CONTENT)
                    .header(header::CONTENT_RANGE, format!("bytes {start}-{end}/{}", f.total_len))
                    .body(Body::from(f.bytes)),
                None => builder.status(StatusCode::OK).body(Body::from(f.bytes)),
            }
        }
    };
    response.map_err(|e| ApiError::internal(e.to_string()))
}

// ---- administration (researcher credential) ----

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedAck {
    pub kind: String,
    pub id: String,
    pub version: u32,
    pub digest: Digest,
    pub status: String,
}

fn outcome_text(o: PutOutcome) -> String {
    match o {
        PutOutcome::Inserted => "inserted".into(),
        PutOutcome::Unchanged => "unchanged".into(),
    }
}

async fn put_artifact(State(state): State<AppState>, _r: Researcher, JsonBody(artifact): JsonBody<Artifact>) -> ApiResult<Response> {
    let report = artifact.validate();
    if !report.verdict() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_artifact", "artifact failed validation").with_findings(report.findings));
    }
    state
        .blocking(move |s| {
            let now = s.clock.now();
            let outcome = s.store.put_artifact(&artifact, now)?;
            let kind = artifact.kind();
            if outcome == PutOutcome::Inserted {
                s.store.audit(now, "seed_artifact", &format!("{}/{}@{} {}", kind.as_str(), artifact.id(), artifact.version(), artifact.digest().to_hex()))?;
            }
            let ack = SeedAck {
                kind: kind.as_str().into(),
                id: artifact.id().into(),
                version: artifact.version(),
                digest: artifact.digest(),
                status: outcome_text(outcome),
            };
            Ok(created(outcome == PutOutcome::Inserted, ack))
        })
        .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadFile {
    pub path: String,
    /// Standard base64.
    pub content_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleUpload {
    pub id: String,
    pub kind: BundleKind,
    pub version: u32,
    pub files: Vec<UploadFile>,
}

async fn put_bundle(State(state): State<AppState>, _r: Researcher, JsonBody(upload): JsonBody<BundleUpload>) -> ApiResult<Response> {
    let mut files = Vec::with_capacity(upload.files.len());
    for f in upload.files {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(f.content_base64.as_bytes())
            .map_err(|e| ApiError::bad_request(format!("{}: invalid base64: {e}", f.path)))?;
        files.push(BundleFile { path: f.path, bytes });
    }
    let prepared = publish_bundle(&upload.id, upload.kind, upload.version, files).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    state
        .blocking(move |s| {
            let _guard = s.publish.lock();
            let now = s.clock.now();
            let bundle = prepared.bundle;
            // blobs first: a stored bundle never points at missing bytes
            for (digest, bytes) in &prepared.blobs {
                s.blobs.put(digest, bytes).map_err(|e| ApiError::internal(format!("blob write failed: {e}")))?;
            }
            let outcome = s.store.put_bundle(&bundle, now)?;
            if outcome == PutOutcome::Inserted {
                s.store.audit(now, "publish_bundle", &format!("{}@{} {}", bundle.id, bundle.version, bundle.digest.to_hex()))?;
            }
            let ack = SeedAck { kind: "bundle".into(), id: bundle.id, version: bundle.version, digest: bundle.digest, status: outcome_text(outcome) };
            Ok(created(outcome == PutOutcome::Inserted, ack))
        })
        .await
}

async fn set_catalog(State(state): State<AppState>, _r: Researcher, JsonBody(catalog): JsonBody<ContentCatalog>) -> ApiResult<Json<ContentCatalog>> {
    state
        .blocking(move |s| {
            let bundles = s.store.bundles()?;
            let quiz_ids: BTreeSet<String> =
                s.store.latest_artifacts()?.into_iter().filter(|a| a.kind == ArtifactKind::Quiz).map(|a| a.id).collect();
            catalog.validate(&bundles, &quiz_ids).map_err(|e| ApiError::unprocessable(e.to_string()))?;
            s.store.set_catalog(&catalog)?;
            s.store.audit(s.clock.now(), "set_catalog", &format!("{} sounds, {} chapters", catalog.sounds.len(), catalog.chapters.len()))?;
            Ok(Json(catalog))
        })
        .await
}

async fn export(State(state): State<AppState>, _r: Researcher) -> ApiResult<Response> {
    let body = state
        .blocking(|s| {
            let mut buf = Vec::new();
            s.store.export_ndjson(&mut buf)?;
            Ok(buf)
        })
        .await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
