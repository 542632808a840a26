//! Persistence behind the [`Store`] trait, with an embedded SQLite
//! implementation.
//!
//! Every method is one transaction. Dedup keys are enforced by unique
//! constraints, so concurrent retransmissions cannot both insert.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use emistudy_core::activity::InterventionAction;
use emistudy_core::content::{ContentBundle, ContentCatalog};
use emistudy_core::schema::{Artifact, ArtifactKind};
use emistudy_core::study::{Assignment, AuthMode, User};
use emistudy_core::submission::SubmissionEnvelope;
use emistudy_core::{Digest, Module};
use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("login already registered")]
    LoginTaken,
    #[error("{what} {id} version {version} already exists with digest {existing}")]
    Conflict { what: &'static str, id: String, version: u32, existing: Digest },
    #[error("storage failure: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("corrupt stored record: {0}")]
    Decode(String),
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
}

pub type StoreResult<T> = Result<T, StoreError>;

/// Outcome of an idempotent write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insert<T> {
    Inserted(T),
    Duplicate(T),
}

impl<T> Insert<T> {
    pub fn is_duplicate(&self) -> bool {
        matches!(self, Insert::Duplicate(_))
    }

    pub fn into_inner(self) -> T {
        match self {
            Insert::Inserted(t) | Insert::Duplicate(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub user_id: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSubmission {
    #[serde(flatten)]
    pub envelope: SubmissionEnvelope,
    /// Digest of the pinned schema version at acceptance time.
    pub schema_digest: Digest,
    pub received_at: DateTime<Utc>,
}

/// Artifact index entry without the body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub kind: ArtifactKind,
    pub id: String,
    pub version: u32,
    pub digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<Module>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub users: u64,
    pub assignments: u64,
    pub submissions: u64,
    pub actions: u64,
}

pub trait Store: Send + Sync {
    fn meta(&self, key: &str) -> StoreResult<Option<String>>;
    /// Stores `value` unless `key` is already set; returns the stored value.
    fn meta_insert_once(&self, key: &str, value: &str) -> StoreResult<String>;
    fn audit(&self, at: DateTime<Utc>, event: &str, detail: &str) -> StoreResult<()>;
    fn audit_log(&self) -> StoreResult<Vec<(DateTime<Utc>, String, String)>>;

    /// User and assignment in one transaction.
    fn create_user(&self, user: &User, login: Option<(&str, &str)>, assignment: &Assignment) -> StoreResult<()>;
    /// `(user id, password hash)` for a login name.
    fn login(&self, login: &str) -> StoreResult<Option<(String, String)>>;
    fn user(&self, id: &str) -> StoreResult<Option<User>>;
    fn assignment(&self, user_id: &str) -> StoreResult<Option<Assignment>>;
    fn assignments(&self) -> StoreResult<Vec<Assignment>>;
    fn counts(&self) -> StoreResult<Counts>;

    fn insert_token(&self, token_hash: &str, record: &TokenRecord) -> StoreResult<()>;
    fn token(&self, token_hash: &str) -> StoreResult<Option<TokenRecord>>;

    fn put_artifact(&self, artifact: &Artifact, at: DateTime<Utc>) -> StoreResult<PutOutcome>;
    /// Questionnaire or quiz by id; the latest version when `version` is
    /// `None`.
    fn questionnaire(&self, id: &str, version: Option<u32>) -> StoreResult<Option<Artifact>>;
    fn latest_feedback_rules(&self) -> StoreResult<Option<Artifact>>;
    /// Latest version of every artifact id.
    fn latest_artifacts(&self) -> StoreResult<Vec<ArtifactSummary>>;

    fn insert_submission(&self, submission: &StoredSubmission) -> StoreResult<Insert<()>>;
    fn submission(&self, user_id: &str, submission_id: &Uuid) -> StoreResult<Option<StoredSubmission>>;
    fn submissions(&self, user_id: &str) -> StoreResult<Vec<StoredSubmission>>;
    fn all_submissions(&self) -> StoreResult<Vec<StoredSubmission>>;

    /// Assigns `action_id` on insert; returns the stored id either way.
    fn insert_action(&self, action: &InterventionAction) -> StoreResult<Insert<i64>>;
    fn action_by_dedup(&self, user_id: &str, dedup_id: &Uuid) -> StoreResult<Option<InterventionAction>>;
    fn actions_for(&self, user_id: &str) -> StoreResult<Vec<InterventionAction>>;
    /// Streams every action in id order.
    fn for_each_action(&self, f: &mut dyn FnMut(InterventionAction)) -> StoreResult<()>;

    fn put_bundle(&self, bundle: &ContentBundle, at: DateTime<Utc>) -> StoreResult<PutOutcome>;
    fn bundles(&self) -> StoreResult<Vec<ContentBundle>>;
    fn catalog(&self) -> StoreResult<ContentCatalog>;
    fn set_catalog(&self, catalog: &ContentCatalog) -> StoreResult<()>;

    /// One JSON object per line, tagged by `record`.
    fn export_ndjson(&self, out: &mut dyn Write) -> StoreResult<u64>;
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS audit (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL, event TEXT NOT NULL, detail TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS users (
    id TEXT PRIMARY KEY,
    auth_mode TEXT NOT NULL,
    login TEXT UNIQUE,
    password_hash TEXT,
    center_id TEXT NOT NULL,
    language TEXT NOT NULL,
    enrolled_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS assignments (
    user_id TEXT PRIMARY KEY REFERENCES users(id),
    arm TEXT NOT NULL,
    center_id TEXT NOT NULL,
    block_id INTEGER NOT NULL,
    position INTEGER NOT NULL,
    assigned_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tokens (
    hash TEXT PRIMARY KEY,
    user_id TEXT NOT NULL REFERENCES users(id),
    issued_at TEXT NOT NULL,
    expires_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS artifacts (
    kind TEXT NOT NULL,
    id TEXT NOT NULL,
    version INTEGER NOT NULL,
    digest TEXT NOT NULL,
    module TEXT,
    chapter TEXT,
    body TEXT NOT NULL,
    seeded_at TEXT NOT NULL,
    PRIMARY KEY (kind, id, version)
);
CREATE TABLE IF NOT EXISTS submissions (
    user_id TEXT NOT NULL REFERENCES users(id),
    submission_id TEXT NOT NULL,
    schema_id TEXT NOT NULL,
    schema_version INTEGER NOT NULL,
    body TEXT NOT NULL,
    received_at TEXT NOT NULL,
    PRIMARY KEY (user_id, submission_id)
);
CREATE TABLE IF NOT EXISTS actions (
    action_id INTEGER PRIMARY KEY AUTOINCREMENT,
    user_id TEXT NOT NULL REFERENCES users(id),
    dedup_id TEXT NOT NULL,
    module TEXT NOT NULL,
    body TEXT NOT NULL,
    UNIQUE (user_id, dedup_id)
);
CREATE TABLE IF NOT EXISTS bundles (
    id TEXT NOT NULL,
    version INTEGER NOT NULL,
    digest TEXT NOT NULL,
    body TEXT NOT NULL,
    published_at TEXT NOT NULL,
    PRIMARY KEY (id, version)
);
CREATE TABLE IF NOT EXISTS catalog (id INTEGER PRIMARY KEY CHECK (id = 1), body TEXT NOT NULL);
";

pub struct SqliteStore {
    conn: Mutex<Connection>,
}

fn decode<T: for<'de> Deserialize<'de>>(text: &str) -> StoreResult<T> {
    serde_json::from_str(text).map_err(|e| StoreError::Decode(e.to_string()))
}

fn encode<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record serializes")
}

fn ts(at: &DateTime<Utc>) -> String {
    at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn parse_ts(s: &str) -> StoreResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)).map_err(|e| StoreError::Decode(format!("timestamp {s:?}: {e}")))
}

fn is_unique_violation(e: &rusqlite::Error) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation)
}

impl SqliteStore {
    pub fn open(path: &Path) -> StoreResult<SqliteStore> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        SqliteStore::init(conn)
    }

    pub fn in_memory() -> StoreResult<SqliteStore> {
        SqliteStore::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> StoreResult<SqliteStore> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(SqliteStore { conn: Mutex::new(conn) })
    }

    fn bodies<T: for<'de> Deserialize<'de>>(&self, sql: &str, args: impl rusqlite::Params) -> StoreResult<Vec<T>> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare_cached(sql)?;
        let rows = stmt.query_map(args, |r| r.get::<_, String>(0))?;
        let mut out = Vec::new();
        for row in rows {
            out.push(decode(&row?)?);
        }
        Ok(out)
    }

    fn body<T: for<'de> Deserialize<'de>>(&self, sql: &str, args: impl rusqlite::Params) -> StoreResult<Option<T>> {
        let conn = self.conn.lock();
        let text: Option<String> = conn.query_row(sql, args, |r| r.get(0)).optional()?;
        text.map(|t| decode(&t)).transpose()
    }

    fn assignment_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<(String, String, String, i64, i64, String)> {
        Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?))
    }

    fn to_assignment(row: (String, String, String, i64, i64, String)) -> StoreResult<Assignment> {
        let (user_id, arm, center_id, block_id, position, assigned_at) = row;
        Ok(Assignment {
            user_id,
            arm: emistudy_core::StudyArm::parse(&arm).ok_or_else(|| StoreError::Decode(format!("arm {arm:?}")))?,
            center_id,
            block_id: block_id as u64,
            position: position as u32,
            assigned_at: parse_ts(&assigned_at)?,
        })
    }
}

fn artifact_columns(artifact: &Artifact) -> (Option<&'static str>, Option<String>) {
    match artifact {
        Artifact::Questionnaire(s) => (Some(s.module.as_str()), s.chapter.clone()),
        Artifact::FeedbackRules(_) => (Some(Module::Feedback.as_str()), None),
    }
}

impl Store for SqliteStore {
    fn meta(&self, key: &str) -> StoreResult<Option<String>> {
        let conn = self.conn.lock();
        Ok(conn.query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0)).optional()?)
    }

    fn meta_insert_once(&self, key: &str, value: &str) -> StoreResult<String> {
        let conn = self.conn.lock();
        conn.execute("INSERT OR IGNORE INTO meta (key, value) VALUES (?1, ?2)", [key, value])?;
        Ok(conn.query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))?)
    }

    fn audit(&self, at: DateTime<Utc>, event: &str, detail: &str) -> StoreResult<()> {
        self.conn.lock().execute("INSERT INTO audit (at, event, detail) VALUES (?1, ?2, ?3)", params![ts(&at), event, detail])?;
        Ok(())
    }

    fn audit_log(&self) -> StoreResult<Vec<(DateTime<Utc>, String, String)>> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare("SELECT at, event, detail FROM audit ORDER BY id")?;
        let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get(1)?, r.get(2)?)))?;
        let mut out = Vec::new();
        for row in rows {
            let (at, event, detail) = row?;
            out.push((parse_ts(&at)?, event, detail));
        }
        Ok(out)
    }

    fn create_user(&self, user: &User, login: Option<(&str, &str)>, assignment: &Assignment) -> StoreResult<()> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let mode = match user.auth_mode {
            AuthMode::Registered => "registered",
            AuthMode::Anonymous => "anonymous",
        };
        let inserted = tx.execute(
            "INSERT INTO users (id, auth_mode, login, password_hash, center_id, language, enrolled_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![user.id, mode, login.map(|l| l.0), login.map(|l| l.1), user.center_id, user.language, ts(&user.enrolled_at)],
        );
        match inserted {
            Err(e) if is_unique_violation(&e) && login.is_some() => return Err(StoreError::LoginTaken),
            other => other?,
        };
        tx.execute(
            "INSERT INTO assignments (user_id, arm, center_id, block_id, position, assigned_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                assignment.user_id,
                assignment.arm.as_str(),
                assignment.center_id,
                assignment.block_id as i64,
                assignment.position as i64,
                ts(&assignment.assigned_at)
            ],
        )?;
        tx.commit()?;
        Ok(())
    }

    fn login(&self, login: &str) -> StoreResult<Option<(String, String)>> {
        let conn = self.conn.lock();
        Ok(conn
            .query_row("SELECT id, password_hash FROM users WHERE login = ?1", [login], |r| Ok((r.get(0)?, r.get(1)?)))
            .optional()?)
    }

    fn user(&self, id: &str) -> StoreResult<Option<User>> {
        let conn = self.conn.lock();
        let row = conn
            .query_row(
                "SELECT id, auth_mode, login, center_id, language, enrolled_at FROM users WHERE id = ?1",
                [id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, Option<String>>(2)?,
                        r.get::<_, String>(3)?,
                        r.get::<_, String>(4)?,
                        r.get::<_, String>(5)?,
                    ))
                },
            )
            .optional()?;
        let Some((id, mode, login, center_id, language, enrolled_at)) = row else {
            return Ok(None);
        };
        let auth_mode = match mode.as_str() {
            "registered" => AuthMode::Registered,
            "anonymous" => AuthMode::Anonymous,
            other => return Err(StoreError::Decode(format!("auth mode {other:?}"))),
        };
        Ok(Some(User { id, auth_mode, credential_ref: login, center_id, enrolled_at: parse_ts(&enrolled_at)?, language }))
    }

    fn assignment(&self, user_id: &str) -> StoreResult<Option<Assignment>> {
        let row = {
            let conn = self.conn.lock();
            conn.query_row(
                "SELECT user_id, arm, center_id, block_id, position, assigned_at FROM assignments WHERE user_id = ?1",
                [user_id],
                Self::assignment_row,
            )
            .optional()?
        };
        row.map(Self::to_assignment).transpose()
    }

    fn assignments(&self) -> StoreResult<Vec<Assignment>> {
        let rows = {
            let conn = self.conn.lock();
            let mut stmt = conn.prepare("SELECT user_id, arm, center_id, block_id, position, assigned_at FROM assignments ORDER BY center_id, block_id, position")?;
            let rows = stmt.query_map([], Self::assignment_row)?.collect::<Result<Vec<_>, _>>()?;
            rows
        };
        rows.into_iter().map(Self::to_assignment).collect()
    }

    fn counts(&self) -> StoreResult<Counts> {
        let conn = self.conn.lock();
        let count = |table: &str| -> StoreResult<u64> {
            Ok(conn.query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get::<_, i64>(0))? as u64)
        };
        Ok(Counts { users: count("users")?, assignments: count("assignments")?, submissions: count("submissions")?, actions: count("actions")? })
    }

    fn insert_token(&self, token_hash: &str, record: &TokenRecord) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO tokens (hash, user_id, issued_at, expires_at) VALUES (?1, ?2, ?3, ?4)",
            params![token_hash, record.user_id, ts(&record.issued_at), ts(&record.expires_at)],
        )?;
        Ok(())
    }

    fn token(&self, token_hash: &str) -> StoreResult<Option<TokenRecord>> {
        let row: Option<(String, String, String)> = {
            let conn = self.conn.lock();
            conn.query_row("SELECT user_id, issued_at, expires_at FROM tokens WHERE hash = ?1", [token_hash], |r| {
                Ok((r.get(0)?, r.get(1)?, r.get(2)?))
            })
            .optional()?
        };
        row.map(|(user_id, issued, expires)| Ok(TokenRecord { user_id, issued_at: parse_ts(&issued)?, expires_at: parse_ts(&expires)? }))
            .transpose()
    }

    fn put_artifact(&self, artifact: &Artifact, at: DateTime<Utc>) -> StoreResult<PutOutcome> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let kind = artifact.kind();
        let existing: Option<String> = tx
            .query_row(
                "SELECT digest FROM artifacts WHERE kind = ?1 AND id = ?2 AND version = ?3",
                params![kind.as_str(), artifact.id(), artifact.version()],
                |r| r.get(0),
            )
            .optional()?;
        if let Some(existing) = existing {
            let existing: Digest = existing.parse().map_err(|_| StoreError::Decode(format!("digest {existing:?}")))?;
            return if existing == artifact.digest() {
                Ok(PutOutcome::Unchanged)
            } else {
                Err(StoreError::Conflict { what: kind.as_str(), id: artifact.id().to_owned(), version: artifact.version(), existing })
            };
        }
        // questionnaire and quiz ids share one namespace
        if kind != ArtifactKind::FeedbackRules {
            let other: Option<String> = tx
                .query_row(
                    "SELECT kind FROM artifacts WHERE id = ?1 AND kind IN ('questionnaire', 'quiz') AND kind <> ?2 LIMIT 1",
                    params![artifact.id(), kind.as_str()],
                    |r| r.get(0),
                )
                .optional()?;
            if other.is_some() {
                return Err(StoreError::Conflict { what: kind.as_str(), id: artifact.id().to_owned(), version: artifact.version(), existing: Digest::zero() });
            }
        }
        let (module, chapter) = artifact_columns(artifact);
        tx.execute(
            "INSERT INTO artifacts (kind, id, version, digest, module, chapter, body, seeded_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                kind.as_str(),
                artifact.id(),
                artifact.version(),
                artifact.digest().to_hex(),
                module,
                chapter,
                String::from_utf8(artifact.to_canonical_bytes()).expect("canonical JSON is UTF-8"),
                ts(&at)
            ],
        )?;
        tx.commit()?;
        Ok(PutOutcome::Inserted)
    }

    fn questionnaire(&self, id: &str, version: Option<u32>) -> StoreResult<Option<Artifact>> {
        match version {
            Some(v) => self.body(
                "SELECT body FROM artifacts WHERE id = ?1 AND version = ?2 AND kind IN ('questionnaire', 'quiz')",
                params![id, v],
            ),
            None => self.body(
                "SELECT body FROM artifacts WHERE id = ?1 AND kind IN ('questionnaire', 'quiz') ORDER BY version DESC LIMIT 1",
                params![id],
            ),
        }
    }

    fn latest_feedback_rules(&self) -> StoreResult<Option<Artifact>> {
        self.body("SELECT body FROM artifacts WHERE kind = 'feedback_rules' ORDER BY seeded_at DESC, version DESC LIMIT 1", [])
    }

    fn latest_artifacts(&self) -> StoreResult<Vec<ArtifactSummary>> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(
            "SELECT a.kind, a.id, a.version, a.digest, a.module, a.chapter FROM artifacts a
             WHERE a.version = (SELECT MAX(b.version) FROM artifacts b WHERE b.kind = a.kind AND b.id = a.id)
             ORDER BY a.kind, a.id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, u32>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, Option<String>>(4)?,
                r.get::<_, Option<String>>(5)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (kind, id, version, digest, module, chapter) = row?;
            out.push(ArtifactSummary {
                kind: decode(&format!("\"{kind}\""))?,
                id,
                version,
                digest: digest.parse().map_err(|_| StoreError::Decode(format!("digest {digest:?}")))?,
                module: module.as_deref().and_then(Module::parse),
                chapter,
            });
        }
        Ok(out)
    }

    fn insert_submission(&self, s: &StoredSubmission) -> StoreResult<Insert<()>> {
        let conn = self.conn.lock();
        let n = conn.execute(
            "INSERT OR IGNORE INTO submissions (user_id, submission_id, schema_id, schema_version, body, received_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![
                s.envelope.user_id,
                s.envelope.submission_id.to_string(),
                s.envelope.schema_id,
                s.envelope.schema_version,
                encode(s),
                ts(&s.received_at)
            ],
        )?;
        Ok(if n == 1 { Insert::Inserted(()) } else { Insert::Duplicate(()) })
    }

    fn submission(&self, user_id: &str, submission_id: &Uuid) -> StoreResult<Option<StoredSubmission>> {
        self.body("SELECT body FROM submissions WHERE user_id = ?1 AND submission_id = ?2", params![user_id, submission_id.to_string()])
    }

    fn submissions(&self, user_id: &str) -> StoreResult<Vec<StoredSubmission>> {
        self.bodies("SELECT body FROM submissions WHERE user_id = ?1 ORDER BY rowid", [user_id])
    }

    fn all_submissions(&self) -> StoreResult<Vec<StoredSubmission>> {
        self.bodies("SELECT body FROM submissions ORDER BY rowid", [])
    }

    fn insert_action(&self, action: &InterventionAction) -> StoreResult<Insert<i64>> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let dedup = action.dedup_id.to_string();
        let existing: Option<i64> = tx
            .query_row("SELECT action_id FROM actions WHERE user_id = ?1 AND dedup_id = ?2", params![action.user_id, dedup], |r| r.get(0))
            .optional()?;
        if let Some(id) = existing {
            return Ok(Insert::Duplicate(id));
        }
        tx.execute(
            "INSERT INTO actions (user_id, dedup_id, module, body) VALUES (?1, ?2, ?3, '')",
            params![action.user_id, dedup, action.module.as_str()],
        )?;
        let id = tx.last_insert_rowid();
        let mut stored = action.clone();
        stored.action_id = id;
        tx.execute("UPDATE actions SET body = ?1 WHERE action_id = ?2", params![encode(&stored), id])?;
        tx.commit()?;
        Ok(Insert::Inserted(id))
    }

    fn action_by_dedup(&self, user_id: &str, dedup_id: &Uuid) -> StoreResult<Option<InterventionAction>> {
        self.body("SELECT body FROM actions WHERE user_id = ?1 AND dedup_id = ?2", params![user_id, dedup_id.to_string()])
    }

    fn actions_for(&self, user_id: &str) -> StoreResult<Vec<InterventionAction>> {
        self.bodies("SELECT body FROM actions WHERE user_id = ?1 ORDER BY action_id", [user_id])
    }

    fn for_each_action(&self, f: &mut dyn FnMut(InterventionAction)) -> StoreResult<()> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare("SELECT body FROM actions ORDER BY action_id")?;
        let mut rows = stmt.query([])?;
        while let Some(row) = rows.next()? {
            f(decode(&row.get::<_, String>(0)?)?);
        }
        Ok(())
    }

    fn put_bundle(&self, bundle: &ContentBundle, at: DateTime<Utc>) -> StoreResult<PutOutcome> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let existing: Option<String> = tx
            .query_row("SELECT digest FROM bundles WHERE id = ?1 AND version = ?2", params![bundle.id, bundle.version], |r| r.get(0))
            .optional()?;
        if let Some(existing) = existing {
            let existing: Digest = existing.parse().map_err(|_| StoreError::Decode(format!("digest {existing:?}")))?;
            return if existing == bundle.digest {
                Ok(PutOutcome::Unchanged)
            } else {
                Err(StoreError::Conflict { what: "bundle", id: bundle.id.clone(), version: bundle.version, existing })
            };
        }
        tx.execute(
            "INSERT INTO bundles (id, version, digest, body, published_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![bundle.id, bundle.version, bundle.digest.to_hex(), encode(bundle), ts(&at)],
        )?;
        tx.commit()?;
        Ok(PutOutcome::Inserted)
    }

    fn bundles(&self) -> StoreResult<Vec<ContentBundle>> {
        self.bodies("SELECT body FROM bundles ORDER BY id, version", [])
    }

    fn catalog(&self) -> StoreResult<ContentCatalog> {
        Ok(self.body("SELECT body FROM catalog WHERE id = 1", [])?.unwrap_or_default())
    }

    fn set_catalog(&self, catalog: &ContentCatalog) -> StoreResult<()> {
        self.conn.lock().execute(
            "INSERT INTO catalog (id, body) VALUES (1, ?1) ON CONFLICT (id) DO UPDATE SET body = excluded.body",
            [encode(catalog)],
        )?;
        Ok(())
    }

    fn export_ndjson(&self, out: &mut dyn Write) -> StoreResult<u64> {
        let mut n = 0u64;
        let mut line = |record: &str, value: serde_json::Value| -> StoreResult<()> {
            let mut obj = serde_json::Map::new();
            obj.insert("record".into(), record.into());
            obj.insert("data".into(), value);
            serde_json::to_writer(&mut *out, &obj).map_err(|e| StoreError::Decode(e.to_string()))?;
            out.write_all(b"\n")?;
            n += 1;
            Ok(())
        };
        let user_ids: Vec<String> = {
            let conn = self.conn.lock();
            let mut stmt = conn.prepare("SELECT id FROM users ORDER BY rowid")?;
            let ids = stmt.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
            ids
        };
        for id in &user_ids {
            if let Some(user) = self.user(id)? {
                // login names stay out of exports
                let mut v = serde_json::to_value(&user).expect("user serializes");
                v.as_object_mut().expect("object").remove("credential_ref");
                line("user", v)?;
            }
        }
        for a in self.assignments()? {
            line("assignment", serde_json::to_value(&a).expect("assignment serializes"))?;
        }
        for s in self.all_submissions()? {
            line("submission", serde_json::to_value(&s).expect("submission serializes"))?;
        }
        let mut actions = Vec::new();
        self.for_each_action(&mut |a| actions.push(a))?;
        for a in actions {
            line("action", serde_json::to_value(&a).expect("action serializes"))?;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use emistudy_core::activity::ActionPayload;
    use emistudy_core::StudyArm;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 5, 1, 12, 0, 0).unwrap()
    }

    fn user(store: &SqliteStore, id: &str) {
        let u = User::anonymous(id, "C1", "en", now());
        let a = Assignment { user_id: id.into(), arm: StudyArm::Arm2, center_id: "C1".into(), block_id: 0, position: 0, assigned_at: now() };
        store.create_user(&u, None, &a).unwrap();
    }

    fn action(user: &str, dedup: Uuid) -> InterventionAction {
        InterventionAction {
            action_id: 0,
            user_id: user.into(),
            center_id: "C1".into(),
            module: Module::ShadesOfNoise,
            payload: ActionPayload::SoundSession { sound_id: "s".into(), duration_seconds: 300.0 },
            client_time: now().fixed_offset(),
            dedup_id: dedup,
            received_at: now(),
        }
    }

    #[test]
    fn user_and_assignment_are_atomic() {
        let store = SqliteStore::in_memory().unwrap();
        let u = User::registered("u1", "alice", "C1", "en", now());
        let a = Assignment { user_id: "u1".into(), arm: StudyArm::Arm1, center_id: "C1".into(), block_id: 0, position: 0, assigned_at: now() };
        store.create_user(&u, Some(("alice", "hash")), &a).unwrap();
        let u2 = User::registered("u2", "alice", "C1", "en", now());
        let a2 = Assignment { user_id: "u2".into(), ..a.clone() };
        assert!(matches!(store.create_user(&u2, Some(("alice", "hash")), &a2), Err(StoreError::LoginTaken)));
        // assignment for a missing user violates the foreign key; nothing persists
        let u3 = User::anonymous("u3", "C1", "en", now());
        let bad = Assignment { user_id: "ghost".into(), ..a };
        assert!(store.create_user(&u3, None, &bad).is_err());
        let c = store.counts().unwrap();
        assert_eq!((c.users, c.assignments), (1, 1));
        assert_eq!(store.user("u1").unwrap().unwrap(), u);
        assert_eq!(store.login("alice").unwrap().unwrap().0, "u1");
    }

    #[test]
    fn action_dedup() {
        let store = SqliteStore::in_memory().unwrap();
        user(&store, "u");
        user(&store, "v");
        let d = Uuid::new_v4();
        let first = store.insert_action(&action("u", d)).unwrap();
        assert!(!first.is_duplicate());
        assert_eq!(store.insert_action(&action("u", d)).unwrap(), Insert::Duplicate(first.into_inner()));
        // dedup scope is per user
        assert!(!store.insert_action(&action("v", d)).unwrap().is_duplicate());
        let stored = store.action_by_dedup("u", &d).unwrap().unwrap();
        assert_eq!(stored.action_id, first.into_inner());
        assert_eq!(store.counts().unwrap().actions, 2);
    }

    #[test]
    fn meta_insert_once_keeps_first() {
        let store = SqliteStore::in_memory().unwrap();
        assert_eq!(store.meta_insert_once("seed", "1").unwrap(), "1");
        assert_eq!(store.meta_insert_once("seed", "2").unwrap(), "1");
        assert_eq!(store.meta("seed").unwrap().as_deref(), Some("1"));
        assert_eq!(store.meta("other").unwrap(), None);
    }

    #[test]
    fn export_lines_parse() {
        let store = SqliteStore::in_memory().unwrap();
        user(&store, "u");
        store.insert_action(&action("u", Uuid::new_v4())).unwrap();
        let mut buf = Vec::new();
        let n = store.export_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(n as usize, text.lines().count());
        let records: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["record"].as_str().unwrap().to_owned())
            .collect();
        assert_eq!(records, ["user", "assignment", "action"]);
    }
}
