//! Bearer tokens, password hashing and the request extractors.
//!
//! Tokens are 256-bit random hex strings. Only their SHA-256 is stored.

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;
use chrono::{DateTime, Duration, Utc};
use emistudy_core::study::{Assignment, User};
use rand::RngCore;
use sha2::{Digest as _, Sha256};

use crate::error::{ApiError, ApiResult};
use crate::state::AppState;
use crate::store::TokenRecord;

pub fn new_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

pub fn hash_password(password: &str) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    let salt = SaltString::encode_b64(&salt).expect("16-byte salt encodes");
    Argon2::default().hash_password(password.as_bytes(), &salt).expect("argon2 with default params").to_string()
}

pub fn verify_password(password: &str, hash: &str) -> bool {
    PasswordHash::new(hash).is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
}

/// Login names: 3 to 64 characters of `[A-Za-z0-9._@-]`.
pub fn valid_login(login: &str) -> bool {
    (3..=64).contains(&login.len()) && login.chars().all(|c| c.is_ascii_alphanumeric() || "._@-".contains(c))
}

pub const MIN_PASSWORD_LEN: usize = 8;

/// Issues and stores a token for `user_id`; returns the plaintext.
pub fn issue_token(state: &AppState, user_id: &str, now: DateTime<Utc>) -> ApiResult<(String, TokenRecord)> {
    let token = new_token();
    let record = TokenRecord {
        user_id: user_id.to_owned(),
        issued_at: now,
        expires_at: now + Duration::days(i64::from(state.config.token_ttl_days)),
    };
    state.store.insert_token(&token_hash(&token), &record)?;
    Ok((token, record))
}

fn bearer(parts: &Parts) -> Option<&str> {
    let value = parts.headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
}

/// An authenticated participant with their assignment.
#[derive(Debug, Clone)]
pub struct Participant {
    pub user: User,
    pub assignment: Assignment,
}

impl FromRequestParts<AppState> for Participant {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let hash = token_hash(bearer(parts).ok_or_else(ApiError::unauthorized)?);
        state
            .blocking(move |state| {
                let record = state.store.token(&hash)?.ok_or_else(ApiError::unauthorized)?;
                if state.clock.now() >= record.expires_at {
                    return Err(ApiError::unauthorized());
                }
                let user = state.store.user(&record.user_id)?.ok_or_else(ApiError::unauthorized)?;
                let assignment = state
                    .store
                    .assignment(&user.id)?
                    .ok_or_else(|| ApiError::internal(format!("user {} has no assignment", user.id)))?;
                Ok(Participant { user, assignment })
            })
            .await
    }
}

/// Holder of the static researcher credential. Also authorizes seeding.
#[derive(Debug, Clone, Copy)]
pub struct Researcher;

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl FromRequestParts<AppState> for Researcher {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = bearer(parts).ok_or_else(ApiError::unauthorized)?;
        match &state.config.researcher_token {
            Some(expected) if constant_time_eq(token.as_bytes(), expected.as_bytes()) => Ok(Researcher),
            Some(_) => {
                // a valid participant token is authenticated but lacks the role
                let hash = token_hash(token);
                let known = state.blocking(move |s| Ok(s.store.token(&hash)?.is_some())).await?;
                if known {
                    Err(ApiError::forbidden("researcher_only", "researcher role required"))
                } else {
                    Err(ApiError::unauthorized())
                }
            }
            None => Err(ApiError::forbidden("researcher_disabled", "no researcher credential is configured")),
        }
    }
}
