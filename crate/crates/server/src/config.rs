//! Server configuration: a TOML file overlaid with environment variables.
//!
//! | variable               | field          |
//! |------------------------|----------------|
//! | `EMISTUDY_BIND`        | `bind`         |
//! | `EMISTUDY_DATA_DIR`    | `data_dir`     |
//! | `EMISTUDY_CONFIG`      | config path    |
//! | `EMISTUDY_SEED_POLICY` | `seed_policy`  |
//! | `EMISTUDY_RESEARCHER_TOKEN` | `researcher_token` |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emistudy_core::schema::is_language_code;
use emistudy_core::study::{Center, DEFAULT_WINDOW_DAYS};
use serde::{Deserialize, Serialize};

pub const ENV_BIND: &str = "EMISTUDY_BIND";
pub const ENV_DATA_DIR: &str = "EMISTUDY_DATA_DIR";
pub const ENV_CONFIG: &str = "EMISTUDY_CONFIG";
pub const ENV_SEED_POLICY: &str = "EMISTUDY_SEED_POLICY";
pub const ENV_RESEARCHER_TOKEN: &str = "EMISTUDY_RESEARCHER_TOKEN";

/// Where the randomization seed comes from on first start. Later starts
/// always reuse the persisted seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Draw from the OS on first start.
    Entropy,
    Fixed(u64),
}

impl FromStr for SeedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "entropy" => Ok(SeedPolicy::Entropy),
            other => other
                .strip_prefix("fixed:")
                .and_then(|n| n.trim().parse().ok())
                .map(SeedPolicy::Fixed)
                .ok_or_else(|| format!("seed policy must be \"entropy\" or \"fixed:<u64>\", got {s:?}")),
        }
    }
}

impl fmt::Display for SeedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedPolicy::Entropy => f.write_str("entropy"),
            SeedPolicy::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl Serialize for SeedPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SeedPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    pub data_dir: PathBuf,
    pub centers: Vec<Center>,
    /// Permuted-block size; a positive multiple of the arm count.
    pub block_size: usize,
    pub seed_policy: SeedPolicy,
    pub window_days: u32,
    pub token_ttl_days: u32,
    /// Client timestamps further ahead of the server clock are rejected.
    pub max_clock_skew_seconds: i64,
    /// Static bearer credential for the researcher role; the role is
    /// disabled when unset.
    pub researcher_token: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        let centers = [("C1", "de"), ("C2", "en"), ("C3", "es"), ("C4", "nl"), ("C5", "it")]
            .into_iter()
            .enumerate()
            .map(|(i, (id, lang))| Center { id: id.into(), name: format!("Clinical center {}", i + 1), default_language: lang.into() })
            .collect();
        Config {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            centers,
            block_size: 4,
            seed_policy: SeedPolicy::Entropy,
            window_days: DEFAULT_WINDOW_DAYS,
            token_ttl_days: 120,
            max_clock_skew_seconds: 600,
            researcher_token: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Config::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// File named by `EMISTUDY_CONFIG` (or defaults), then variable
    /// overrides, then validation.
    pub fn from_env() -> Result<Config, ConfigError> {
        Config::from_vars(|k| std::env::var(k).ok())
    }

    pub fn from_vars(get: impl Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
        let mut config = match get(ENV_CONFIG) {
            Some(path) => Config::load_file(Path::new(&path))?,
            None => Config::default(),
        };
        if let Some(bind) = get(ENV_BIND) {
            config.bind = bind;
        }
        if let Some(dir) = get(ENV_DATA_DIR) {
            config.data_dir = dir.into();
        }
        if let Some(policy) = get(ENV_SEED_POLICY) {
            config.seed_policy = policy.parse().map_err(|message| ConfigError::Env { var: ENV_SEED_POLICY, message })?;
        }
        if let Some(token) = get(ENV_RESEARCHER_TOKEN) {
            config.researcher_token = Some(token);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.centers.is_empty() {
            return bad("at least one center is required".into());
        }
        for c in &self.centers {
            if !is_language_code(&c.default_language) {
                return bad(format!("center {} has invalid default language {:?}", c.id, c.default_language));
            }
        }
        if self.window_days == 0 {
            return bad("window_days must be positive".into());
        }
        if self.token_ttl_days == 0 {
            return bad("token_ttl_days must be positive".into());
        }
        if self.max_clock_skew_seconds < 0 {
            return bad("max_clock_skew_seconds must not be negative".into());
        }
        if self.researcher_token.as_ref().is_some_and(|t| t.len() < 16) {
            return bad("researcher_token must be at least 16 characters".into());
        }
        // block size and duplicate centers are checked by the allocator
        Ok(())
    }
}
