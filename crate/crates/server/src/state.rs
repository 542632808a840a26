use std::sync::Arc;

use anyhow::{bail, Context};
use emistudy_core::content::{BlobStore, FsBlobStore};
use emistudy_core::study::{Allocator, BlockSchedule, Center};
use parking_lot::Mutex;

use crate::clock::{Clock, SystemClock};
use crate::config::{Config, SeedPolicy};
use crate::error::{ApiError, ApiResult};
use crate::store::{SqliteStore, Store};

pub const META_SEED: &str = "randomization_seed";
pub const META_BLOCK_SIZE: &str = "block_size";
pub const DATABASE_FILE: &str = "emistudy.sqlite3";
pub const BLOB_DIR: &str = "blobs";

/// Shared handler state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

pub struct Inner {
    pub config: Config,
    pub store: Arc<dyn Store>,
    pub blobs: Arc<dyn BlobStore>,
    pub clock: Arc<dyn Clock>,
    pub allocator: Allocator,
    /// Serializes bundle publishing.
    pub publish: Mutex<()>,
}

impl std::ops::Deref for AppState {
    type Target = Inner;

    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl AppState {
    /// Restores randomization from the store. The seed and block size are
    /// fixed by the first start; a later config cannot change them.
    pub fn new(config: Config, store: Arc<dyn Store>, blobs: Arc<dyn BlobStore>, clock: Arc<dyn Clock>) -> anyhow::Result<AppState> {
        config.validate()?;
        let fresh = match config.seed_policy {
            SeedPolicy::Fixed(n) => n,
            SeedPolicy::Entropy => rand::random(),
        };
        let seed: u64 = store.meta_insert_once(META_SEED, &fresh.to_string())?.parse().context("stored seed")?;
        if let SeedPolicy::Fixed(n) = config.seed_policy {
            if n != seed {
                tracing::warn!(configured = n, persisted = seed, "seed policy ignored; reusing persisted seed");
            }
        }
        let block_size: usize = store.meta_insert_once(META_BLOCK_SIZE, &config.block_size.to_string())?.parse().context("stored block size")?;
        if block_size != config.block_size {
            bail!("block size {} differs from the persisted {}", config.block_size, block_size);
        }
        let allocator = Allocator::new(BlockSchedule::new(seed, block_size)?, config.centers.iter().cloned())?;
        allocator.restore(&store.assignments()?)?;
        Ok(AppState(Arc::new(Inner { config, store, blobs, clock, allocator, publish: Mutex::new(()) })))
    }

    /// SQLite database and blob directory under `config.data_dir`.
    pub fn open(config: Config) -> anyhow::Result<AppState> {
        std::fs::create_dir_all(&config.data_dir).with_context(|| format!("creating {}", config.data_dir.display()))?;
        let store = SqliteStore::open(&config.data_dir.join(DATABASE_FILE))?;
        let blobs = FsBlobStore::new(config.data_dir.join(BLOB_DIR))?;
        AppState::new(config, Arc::new(store), Arc::new(blobs), Arc::new(SystemClock))
    }

    pub fn center(&self, id: &str) -> Option<&Center> {
        self.allocator.center(id)
    }

    /// Runs store work off the async executor.
    pub async fn blocking<T, F>(&self, f: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
    {
        let state = self.clone();
        tokio::task::spawn_blocking(move || f(&state)).await.map_err(ApiError::from)?
    }
}
