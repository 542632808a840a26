//! Study service: enrollment with randomized arm assignment, module
//! gating, idempotent diary submissions and action logging, content
//! delivery, feedback and adherence statistics over HTTP/JSON.

pub mod api;
pub mod auth;
pub mod clock;
pub mod config;
pub mod error;
pub mod state;
pub mod store;

pub use api::router;
pub use config::Config;
pub use state::AppState;
