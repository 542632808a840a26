//! Domain model for a multi-center tinnitus intervention study: arm
//! allocation, questionnaire schemas and their compiler, content bundles,
//! feedback rules and adherence statistics. No I/O beyond the filesystem
//! helpers in `content` and `compiler`.

pub mod activity;
pub mod adherence;
pub mod canonical;
pub mod compiler;
pub mod content;
pub mod feedback;
pub mod report;
pub mod schema;
pub mod study;
pub mod submission;

pub use canonical::Digest;
pub use report::{Finding, FindingCode, Severity, ValidationReport};
pub use study::{Module, StudyArm};

#[cfg(feature = "testkit")]
pub mod testkit;
