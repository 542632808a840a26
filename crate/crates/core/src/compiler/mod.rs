//! Questionnaire workbook compiler.

pub mod compile;
pub mod table;
pub mod workbook;

pub use compile::{
    artifact_path, compile, compile_dir, validate_artifact_bytes, write_output, CompileError, CompileOutput, LoadUnit, SeedManifest,
    VersionHistory, MANIFEST_FILE, VERSIONS_FILE,
};
pub use workbook::{parse_tables, parse_workbook, read_table_files, ParseError, TableFiles, Workbook, TABLES};
