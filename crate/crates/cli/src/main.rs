//! `emistudy`: compile workbooks, validate artifacts, seed a server.
//!
//! Exit codes: 0 success, 1 validation errors or rejected content,
//! 2 I/O or network failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::Engine as _;
use clap::{Parser, Subcommand};
use emistudy_core::compiler::{compile_dir, validate_artifact_bytes, CompileError, SeedManifest};
use emistudy_core::content::{read_bundle_dir, BundleKind};
use emistudy_core::{Digest, ValidationReport};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "emistudy", version, about = "Study content pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a TSV workbook directory into artifacts and a seed manifest.
    Compile {
        workbook: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Re-check a compiled artifact file.
    Validate { file: PathBuf },
    /// Load every artifact listed in a seed manifest into a server.
    Seed {
        manifest: PathBuf,
        #[arg(long, env = "EMISTUDY_SERVER")]
        server: String,
        #[arg(long, env = "EMISTUDY_TOKEN", hide_env_values = true)]
        token: String,
    },
    /// Publish a directory as a static content bundle.
    Publish {
        dir: PathBuf,
        #[arg(long)]
        id: String,
        /// tinedu_chapter, sound_asset or about_page.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        version: u32,
        #[arg(long, env = "EMISTUDY_SERVER")]
        server: String,
        #[arg(long, env = "EMISTUDY_TOKEN", hide_env_values = true)]
        token: String,
    },
}

enum Failure {
    Invalid(String),
    Io(String),
}

const INVALID: u8 = 1;
const IO: u8 = 2;

fn print_report(report: &ValidationReport) {
    for f in &report.findings {
        eprintln!("{f}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile { workbook, out } => run_compile(&workbook, &out),
        Command::Validate { file } => run_validate(&file),
        Command::Seed { manifest, server, token } => run_seed(&manifest, &server, &token),
        Command::Publish { dir, id, kind, version, server, token } => run_publish(&dir, &id, &kind, version, &server, &token),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("emistudy: {msg}");
            ExitCode::from(INVALID)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("emistudy: {msg}");
            ExitCode::from(IO)
        }
    }
}

fn run_compile(workbook: &Path, out: &Path) -> Result<(), Failure> {
    match compile_dir(workbook, out) {
        Ok(output) => {
            print_report(&output.warnings);
            for unit in &output.manifest.units {
                println!("{} {}@{} {}", unit.path, unit.id, unit.version, unit.digest);
            }
            println!("wrote {} artifacts to {}", output.manifest.units.len(), out.display());
            Ok(())
        }
        Err(e) => match e.report() {
            Some(report) => {
                print_report(report);
                let what = if matches!(e, CompileError::Conflict(_)) { "version conflict; nothing written" } else { "workbook has errors; nothing written" };
                Err(Failure::Invalid(what.into()))
            }
            None => Err(Failure::Io(e.to_string())),
        },
    }
}

fn run_validate(file: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(file).map_err(|e| Failure::Io(format!("{}: {e}", file.display())))?;
    match validate_artifact_bytes(&bytes) {
        Ok(artifact) => {
            println!("ok {} {}@{} {}", artifact.kind(), artifact.id(), artifact.version(), artifact.digest());
            Ok(())
        }
        Err(report) => {
            print_report(&report);
            Err(Failure::Invalid(format!("{} is invalid", file.display())))
        }
    }
}

fn client() -> Result<reqwest::blocking::Client, Failure> {
    reqwest::blocking::Client::builder().build().map_err(|e| Failure::Io(format!("http client: {e}")))
}

/// Posts `body`; 2xx is success, other statuses are content rejections.
fn post(client: &reqwest::blocking::Client, url: &str, token: &str, body: &Value) -> Result<Value, Failure> {
    let res = client.post(url).bearer_auth(token).json(body).send().map_err(|e| Failure::Io(format!("{url}: {e}")))?;
    let status = res.status();
    let text = res.text().map_err(|e| Failure::Io(format!("{url}: {e}")))?;
    let value: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
    if status.is_success() {
        Ok(value)
    } else if status.is_server_error() {
        Err(Failure::Io(format!("{url}: {status} {value}")))
    } else {
        Err(Failure::Invalid(format!("{url}: {status} {value}")))
    }
}

fn run_seed(manifest_path: &Path, server: &str, token: &str) -> Result<(), Failure> {
    let io = |p: &Path, e: std::io::Error| Failure::Io(format!("{}: {e}", p.display()));
    let bytes = std::fs::read(manifest_path).map_err(|e| io(manifest_path, e))?;
    let manifest: SeedManifest = serde_json::from_slice(&bytes).map_err(|e| Failure::Invalid(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    // check every unit locally before sending any
    let mut artifacts = Vec::with_capacity(manifest.units.len());
    for unit in &manifest.units {
        let path = base.join(&unit.path);
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        let artifact = validate_artifact_bytes(&bytes).map_err(|report| {
            print_report(&report);
            Failure::Invalid(format!("{} is invalid", path.display()))
        })?;
        if artifact.digest() != unit.digest || artifact.id() != unit.id || artifact.version() != unit.version {
            return Err(Failure::Invalid(format!("{} does not match its manifest entry", path.display())));
        }
        artifacts.push(artifact);
    }
    let client = client()?;
    let url = format!("{}/v1/admin/artifacts", server.trim_end_matches('/'));
    for artifact in &artifacts {
        let body = serde_json::to_value(artifact).expect("artifact serializes");
        let ack = post(&client, &url, token, &body)?;
        println!("{} {}@{} {}", ack["status"].as_str().unwrap_or("?"), artifact.id(), artifact.version(), artifact.digest());
    }
    Ok(())
}

fn run_publish(dir: &Path, id: &str, kind: &str, version: u32, server: &str, token: &str) -> Result<(), Failure> {
    let kind: BundleKind = serde_json::from_value(json!(kind)).map_err(|_| Failure::Invalid(format!("unknown bundle kind {kind:?}")))?;
    let files = read_bundle_dir(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let files: Vec<Value> = files
        .into_iter()
        .map(|f| json!({ "path": f.path, "content_base64": base64::engine::general_purpose::STANDARD.encode(&f.bytes) }))
        .collect();
    let url = format!("{}/v1/admin/bundles", server.trim_end_matches('/'));
    let ack = post(&client()?, &url, token, &json!({ "id": id, "kind": kind, "version": version, "files": files }))?;
    let digest: Option<Digest> = serde_json::from_value(ack["digest"].clone()).ok();
    println!("{} {id}@{version} {}", ack["status"].as_str().unwrap_or("?"), digest.map(|d| d.to_hex()).unwrap_or_default());
    Ok(())
}
