//! Workbook to artifact compilation, output layout and version history.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, Digest};
use crate::compiler::workbook::{parse_workbook, ParseError, Workbook};
use crate::feedback::FeedbackRuleSet;
use crate::report::{Finding, FindingCode, ValidationReport};
use crate::schema::{Artifact, ArtifactKind, Localized, Page, QuestionnaireSchema};
use crate::study::Module;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VERSIONS_FILE: &str = "versions.lock";

/// One loadable artifact listed in the seed manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadUnit {
    pub kind: ArtifactKind,
    pub id: String,
    pub version: u32,
    pub digest: Digest,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub study_id: String,
    pub version: u32,
    pub units: Vec<LoadUnit>,
}

impl SeedManifest {
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOutput {
    pub questionnaire: QuestionnaireSchema,
    pub quizzes: Vec<QuestionnaireSchema>,
    pub feedback_rules: FeedbackRuleSet,
    pub manifest: SeedManifest,
    pub warnings: ValidationReport,
}

impl CompileOutput {
    /// Artifacts in manifest order.
    pub fn artifacts(&self) -> Vec<Artifact> {
        let mut out = vec![Artifact::Questionnaire(self.questionnaire.clone())];
        out.extend(self.quizzes.iter().cloned().map(Artifact::Questionnaire));
        out.push(Artifact::FeedbackRules(self.feedback_rules.clone()));
        out
    }

    /// Relative path to canonical bytes, including the manifest.
    pub fn files(&self) -> BTreeMap<String, Vec<u8>> {
        let mut files: BTreeMap<String, Vec<u8>> = self
            .artifacts()
            .iter()
            .map(|a| (artifact_path(a.kind(), a.id(), a.version()), a.to_canonical_bytes()))
            .collect();
        files.insert(MANIFEST_FILE.to_owned(), self.manifest.to_canonical_bytes());
        files
    }
}

pub fn artifact_path(kind: ArtifactKind, id: &str, version: u32) -> String {
    format!("{kind}/{id}.v{version}.json")
}

/// Builds sealed artifacts from a parsed workbook. Every artifact is
/// re-validated before it is returned.
pub fn compile(wb: &Workbook) -> Result<CompileOutput, ValidationReport> {
    let languages = wb.language_codes();
    let version = wb.metadata.version;

    let pages = wb
        .pages
        .iter()
        .map(|p| Page {
            index: p.index,
            title: p.title.clone(),
            questions: wb.questions.iter().filter(|q| q.page == p.index).map(|q| q.id.clone()).collect(),
        })
        .collect();
    let questionnaire = QuestionnaireSchema {
        id: wb.metadata.schema_id.clone(),
        module: Module::Diary,
        version,
        languages: languages.clone(),
        chapter: None,
        pages,
        questions: wb.questions.clone(),
        digest: Digest::zero(),
    }
    .seal();

    let quizzes: Vec<QuestionnaireSchema> = wb
        .quizzes
        .iter()
        .map(|quiz| {
            let title = languages.iter().fold(Localized::new(), |t, l| t.with(l, &quiz.id));
            QuestionnaireSchema {
                id: quiz.id.clone(),
                module: Module::TinEdu,
                version,
                languages: languages.clone(),
                chapter: Some(quiz.chapter_id.clone()),
                pages: vec![Page { index: 1, title, questions: quiz.questions.iter().map(|q| q.id.clone()).collect() }],
                questions: quiz.questions.clone(),
                digest: Digest::zero(),
            }
            .seal()
        })
        .collect();

    let feedback_rules = FeedbackRuleSet {
        id: wb.metadata.rule_set_id.clone(),
        version,
        languages: languages.clone(),
        rules: wb.feedback_rules.clone(),
        digest: Digest::zero(),
    }
    .seal();

    let mut report = ValidationReport::new();
    report.extend(questionnaire.validate());
    for q in &quizzes {
        report.extend(q.validate());
    }
    report.extend(feedback_rules.validate());
    if !report.verdict() {
        return Err(report);
    }

    let mut out = CompileOutput {
        questionnaire,
        quizzes,
        feedback_rules,
        manifest: SeedManifest { study_id: wb.metadata.study_id.clone(), version, units: Vec::new() },
        warnings: wb.warnings.clone(),
    };
    out.manifest.units = out
        .artifacts()
        .iter()
        .map(|a| LoadUnit {
            kind: a.kind(),
            id: a.id().to_owned(),
            version: a.version(),
            digest: a.digest(),
            path: artifact_path(a.kind(), a.id(), a.version()),
        })
        .collect();
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("compiled artifacts are invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error("version conflicts:\n{0}")]
    Conflict(ValidationReport),
    #[error("cannot write output: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt {VERSIONS_FILE}: {0}")]
    History(serde_json::Error),
}

impl CompileError {
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            CompileError::Parse(p) => p.report(),
            CompileError::Invalid(r) | CompileError::Conflict(r) => Some(r),
            _ => None,
        }
    }
}

/// Digests already published per `kind/id@version`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionHistory {
    pub entries: BTreeMap<String, Digest>,
}

impl VersionHistory {
    fn key(kind: ArtifactKind, id: &str, version: u32) -> String {
        format!("{kind}/{id}@{version}")
    }

    pub fn load(out_dir: &Path) -> Result<VersionHistory, CompileError> {
        match fs::read(out_dir.join(VERSIONS_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(CompileError::History),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(VersionHistory::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// One error per artifact whose version was previously published with
    /// a different digest.
    pub fn check(&self, output: &CompileOutput) -> ValidationReport {
        let mut report = ValidationReport::new();
        for a in output.artifacts() {
            let key = Self::key(a.kind(), a.id(), a.version());
            if let Some(prev) = self.entries.get(&key) {
                if *prev != a.digest() {
                    report.push(Finding::error(
                        FindingCode::VersionConflict,
                        a.kind().as_str(),
                        format!("{} version {} was already published with digest {prev}; bump the version (new digest {})", a.id(), a.version(), a.digest()),
                    ));
                }
            }
        }
        report
    }

    pub fn record(&mut self, output: &CompileOutput) {
        for a in output.artifacts() {
            self.entries.insert(Self::key(a.kind(), a.id(), a.version()), a.digest());
        }
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(self).expect("history serializes")
    }
}

/// Writes artifacts and manifest under `out_dir` after checking the version
/// history. Nothing is written when a conflict is found.
pub fn write_output(out_dir: &Path, output: &CompileOutput) -> Result<Vec<PathBuf>, CompileError> {
    fs::create_dir_all(out_dir)?;
    let mut history = VersionHistory::load(out_dir)?;
    let conflicts = history.check(output);
    if !conflicts.is_empty() {
        return Err(CompileError::Conflict(conflicts));
    }
    let mut written = Vec::new();
    for (rel, bytes) in output.files() {
        let path = out_dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    history.record(output);
    write_atomic(&out_dir.join(VERSIONS_FILE), &history.to_canonical_bytes())?;
    Ok(written)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Parse, compile and write in one step.
pub fn compile_dir(workbook: &Path, out_dir: &Path) -> Result<CompileOutput, CompileError> {
    let wb = parse_workbook(workbook)?;
    let output = compile(&wb).map_err(CompileError::Invalid)?;
    write_output(out_dir, &output)?;
    Ok(output)
}

/// Validates an artifact file as the loader would: parse, re-check
/// invariants, recompute the digest.
pub fn validate_artifact_bytes(bytes: &[u8]) -> Result<Artifact, ValidationReport> {
    let artifact = Artifact::from_slice(bytes).map_err(|e| {
        let mut r = ValidationReport::new();
        r.push(Finding::error(FindingCode::MalformedRow, "artifact", format!("not a valid artifact document: {e}")));
        r
    })?;
    let report = artifact.validate();
    if report.verdict() {
        Ok(artifact)
    } else {
        Err(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::workbook::{parse_tables, TableFiles};

    fn workbook(version: u32, label: &str) -> Workbook {
        let files: TableFiles = [
            ("metadata", format!("key\tvalue\nstudy_id\tst\nschema_id\tdiary\nversion\t{version}\nchapters\tch1\n")),
            ("languages", "code\tname\nen\tEnglish\nde\tDeutsch\n".into()),
            ("pages", "page\ttitle:en\ttitle:de\n1\tToday\tHeute\n".into()),
            (
                "questions",
                format!("question_id\tpage\twidget\trequired\tmin\tmax\tstep\tlabel:en\tlabel:de\nloud\t1\tslider\tyes\t0\t100\t1\t{label}\tLaut?\n"),
            ),
            ("options", "question_id\tvalue\tlabel:en\tlabel:de\nq1\ta\tA\tA\nq1\tb\tB\tB\n".into()),
            ("quizzes", "quiz_id\tchapter_id\tquestion_id\twidget\tcorrect\tprompt:en\tprompt:de\nquiz1\tch1\tq1\tradio\ta\tPick\tWähle\n".into()),
            ("feedback_rules", "rule_id\tmetric\tcomparator\tthreshold\tpriority\tmessage:en\tmessage:de\n".into()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.into_bytes()))
        .collect();
        parse_tables(Path::new("wb"), &files).unwrap()
    }

    #[test]
    fn compiles_and_validates() {
        let out = compile(&workbook(1, "Loud?")).unwrap();
        assert_eq!(out.questionnaire.questions.len(), 1);
        assert_eq!(out.quizzes.len(), 1);
        assert_eq!(out.quizzes[0].chapter.as_deref(), Some("ch1"));
        assert_eq!(out.manifest.units.len(), 3);
        for a in out.artifacts() {
            assert!(a.validate().verdict());
            assert_eq!(a.canonical_roundtrip().unwrap(), a);
        }
        let kinds: Vec<_> = out.manifest.units.iter().map(|u| u.kind).collect();
        assert_eq!(kinds, [ArtifactKind::Questionnaire, ArtifactKind::Quiz, ArtifactKind::FeedbackRules]);
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(compile(&workbook(1, "Loud?")).unwrap().files(), compile(&workbook(1, "Loud?")).unwrap().files());
    }

    #[test]
    fn version_conflicts_block_output() {
        let dir = tempfile::tempdir().unwrap();
        let v1 = compile(&workbook(1, "Loud?")).unwrap();
        write_output(dir.path(), &v1).unwrap();
        // same content again is fine
        write_output(dir.path(), &v1).unwrap();

        let changed = compile(&workbook(1, "How loud?")).unwrap();
        let err = write_output(dir.path(), &changed).unwrap_err();
        let report = err.report().unwrap();
        assert_eq!(report.errors().count(), 1, "only the questionnaire changed");
        assert!(report.has_code(FindingCode::VersionConflict));
        let on_disk = fs::read(dir.path().join(artifact_path(ArtifactKind::Questionnaire, "diary", 1))).unwrap();
        assert_eq!(on_disk, v1.questionnaire.canonical_bytes_tagged());

        let v2 = compile(&workbook(2, "How loud?")).unwrap();
        write_output(dir.path(), &v2).unwrap();
        assert!(dir.path().join(artifact_path(ArtifactKind::Questionnaire, "diary", 2)).exists());
        assert!(dir.path().join(artifact_path(ArtifactKind::Questionnaire, "diary", 1)).exists());
    }

    #[test]
    fn tampered_artifact_rejected() {
        let out = compile(&workbook(1, "Loud?")).unwrap();
        let bytes = Artifact::Questionnaire(out.questionnaire.clone()).to_canonical_bytes();
        assert!(validate_artifact_bytes(&bytes).is_ok());
        let tampered = String::from_utf8(bytes).unwrap().replace("Loud?", "Quiet?");
        let report = validate_artifact_bytes(tampered.as_bytes()).unwrap_err();
        assert!(report.has_code(FindingCode::DigestMismatch));
        assert!(validate_artifact_bytes(b"{}").is_err());
    }

    impl QuestionnaireSchema {
        fn canonical_bytes_tagged(&self) -> Vec<u8> {
            Artifact::Questionnaire(self.clone()).to_canonical_bytes()
        }
    }
}
