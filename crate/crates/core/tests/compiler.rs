use std::fs;
use std::path::{Path, PathBuf};

use emistudy_core::compiler::{self, parse_tables, parse_workbook, Workbook};
use emistudy_core::compiler::workbook::TableFiles;
use emistudy_core::schema::{Artifact, QuestionnaireSchema, WidgetKind};
use emistudy_core::testkit::{fuzz_tables, generate_workbook, WorkbookShape};
use emistudy_core::{FindingCode, Severity};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/diary_min")
}

/// Independent re-reader: data rows are non-blank lines after the header.
fn count_data_rows(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).count()
}

fn copy_fixture(to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(fixture()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

#[test]
fn fixture_parses_to_two_questions() {
    let wb = parse_workbook(&fixture()).unwrap();
    assert_eq!(wb.questions.len(), count_data_rows(&fixture().join("questions.tsv")));
    assert_eq!(wb.questions.len(), 2);
    assert_eq!(wb.pages.len(), count_data_rows(&fixture().join("pages.tsv")));
    assert_eq!(wb.languages.len(), count_data_rows(&fixture().join("languages.tsv")));
    let widgets: Vec<_> = wb.questions.iter().map(|q| q.widget).collect();
    assert_eq!(widgets, [WidgetKind::Slider, WidgetKind::Checkbox]);
    assert_eq!(wb.language_codes(), ["en", "de"]);
}

#[test]
fn fixture_compiles_deterministically() {
    let a = compiler::compile(&parse_workbook(&fixture()).unwrap()).unwrap();
    let b = compiler::compile(&parse_workbook(&fixture()).unwrap()).unwrap();
    assert_eq!(a.files(), b.files());
    assert_eq!(a.questionnaire.pages.len(), 1);
    assert_eq!(a.questionnaire.version, 1);
    assert!(a.questionnaire.validate().findings.is_empty());
    assert_eq!(a.manifest.units.len(), 2);
}

#[test]
fn label_edit_changes_digest_and_requires_bump() {
    let dir = tempfile::tempdir().unwrap();
    let wb_dir = dir.path().join("wb");
    let out = dir.path().join("out");
    copy_fixture(&wb_dir);
    let first = compiler::compile_dir(&wb_dir, &out).unwrap();

    let q = wb_dir.join("questions.tsv");
    let edited = fs::read_to_string(&q).unwrap().replace("Did you sleep well?", "Did you sleep well last night?");
    fs::write(&q, edited).unwrap();
    let err = compiler::compile_dir(&wb_dir, &out).unwrap_err();
    assert!(err.report().unwrap().has_code(FindingCode::VersionConflict));

    let m = wb_dir.join("metadata.tsv");
    fs::write(&m, fs::read_to_string(&m).unwrap().replace("version\t1", "version\t2")).unwrap();
    let second = compiler::compile_dir(&wb_dir, &out).unwrap();
    assert_ne!(first.questionnaire.digest, second.questionnaire.digest);
    assert_eq!(second.questionnaire.version, 2);
}

#[test]
fn written_artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = compiler::compile_dir(&fixture(), dir.path()).unwrap();
    for unit in &out.manifest.units {
        let bytes = fs::read(dir.path().join(&unit.path)).unwrap();
        let artifact = compiler::validate_artifact_bytes(&bytes).unwrap();
        assert_eq!(artifact.digest(), unit.digest);
    }
}

#[test]
fn empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let err = parse_workbook(dir.path()).unwrap_err();
    let report = err.report().unwrap();
    assert!(report.findings.iter().any(|f| f.message == "missing table: questions"));
}

#[test]
fn unreadable_root_is_io_error() {
    let err = parse_workbook(Path::new("/nonexistent/workbook")).unwrap_err();
    assert!(err.report().is_none());
}

#[test]
fn fifty_questions_three_languages_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let shape = WorkbookShape { questions: 50, languages: 3, quizzes: 2, rules: 4, version: 3 };
    let files = generate_workbook(&mut rng, &shape);
    let wb = parse_tables(Path::new("gen"), &files).unwrap();
    let out = compiler::compile(&wb).unwrap();
    assert_eq!(out.questionnaire.questions.len(), 50);
    assert_eq!(out.questionnaire.languages.len(), 3);
    let reloaded = Artifact::Questionnaire(out.questionnaire.clone()).canonical_roundtrip().unwrap();
    let Artifact::Questionnaire(s) = reloaded else { panic!("wrong artifact kind") };
    assert_structurally_equal(&out.questionnaire, &s);
    assert_eq!(s.compute_digest(), out.questionnaire.digest);
}

#[test]
fn empty_schema_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = WorkbookShape { questions: 0, languages: 1, quizzes: 0, rules: 0, version: 1 };
    let wb = parse_tables(Path::new("gen"), &generate_workbook(&mut rng, &shape)).unwrap();
    let out = compiler::compile(&wb).unwrap();
    assert!(out.questionnaire.pages.is_empty());
    assert!(out.warnings.findings.iter().any(|f| f.message == "empty questionnaire"));
    let back = Artifact::Questionnaire(out.questionnaire.clone()).canonical_roundtrip().unwrap();
    assert_eq!(back, Artifact::Questionnaire(out.questionnaire));
}

/// Field-by-field comparison written independently of `PartialEq`.
fn assert_structurally_equal(a: &QuestionnaireSchema, b: &QuestionnaireSchema) {
    assert_eq!((&a.id, a.version, &a.languages, a.module), (&b.id, b.version, &b.languages, b.module));
    assert_eq!(a.pages.len(), b.pages.len());
    for (pa, pb) in a.pages.iter().zip(&b.pages) {
        assert_eq!((pa.index, &pa.questions), (pb.index, &pb.questions));
        assert_eq!(pa.title.0, pb.title.0);
    }
    assert_eq!(a.questions.len(), b.questions.len());
    for (qa, qb) in a.questions.iter().zip(&b.questions) {
        assert_eq!((&qa.id, qa.widget, qa.page, qa.required), (&qb.id, qb.widget, qb.page, qb.required));
        assert_eq!(qa.label.0, qb.label.0);
        assert_eq!(qa.options.len(), qb.options.len());
        assert_eq!(qa.bounds.map(|x| (x.min, x.max, x.step)), qb.bounds.map(|x| (x.min, x.max, x.step)));
        assert_eq!(qa.correct, qb.correct);
    }
}

fn line_count(files: &TableFiles, table: &str) -> usize {
    files.get(table).map_or(0, |b| b.split(|&c| c == b'\n').count())
}

fn parse(files: &TableFiles) -> Result<Workbook, emistudy_core::ValidationReport> {
    parse_tables(Path::new("gen"), files)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_workbooks_compile_deterministically(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = WorkbookShape::random(&mut rng);
        let files = generate_workbook(&mut rng, &shape);
        let a = compiler::compile(&parse(&files).unwrap()).unwrap();
        let b = compiler::compile(&parse(&files).unwrap()).unwrap();
        prop_assert_eq!(a.files(), b.files());
        for artifact in a.artifacts() {
            prop_assert!(artifact.validate().verdict());
            prop_assert_eq!(artifact.canonical_roundtrip().unwrap(), artifact.clone());
        }
        // manifest covers every artifact exactly once
        let mut keys: Vec<_> = a.manifest.units.iter().map(|u| (u.kind, u.id.clone())).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), a.artifacts().len());
        prop_assert_eq!(a.quizzes.len(), shape.quizzes);
        prop_assert_eq!(a.feedback_rules.rules.len(), shape.rules);
    }

    #[test]
    fn fuzzed_tables_never_panic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = WorkbookShape::random(&mut rng);
        let valid = generate_workbook(&mut rng, &shape);
        let files = fuzz_tables(&mut rng, &valid);
        match parse(&files) {
            Ok(wb) => {
                // a surviving mutation must still compile
                let _ = compiler::compile(&wb);
            }
            Err(report) => {
                prop_assert!(report.errors().count() >= 1);
                for f in &report.findings {
                    prop_assert!(compiler::TABLES.contains(&f.table.as_str()), "finding outside workbook: {}", f);
                    if let Some(row) = f.row {
                        prop_assert!(row >= 1 && row <= line_count(&files, &f.table).max(1), "row out of range: {}", f);
                    }
                }
            }
        }
    }
}

#[test]
fn warnings_do_not_fail_verdict() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut files = generate_workbook(&mut rng, &WorkbookShape { questions: 3, languages: 2, quizzes: 0, rules: 0, version: 1 });
    let meta = files.get_mut("metadata").unwrap();
    meta.extend_from_slice(b"owner\tsomeone\n");
    let wb = parse(&files).unwrap();
    assert!(wb.warnings.findings.iter().all(|f| f.severity == Severity::Warning));
    assert!(wb.warnings.has_code(FindingCode::UnknownMetadataKey));
}
