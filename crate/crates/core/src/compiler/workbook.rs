//! Workbook directory parsing and cross-table validation.
//!
//! A workbook is a directory of UTF-8, tab-delimited files:
//!
//! | file                 | header                                                              |
//! |----------------------|---------------------------------------------------------------------|
//! | `metadata.tsv`       | `key value`                                                         |
//! | `languages.tsv`      | `code name`                                                         |
//! | `pages.tsv`          | `page title:<lang>...`                                              |
//! | `questions.tsv`      | `question_id page widget required min max step label:<lang>...`     |
//! | `options.tsv`        | `question_id value label:<lang>...`                                 |
//! | `quizzes.tsv`        | `quiz_id chapter_id question_id widget correct prompt:<lang>...`    |
//! | `feedback_rules.tsv` | `rule_id metric comparator threshold priority message:<lang>...`    |
//!
//! Translatable columns appear once per language, in `languages.tsv` order.
//! Metadata keys: `study_id`, `schema_id`, `version` (required), `rule_set_id`
//! and `chapters` (comma-separated education chapter ids).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::compiler::table::{Row, Table};
use crate::feedback::{Comparator, FeedbackRule, Metric};
use crate::report::{Finding, FindingCode, ValidationReport};
use crate::schema::{is_language_code, Localized, NumericBounds, OptionDef, QuestionDef, WidgetKind};

pub const METADATA: &str = "metadata";
pub const LANGUAGES: &str = "languages";
pub const PAGES: &str = "pages";
pub const QUESTIONS: &str = "questions";
pub const OPTIONS: &str = "options";
pub const QUIZZES: &str = "quizzes";
pub const FEEDBACK_RULES: &str = "feedback_rules";

/// Table names in the order they are checked.
pub const TABLES: [&str; 7] = [QUESTIONS, PAGES, OPTIONS, LANGUAGES, QUIZZES, FEEDBACK_RULES, METADATA];

pub fn table_file_name(table: &str) -> String {
    format!("{table}.tsv")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Language {
    pub code: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub study_id: String,
    pub schema_id: String,
    pub version: u32,
    pub rule_set_id: String,
    pub chapters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageDef {
    pub index: u32,
    pub title: Localized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuizDef {
    pub id: String,
    pub chapter_id: String,
    pub questions: Vec<QuestionDef>,
}

/// A fully resolved workbook.
#[derive(Debug, Clone, PartialEq)]
pub struct Workbook {
    pub root: PathBuf,
    pub metadata: Metadata,
    pub languages: Vec<Language>,
    pub pages: Vec<PageDef>,
    /// In file order.
    pub questions: Vec<QuestionDef>,
    pub quizzes: Vec<QuizDef>,
    pub feedback_rules: Vec<FeedbackRule>,
    /// Warning-severity findings from parsing.
    pub warnings: ValidationReport,
}

impl Workbook {
    pub fn language_codes(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.code.clone()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("cannot read workbook: {0}")]
    Io(#[from] io::Error),
    #[error("workbook has errors:\n{0}")]
    Invalid(ValidationReport),
}

impl ParseError {
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            ParseError::Invalid(r) => Some(r),
            ParseError::Io(_) => None,
        }
    }
}

/// Raw table bytes keyed by table name (without extension).
pub type TableFiles = BTreeMap<String, Vec<u8>>;

/// Reads every known table file under `root`. Missing files are simply
/// absent from the map; an unreadable root is an I/O error.
pub fn read_table_files(root: &Path) -> io::Result<TableFiles> {
    if !fs::metadata(root)?.is_dir() {
        return Err(io::Error::new(io::ErrorKind::NotADirectory, format!("{} is not a directory", root.display())));
    }
    let mut files = TableFiles::new();
    for table in TABLES {
        match fs::read(root.join(table_file_name(table))) {
            Ok(bytes) => {
                files.insert(table.to_owned(), bytes);
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
    }
    Ok(files)
}

pub fn parse_workbook(root: &Path) -> Result<Workbook, ParseError> {
    let files = read_table_files(root)?;
    parse_tables(root, &files).map_err(ParseError::Invalid)
}

/// Parses in-memory table files. Never panics on arbitrary bytes.
pub fn parse_tables(root: &Path, files: &TableFiles) -> Result<Workbook, ValidationReport> {
    Parser::default().run(root, files)
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
        && !s.starts_with('.')
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" | "1" | "x" => Some(true),
        "no" | "n" | "false" | "0" | "" => Some(false),
        _ => None,
    }
}

#[derive(Default)]
struct Parser {
    findings: Vec<Finding>,
}

struct QuestionRow {
    def: QuestionDef,
    table: &'static str,
    line: usize,
}

impl Parser {
    fn err(&mut self, code: FindingCode, table: &str, row: usize, column: &str, message: impl Into<String>) {
        self.findings.push(Finding::error(code, table, message).at_row(row).at_column(column));
    }

    fn warn(&mut self, code: FindingCode, table: &str, message: impl Into<String>) {
        self.findings.push(Finding::warning(code, table, message));
    }

    fn into_report(self) -> ValidationReport {
        ValidationReport { findings: self.findings }
    }

    fn run(mut self, root: &Path, files: &TableFiles) -> Result<Workbook, ValidationReport> {
        let mut tables: HashMap<&str, Table> = HashMap::new();
        for name in TABLES {
            match files.get(name) {
                None => self.findings.push(Finding::error(FindingCode::MissingTable, name, format!("missing table: {name}"))),
                Some(bytes) => match Table::parse(name, bytes) {
                    Ok(t) => {
                        tables.insert(name, t);
                    }
                    Err(f) => self.findings.push(f),
                },
            }
        }

        let languages = tables.get(LANGUAGES).map(|t| self.languages(t)).unwrap_or_default();
        let metadata = tables.get(METADATA).and_then(|t| self.metadata(t));
        if languages.is_empty() || tables.len() < TABLES.len() {
            // headers of the translatable tables depend on the language list
            return Err(self.into_report());
        }
        let Some(metadata) = metadata else {
            return Err(self.into_report());
        };
        let codes: Vec<String> = languages.iter().map(|l| l.code.clone()).collect();

        let pages = self.pages(&tables[PAGES], &codes);
        let mut rows = self.questions(&tables[QUESTIONS], &codes, pages.len());
        let quiz_rows = self.quizzes(&tables[QUIZZES], &codes, &metadata, &mut rows);
        self.options(&tables[OPTIONS], &codes, &mut rows);
        for q in &rows {
            for msg in q.def.widget_violations() {
                self.err(FindingCode::WidgetConstraint, q.table, q.line, "widget", msg);
            }
        }
        let feedback_rules = self.feedback_rules(&tables[FEEDBACK_RULES], &codes);

        let questions: Vec<QuestionDef> = rows.iter().filter(|r| r.table == QUESTIONS).map(|r| r.def.clone()).collect();
        if questions.is_empty() {
            self.warn(FindingCode::EmptyQuestionnaire, QUESTIONS, "empty questionnaire");
        } else {
            for (page, line) in &pages {
                if !questions.iter().any(|q| q.page == page.index) {
                    self.err(FindingCode::StructureViolation, PAGES, *line, "page", format!("page {} has no questions", page.index));
                }
            }
        }

        let mut quizzes: Vec<QuizDef> = Vec::new();
        for (quiz_id, chapter_id, qid) in quiz_rows {
            let Some(def) = rows.iter().find(|r| r.table == QUIZZES && r.def.id == qid).map(|r| r.def.clone()) else {
                continue;
            };
            match quizzes.iter_mut().find(|q| q.id == quiz_id) {
                Some(q) => q.questions.push(def),
                None => quizzes.push(QuizDef { id: quiz_id, chapter_id, questions: vec![def] }),
            }
        }

        let report = self.into_report();
        if !report.verdict() {
            return Err(report);
        }
        Ok(Workbook {
            root: root.to_path_buf(),
            metadata,
            languages,
            pages: if questions.is_empty() { Vec::new() } else { pages.into_iter().map(|(p, _)| p).collect() },
            questions,
            quizzes,
            feedback_rules,
            warnings: report,
        })
    }

    fn header(&mut self, table: &Table, fixed: &[&str], prefix: &str, codes: &[String]) -> bool {
        let expected: Vec<String> = fixed
            .iter()
            .map(|s| s.to_string())
            .chain(codes.iter().map(|c| format!("{prefix}:{c}")))
            .collect();
        match table.expect_header(&expected) {
            Ok(()) => true,
            Err(f) => {
                self.findings.push(f);
                false
            }
        }
    }

    fn localized(&mut self, table: &str, row: &Row, first: usize, prefix: &str, codes: &[String]) -> Localized {
        let mut text = Localized::new();
        for (i, code) in codes.iter().enumerate() {
            let cell = row.get(first + i);
            if cell.is_empty() {
                self.err(FindingCode::MissingTranslation, table, row.line, &format!("{prefix}:{code}"), format!("missing {code} translation"));
            } else {
                text.insert(code.clone(), cell);
            }
        }
        text
    }

    fn languages(&mut self, table: &Table) -> Vec<Language> {
        if !self.header(table, &["code", "name"], "", &[]) {
            return Vec::new();
        }
        let mut out: Vec<Language> = Vec::new();
        let mut ok = true;
        for row in table.well_formed_rows(&mut self.findings) {
            let code = row.get(0);
            if !is_language_code(code) {
                self.err(FindingCode::InvalidValue, LANGUAGES, row.line, "code", format!("invalid language code {code:?}"));
                ok = false;
            } else if out.iter().any(|l| l.code == code) {
                self.err(FindingCode::DuplicateId, LANGUAGES, row.line, "code", format!("duplicate language {code}"));
                ok = false;
            } else {
                out.push(Language { code: code.to_owned(), name: row.get(1).to_owned() });
            }
        }
        if out.is_empty() {
            self.findings.push(Finding::error(FindingCode::InvalidValue, LANGUAGES, "at least one language is required"));
        }
        if ok {
            out
        } else {
            Vec::new()
        }
    }

    fn metadata(&mut self, table: &Table) -> Option<Metadata> {
        if !self.header(table, &["key", "value"], "", &[]) {
            return None;
        }
        let mut values: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
        for row in table.well_formed_rows(&mut self.findings) {
            let key = row.get(0);
            match key {
                "study_id" | "schema_id" | "version" | "rule_set_id" | "chapters" => {
                    if values.insert(key, (row.get(1), row.line)).is_some() {
                        self.err(FindingCode::DuplicateId, METADATA, row.line, "key", format!("duplicate metadata key {key}"));
                    }
                }
                other => self.findings.push(
                    Finding::warning(FindingCode::UnknownMetadataKey, METADATA, format!("unknown metadata key {other:?}"))
                        .at_row(row.line),
                ),
            }
        }
        let ident = |p: &mut Parser, key: &str| -> Option<String> {
            match values.get(key) {
                Some((v, line)) if is_identifier(v) => {
                    let _ = line;
                    Some(v.to_string())
                }
                Some((v, line)) => {
                    p.err(FindingCode::InvalidValue, METADATA, *line, "value", format!("{key} {v:?} is not a valid identifier"));
                    None
                }
                None => {
                    p.findings.push(Finding::error(FindingCode::InvalidValue, METADATA, format!("missing metadata key {key}")));
                    None
                }
            }
        };
        let study_id = ident(self, "study_id");
        let schema_id = ident(self, "schema_id");
        let version = match values.get("version") {
            Some((v, line)) => match v.parse::<u32>() {
                Ok(n) if n >= 1 => Some(n),
                _ => {
                    self.err(FindingCode::InvalidValue, METADATA, *line, "value", format!("version {v:?} must be a positive integer"));
                    None
                }
            },
            None => {
                self.findings.push(Finding::error(FindingCode::InvalidValue, METADATA, "missing metadata key version"));
                None
            }
        };
        let rule_set_id = match values.get("rule_set_id") {
            Some(_) => ident(self, "rule_set_id"),
            None => study_id.as_ref().map(|s| format!("{s}-feedback")),
        };
        let mut chapters = Vec::new();
        if let Some((list, line)) = values.get("chapters") {
            for c in list.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                if !is_identifier(c) {
                    self.err(FindingCode::InvalidValue, METADATA, *line, "value", format!("chapter id {c:?} is not a valid identifier"));
                } else if chapters.iter().any(|x| x == c) {
                    self.err(FindingCode::DuplicateId, METADATA, *line, "value", format!("duplicate chapter {c}"));
                } else {
                    chapters.push(c.to_owned());
                }
            }
        }
        Some(Metadata {
            study_id: study_id?,
            schema_id: schema_id?,
            version: version?,
            rule_set_id: rule_set_id?,
            chapters,
        })
    }

    fn pages(&mut self, table: &Table, codes: &[String]) -> Vec<(PageDef, usize)> {
        if !self.header(table, &["page"], "title", codes) {
            return Vec::new();
        }
        let mut out = Vec::new();
        for row in table.well_formed_rows(&mut self.findings) {
            let expected = out.len() as u32 + 1;
            match row.get(0).parse::<u32>() {
                Ok(n) if n == expected => {
                    let title = self.localized(PAGES, row, 1, "title", codes);
                    out.push((PageDef { index: n, title }, row.line));
                }
                Ok(n) if n >= 1 && n < expected => {
                    self.err(FindingCode::DuplicateId, PAGES, row.line, "page", format!("duplicate page {n}"));
                }
                _ => self.err(
                    FindingCode::InvalidValue,
                    PAGES,
                    row.line,
                    "page",
                    format!("expected page {expected}, found {:?}", row.get(0)),
                ),
            }
        }
        out
    }

    fn question_id(&mut self, table: &'static str, row: &Row, col: usize, column: &str, rows: &[QuestionRow]) -> Option<String> {
        let id = row.get(col);
        if !is_identifier(id) {
            self.err(FindingCode::InvalidValue, table, row.line, column, format!("invalid question id {id:?}"));
            return None;
        }
        if let Some(prev) = rows.iter().find(|r| r.def.id == id) {
            self.err(
                FindingCode::DuplicateId,
                table,
                row.line,
                column,
                format!("duplicate question id {id} (first defined in {} row {})", prev.table, prev.line),
            );
            return None;
        }
        Some(id.to_owned())
    }

    fn widget(&mut self, table: &str, row: &Row, col: usize) -> Option<WidgetKind> {
        let raw = row.get(col);
        let w = WidgetKind::parse(&raw.to_ascii_lowercase());
        if w.is_none() {
            self.err(FindingCode::UnknownWidget, table, row.line, "widget", format!("unknown widget {raw:?}"));
        }
        w
    }

    fn questions(&mut self, table: &Table, codes: &[String], page_count: usize) -> Vec<QuestionRow> {
        let fixed = ["question_id", "page", "widget", "required", "min", "max", "step"];
        let mut out: Vec<QuestionRow> = Vec::new();
        if !self.header(table, &fixed, "label", codes) {
            return out;
        }
        for row in table.well_formed_rows(&mut self.findings) {
            let id = self.question_id(QUESTIONS, row, 0, "question_id", &out);
            let page = match row.get(1).parse::<u32>() {
                Ok(p) if p >= 1 && p as usize <= page_count => Some(p),
                Ok(p) => {
                    self.err(
                        FindingCode::DanglingReference,
                        QUESTIONS,
                        row.line,
                        "page",
                        format!("page {p} does not exist ({page_count} pages declared)"),
                    );
                    None
                }
                Err(_) => {
                    self.err(FindingCode::InvalidValue, QUESTIONS, row.line, "page", format!("invalid page {:?}", row.get(1)));
                    None
                }
            };
            let widget = self.widget(QUESTIONS, row, 2);
            let required = parse_bool(row.get(3));
            if required.is_none() {
                self.err(FindingCode::InvalidValue, QUESTIONS, row.line, "required", format!("invalid flag {:?}", row.get(3)));
            }
            let bounds = self.bounds(row);
            let label = self.localized(QUESTIONS, row, fixed.len(), "label", codes);
            if let (Some(id), Some(page), Some(widget), Some(required), Some(bounds)) = (id, page, widget, required, bounds) {
                out.push(QuestionRow {
                    def: QuestionDef { id, widget, page, required, options: Vec::new(), bounds, label, correct: Vec::new() },
                    table: QUESTIONS,
                    line: row.line,
                });
            }
        }
        out
    }

    /// `Some(None)` when min/max/step are all blank.
    fn bounds(&mut self, row: &Row) -> Option<Option<NumericBounds>> {
        let cells = [row.get(4), row.get(5), row.get(6)];
        if cells.iter().all(|c| c.is_empty()) {
            return Some(None);
        }
        let mut nums = [0.0f64; 3];
        let mut ok = true;
        for (i, name) in ["min", "max", "step"].into_iter().enumerate() {
            match cells[i].parse::<f64>() {
                Ok(v) if v.is_finite() => nums[i] = v,
                _ => {
                    self.err(FindingCode::InvalidValue, QUESTIONS, row.line, name, format!("{name} {:?} is not a finite number", cells[i]));
                    ok = false;
                }
            }
        }
        ok.then_some(Some(NumericBounds { min: nums[0], max: nums[1], step: nums[2] }))
    }

    fn quizzes(&mut self, table: &Table, codes: &[String], metadata: &Metadata, rows: &mut Vec<QuestionRow>) -> Vec<(String, String, String)> {
        let fixed = ["quiz_id", "chapter_id", "question_id", "widget", "correct"];
        let mut out = Vec::new();
        if !self.header(table, &fixed, "prompt", codes) {
            return out;
        }
        let mut quiz_chapter: HashMap<String, String> = HashMap::new();
        for row in table.well_formed_rows(&mut self.findings) {
            let quiz_id = row.get(0);
            let chapter = row.get(1);
            let mut ok = true;
            if !is_identifier(quiz_id) {
                self.err(FindingCode::InvalidValue, QUIZZES, row.line, "quiz_id", format!("invalid quiz id {quiz_id:?}"));
                ok = false;
            }
            if !metadata.chapters.iter().any(|c| c == chapter) {
                self.err(FindingCode::DanglingReference, QUIZZES, row.line, "chapter_id", format!("unknown education chapter {chapter:?}"));
                ok = false;
            }
            match quiz_chapter.get(quiz_id) {
                Some(prev) if prev != chapter => {
                    self.err(FindingCode::InvalidValue, QUIZZES, row.line, "chapter_id", format!("quiz {quiz_id} already belongs to chapter {prev}"));
                    ok = false;
                }
                _ => {
                    quiz_chapter.insert(quiz_id.to_owned(), chapter.to_owned());
                }
            }
            if quiz_id == metadata.schema_id {
                self.err(FindingCode::DuplicateId, QUIZZES, row.line, "quiz_id", format!("quiz id {quiz_id} collides with the questionnaire id"));
                ok = false;
            }
            let qid = self.question_id(QUIZZES, row, 2, "question_id", rows);
            let widget = self.widget(QUIZZES, row, 3);
            if let Some(w) = widget {
                if !w.is_choice() {
                    self.err(FindingCode::WidgetConstraint, QUIZZES, row.line, "widget", format!("quiz questions must be radio or multiselect, not {w}"));
                    ok = false;
                }
            }
            let correct: Vec<String> = row.get(4).split('|').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect();
            if correct.is_empty() {
                self.err(FindingCode::InvalidValue, QUIZZES, row.line, "correct", "quiz question needs at least one correct option");
                ok = false;
            }
            let label = self.localized(QUIZZES, row, fixed.len(), "prompt", codes);
            // registered even when the quiz row is rejected, so its options do not cascade
            if let (Some(qid), Some(widget)) = (qid, widget) {
                if ok {
                    out.push((quiz_id.to_owned(), chapter.to_owned(), qid.clone()));
                }
                rows.push(QuestionRow {
                    def: QuestionDef { id: qid, widget, page: 1, required: true, options: Vec::new(), bounds: None, label, correct },
                    table: QUIZZES,
                    line: row.line,
                });
            }
        }
        out
    }

    fn options(&mut self, table: &Table, codes: &[String], rows: &mut [QuestionRow]) {
        if !self.header(table, &["question_id", "value"], "label", codes) {
            return;
        }
        for row in table.well_formed_rows(&mut self.findings) {
            let qid = row.get(0);
            let value = row.get(1);
            let label = self.localized(OPTIONS, row, 2, "label", codes);
            if value.is_empty() || value.contains('|') {
                self.err(FindingCode::InvalidValue, OPTIONS, row.line, "value", format!("invalid option value {value:?}"));
                continue;
            }
            match rows.iter_mut().find(|r| r.def.id == qid) {
                Some(q) => q.def.options.push(OptionDef { value: value.to_owned(), label }),
                None => self.err(FindingCode::DanglingReference, OPTIONS, row.line, "question_id", format!("unknown question {qid:?}")),
            }
        }
    }

    fn feedback_rules(&mut self, table: &Table, codes: &[String]) -> Vec<FeedbackRule> {
        let fixed = ["rule_id", "metric", "comparator", "threshold", "priority"];
        let mut out: Vec<FeedbackRule> = Vec::new();
        if !self.header(table, &fixed, "message", codes) {
            return out;
        }
        let mut priorities: BTreeSet<i64> = BTreeSet::new();
        for row in table.well_formed_rows(&mut self.findings) {
            let id = row.get(0);
            let mut ok = true;
            if !is_identifier(id) {
                self.err(FindingCode::InvalidValue, FEEDBACK_RULES, row.line, "rule_id", format!("invalid rule id {id:?}"));
                ok = false;
            } else if out.iter().any(|r| r.id == id) {
                self.err(FindingCode::DuplicateId, FEEDBACK_RULES, row.line, "rule_id", format!("duplicate rule id {id}"));
                ok = false;
            }
            let metric = Metric::parse(row.get(1));
            if metric.is_none() {
                self.err(FindingCode::InvalidValue, FEEDBACK_RULES, row.line, "metric", format!("unknown metric {:?}", row.get(1)));
            }
            let comparator = Comparator::parse(row.get(2));
            if comparator.is_none() {
                self.err(FindingCode::InvalidValue, FEEDBACK_RULES, row.line, "comparator", format!("unknown comparator {:?}", row.get(2)));
            }
            let threshold = row.get(3).parse::<f64>().ok().filter(|t| t.is_finite());
            if threshold.is_none() {
                self.err(FindingCode::InvalidValue, FEEDBACK_RULES, row.line, "threshold", format!("invalid threshold {:?}", row.get(3)));
            }
            let priority = row.get(4).parse::<i64>().ok();
            match priority {
                None => self.err(FindingCode::InvalidValue, FEEDBACK_RULES, row.line, "priority", format!("invalid priority {:?}", row.get(4))),
                Some(p) if !priorities.insert(p) => {
                    self.err(FindingCode::DuplicateId, FEEDBACK_RULES, row.line, "priority", format!("priority {p} is already used"));
                    ok = false;
                }
                _ => {}
            }
            let message = self.localized(FEEDBACK_RULES, row, fixed.len(), "message", codes);
            if let (true, Some(metric), Some(comparator), Some(threshold), Some(priority)) = (ok, metric, comparator, threshold, priority) {
                out.push(FeedbackRule { id: id.to_owned(), metric, comparator, threshold, message, priority });
            }
        }
        out
    }
}
