//! Compiled questionnaire and quiz schemas.
//!
//! A [`QuestionnaireSchema`] is the unit the server stores, versions and
//! serves. Quizzes use the same type with `module = tinedu` and a chapter
//! reference; their questions carry the correct option values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, Digest};
use crate::feedback::FeedbackRuleSet;
use crate::report::{Finding, FindingCode, ValidationReport};
use crate::study::Module;

/// Text keyed by language code.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Localized(pub BTreeMap<String, String>);

impl Localized {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, lang: &str, text: &str) -> Self {
        self.0.insert(lang.to_owned(), text.to_owned());
        self
    }

    pub fn get(&self, lang: &str) -> Option<&str> {
        self.0.get(lang).map(String::as_str)
    }

    pub fn insert(&mut self, lang: impl Into<String>, text: impl Into<String>) {
        self.0.insert(lang.into(), text.into());
    }

    /// Declared languages with no (or blank) text.
    pub fn missing<'a>(&self, languages: &'a [String]) -> Vec<&'a str> {
        languages
            .iter()
            .filter(|l| self.get(l).is_none_or(|t| t.trim().is_empty()))
            .map(String::as_str)
            .collect()
    }
}

/// `requested`, then the center default, then `en`, then the first declared
/// language.
pub fn resolve_language<'a>(declared: &'a [String], requested: &str, center_default: &str) -> Option<&'a str> {
    [requested, center_default, "en"]
        .into_iter()
        .find_map(|want| declared.iter().find(|d| d.as_str() == want))
        .or_else(|| declared.first())
        .map(String::as_str)
}

/// Accepts `xx`, `xxx` and region/script suffixes like `pt-BR`.
pub fn is_language_code(code: &str) -> bool {
    let mut parts = code.split('-');
    let primary = parts.next().unwrap_or("");
    (2..=3).contains(&primary.len())
        && primary.bytes().all(|b| b.is_ascii_lowercase())
        && parts.all(|p| (2..=8).contains(&p.len()) && p.bytes().all(|b| b.is_ascii_alphanumeric()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Slider,
    Checkbox,
    Radio,
    Multiselect,
    Text,
    Number,
    Date,
    Info,
}

impl WidgetKind {
    pub const ALL: [WidgetKind; 8] = [
        WidgetKind::Slider,
        WidgetKind::Checkbox,
        WidgetKind::Radio,
        WidgetKind::Multiselect,
        WidgetKind::Text,
        WidgetKind::Number,
        WidgetKind::Date,
        WidgetKind::Info,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WidgetKind::Slider => "slider",
            WidgetKind::Checkbox => "checkbox",
            WidgetKind::Radio => "radio",
            WidgetKind::Multiselect => "multiselect",
            WidgetKind::Text => "text",
            WidgetKind::Number => "number",
            WidgetKind::Date => "date",
            WidgetKind::Info => "info",
        }
    }

    pub fn parse(s: &str) -> Option<WidgetKind> {
        WidgetKind::ALL.into_iter().find(|w| w.as_str() == s)
    }

    /// Widgets answered by picking from an option list.
    pub fn is_choice(self) -> bool {
        matches!(self, WidgetKind::Radio | WidgetKind::Multiselect)
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, WidgetKind::Slider | WidgetKind::Number)
    }
}

impl fmt::Display for WidgetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionDef {
    pub value: String,
    pub label: Localized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericBounds {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDef {
    pub id: String,
    pub widget: WidgetKind,
    /// 1-based page index.
    pub page: u32,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<OptionDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<NumericBounds>,
    pub label: Localized,
    /// Correct option values; only set on quiz questions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correct: Vec<String>,
}

impl QuestionDef {
    /// Widget-level invariant violations, as human-readable messages.
    pub fn widget_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.widget.is_choice() && self.options.len() < 2 {
            out.push(format!("{} question {} needs at least 2 options", self.widget, self.id));
        }
        if !self.widget.is_choice() && !self.options.is_empty() {
            out.push(format!("{} question {} cannot have options", self.widget, self.id));
        }
        let mut seen = BTreeSet::new();
        for opt in &self.options {
            if !seen.insert(opt.value.as_str()) {
                out.push(format!("question {} has duplicate option value {}", self.id, opt.value));
            }
        }
        match (self.widget, self.bounds) {
            (WidgetKind::Slider, None) => out.push(format!("slider question {} needs min, max and step", self.id)),
            (w, Some(b)) if w.is_numeric() => {
                if !(b.min.is_finite() && b.max.is_finite() && b.step.is_finite()) {
                    out.push(format!("question {} has non-finite bounds", self.id));
                } else {
                    if b.min >= b.max {
                        out.push(format!("question {} needs min < max", self.id));
                    }
                    if b.step <= 0.0 {
                        out.push(format!("question {} needs step > 0", self.id));
                    }
                }
            }
            (w, Some(_)) => out.push(format!("{w} question {} cannot have numeric bounds", self.id)),
            _ => {}
        }
        if self.widget == WidgetKind::Info && self.required {
            out.push(format!("info question {} cannot be required", self.id));
        }
        for value in &self.correct {
            if !self.options.iter().any(|o| &o.value == value) {
                out.push(format!("question {} marks unknown option {value} as correct", self.id));
            }
        }
        if self.widget == WidgetKind::Radio && self.correct.len() > 1 {
            out.push(format!("radio question {} can have only one correct option", self.id));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    /// 1-based.
    pub index: u32,
    pub title: Localized,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireSchema {
    pub id: String,
    pub module: Module,
    pub version: u32,
    pub languages: Vec<String>,
    /// Education chapter a quiz belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter: Option<String>,
    pub pages: Vec<Page>,
    pub questions: Vec<QuestionDef>,
    pub digest: Digest,
}

impl QuestionnaireSchema {
    pub fn compute_digest(&self) -> Digest {
        canonical::self_digest(self).expect("schema serializes")
    }

    /// Recomputes and stores the digest.
    pub fn seal(mut self) -> Self {
        self.digest = self.compute_digest();
        self
    }

    pub fn question(&self, id: &str) -> Option<&QuestionDef> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn is_quiz(&self) -> bool {
        self.chapter.is_some()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(self).expect("schema serializes")
    }

    /// Re-checks every structural invariant, including the stored digest.
    pub fn validate(&self) -> ValidationReport {
        validate_schema(self)
    }

    /// A single-language view with the fallback chain applied.
    pub fn localize(&self, requested: &str, center_default: &str) -> LocalizedSchema {
        let lang = resolve_language(&self.languages, requested, center_default).unwrap_or(requested);
        let pick = |text: &Localized| text.get(lang).unwrap_or_default().to_owned();
        let by_id: HashMap<&str, &QuestionDef> = self.questions.iter().map(|q| (q.id.as_str(), q)).collect();
        LocalizedSchema {
            id: self.id.clone(),
            module: self.module,
            version: self.version,
            digest: self.digest,
            language: lang.to_owned(),
            chapter: self.chapter.clone(),
            pages: self
                .pages
                .iter()
                .map(|page| LocalizedPage {
                    index: page.index,
                    title: pick(&page.title),
                    questions: page
                        .questions
                        .iter()
                        .filter_map(|id| by_id.get(id.as_str()))
                        .map(|q| LocalizedQuestion {
                            id: q.id.clone(),
                            widget: q.widget,
                            required: q.required,
                            label: pick(&q.label),
                            bounds: q.bounds,
                            options: q
                                .options
                                .iter()
                                .map(|o| LocalizedOption { value: o.value.clone(), label: pick(&o.label) })
                                .collect(),
                            correct: q.correct.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedOption {
    pub value: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedQuestion {
    pub id: String,
    pub widget: WidgetKind,
    pub required: bool,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<NumericBounds>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<LocalizedOption>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correct: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedPage {
    pub index: u32,
    pub title: String,
    pub questions: Vec<LocalizedQuestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizedSchema {
    pub id: String,
    pub module: Module,
    pub version: u32,
    pub digest: Digest,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter: Option<String>,
    pub pages: Vec<LocalizedPage>,
}

fn schema_finding(code: FindingCode, column: impl Into<String>, message: impl Into<String>) -> Finding {
    Finding::error(code, "schema", message).at_column(column)
}

pub fn validate_schema(schema: &QuestionnaireSchema) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut push = |code, column: String, message: String| report.push(schema_finding(code, column, message));

    if schema.id.trim().is_empty() {
        push(FindingCode::InvalidValue, "id".into(), "schema id is empty".into());
    }
    if schema.version == 0 {
        push(FindingCode::InvalidValue, "version".into(), "version must be at least 1".into());
    }
    if !matches!(schema.module, Module::Diary | Module::TinEdu) {
        push(FindingCode::InvalidValue, "module".into(), format!("module {} does not own questionnaires", schema.module));
    }
    if schema.is_quiz() != (schema.module == Module::TinEdu) {
        push(FindingCode::StructureViolation, "chapter".into(), "quizzes belong to tinedu and name a chapter".into());
    }
    if schema.languages.is_empty() {
        push(FindingCode::InvalidValue, "languages".into(), "no languages declared".into());
    }
    let mut langs = BTreeSet::new();
    for lang in &schema.languages {
        if !is_language_code(lang) {
            push(FindingCode::InvalidValue, "languages".into(), format!("invalid language code {lang:?}"));
        }
        if !langs.insert(lang) {
            push(FindingCode::DuplicateId, "languages".into(), format!("duplicate language {lang}"));
        }
    }

    let mut ids: HashMap<&str, usize> = HashMap::new();
    for (i, q) in schema.questions.iter().enumerate() {
        if ids.insert(q.id.as_str(), i).is_some() {
            push(FindingCode::DuplicateId, format!("questions[{i}].id"), format!("duplicate question id {}", q.id));
        }
        for msg in q.widget_violations() {
            push(FindingCode::WidgetConstraint, format!("questions[{i}]"), msg);
        }
        for lang in q.label.missing(&schema.languages) {
            push(FindingCode::MissingTranslation, format!("questions[{i}].label"), format!("question {} lacks {lang} label", q.id));
        }
        for (j, opt) in q.options.iter().enumerate() {
            for lang in opt.label.missing(&schema.languages) {
                push(
                    FindingCode::MissingTranslation,
                    format!("questions[{i}].options[{j}].label"),
                    format!("option {} of {} lacks {lang} label", opt.value, q.id),
                );
            }
        }
        if q.page == 0 || q.page as usize > schema.pages.len() {
            push(FindingCode::DanglingReference, format!("questions[{i}].page"), format!("question {} references page {}", q.id, q.page));
        }
        if !q.correct.is_empty() && !schema.is_quiz() {
            push(FindingCode::StructureViolation, format!("questions[{i}].correct"), "answer keys are only allowed in quizzes".into());
        }
    }

    let mut placed: HashMap<&str, u32> = HashMap::new();
    for (p, page) in schema.pages.iter().enumerate() {
        if page.index as usize != p + 1 {
            push(FindingCode::StructureViolation, format!("pages[{p}].index"), format!("page {} out of sequence", page.index));
        }
        if page.questions.is_empty() {
            push(FindingCode::StructureViolation, format!("pages[{p}]"), format!("page {} has no questions", page.index));
        }
        for lang in page.title.missing(&schema.languages) {
            push(FindingCode::MissingTranslation, format!("pages[{p}].title"), format!("page {} lacks {lang} title", page.index));
        }
        for qid in &page.questions {
            match ids.get(qid.as_str()) {
                None => push(FindingCode::DanglingReference, format!("pages[{p}].questions"), format!("page {} lists unknown question {qid}", page.index)),
                Some(&i) => {
                    if placed.insert(qid.as_str(), page.index).is_some() {
                        push(FindingCode::StructureViolation, format!("pages[{p}].questions"), format!("question {qid} appears on more than one page"));
                    } else if schema.questions[i].page != page.index {
                        push(
                            FindingCode::StructureViolation,
                            format!("questions[{i}].page"),
                            format!("question {qid} declares page {} but is listed on page {}", schema.questions[i].page, page.index),
                        );
                    }
                }
            }
        }
    }
    for (i, q) in schema.questions.iter().enumerate() {
        if !placed.contains_key(q.id.as_str()) {
            push(FindingCode::StructureViolation, format!("questions[{i}]"), format!("question {} is on no page", q.id));
        }
    }

    let recomputed = schema.compute_digest();
    if recomputed != schema.digest {
        push(
            FindingCode::DigestMismatch,
            "digest".into(),
            format!("digest mismatch: stored {}, recomputed {recomputed}", schema.digest),
        );
    }
    report
}

/// Any compiled artifact file, tagged by `artifact`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "artifact", rename_all = "snake_case")]
pub enum Artifact {
    Questionnaire(QuestionnaireSchema),
    FeedbackRules(FeedbackRuleSet),
}

impl Artifact {
    pub fn id(&self) -> &str {
        match self {
            Artifact::Questionnaire(s) => &s.id,
            Artifact::FeedbackRules(r) => &r.id,
        }
    }

    pub fn version(&self) -> u32 {
        match self {
            Artifact::Questionnaire(s) => s.version,
            Artifact::FeedbackRules(r) => r.version,
        }
    }

    pub fn digest(&self) -> Digest {
        match self {
            Artifact::Questionnaire(s) => s.digest,
            Artifact::FeedbackRules(r) => r.digest,
        }
    }

    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Questionnaire(s) if s.is_quiz() => ArtifactKind::Quiz,
            Artifact::Questionnaire(_) => ArtifactKind::Questionnaire,
            Artifact::FeedbackRules(_) => ArtifactKind::FeedbackRules,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        match self {
            Artifact::Questionnaire(s) => s.validate(),
            Artifact::FeedbackRules(r) => r.validate(),
        }
    }

    /// Canonical bytes of the tagged document.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(self).expect("artifact serializes")
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Serialize to canonical bytes and load them back.
    pub fn canonical_roundtrip(&self) -> Result<Self, serde_json::Error> {
        Artifact::from_slice(&self.to_canonical_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Questionnaire,
    Quiz,
    FeedbackRules,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Questionnaire => "questionnaire",
            ArtifactKind::Quiz => "quiz",
            ArtifactKind::FeedbackRules => "feedback_rules",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn langs() -> Vec<String> {
        vec!["en".into(), "de".into()]
    }

    pub fn diary() -> QuestionnaireSchema {
        QuestionnaireSchema {
            id: "diary".into(),
            module: Module::Diary,
            version: 1,
            languages: langs(),
            chapter: None,
            pages: vec![Page {
                index: 1,
                title: Localized::new().with("en", "Today").with("de", "Heute"),
                questions: vec!["loudness".into(), "sleep".into()],
            }],
            questions: vec![
                QuestionDef {
                    id: "loudness".into(),
                    widget: WidgetKind::Slider,
                    page: 1,
                    required: true,
                    options: vec![],
                    bounds: Some(NumericBounds { min: 0.0, max: 100.0, step: 1.0 }),
                    label: Localized::new().with("en", "How loud?").with("de", "Wie laut?"),
                    correct: vec![],
                },
                QuestionDef {
                    id: "sleep".into(),
                    widget: WidgetKind::Checkbox,
                    page: 1,
                    required: false,
                    options: vec![],
                    bounds: None,
                    label: Localized::new().with("en", "Slept well").with("de", "Gut geschlafen"),
                    correct: vec![],
                },
            ],
            digest: Digest::zero(),
        }
        .seal()
    }
}
