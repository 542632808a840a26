//! Threshold feedback rules over per-user activity metrics.
//!
//! Each rule compares one metric against one threshold. There are no
//! conjunctions or temporal conditions.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, FixedOffset, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::activity::{ActionPayload, InterventionAction};
use crate::canonical::{self, Digest};
use crate::content::{ChapterProgress, EducationChapter};
use crate::report::{Finding, FindingCode, ValidationReport};
use crate::schema::{is_language_code, resolve_language, Localized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    QuizScoreLatest,
    QuizScoreMean,
    ChaptersCompleted,
    DiaryStreakDays,
    SoundSessionsCount,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::QuizScoreLatest,
        Metric::QuizScoreMean,
        Metric::ChaptersCompleted,
        Metric::DiaryStreakDays,
        Metric::SoundSessionsCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::QuizScoreLatest => "quiz_score_latest",
            Metric::QuizScoreMean => "quiz_score_mean",
            Metric::ChaptersCompleted => "chapters_completed",
            Metric::DiaryStreakDays => "diary_streak_days",
            Metric::SoundSessionsCount => "sound_sessions_count",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub const ALL: [Comparator; 5] = [Comparator::Lt, Comparator::Le, Comparator::Eq, Comparator::Ge, Comparator::Gt];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }

    /// Also accepts the unicode forms `≤` and `≥`.
    pub fn parse(s: &str) -> Option<Comparator> {
        match s {
            "≤" => Some(Comparator::Le),
            "≥" => Some(Comparator::Ge),
            "==" => Some(Comparator::Eq),
            _ => Comparator::ALL.into_iter().find(|c| c.as_str() == s),
        }
    }

    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Eq => value == threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Gt => value > threshold,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRule {
    pub id: String,
    pub metric: Metric,
    pub comparator: Comparator,
    pub threshold: f64,
    pub message: Localized,
    /// Higher fires first.
    pub priority: i64,
}

impl FeedbackRule {
    pub fn fires(&self, metrics: &UserMetrics) -> bool {
        self.comparator.holds(metrics.get(self.metric), self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRuleSet {
    pub id: String,
    pub version: u32,
    pub languages: Vec<String>,
    pub rules: Vec<FeedbackRule>,
    pub digest: Digest,
}

impl FeedbackRuleSet {
    pub fn compute_digest(&self) -> Digest {
        canonical::self_digest(self).expect("rule set serializes")
    }

    pub fn seal(mut self) -> Self {
        self.digest = self.compute_digest();
        self
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        let mut err = |code, column: String, message: String| {
            report.push(Finding::error(code, "schema", message).at_column(column));
        };
        if self.id.trim().is_empty() {
            err(FindingCode::InvalidValue, "id".into(), "rule set id is empty".into());
        }
        if self.version == 0 {
            err(FindingCode::InvalidValue, "version".into(), "version must be at least 1".into());
        }
        if self.languages.is_empty() {
            err(FindingCode::InvalidValue, "languages".into(), "no languages declared".into());
        }
        for lang in &self.languages {
            if !is_language_code(lang) {
                err(FindingCode::InvalidValue, "languages".into(), format!("invalid language code {lang:?}"));
            }
        }
        let mut ids = BTreeSet::new();
        let mut priorities = HashMap::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if !ids.insert(rule.id.as_str()) {
                err(FindingCode::DuplicateId, format!("rules[{i}].id"), format!("duplicate rule id {}", rule.id));
            }
            if let Some(other) = priorities.insert(rule.priority, rule.id.as_str()) {
                err(
                    FindingCode::DuplicateId,
                    format!("rules[{i}].priority"),
                    format!("rules {other} and {} share priority {}", rule.id, rule.priority),
                );
            }
            if !rule.threshold.is_finite() {
                err(FindingCode::InvalidValue, format!("rules[{i}].threshold"), format!("rule {} threshold is not finite", rule.id));
            }
            for lang in rule.message.missing(&self.languages) {
                err(FindingCode::MissingTranslation, format!("rules[{i}].message"), format!("rule {} lacks {lang} message", rule.id));
            }
        }
        let recomputed = self.compute_digest();
        if recomputed != self.digest {
            err(
                FindingCode::DigestMismatch,
                "digest".into(),
                format!("digest mismatch: stored {}, recomputed {recomputed}", self.digest),
            );
        }
        report
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub quiz_score_latest: f64,
    pub quiz_score_mean: f64,
    pub chapters_completed: f64,
    pub diary_streak_days: f64,
    pub sound_sessions_count: f64,
}

impl UserMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::QuizScoreLatest => self.quiz_score_latest,
            Metric::QuizScoreMean => self.quiz_score_mean,
            Metric::ChaptersCompleted => self.chapters_completed,
            Metric::DiaryStreakDays => self.diary_streak_days,
            Metric::SoundSessionsCount => self.sound_sessions_count,
        }
    }
}

/// Everything the metrics are computed from, for one user.
#[derive(Debug, Clone, Copy)]
pub struct ActivityLog<'a> {
    pub actions: &'a [InterventionAction],
    /// Client timestamps (with their own offsets) of diary submissions.
    pub diary_times: &'a [DateTime<FixedOffset>],
    pub chapters: &'a [EducationChapter],
}

/// Number of consecutive local days with at least one submission, ending
/// on `today`. Days before `enrolled_on` are ignored.
pub fn diary_streak(days: impl IntoIterator<Item = NaiveDate>, enrolled_on: NaiveDate, today: NaiveDate) -> u32 {
    let days: BTreeSet<NaiveDate> = days.into_iter().filter(|d| *d >= enrolled_on && *d <= today).collect();
    let mut streak = 0;
    let mut day = today;
    while days.contains(&day) {
        streak += 1;
        match day.pred_opt() {
            Some(prev) => day = prev,
            None => break,
        }
    }
    streak
}

pub fn compute_metrics(log: ActivityLog<'_>, enrolled_on: NaiveDate, today: NaiveDate) -> UserMetrics {
    let mut latest: Option<(&DateTime<FixedOffset>, i64, f64)> = None;
    let mut score_sum = 0.0;
    let mut score_n = 0u32;
    let mut sessions = 0u32;
    for a in log.actions {
        match &a.payload {
            ActionPayload::QuizCompleted { score, .. } => {
                score_sum += score;
                score_n += 1;
                let key = (&a.client_time, a.action_id);
                if latest.is_none_or(|(t, id, _)| key > (t, id)) {
                    latest = Some((&a.client_time, a.action_id, *score));
                }
            }
            ActionPayload::SoundSession { .. } => sessions += 1,
            _ => {}
        }
    }
    let progress = ChapterProgress::from_actions(log.actions);
    let completed = log.chapters.iter().filter(|c| progress.is_completed(c)).count();
    let streak = diary_streak(log.diary_times.iter().map(|t| t.date_naive()), enrolled_on, today);
    UserMetrics {
        quiz_score_latest: latest.map_or(0.0, |(_, _, s)| s),
        quiz_score_mean: if score_n == 0 { 0.0 } else { score_sum / f64::from(score_n) },
        chapters_completed: completed as f64,
        diary_streak_days: f64::from(streak),
        sound_sessions_count: f64::from(sessions),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub rule_id: String,
    pub priority: i64,
    pub language: String,
    pub text: String,
}

/// Fired rules, highest priority first, localized with the questionnaire
/// fallback chain.
pub fn evaluate(rules: &FeedbackRuleSet, metrics: &UserMetrics, language: &str, center_default: &str) -> Vec<FeedbackMessage> {
    let lang = resolve_language(&rules.languages, language, center_default).unwrap_or(language);
    let mut fired: Vec<&FeedbackRule> = rules.rules.iter().filter(|r| r.fires(metrics)).collect();
    // ids break ties in rule sets that skipped validation
    fired.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.id.cmp(&b.id)));
    fired
        .into_iter()
        .map(|r| FeedbackMessage {
            rule_id: r.id.clone(),
            priority: r.priority,
            language: lang.to_owned(),
            text: r.message.get(lang).unwrap_or_default().to_owned(),
        })
        .collect()
}
