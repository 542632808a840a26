//! Diary submissions and answer validation against a pinned schema.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, FixedOffset, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::schema::{QuestionDef, QuestionnaireSchema, WidgetKind};

/// Accepted client UTC offsets: -12:00 through +14:00.
pub const MIN_OFFSET_SECONDS: i32 = -12 * 3600;
pub const MAX_OFFSET_SECONDS: i32 = 14 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionEnvelope {
    /// Client-minted 128-bit id; retransmissions reuse it.
    pub submission_id: Uuid,
    pub user_id: String,
    pub schema_id: String,
    pub schema_version: u32,
    pub answers: BTreeMap<String, Value>,
    /// Local time with the client's UTC offset.
    pub client_time: DateTime<FixedOffset>,
    pub language: String,
}

impl SubmissionEnvelope {
    pub fn local_day(&self) -> NaiveDate {
        self.client_time.date_naive()
    }
}

pub fn offset_in_range(time: &DateTime<FixedOffset>) -> bool {
    (MIN_OFFSET_SECONDS..=MAX_OFFSET_SECONDS).contains(&time.offset().local_minus_utc())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerFinding {
    pub question_id: String,
    pub message: String,
}

fn finding(q: &str, message: impl Into<String>) -> AnswerFinding {
    AnswerFinding { question_id: q.to_owned(), message: message.into() }
}

/// Checks `answers` against `schema`. An empty result means the answers are
/// acceptable.
pub fn check_answers(schema: &QuestionnaireSchema, answers: &BTreeMap<String, Value>) -> Vec<AnswerFinding> {
    let mut out = Vec::new();
    for (qid, value) in answers {
        match schema.question(qid) {
            None => out.push(finding(qid, format!("unknown question for {} v{}", schema.id, schema.version))),
            Some(q) => {
                if let Err(msg) = check_value(q, value) {
                    out.push(finding(qid, msg));
                }
            }
        }
    }
    for q in &schema.questions {
        let answered = answers.get(&q.id).is_some_and(|v| !v.is_null());
        if q.required && !answered {
            out.push(finding(&q.id, "required question not answered"));
        }
    }
    out
}

fn check_value(q: &QuestionDef, value: &Value) -> Result<(), String> {
    if value.is_null() {
        return Ok(());
    }
    match q.widget {
        WidgetKind::Info => Err("info items take no answer".into()),
        WidgetKind::Slider | WidgetKind::Number => {
            let n = value.as_f64().filter(|n| n.is_finite()).ok_or("expected a number")?;
            if let Some(b) = q.bounds {
                if n < b.min || n > b.max {
                    return Err(format!("value {n} outside [{}, {}]", b.min, b.max));
                }
            }
            Ok(())
        }
        WidgetKind::Checkbox => value.as_bool().map(|_| ()).ok_or_else(|| "expected a boolean".into()),
        WidgetKind::Radio => {
            let s = value.as_str().ok_or("expected an option value")?;
            if q.options.iter().any(|o| o.value == s) {
                Ok(())
            } else {
                Err(format!("unknown option {s}"))
            }
        }
        WidgetKind::Multiselect => {
            let items = value.as_array().ok_or("expected a list of option values")?;
            let mut seen = BTreeSet::new();
            for item in items {
                let s = item.as_str().ok_or("expected option values as strings")?;
                if !q.options.iter().any(|o| o.value == s) {
                    return Err(format!("unknown option {s}"));
                }
                if !seen.insert(s) {
                    return Err(format!("option {s} selected twice"));
                }
            }
            Ok(())
        }
        WidgetKind::Text => value.as_str().map(|_| ()).ok_or_else(|| "expected text".into()),
        WidgetKind::Date => {
            let s = value.as_str().ok_or("expected a YYYY-MM-DD date")?;
            NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|_| ()).map_err(|_| format!("invalid date {s}"))
        }
    }
}
