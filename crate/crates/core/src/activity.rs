//! Intervention actions (EMI events) and their consistency rules.

use chrono::{DateTime, FixedOffset, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::study::{Module, StudyArm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    EducationStepCompleted,
    QuizCompleted,
    SoundSession,
    SoundRating,
    FeedbackViewed,
}

impl ActionKind {
    /// The only module allowed to log this kind.
    pub fn module(self) -> Module {
        match self {
            ActionKind::EducationStepCompleted | ActionKind::QuizCompleted => Module::TinEdu,
            ActionKind::SoundSession | ActionKind::SoundRating => Module::ShadesOfNoise,
            ActionKind::FeedbackViewed => Module::Feedback,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::EducationStepCompleted => "education_step_completed",
            ActionKind::QuizCompleted => "quiz_completed",
            ActionKind::SoundSession => "sound_session",
            ActionKind::SoundRating => "sound_rating",
            ActionKind::FeedbackViewed => "feedback_viewed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ActionPayload {
    EducationStepCompleted {
        chapter_id: String,
        section_id: String,
    },
    QuizCompleted {
        quiz_id: String,
        /// Fraction of correct answers in `[0, 1]`.
        score: f64,
    },
    SoundSession {
        sound_id: String,
        duration_seconds: f64,
    },
    SoundRating {
        sound_id: String,
        rating: i64,
    },
    FeedbackViewed {
        #[serde(default)]
        rule_ids: Vec<String>,
    },
}

impl ActionPayload {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionPayload::EducationStepCompleted { .. } => ActionKind::EducationStepCompleted,
            ActionPayload::QuizCompleted { .. } => ActionKind::QuizCompleted,
            ActionPayload::SoundSession { .. } => ActionKind::SoundSession,
            ActionPayload::SoundRating { .. } => ActionKind::SoundRating,
            ActionPayload::FeedbackViewed { .. } => ActionKind::FeedbackViewed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("{kind} actions belong to {expected}, not {module}")]
    ModuleMismatch { kind: &'static str, module: Module, expected: Module },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("module {module} is not available to {arm}")]
    Gated { module: Module, arm: StudyArm },
}

/// An action as sent by a client, before the server assigns an id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDraft {
    /// Client-minted 128-bit dedup id.
    pub dedup_id: Uuid,
    pub module: Module,
    #[serde(flatten)]
    pub payload: ActionPayload,
    pub client_time: DateTime<FixedOffset>,
}

impl ActionDraft {
    /// Module/kind consistency and payload ranges.
    pub fn check(&self) -> Result<(), ActionError> {
        let kind = self.payload.kind();
        if kind.module() != self.module {
            return Err(ActionError::ModuleMismatch {
                kind: kind.as_str(),
                module: self.module,
                expected: kind.module(),
            });
        }
        match &self.payload {
            ActionPayload::EducationStepCompleted { chapter_id, section_id } => {
                non_empty("chapter_id", chapter_id)?;
                non_empty("section_id", section_id)?;
            }
            ActionPayload::QuizCompleted { quiz_id, score } => {
                non_empty("quiz_id", quiz_id)?;
                if !(0.0..=1.0).contains(score) {
                    return Err(ActionError::InvalidPayload(format!("score {score} outside [0, 1]")));
                }
            }
            ActionPayload::SoundSession { sound_id, duration_seconds } => {
                non_empty("sound_id", sound_id)?;
                if !duration_seconds.is_finite() || *duration_seconds < 0.0 {
                    return Err(ActionError::InvalidPayload(format!("duration {duration_seconds} must be >= 0")));
                }
            }
            ActionPayload::SoundRating { sound_id, rating } => {
                non_empty("sound_id", sound_id)?;
                if !(1..=5).contains(rating) {
                    return Err(ActionError::InvalidPayload(format!("rating {rating} outside 1..=5")));
                }
            }
            ActionPayload::FeedbackViewed { .. } => {}
        }
        Ok(())
    }

    /// [`ActionDraft::check`] plus arm gating.
    pub fn check_for_arm(&self, arm: StudyArm) -> Result<(), ActionError> {
        if !arm.has_module(self.module) {
            return Err(ActionError::Gated { module: self.module, arm });
        }
        self.check()
    }
}

fn non_empty(field: &str, value: &str) -> Result<(), ActionError> {
    if value.trim().is_empty() {
        Err(ActionError::InvalidPayload(format!("{field} is empty")))
    } else {
        Ok(())
    }
}

/// A stored intervention action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionAction {
    pub action_id: i64,
    pub user_id: String,
    pub center_id: String,
    pub module: Module,
    #[serde(flatten)]
    pub payload: ActionPayload,
    pub client_time: DateTime<FixedOffset>,
    pub dedup_id: Uuid,
    pub received_at: DateTime<Utc>,
}

impl InterventionAction {
    pub fn kind(&self) -> ActionKind {
        self.payload.kind()
    }

    /// Calendar day in the client's own offset.
    pub fn local_day(&self) -> NaiveDate {
        self.client_time.date_naive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn draft(module: &str, kind: &str, payload: serde_json::Value) -> serde_json::Result<ActionDraft> {
        serde_json::from_value(json!({
            "dedup_id": "6f1c1f4e-8a4b-4c39-9d4e-1b1d3c5e7a90",
            "module": module,
            "kind": kind,
            "payload": payload,
            "client_time": "2021-05-01T20:15:00+02:00",
            "unknown_field": 1,
        }))
    }

    #[test]
    fn wire_format() {
        let d = draft("shades_of_noise", "sound_session", json!({"sound_id": "rain", "duration_seconds": 300})).unwrap();
        assert_eq!(d.payload, ActionPayload::SoundSession { sound_id: "rain".into(), duration_seconds: 300.0 });
        d.check_for_arm(StudyArm::Arm2).unwrap();
        let out = serde_json::to_value(&d).unwrap();
        assert_eq!(out["kind"], "sound_session");
        assert_eq!(out["payload"]["sound_id"], "rain");
        assert!(out.get("unknown_field").is_none());
    }

    #[test]
    fn feedback_viewed_payload_may_be_empty() {
        let d = draft("feedback", "feedback_viewed", json!({})).unwrap();
        d.check_for_arm(StudyArm::Arm1).unwrap();
    }

    #[test]
    fn module_kind_consistency() {
        let d = draft("tinedu", "sound_session", json!({"sound_id": "rain", "duration_seconds": 3})).unwrap();
        assert!(matches!(d.check(), Err(ActionError::ModuleMismatch { .. })));
    }

    #[test]
    fn gating() {
        let d = draft("tinedu", "quiz_completed", json!({"quiz_id": "q1", "score": 0.5})).unwrap();
        assert_eq!(d.check_for_arm(StudyArm::Arm1), Err(ActionError::Gated { module: Module::TinEdu, arm: StudyArm::Arm1 }));
        d.check_for_arm(StudyArm::Arm3).unwrap();
    }

    #[test]
    fn payload_ranges() {
        let bad = [
            draft("shades_of_noise", "sound_rating", json!({"sound_id": "rain", "rating": 6})),
            draft("shades_of_noise", "sound_rating", json!({"sound_id": "rain", "rating": 0})),
            draft("shades_of_noise", "sound_session", json!({"sound_id": "rain", "duration_seconds": -1})),
            draft("tinedu", "quiz_completed", json!({"quiz_id": "q", "score": 1.5})),
            draft("tinedu", "education_step_completed", json!({"chapter_id": "", "section_id": "s"})),
        ];
        for d in bad {
            assert!(matches!(d.unwrap().check(), Err(ActionError::InvalidPayload(_))));
        }
    }
}
