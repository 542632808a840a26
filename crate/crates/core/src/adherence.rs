//! Adherence figures over the intervention-action log.
//!
//! Only intervention actions count; diary submissions are tracked
//! separately. Day boundaries are the client's local days.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::activity::InterventionAction;
use crate::study::Module;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdherenceError {
    #[error("date range is inverted: {from} is after {to}")]
    InvertedRange { from: NaiveDate, to: NaiveDate },
}

/// Conjunctive filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdherenceFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module: Option<Module>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NaiveDate>,
}

impl AdherenceFilter {
    pub fn new(module: Option<Module>, center: Option<String>, from: Option<NaiveDate>, to: Option<NaiveDate>) -> Result<Self, AdherenceError> {
        let filter = AdherenceFilter { module, center, from, to };
        filter.check()?;
        Ok(filter)
    }

    pub fn check(&self) -> Result<(), AdherenceError> {
        match (self.from, self.to) {
            (Some(from), Some(to)) if from > to => Err(AdherenceError::InvertedRange { from, to }),
            _ => Ok(()),
        }
    }

    pub fn matches(&self, action: &InterventionAction) -> bool {
        let day = action.local_day();
        self.module.is_none_or(|m| action.module == m)
            && self.center.as_ref().is_none_or(|c| &action.center_id == c)
            && self.from.is_none_or(|f| day >= f)
            && self.to.is_none_or(|t| day <= t)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdherenceSummary {
    pub total_actions: u64,
    pub distinct_users: u64,
    pub max_actions_per_user: u64,
    pub per_user: BTreeMap<String, u64>,
    pub per_module: BTreeMap<Module, u64>,
    /// First and last local day with a counted action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_day: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_day: Option<NaiveDate>,
}

/// Single-pass accumulator; memory is proportional to the number of users,
/// not the number of actions.
#[derive(Debug, Clone, Default)]
pub struct AdherenceAccumulator {
    filter: AdherenceFilter,
    summary: AdherenceSummary,
}

impl AdherenceAccumulator {
    pub fn new(filter: AdherenceFilter) -> Result<Self, AdherenceError> {
        filter.check()?;
        Ok(AdherenceAccumulator { filter, summary: AdherenceSummary::default() })
    }

    pub fn push(&mut self, action: &InterventionAction) {
        if !self.filter.matches(action) {
            return;
        }
        let s = &mut self.summary;
        s.total_actions += 1;
        let n = s.per_user.entry(action.user_id.clone()).or_default();
        *n += 1;
        s.max_actions_per_user = s.max_actions_per_user.max(*n);
        *s.per_module.entry(action.module).or_default() += 1;
        let day = action.local_day();
        s.first_day = Some(s.first_day.map_or(day, |d| d.min(day)));
        s.last_day = Some(s.last_day.map_or(day, |d| d.max(day)));
    }

    pub fn finish(mut self) -> AdherenceSummary {
        self.summary.distinct_users = self.summary.per_user.len() as u64;
        self.summary
    }
}

pub fn summarize<'a>(log: impl IntoIterator<Item = &'a InterventionAction>, filter: &AdherenceFilter) -> Result<AdherenceSummary, AdherenceError> {
    let mut acc = AdherenceAccumulator::new(filter.clone())?;
    for action in log {
        acc.push(action);
    }
    Ok(acc.finish())
}

/// Per-local-day action counts for one user.
pub fn daily_series<'a>(log: impl IntoIterator<Item = &'a InterventionAction>, user_id: &str) -> BTreeMap<NaiveDate, u64> {
    let mut series = BTreeMap::new();
    for action in log.into_iter().filter(|a| a.user_id == user_id) {
        *series.entry(action.local_day()).or_default() += 1;
    }
    series
}

/// `user_id,actions` rows, sorted by user id.
pub fn per_user_csv(summary: &AdherenceSummary) -> String {
    let mut out = String::from("user_id,actions\n");
    for (user, n) in &summary.per_user {
        // user ids are server-minted hex or uuids; quote defensively anyway
        if user.contains([',', '"', '\n']) {
            out.push_str(&format!("\"{}\",{n}\n", user.replace('"', "\"\"")));
        } else {
            out.push_str(&format!("{user},{n}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::ActionPayload;
    use chrono::{DateTime, FixedOffset, TimeZone, Utc};

    fn action(user: &str, center: &str, payload: ActionPayload, time: DateTime<FixedOffset>) -> InterventionAction {
        InterventionAction {
            action_id: 0,
            user_id: user.into(),
            center_id: center.into(),
            module: payload.kind().module(),
            payload,
            client_time: time,
            dedup_id: uuid::Uuid::new_v4(),
            received_at: Utc::now(),
        }
    }

    fn at(offset_hours: i32, y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<FixedOffset> {
        FixedOffset::east_opt(offset_hours * 3600).unwrap().with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    fn sound() -> ActionPayload {
        ActionPayload::SoundSession { sound_id: "s".into(), duration_seconds: 1.0 }
    }

    fn step() -> ActionPayload {
        ActionPayload::EducationStepCompleted { chapter_id: "c".into(), section_id: "s".into() }
    }

    #[test]
    fn empty_log() {
        let s = summarize([], &AdherenceFilter::default()).unwrap();
        assert_eq!((s.total_actions, s.distinct_users, s.max_actions_per_user), (0, 0, 0));
    }

    #[test]
    fn invariants_and_filters() {
        let log = vec![
            action("a", "c1", sound(), at(0, 2021, 5, 1, 10, 0)),
            action("a", "c1", step(), at(0, 2021, 5, 2, 10, 0)),
            action("b", "c2", step(), at(0, 2021, 5, 3, 10, 0)),
            action("a", "c1", step(), at(0, 2021, 5, 4, 10, 0)),
        ];
        let all = summarize(&log, &AdherenceFilter::default()).unwrap();
        assert_eq!(all.total_actions, 4);
        assert_eq!(all.distinct_users, 2);
        assert_eq!(all.max_actions_per_user, 3);
        assert_eq!(all.per_user.values().sum::<u64>(), all.total_actions);
        assert_eq!(all.per_module[&Module::TinEdu], 3);

        let tinedu = AdherenceFilter { module: Some(Module::TinEdu), ..Default::default() };
        let s = summarize(&log, &tinedu).unwrap();
        assert_eq!(s.total_actions, 3);
        let brute = log.iter().filter(|a| a.module == Module::TinEdu).count() as u64;
        assert_eq!(s.total_actions, brute);

        let window = AdherenceFilter::new(Some(Module::TinEdu), Some("c1".into()), NaiveDate::from_ymd_opt(2021, 5, 2), NaiveDate::from_ymd_opt(2021, 5, 3)).unwrap();
        let s = summarize(&log, &window).unwrap();
        assert_eq!(s.total_actions, 1);
        assert_eq!(s.first_day, NaiveDate::from_ymd_opt(2021, 5, 2));
    }

    #[test]
    fn inverted_range_rejected() {
        let from = NaiveDate::from_ymd_opt(2021, 6, 1);
        let to = NaiveDate::from_ymd_opt(2021, 5, 1);
        assert!(AdherenceFilter::new(None, None, from, to).is_err());
        let f = AdherenceFilter { from, to, ..Default::default() };
        assert!(summarize([], &f).is_err());
    }

    #[test]
    fn daily_series_local_days() {
        let log = vec![
            action("u", "c", sound(), at(2, 2021, 5, 1, 9, 0)),
            action("u", "c", sound(), at(2, 2021, 5, 1, 12, 0)),
            action("u", "c", sound(), at(2, 2021, 5, 1, 23, 30)),
        ];
        let s = daily_series(&log, "u");
        assert_eq!(s.len(), 1);
        assert_eq!(s.values().sum::<u64>(), 3);
        assert!(daily_series(&log, "other").is_empty());

        // 23:30 and 00:30 at +02:00 are both 21:30/22:30 UTC on the same UTC day
        let straddle = vec![
            action("u", "c", sound(), at(2, 2021, 5, 1, 23, 30)),
            action("u", "c", sound(), at(2, 2021, 5, 2, 0, 30)),
        ];
        let s = daily_series(&straddle, "u");
        assert_eq!(s.len(), 2);
        assert!(s.values().all(|&n| n == 1));
    }

    #[test]
    fn csv_export() {
        let log = vec![action("a", "c", sound(), at(0, 2021, 5, 1, 1, 0)), action("b", "c", sound(), at(0, 2021, 5, 1, 1, 0))];
        let s = summarize(&log, &AdherenceFilter::default()).unwrap();
        assert_eq!(per_user_csv(&s), "user_id,actions\na,1\nb,1\n");
    }
}
