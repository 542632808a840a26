//! Study arms, module gating, permuted-block randomization and the
//! enrollment window.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Default study length: 12 weeks.
pub const DEFAULT_WINDOW_DAYS: u32 = 84;

/// Number of study arms. Fixed.
pub const ARM_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "diary")]
    Diary,
    #[serde(rename = "shades_of_noise")]
    ShadesOfNoise,
    #[serde(rename = "tinedu")]
    TinEdu,
    #[serde(rename = "feedback")]
    Feedback,
    #[serde(rename = "about_us")]
    AboutUs,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::Diary,
        Module::ShadesOfNoise,
        Module::TinEdu,
        Module::Feedback,
        Module::AboutUs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Diary => "diary",
            Module::ShadesOfNoise => "shades_of_noise",
            Module::TinEdu => "tinedu",
            Module::Feedback => "feedback",
            Module::AboutUs => "about_us",
        }
    }

    pub fn parse(s: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the four randomized study configurations ("study types").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyArm {
    Arm1,
    Arm2,
    Arm3,
    Arm4,
}

impl StudyArm {
    pub const ALL: [StudyArm; ARM_COUNT] = [StudyArm::Arm1, StudyArm::Arm2, StudyArm::Arm3, StudyArm::Arm4];

    /// Study type number, 1 through 4.
    pub fn study_type(self) -> u8 {
        match self {
            StudyArm::Arm1 => 1,
            StudyArm::Arm2 => 2,
            StudyArm::Arm3 => 3,
            StudyArm::Arm4 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StudyArm::Arm1 => "arm1",
            StudyArm::Arm2 => "arm2",
            StudyArm::Arm3 => "arm3",
            StudyArm::Arm4 => "arm4",
        }
    }

    pub fn parse(s: &str) -> Option<StudyArm> {
        StudyArm::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// Intervention modules randomized into this arm (always including the diary).
    pub fn arm_modules(self) -> BTreeSet<Module> {
        let list: &[Module] = match self {
            StudyArm::Arm1 => &[Module::Diary],
            StudyArm::Arm2 => &[Module::Diary, Module::ShadesOfNoise],
            StudyArm::Arm3 => &[Module::Diary, Module::TinEdu],
            StudyArm::Arm4 => &[Module::Diary, Module::ShadesOfNoise, Module::TinEdu],
        };
        list.iter().copied().collect()
    }

    pub fn has_module(self, module: Module) -> bool {
        modules_for(self).contains(&module)
    }
}

impl fmt::Display for StudyArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every module visible to a participant in `arm`: the arm's randomized
/// modules plus Feedback and About Us.
pub fn modules_for(arm: StudyArm) -> BTreeSet<Module> {
    let mut set = arm.arm_modules();
    set.insert(Module::Feedback);
    set.insert(Module::AboutUs);
    set
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Center {
    pub id: String,
    pub name: String,
    pub default_language: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    Registered,
    Anonymous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub auth_mode: AuthMode,
    /// Opaque reference to stored credentials; present iff registered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_ref: Option<String>,
    pub center_id: String,
    pub enrolled_at: DateTime<Utc>,
    pub language: String,
}

impl User {
    pub fn anonymous(id: impl Into<String>, center_id: impl Into<String>, language: impl Into<String>, enrolled_at: DateTime<Utc>) -> Self {
        User {
            id: id.into(),
            auth_mode: AuthMode::Anonymous,
            credential_ref: None,
            center_id: center_id.into(),
            enrolled_at,
            language: language.into(),
        }
    }

    pub fn registered(
        id: impl Into<String>,
        credential_ref: impl Into<String>,
        center_id: impl Into<String>,
        language: impl Into<String>,
        enrolled_at: DateTime<Utc>,
    ) -> Self {
        User {
            id: id.into(),
            auth_mode: AuthMode::Registered,
            credential_ref: Some(credential_ref.into()),
            center_id: center_id.into(),
            enrolled_at,
            language: language.into(),
        }
    }

    /// Registered users carry a credential reference, anonymous users none.
    pub fn is_consistent(&self) -> bool {
        match self.auth_mode {
            AuthMode::Registered => self.credential_ref.is_some(),
            AuthMode::Anonymous => self.credential_ref.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_id: String,
    pub arm: StudyArm,
    pub center_id: String,
    pub block_id: u64,
    /// 0-based position within the block.
    pub position: u32,
    pub assigned_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssignError {
    #[error("user {0} is already assigned")]
    AlreadyAssigned(String),
    #[error("unknown center {0}")]
    UnknownCenter(String),
    #[error("stored assignment for {user} does not match the randomization schedule")]
    ScheduleMismatch { user: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("block size must be a positive multiple of {ARM_COUNT}, got {0}")]
    BlockSize(usize),
    #[error("duplicate center id {0}")]
    DuplicateCenter(String),
    #[error("center {center} default language {language} is not a platform language")]
    CenterLanguage { center: String, language: String },
}

/// Deterministic permuted-block schedule: block `k` at center `c` is a
/// shuffle of every arm repeated `block_size / 4` times, drawn from a
/// ChaCha8 stream keyed by `(seed, c, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSchedule {
    seed: u64,
    block_size: usize,
}

impl BlockSchedule {
    pub fn new(seed: u64, block_size: usize) -> Result<Self, ConfigError> {
        if block_size == 0 || block_size % ARM_COUNT != 0 {
            return Err(ConfigError::BlockSize(block_size));
        }
        Ok(BlockSchedule { seed, block_size })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block(&self, center_id: &str, block_id: u64) -> Vec<StudyArm> {
        let mut hasher = Sha256::new();
        hasher.update(b"emistudy/permuted-block/v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((center_id.len() as u64).to_le_bytes());
        hasher.update(center_id.as_bytes());
        hasher.update(block_id.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());

        let per_arm = self.block_size / ARM_COUNT;
        let mut block: Vec<StudyArm> = StudyArm::ALL
            .iter()
            .flat_map(|&arm| std::iter::repeat_n(arm, per_arm))
            .collect();
        block.shuffle(&mut rng);
        block
    }
}

/// Per-center randomizer position: the current block and how far into it
/// assignments have been handed out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomizerState {
    pub center_id: String,
    pub block_id: u64,
    pub cursor: usize,
    pub block: Vec<StudyArm>,
}

impl RandomizerState {
    fn fresh(schedule: &BlockSchedule, center_id: &str) -> Self {
        RandomizerState {
            center_id: center_id.to_owned(),
            block_id: 0,
            cursor: 0,
            block: schedule.block(center_id, 0),
        }
    }

    /// The slot the next assignment will take, opening a new block when the
    /// current one is exhausted.
    fn peek(&self, schedule: &BlockSchedule) -> (u64, usize, StudyArm) {
        if self.cursor < self.block.len() {
            (self.block_id, self.cursor, self.block[self.cursor])
        } else {
            let next = self.block_id + 1;
            (next, 0, schedule.block(&self.center_id, next)[0])
        }
    }

    fn advance_to(&mut self, schedule: &BlockSchedule, block_id: u64, position: usize) {
        if block_id != self.block_id {
            self.block = schedule.block(&self.center_id, block_id);
            self.block_id = block_id;
        }
        self.cursor = position + 1;
    }
}

/// Thread-safe arm allocator. Assignment is linearized per center; centers
/// proceed independently.
pub struct Allocator {
    schedule: BlockSchedule,
    centers: BTreeMap<String, Center>,
    states: HashMap<String, Mutex<RandomizerState>>,
    assigned: Mutex<HashSet<String>>,
}

impl fmt::Debug for Allocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Allocator")
            .field("schedule", &self.schedule)
            .field("centers", &self.centers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Allocator {
    pub fn new(schedule: BlockSchedule, centers: impl IntoIterator<Item = Center>) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for center in centers {
            if map.contains_key(&center.id) {
                return Err(ConfigError::DuplicateCenter(center.id));
            }
            map.insert(center.id.clone(), center);
        }
        let states = map
            .keys()
            .map(|id| (id.clone(), Mutex::new(RandomizerState::fresh(&schedule, id))))
            .collect();
        Ok(Allocator {
            schedule,
            centers: map,
            states,
            assigned: Mutex::new(HashSet::new()),
        })
    }

    pub fn schedule(&self) -> &BlockSchedule {
        &self.schedule
    }

    pub fn centers(&self) -> impl Iterator<Item = &Center> {
        self.centers.values()
    }

    pub fn center(&self, id: &str) -> Option<&Center> {
        self.centers.get(id)
    }

    /// Rebuilds cursors and the assigned-user set from persisted assignments.
    /// Every stored arm must agree with the schedule, otherwise the seed or
    /// block size changed underneath an existing study.
    pub fn restore<'a>(&self, existing: impl IntoIterator<Item = &'a Assignment>) -> Result<(), AssignError> {
        let mut latest: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut assigned = self.assigned.lock();
        for a in existing {
            let position = a.position as usize;
            let expected = self.schedule.block(&a.center_id, a.block_id);
            if expected.get(position) != Some(&a.arm) {
                return Err(AssignError::ScheduleMismatch { user: a.user_id.clone() });
            }
            if !self.states.contains_key(&a.center_id) {
                return Err(AssignError::UnknownCenter(a.center_id.clone()));
            }
            let slot = latest.entry(a.center_id.as_str()).or_insert((a.block_id, position));
            if (a.block_id, position) > *slot {
                *slot = (a.block_id, position);
            }
            assigned.insert(a.user_id.clone());
        }
        for (center, (block_id, position)) in latest {
            let mut state = self.states[center].lock();
            state.advance_to(&self.schedule, block_id, position);
        }
        Ok(())
    }

    pub fn is_assigned(&self, user_id: &str) -> bool {
        self.assigned.lock().contains(user_id)
    }

    pub fn state(&self, center_id: &str) -> Option<RandomizerState> {
        self.states.get(center_id).map(|s| s.lock().clone())
    }

    /// Assigns `user` the next arm from their center's block.
    pub fn assign_user(&self, user: &User, now: DateTime<Utc>) -> Result<Assignment, AssignError> {
        self.assign_with(user, now, |_| Ok(()))
    }

    /// Like [`Allocator::assign_user`], but runs `persist` while the center
    /// is locked. The cursor only advances when `persist` succeeds, so a
    /// failed write never burns a block slot.
    pub fn assign_with<F, E>(&self, user: &User, now: DateTime<Utc>, persist: F) -> Result<Assignment, E>
    where
        F: FnOnce(&Assignment) -> Result<(), E>,
        E: From<AssignError>,
    {
        let state = self
            .states
            .get(&user.center_id)
            .ok_or_else(|| AssignError::UnknownCenter(user.center_id.clone()))?;
        let mut state = state.lock();
        if self.assigned.lock().contains(&user.id) {
            return Err(AssignError::AlreadyAssigned(user.id.clone()).into());
        }
        let (block_id, position, arm) = state.peek(&self.schedule);
        let assignment = Assignment {
            user_id: user.id.clone(),
            arm,
            center_id: user.center_id.clone(),
            block_id,
            position: position as u32,
            assigned_at: now,
        };
        persist(&assignment)?;
        state.advance_to(&self.schedule, block_id, position);
        self.assigned.lock().insert(user.id.clone());
        Ok(assignment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowState {
    Active,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStatus {
    pub status: WindowState,
    pub days_remaining: u32,
    pub starts_at: DateTime<Utc>,
    pub ends_at: DateTime<Utc>,
}

impl WindowStatus {
    pub fn is_active(&self) -> bool {
        self.status == WindowState::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WindowError {
    #[error("user {0} has no assignment")]
    Unassigned(String),
}

/// Participation window status. The window opens at assignment time and
/// is active while `now < start + length_days`.
pub fn enrollment_window(
    user: &User,
    assignment: Option<&Assignment>,
    now: DateTime<Utc>,
    length_days: u32,
) -> Result<WindowStatus, WindowError> {
    let assignment = assignment
        .filter(|a| a.user_id == user.id)
        .ok_or_else(|| WindowError::Unassigned(user.id.clone()))?;
    Ok(window_at(assignment.assigned_at, now, length_days))
}

pub fn window_at(start: DateTime<Utc>, now: DateTime<Utc>, length_days: u32) -> WindowStatus {
    let ends_at = start + Duration::days(i64::from(length_days));
    if now < ends_at {
        let remaining = (ends_at - now).num_milliseconds();
        let day = Duration::days(1).num_milliseconds();
        let days = (remaining + day - 1) / day;
        WindowStatus {
            status: WindowState::Active,
            days_remaining: days as u32,
            starts_at: start,
            ends_at,
        }
    } else {
        WindowStatus {
            status: WindowState::Expired,
            days_remaining: 0,
            starts_at: start,
            ends_at,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 4, 15, 9, 0, 0).unwrap()
    }

    fn center(id: &str) -> Center {
        Center { id: id.into(), name: id.into(), default_language: "en".into() }
    }

    fn user(i: usize, center: &str) -> User {
        User::anonymous(format!("u{i}"), center, "en", t0())
    }

    #[test]
    fn gating_table_matches_study_types() {
        use Module::*;
        let expect: [(StudyArm, &[Module]); 4] = [
            (StudyArm::Arm1, &[Diary, Feedback, AboutUs]),
            (StudyArm::Arm2, &[Diary, ShadesOfNoise, Feedback, AboutUs]),
            (StudyArm::Arm3, &[Diary, TinEdu, Feedback, AboutUs]),
            (StudyArm::Arm4, &[Diary, ShadesOfNoise, TinEdu, Feedback, AboutUs]),
        ];
        for (arm, modules) in expect {
            let want: BTreeSet<Module> = modules.iter().copied().collect();
            assert_eq!(modules_for(arm), want, "{arm}");
            assert!(modules_for(arm).contains(&Diary));
        }
    }

    #[test]
    fn block_size_must_be_multiple_of_four() {
        assert!(BlockSchedule::new(1, 0).is_err());
        assert!(BlockSchedule::new(1, 6).is_err());
        assert!(BlockSchedule::new(1, 8).is_ok());
    }

    #[test]
    fn blocks_are_balanced_permutations() {
        let schedule = BlockSchedule::new(42, 8).unwrap();
        for block_id in 0..50 {
            let block = schedule.block("c1", block_id);
            assert_eq!(block.len(), 8);
            for arm in StudyArm::ALL {
                assert_eq!(block.iter().filter(|&&a| a == arm).count(), 2);
            }
        }
        // different centers draw different streams
        let a: Vec<_> = (0..20).flat_map(|b| schedule.block("c1", b)).collect();
        let b: Vec<_> = (0..20).flat_map(|b| schedule.block("c2", b)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn eight_users_two_blocks_each_arm_twice() {
        let alloc = Allocator::new(BlockSchedule::new(7, 4).unwrap(), [center("c1")]).unwrap();
        let mut counts: BTreeMap<StudyArm, usize> = BTreeMap::new();
        for i in 0..8 {
            let a = alloc.assign_user(&user(i, "c1"), t0()).unwrap();
            assert_eq!(a.block_id, (i / 4) as u64);
            assert_eq!(a.position as usize, i % 4);
            *counts.entry(a.arm).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn second_assignment_conflicts() {
        let alloc = Allocator::new(BlockSchedule::new(7, 4).unwrap(), [center("c1")]).unwrap();
        alloc.assign_user(&user(1, "c1"), t0()).unwrap();
        assert_eq!(
            alloc.assign_user(&user(1, "c1"), t0()),
            Err(AssignError::AlreadyAssigned("u1".into()))
        );
    }

    #[test]
    fn unknown_center_is_not_found() {
        let alloc = Allocator::new(BlockSchedule::new(7, 4).unwrap(), [center("c1")]).unwrap();
        assert_eq!(
            alloc.assign_user(&user(1, "nowhere"), t0()),
            Err(AssignError::UnknownCenter("nowhere".into()))
        );
    }

    #[test]
    fn replay_with_same_seed_is_identical() {
        let run = || {
            let alloc = Allocator::new(BlockSchedule::new(99, 4).unwrap(), [center("a"), center("b")]).unwrap();
            (0..40)
                .map(|i| alloc.assign_user(&user(i, if i % 3 == 0 { "a" } else { "b" }), t0()).unwrap().arm)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn failed_persist_does_not_advance_cursor() {
        let alloc = Allocator::new(BlockSchedule::new(3, 4).unwrap(), [center("c1")]).unwrap();
        let r: Result<Assignment, AssignError> =
            alloc.assign_with(&user(1, "c1"), t0(), |_| Err(AssignError::UnknownCenter("io".into())));
        assert!(r.is_err());
        assert_eq!(alloc.state("c1").unwrap().cursor, 0);
        assert!(!alloc.is_assigned("u1"));
        let a = alloc.assign_user(&user(1, "c1"), t0()).unwrap();
        assert_eq!((a.block_id, a.position), (0, 0));
    }

    #[test]
    fn restore_continues_the_sequence() {
        let schedule = BlockSchedule::new(11, 4).unwrap();
        let first = Allocator::new(schedule, [center("c1")]).unwrap();
        let mut stored = Vec::new();
        for i in 0..6 {
            stored.push(first.assign_user(&user(i, "c1"), t0()).unwrap());
        }
        let tail: Vec<_> = (6..12).map(|i| first.assign_user(&user(i, "c1"), t0()).unwrap().arm).collect();

        let second = Allocator::new(schedule, [center("c1")]).unwrap();
        second.restore(&stored).unwrap();
        assert!(second.is_assigned("u3"));
        let resumed: Vec<_> = (6..12).map(|i| second.assign_user(&user(i, "c1"), t0()).unwrap().arm).collect();
        assert_eq!(tail, resumed);

        let other_seed = Allocator::new(BlockSchedule::new(12, 4).unwrap(), [center("c1")]).unwrap();
        assert!(matches!(other_seed.restore(&stored), Err(AssignError::ScheduleMismatch { .. })));
    }

    #[test]
    fn window_boundaries() {
        let u = user(1, "c1");
        let a = Assignment {
            user_id: "u1".into(),
            arm: StudyArm::Arm1,
            center_id: "c1".into(),
            block_id: 0,
            position: 0,
            assigned_at: t0(),
        };
        let at = |d: i64| enrollment_window(&u, Some(&a), t0() + Duration::days(d), 84).unwrap();
        assert_eq!(at(0).days_remaining, 84);
        assert!(at(0).is_active());
        let w = at(83);
        assert!(w.is_active());
        assert_eq!(w.days_remaining, 1);
        assert_eq!(at(84).status, WindowState::Expired);
        assert_eq!(at(84).days_remaining, 0);
        // one second before the end still counts a partial day
        let w = enrollment_window(&u, Some(&a), t0() + Duration::days(84) - Duration::seconds(1), 84).unwrap();
        assert_eq!((w.status, w.days_remaining), (WindowState::Active, 1));
        assert_eq!(enrollment_window(&u, None, t0(), 84), Err(WindowError::Unassigned("u1".into())));
    }

    #[test]
    fn user_consistency() {
        assert!(User::anonymous("a", "c", "en", t0()).is_consistent());
        assert!(User::registered("r", "cred", "c", "en", t0()).is_consistent());
        let mut bad = User::anonymous("a", "c", "en", t0());
        bad.credential_ref = Some("x".into());
        assert!(!bad.is_consistent());
    }
}
