//! Booked laundry slots and their notification lifecycle.
//!
//! ```text
//! Scheduled ──notify──▶ Notified ──confirm──▶ Confirmed ──start──▶ Started
//!     │                   │   └──expire──▶ Expired          │
//!     └──cancel──▶ Cancelled ◀──cancel──┘◀────cancel────────┘
//! ```
//!
//! The store persists as a single JSON array of reminder records, rewritten
//! atomically after every mutation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::DeviceError;
use crate::scheduler::Quality;

pub const MAX_LEAD_MINUTES: u32 = 60;

/// Terminal reminders stay visible this long after their slot started.
pub const RECENT_WINDOW_HOURS: i64 = 24;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReminderId(pub String);

impl ReminderId {
    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ReminderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReminderState {
    Scheduled,
    Notified,
    Confirmed,
    Started,
    Cancelled,
    Expired,
}

impl ReminderState {
    pub const ALL: [ReminderState; 6] = [
        ReminderState::Scheduled,
        ReminderState::Notified,
        ReminderState::Confirmed,
        ReminderState::Started,
        ReminderState::Cancelled,
        ReminderState::Expired,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ReminderState::Started | ReminderState::Cancelled | ReminderState::Expired
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReminderState::Scheduled => "scheduled",
            ReminderState::Notified => "notified",
            ReminderState::Confirmed => "confirmed",
            ReminderState::Started => "started",
            ReminderState::Cancelled => "cancelled",
            ReminderState::Expired => "expired",
        }
    }

    /// The transition table. Everything not listed is illegal.
    pub fn apply(self, op: Transition) -> Option<ReminderState> {
        use ReminderState::*;
        use Transition::*;
        match (self, op) {
            (Scheduled, Notify) => Some(Notified),
            (Scheduled, Cancel) => Some(Cancelled),
            (Notified, Confirm) => Some(Confirmed),
            (Notified, Cancel) => Some(Cancelled),
            (Notified, Expire) => Some(Expired),
            (Confirmed, Start) => Some(Started),
            (Confirmed, Cancel) => Some(Cancelled),
            _ => None,
        }
    }
}

impl fmt::Display for ReminderState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transition {
    Notify,
    Confirm,
    Cancel,
    Expire,
    Start,
}

impl Transition {
    pub const ALL: [Transition; 5] = [
        Transition::Notify,
        Transition::Confirm,
        Transition::Cancel,
        Transition::Expire,
        Transition::Start,
    ];
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Transition::Notify => "notify",
            Transition::Confirm => "confirm",
            Transition::Cancel => "cancel",
            Transition::Expire => "expire",
            Transition::Start => "start",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReminderError {
    #[error("slot {slot} is not in the future (now {now})")]
    PastSlot { slot: DateTime<Utc>, now: DateTime<Utc> },
    #[error("lead time {0} min is outside 0..=60")]
    LeadOutOfRange(u32),
    #[error("duration must be positive")]
    InvalidDuration,
    #[error("unknown reminder {0}")]
    UnknownId(ReminderId),
    #[error("cannot {op} a reminder that is {from}")]
    IllegalTransition {
        id: ReminderId,
        from: ReminderState,
        op: Transition,
    },
    #[error("reminder store: {0}")]
    Persistence(String),
}

/// A booked slot. Field names are the on-disk record format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reminder {
    pub id: ReminderId,
    pub user: UserId,
    pub slot_start: DateTime<Utc>,
    pub duration_minutes: u32,
    pub lead_minutes: u32,
    pub state: ReminderState,
    pub quality_at_booking: Quality,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notified_at: Option<DateTime<Utc>>,
}

impl Reminder {
    pub fn notify_at(&self) -> DateTime<Utc> {
        self.slot_start - Duration::minutes(self.lead_minutes as i64)
    }

    pub fn slot_end(&self) -> DateTime<Utc> {
        self.slot_start + Duration::minutes(self.duration_minutes as i64)
    }

    fn transition(&mut self, op: Transition) -> Result<(), ReminderError> {
        match self.state.apply(op) {
            Some(next) => {
                self.state = next;
                Ok(())
            }
            None => Err(ReminderError::IllegalTransition {
                id: self.id.clone(),
                from: self.state,
                op,
            }),
        }
    }
}

/// Whatever can turn a user's washing machine on when a confirmed slot begins.
pub trait ApplianceStarter {
    fn start(&mut self, user: &UserId, now: DateTime<Utc>) -> Result<(), DeviceError>;
}

impl<F> ApplianceStarter for F
where
    F: FnMut(&UserId, DateTime<Utc>) -> Result<(), DeviceError>,
{
    fn start(&mut self, user: &UserId, now: DateTime<Utc>) -> Result<(), DeviceError> {
        self(user, now)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TickEvent {
    Notified(Reminder),
    Expired(Reminder),
    Started(Reminder),
    StartFailed { reminder: Reminder, error: DeviceError },
}

impl TickEvent {
    pub fn reminder(&self) -> &Reminder {
        match self {
            TickEvent::Notified(r) | TickEvent::Expired(r) | TickEvent::Started(r) => r,
            TickEvent::StartFailed { reminder, .. } => reminder,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReminderListing {
    pub active: Vec<Reminder>,
    pub recently_expired: Vec<Reminder>,
}

#[derive(Debug, Default)]
pub struct ReminderStore {
    reminders: Vec<Reminder>,
    path: Option<PathBuf>,
}

impl ReminderStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates on first write) the JSON document at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ReminderError> {
        let path = path.into();
        let reminders = if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| ReminderError::Persistence(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| ReminderError::Persistence(format!("{}: {e}", path.display())))?
        } else {
            Vec::new()
        };
        Ok(Self {
            reminders,
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn all(&self) -> &[Reminder] {
        &self.reminders
    }

    pub fn get(&self, id: &ReminderId) -> Option<&Reminder> {
        self.reminders.iter().find(|r| &r.id == id)
    }

    /// Reminders belonging to `user`, in slot order.
    pub fn for_user(&self, user: &UserId) -> Vec<Reminder> {
        let mut out: Vec<Reminder> = self.reminders.iter().filter(|r| &r.user == user).cloned().collect();
        out.sort_by(|a, b| a.slot_start.cmp(&b.slot_start).then(a.created_at.cmp(&b.created_at)));
        out
    }

    pub fn schedule(
        &mut self,
        user: &UserId,
        slot_start: DateTime<Utc>,
        duration_minutes: u32,
        lead_minutes: u32,
        quality: Quality,
        now: DateTime<Utc>,
    ) -> Result<Reminder, ReminderError> {
        if slot_start <= now {
            return Err(ReminderError::PastSlot { slot: slot_start, now });
        }
        if lead_minutes > MAX_LEAD_MINUTES {
            return Err(ReminderError::LeadOutOfRange(lead_minutes));
        }
        if duration_minutes == 0 {
            return Err(ReminderError::InvalidDuration);
        }
        let reminder = Reminder {
            id: ReminderId::generate(),
            user: user.clone(),
            slot_start,
            duration_minutes,
            lead_minutes,
            state: ReminderState::Scheduled,
            quality_at_booking: quality,
            created_at: now,
            notified_at: None,
        };
        self.reminders.push(reminder.clone());
        self.persist()?;
        Ok(reminder)
    }

    pub fn confirm(&mut self, id: &ReminderId, owner: &UserId) -> Result<Reminder, ReminderError> {
        self.mutate(id, owner, Transition::Confirm)
    }

    pub fn cancel(&mut self, id: &ReminderId, owner: &UserId) -> Result<Reminder, ReminderError> {
        self.mutate(id, owner, Transition::Cancel)
    }

    pub fn delete(&mut self, id: &ReminderId, owner: &UserId) -> Result<Reminder, ReminderError> {
        let idx = self.index_of(id, owner)?;
        let removed = self.reminders.remove(idx);
        self.persist()?;
        Ok(removed)
    }

    fn index_of(&self, id: &ReminderId, owner: &UserId) -> Result<usize, ReminderError> {
        self.reminders
            .iter()
            .position(|r| &r.id == id && &r.user == owner)
            .ok_or_else(|| ReminderError::UnknownId(id.clone()))
    }

    fn mutate(&mut self, id: &ReminderId, owner: &UserId, op: Transition) -> Result<Reminder, ReminderError> {
        let idx = self.index_of(id, owner)?;
        self.reminders[idx].transition(op)?;
        self.persist()?;
        Ok(self.reminders[idx].clone())
    }

    /// Advances every reminder against `now`:
    /// confirmed slots that have begun start the appliance, notified slots
    /// that began unconfirmed expire, and scheduled reminders whose
    /// notification time has come are notified. A reminder moves at most
    /// one step per tick, and one notified during a tick cannot expire until
    /// a later instant.
    pub fn tick(&mut self, now: DateTime<Utc>, starter: &mut dyn ApplianceStarter) -> Vec<TickEvent> {
        let mut order: Vec<usize> = (0..self.reminders.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&self.reminders[a], &self.reminders[b]);
            ra.slot_start.cmp(&rb.slot_start).then(ra.id.cmp(&rb.id))
        });

        let mut events = Vec::new();
        for idx in order {
            let r = &mut self.reminders[idx];
            match r.state {
                ReminderState::Confirmed if r.slot_start <= now => match starter.start(&r.user, now) {
                    Ok(()) => {
                        r.state = ReminderState::Started;
                        events.push(TickEvent::Started(r.clone()));
                    }
                    Err(error) => events.push(TickEvent::StartFailed {
                        reminder: r.clone(),
                        error,
                    }),
                },
                ReminderState::Notified if r.slot_start <= now && r.notified_at.is_none_or(|t| t < now) => {
                    r.state = ReminderState::Expired;
                    events.push(TickEvent::Expired(r.clone()));
                }
                ReminderState::Scheduled if r.notify_at() <= now => {
                    r.state = ReminderState::Notified;
                    r.notified_at = Some(now);
                    events.push(TickEvent::Notified(r.clone()));
                }
                _ => {}
            }
        }
        if events.iter().any(|e| !matches!(e, TickEvent::StartFailed { .. })) {
            if let Err(e) = self.persist() {
                log::error!("failed to persist reminders after tick: {e}");
            }
        }
        events
    }

    /// Active reminders and those that ended within the last 24 hours.
    pub fn list(&self, user: &UserId, now: DateTime<Utc>) -> ReminderListing {
        let cutoff = now - Duration::hours(RECENT_WINDOW_HOURS);
        let (active, terminal): (Vec<_>, Vec<_>) =
            self.for_user(user).into_iter().partition(|r| !r.state.is_terminal());
        ReminderListing {
            active,
            recently_expired: terminal.into_iter().filter(|r| r.slot_start >= cutoff).collect(),
        }
    }

    fn persist(&self) -> Result<(), ReminderError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        write_json_atomic(path, &self.reminders).map_err(ReminderError::Persistence)
    }
}

/// Serializes `value` to a sibling temp file and renames it over `path`.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text + "\n").map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap()
    }

    fn user() -> UserId {
        UserId::new("alice")
    }

    fn ok_starter() -> impl FnMut(&UserId, DateTime<Utc>) -> Result<(), DeviceError> {
        |_: &UserId, _| Ok(())
    }

    fn book(store: &mut ReminderStore, minutes_ahead: i64, lead: u32) -> Reminder {
        store
            .schedule(
                &user(),
                t0() + Duration::minutes(minutes_ahead),
                60,
                lead,
                Quality::Good,
                t0(),
            )
            .unwrap()
    }

    #[test]
    fn schedule_two_minutes_ahead_with_zero_lead() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 2, 0);
        assert_eq!(r.state, ReminderState::Scheduled);
        assert_eq!(r.notify_at(), r.slot_start);
    }

    #[test]
    fn lead_above_sixty_is_rejected() {
        let mut store = ReminderStore::in_memory();
        let err = store
            .schedule(&user(), t0() + Duration::hours(1), 60, 61, Quality::Good, t0())
            .unwrap_err();
        assert_eq!(err, ReminderError::LeadOutOfRange(61));
        assert!(store
            .schedule(&user(), t0() + Duration::hours(1), 60, 60, Quality::Good, t0())
            .is_ok());
    }

    #[test]
    fn past_slot_is_rejected() {
        let mut store = ReminderStore::in_memory();
        let err = store
            .schedule(&user(), t0() - Duration::hours(1), 60, 0, Quality::Good, t0())
            .unwrap_err();
        assert!(matches!(err, ReminderError::PastSlot { .. }));
        assert!(store.schedule(&user(), t0(), 60, 0, Quality::Good, t0()).is_err());
    }

    #[test]
    fn tick_fires_on_boundary_once() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        let mut starter = ok_starter();
        assert!(store
            .tick(r.notify_at() - Duration::seconds(1), &mut starter)
            .is_empty());
        let events = store.tick(r.notify_at(), &mut starter);
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0], TickEvent::Notified(_)));
        assert!(store.tick(r.notify_at(), &mut starter).is_empty());
    }

    #[test]
    fn unconfirmed_reminder_expires_at_slot_start() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        let mut starter = ok_starter();
        store.tick(r.notify_at(), &mut starter);
        let events = store.tick(r.slot_start, &mut starter);
        assert!(matches!(&events[..], [TickEvent::Expired(_)]));
        assert_eq!(store.get(&r.id).unwrap().state, ReminderState::Expired);
    }

    #[test]
    fn confirmed_reminder_starts_appliance() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        let mut started = Vec::new();
        let mut starter = |u: &UserId, t| {
            started.push((u.clone(), t));
            Ok(())
        };
        store.tick(r.notify_at(), &mut starter);
        store.confirm(&r.id, &user()).unwrap();
        let events = store.tick(r.slot_start, &mut starter);
        assert!(matches!(&events[..], [TickEvent::Started(_)]));
        assert_eq!(started, vec![(user(), r.slot_start)]);
    }

    #[test]
    fn zero_lead_can_be_confirmed_in_the_same_instant() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 2, 0);
        let mut starter = ok_starter();
        let fired = store.tick(r.slot_start, &mut starter);
        assert!(matches!(&fired[..], [TickEvent::Notified(_)]));
        store.confirm(&r.id, &user()).unwrap();
        let started = store.tick(r.slot_start, &mut starter);
        assert!(matches!(&started[..], [TickEvent::Started(_)]));
    }

    #[test]
    fn failed_start_stays_confirmed_and_retries() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        store.tick(r.notify_at(), &mut ok_starter());
        store.confirm(&r.id, &user()).unwrap();
        let mut failing = |_: &UserId, _| Err(DeviceError::new("plug offline", true));
        let events = store.tick(r.slot_start, &mut failing);
        assert!(matches!(&events[..], [TickEvent::StartFailed { .. }]));
        assert_eq!(store.get(&r.id).unwrap().state, ReminderState::Confirmed);
        let events = store.tick(r.slot_start + Duration::seconds(10), &mut ok_starter());
        assert!(matches!(&events[..], [TickEvent::Started(_)]));
    }

    #[test]
    fn confirm_and_cancel_rules() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        let err = store.confirm(&r.id, &user()).unwrap_err();
        assert!(matches!(
            err,
            ReminderError::IllegalTransition {
                from: ReminderState::Scheduled,
                op: Transition::Confirm,
                ..
            }
        ));
        assert_eq!(store.cancel(&r.id, &user()).unwrap().state, ReminderState::Cancelled);
        assert!(store.cancel(&r.id, &user()).is_err());

        let r2 = book(&mut store, 40, 10);
        store.tick(r2.notify_at(), &mut ok_starter());
        assert_eq!(store.confirm(&r2.id, &user()).unwrap().state, ReminderState::Confirmed);

        let r3 = book(&mut store, 50, 10);
        store.tick(r3.notify_at(), &mut ok_starter());
        store.tick(r3.slot_start, &mut ok_starter());
        let err = store.confirm(&r3.id, &user()).unwrap_err();
        assert!(err.to_string().contains("expired"));
    }

    #[test]
    fn other_users_cannot_touch_a_reminder() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        let bob = UserId::new("bob");
        assert_eq!(
            store.cancel(&r.id, &bob).unwrap_err(),
            ReminderError::UnknownId(r.id.clone())
        );
        assert!(store.delete(&r.id, &bob).is_err());
        assert!(store.list(&bob, t0()).active.is_empty());
    }

    #[test]
    fn listing_partitions_and_cuts_off_after_a_day() {
        let mut store = ReminderStore::in_memory();
        let scheduled = book(&mut store, 300, 0);
        let started = book(&mut store, 60, 0);
        let old = book(&mut store, 30, 0);
        let mut starter = ok_starter();
        for r in [&started, &old] {
            store.tick(r.slot_start, &mut starter);
            store.confirm(&r.id, &user()).unwrap();
            store.tick(r.slot_start, &mut starter);
        }
        let now = started.slot_start + Duration::hours(2);
        let listing = store.list(&user(), now);
        assert_eq!(
            listing.active.iter().map(|r| &r.id).collect::<Vec<_>>(),
            vec![&scheduled.id]
        );
        assert_eq!(listing.recently_expired.len(), 2);

        let later = old.slot_start + Duration::hours(24) + Duration::minutes(1);
        let listing = store.list(&user(), later);
        assert_eq!(
            listing.recently_expired.iter().map(|r| &r.id).collect::<Vec<_>>(),
            vec![&started.id]
        );

        let listing = store.list(&user(), old.slot_start + Duration::hours(30));
        assert!(listing.recently_expired.is_empty());

        assert_eq!(
            ReminderStore::in_memory().list(&user(), t0()),
            ReminderListing::default()
        );
    }

    #[test]
    fn delete_twice_is_unknown() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        store.delete(&r.id, &user()).unwrap();
        assert!(store.list(&user(), t0()).active.is_empty());
        assert_eq!(
            store.delete(&r.id, &user()).unwrap_err(),
            ReminderError::UnknownId(r.id)
        );
    }

    #[test]
    fn deleted_confirmed_reminder_never_starts() {
        let mut store = ReminderStore::in_memory();
        let r = book(&mut store, 30, 10);
        store.tick(r.notify_at(), &mut ok_starter());
        store.confirm(&r.id, &user()).unwrap();
        store.delete(&r.id, &user()).unwrap();
        let mut calls = 0;
        let mut starter = |_: &UserId, _| {
            calls += 1;
            Ok(())
        };
        let mut now = r.notify_at();
        while now <= r.slot_end() {
            assert!(store.tick(now, &mut starter).is_empty());
            now += Duration::minutes(1);
        }
        assert_eq!(calls, 0);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reminders.json");
        let mut store = ReminderStore::open(&path).unwrap();
        let a = book(&mut store, 30, 10);
        book(&mut store, 90, 5);
        store.tick(a.notify_at(), &mut ok_starter());
        store.confirm(&a.id, &user()).unwrap();

        let reopened = ReminderStore::open(&path).unwrap();
        assert_eq!(reopened.all(), store.all());
    }

    proptest! {
        #[test]
        fn every_reachable_notify_fires_exactly_once(
            minutes_ahead in 1i64..600,
            lead in 0u32..=60,
            steps in proptest::collection::vec(1i64..=180, 1..40),
        ) {
            let mut store = ReminderStore::in_memory();
            let r = book(&mut store, minutes_ahead, lead);
            let mut now = t0();
            let mut notified = 0;
            for s in steps {
                now += Duration::seconds(s * 17);
                let events = store.tick(now, &mut ok_starter());
                notified += events.iter().filter(|e| matches!(e, TickEvent::Notified(_))).count();
                let again = store.tick(now, &mut ok_starter());
                prop_assert!(again.is_empty());
            }
            if now >= r.notify_at() {
                prop_assert_eq!(notified, 1);
            } else {
                prop_assert_eq!(notified, 0);
            }
        }
    }
}
