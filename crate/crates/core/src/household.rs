//! The mutable state shared by the agent tools, the HTTP service and the
//! replay harness: reminders, one appliance per user, and the queue of
//! notification events awaiting acknowledgement.
//!
//! Callers serialize access (the service keeps it behind a single mutex).

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{Appliance, DeviceError, DeviceState};
use crate::reminders::{write_json_atomic, ReminderError, ReminderId, ReminderStore, TickEvent, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationEvent {
    pub reminder_id: ReminderId,
    pub user: UserId,
    pub fires_at: DateTime<Utc>,
    pub slot_start: DateTime<Utc>,
    pub acknowledged: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum HouseholdError {
    #[error(transparent)]
    Reminder(#[from] ReminderError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("no notification for reminder {0}")]
    UnknownEvent(ReminderId),
    #[error("event store: {0}")]
    Persistence(String),
}

type ApplianceFactory = Box<dyn Fn(&UserId, DateTime<Utc>) -> Appliance + Send>;

pub struct Household {
    pub reminders: ReminderStore,
    appliances: BTreeMap<UserId, Appliance>,
    make_appliance: ApplianceFactory,
    events: Vec<NotificationEvent>,
    events_path: Option<PathBuf>,
}

impl Household {
    /// Everything in memory, simulated plugs.
    pub fn in_memory() -> Self {
        Self {
            reminders: ReminderStore::in_memory(),
            appliances: BTreeMap::new(),
            make_appliance: Box::new(|_, now| Appliance::simulated(now)),
            events: Vec::new(),
            events_path: None,
        }
    }

    /// Loads `reminders.json` and `events.json` from `data_dir`.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, HouseholdError> {
        let dir = data_dir.into();
        let reminders = ReminderStore::open(dir.join("reminders.json"))?;
        let events_path = dir.join("events.json");
        let events = if events_path.exists() {
            let text = fs::read_to_string(&events_path).map_err(|e| HouseholdError::Persistence(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| HouseholdError::Persistence(e.to_string()))?
        } else {
            Vec::new()
        };
        Ok(Self {
            reminders,
            appliances: BTreeMap::new(),
            make_appliance: Box::new(|_, now| Appliance::simulated(now)),
            events,
            events_path: Some(events_path),
        })
    }

    pub fn with_appliance_factory(
        mut self,
        factory: impl Fn(&UserId, DateTime<Utc>) -> Appliance + Send + 'static,
    ) -> Self {
        self.make_appliance = Box::new(factory);
        self
    }

    pub fn appliance(&mut self, user: &UserId, now: DateTime<Utc>) -> &mut Appliance {
        let factory = &self.make_appliance;
        self.appliances
            .entry(user.clone())
            .or_insert_with(|| factory(user, now))
    }

    pub fn device_state(&mut self, user: &UserId, now: DateTime<Utc>) -> DeviceState {
        self.appliance(user, now).state()
    }

    /// Runs one reminder tick, starting appliances for confirmed slots and
    /// queueing a notification event for every reminder that fired.
    pub fn tick(&mut self, now: DateTime<Utc>) -> Vec<TickEvent> {
        let appliances = &mut self.appliances;
        let factory = &self.make_appliance;
        let mut starter = |user: &UserId, at: DateTime<Utc>| {
            appliances
                .entry(user.clone())
                .or_insert_with(|| factory(user, at))
                .plug_on(at)
                .map(|_| ())
        };
        let events = self.reminders.tick(now, &mut starter);

        let mut queued = false;
        for event in &events {
            match event {
                TickEvent::Notified(r) => {
                    self.events.push(NotificationEvent {
                        reminder_id: r.id.clone(),
                        user: r.user.clone(),
                        fires_at: now,
                        slot_start: r.slot_start,
                        acknowledged: false,
                    });
                    queued = true;
                }
                TickEvent::StartFailed { reminder, error } => {
                    log::warn!("could not start appliance for reminder {}: {error}", reminder.id);
                }
                _ => {}
            }
        }
        if queued {
            if let Err(e) = self.persist_events() {
                log::error!("{e}");
            }
        }
        events
    }

    /// Unacknowledged notifications for `user`, oldest first.
    pub fn poll(&self, user: &UserId) -> Vec<NotificationEvent> {
        self.events
            .iter()
            .filter(|e| &e.user == user && !e.acknowledged)
            .cloned()
            .collect()
    }

    pub fn acknowledge(
        &mut self,
        user: &UserId,
        reminder_id: &ReminderId,
    ) -> Result<NotificationEvent, HouseholdError> {
        let event = self
            .events
            .iter_mut()
            .find(|e| &e.user == user && &e.reminder_id == reminder_id)
            .ok_or_else(|| HouseholdError::UnknownEvent(reminder_id.clone()))?;
        event.acknowledged = true;
        let out = event.clone();
        self.persist_events()?;
        Ok(out)
    }

    fn persist_events(&self) -> Result<(), HouseholdError> {
        match &self.events_path {
            Some(path) => write_json_atomic(path, &self.events).map_err(HouseholdError::Persistence),
            None => Ok(()),
        }
    }
}

impl std::fmt::Debug for Household {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Household")
            .field("reminders", &self.reminders.all().len())
            .field("appliances", &self.appliances)
            .field("events", &self.events.len())
            .finish()
    }
}
