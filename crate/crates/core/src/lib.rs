//! Solar-aware laundry scheduling.
//!
//! The crate turns a photovoltaic production forecast into ranked laundry
//! windows, keeps per-user reminders, drives a smart plug, and exposes all
//! of it to a tool-calling chat agent with two personas.

pub mod agent;
pub mod clock;
pub mod devices;
pub mod forecast;
pub mod household;
pub mod localtime;
pub mod reminders;
pub mod replay;
pub mod scheduler;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use devices::{Appliance, DeviceError, DeviceState, HttpPlug, HttpPlugConfig, PlugDriver, SimulatedPlug};
pub use forecast::{ForecastError, ForecastSample, ForecastSeries, ForecastSource, PanelSpec};
pub use household::{Household, HouseholdError, NotificationEvent};
pub use reminders::{Reminder, ReminderError, ReminderId, ReminderState, ReminderStore, TickEvent, Transition, UserId};
pub use scheduler::{LaundryRequest, Quality, RankedWindows, ScheduleError, TimeWindow};
