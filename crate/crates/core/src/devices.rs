//! Smart plug drivers and the washing-machine start model.
//!
//! The machine is wired through a switched plug. A program selected and
//! started while the plug is on stays latched after power is cut; the next
//! off→on edge of the plug resumes it.

use std::time::Duration as StdDuration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("plug driver error: {message}")]
pub struct DeviceError {
    pub message: String,
    pub retriable: bool,
}

impl DeviceError {
    pub fn new(message: impl Into<String>, retriable: bool) -> Self {
        Self {
            message: message.into(),
            retriable,
        }
    }
}

/// Relay control for one plug.
pub trait PlugDriver: Send {
    fn set_relay(&mut self, on: bool) -> Result<(), DeviceError>;
    fn relay_state(&mut self) -> Result<bool, DeviceError>;
}

/// In-memory relay. Never fails.
#[derive(Debug, Default, Clone)]
pub struct SimulatedPlug {
    on: bool,
}

impl SimulatedPlug {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PlugDriver for SimulatedPlug {
    fn set_relay(&mut self, on: bool) -> Result<(), DeviceError> {
        self.on = on;
        Ok(())
    }

    fn relay_state(&mut self) -> Result<bool, DeviceError> {
        Ok(self.on)
    }
}

/// URL templates for an HTTP-controlled plug. `{user}` in any template is
/// replaced by the owning user's id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpPlugConfig {
    pub on_url: String,
    pub off_url: String,
    pub status_url: String,
    /// Boolean field of the status response holding the relay state.
    #[serde(default = "default_status_field")]
    pub status_field: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_status_field() -> String {
    "ison".to_string()
}

fn default_timeout_ms() -> u64 {
    5_000
}

impl HttpPlugConfig {
    pub fn for_user(&self, user: &str) -> Self {
        let fill = |s: &str| s.replace("{user}", user);
        Self {
            on_url: fill(&self.on_url),
            off_url: fill(&self.off_url),
            status_url: fill(&self.status_url),
            status_field: self.status_field.clone(),
            timeout_ms: self.timeout_ms,
        }
    }
}

pub struct HttpPlug {
    config: HttpPlugConfig,
    agent: ureq::Agent,
}

impl HttpPlug {
    pub fn new(config: HttpPlugConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(StdDuration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }

    fn get(&self, url: &str) -> Result<String, DeviceError> {
        let mut resp = self.agent.get(url).call().map_err(io_error)?;
        resp.body_mut().read_to_string().map_err(io_error)
    }
}

fn io_error(err: ureq::Error) -> DeviceError {
    let retriable = match &err {
        ureq::Error::StatusCode(code) => *code >= 500 || *code == 429,
        _ => true,
    };
    DeviceError::new(err.to_string(), retriable)
}

impl PlugDriver for HttpPlug {
    fn set_relay(&mut self, on: bool) -> Result<(), DeviceError> {
        let url = if on { &self.config.on_url } else { &self.config.off_url };
        self.get(&url.clone()).map(|_| ())
    }

    fn relay_state(&mut self) -> Result<bool, DeviceError> {
        let url = self.config.status_url.clone();
        let body = self.get(&url)?;
        let value: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| DeviceError::new(format!("status is not JSON: {e}"), false))?;
        value
            .get(&self.config.status_field)
            .and_then(serde_json::Value::as_bool)
            .ok_or_else(|| {
                DeviceError::new(
                    format!("status has no boolean field {:?}", self.config.status_field),
                    false,
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub plug_on: bool,
    pub program_latched: bool,
    pub running: bool,
    pub last_change: DateTime<Utc>,
}

impl DeviceState {
    pub fn new(now: DateTime<Utc>) -> Self {
        Self {
            plug_on: false,
            program_latched: false,
            running: false,
            last_change: now,
        }
    }
}

/// A washing machine behind a switched plug.
pub struct Appliance {
    driver: Box<dyn PlugDriver>,
    state: DeviceState,
}

impl Appliance {
    pub fn new(driver: Box<dyn PlugDriver>, now: DateTime<Utc>) -> Self {
        Self {
            driver,
            state: DeviceState::new(now),
        }
    }

    pub fn simulated(now: DateTime<Utc>) -> Self {
        Self::new(Box::new(SimulatedPlug::new()), now)
    }

    pub fn state(&self) -> DeviceState {
        self.state
    }

    pub fn plug_on(&mut self, now: DateTime<Utc>) -> Result<DeviceState, DeviceError> {
        self.driver.set_relay(true)?;
        self.apply_relay(true, now);
        Ok(self.state)
    }

    pub fn plug_off(&mut self, now: DateTime<Utc>) -> Result<DeviceState, DeviceError> {
        self.driver.set_relay(false)?;
        self.apply_relay(false, now);
        Ok(self.state)
    }

    /// The user selected and started a program on the machine itself.
    pub fn latch_program(&mut self, now: DateTime<Utc>) -> DeviceState {
        if !self.state.program_latched {
            self.state.program_latched = true;
            self.state.last_change = now;
        }
        self.state
    }

    pub fn clear_latch(&mut self, now: DateTime<Utc>) -> DeviceState {
        if self.state.program_latched {
            self.state.program_latched = false;
            self.state.last_change = now;
        }
        self.state
    }

    /// Reads the relay back from the driver and folds it into the model.
    pub fn plug_status(&mut self, now: DateTime<Utc>) -> Result<DeviceState, DeviceError> {
        let on = self.driver.relay_state()?;
        self.apply_relay(on, now);
        Ok(self.state)
    }

    fn apply_relay(&mut self, on: bool, now: DateTime<Utc>) {
        let s = &mut self.state;
        if on == s.plug_on {
            return;
        }
        s.plug_on = on;
        s.running = on && s.program_latched;
        s.last_change = now;
    }
}

impl std::fmt::Debug for Appliance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Appliance").field("state", &self.state).finish()
    }
}
