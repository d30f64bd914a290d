//! TOML configuration.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! data_dir = "data"                 # relative to this file
//! step_minutes = 15
//! tick_seconds = 10
//! virtual_clock = "2024-06-01T08:00:00Z"   # optional; enables POST /clock/advance
//!
//! [forecast]
//! fixture = "forecast.json"         # or: endpoint = "https://api.forecast.solar"
//! timeout_ms = 10000
//! refresh_minutes = 60
//!
//! [plug]
//! driver = "simulated"              # or "http" with on_url/off_url/status_url
//!
//! [llm]
//! backend = "mock"                  # or "remote" with url/model; key from WASHY_LLM_KEY
//!
//! [[users]]
//! token = "s3cret"
//! id = "alice"
//! display_name = "Alice"
//! timezone = "Europe/Rome"
//! persona = "personified"
//! default_power_watts = 1000
//! panel = { latitude = 45.07, longitude = 7.69, declination = 30, azimuth = 0, peak_power = 3 }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use washy::agent::PersonaKind;
use washy::devices::HttpPlugConfig;
use washy::forecast::PanelSpec;
use washy::localtime::parse_tz;

use crate::ServiceError;

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_step() -> u32 {
    washy::scheduler::DEFAULT_STEP_MINUTES
}

fn default_tick() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_step")]
    pub step_minutes: u32,
    #[serde(default = "default_tick")]
    pub tick_seconds: u64,
    /// Start instant of a virtual clock. Absent means wall-clock time.
    #[serde(default)]
    pub virtual_clock: Option<DateTime<Utc>>,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub plug: PlugConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub users: Vec<UserConfig>,
}

fn default_forecast_timeout() -> u64 {
    10_000
}

fn default_refresh() -> i64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    /// Base URL of a forecast.solar-compatible service.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Forecast file shared by all users; takes precedence over `endpoint`.
    /// Defaults to `forecast.json` in the data directory when neither is set.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_forecast_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_refresh")]
    pub refresh_minutes: i64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            fixture: None,
            timeout_ms: default_forecast_timeout(),
            refresh_minutes: default_refresh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "driver", rename_all = "lowercase")]
pub enum PlugConfig {
    #[default]
    Simulated,
    Http(HttpPlugConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default)]
    pub backend: LlmBackendKind,
    /// Overridden by `WASHY_LLM_URL`.
    #[serde(default)]
    pub url: Option<String>,
    /// Overridden by `WASHY_LLM_MODEL`.
    #[serde(default)]
    pub model: Option<String>,
}

fn default_power() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub token: String,
    pub id: String,
    pub display_name: String,
    pub timezone: String,
    pub persona: PersonaKind,
    #[serde(default = "default_power")]
    pub default_power_watts: f64,
    #[serde(default)]
    pub panel: Option<PanelSpec>,
}

impl ServiceConfig {
    /// Reads and validates `path`; relative paths inside are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let config: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.data_dir.is_relative() {
            self.data_dir = base.join(&self.data_dir);
        }
        if let Some(f) = &self.forecast.fixture {
            if f.is_relative() {
                self.forecast.fixture = Some(base.join(f));
            }
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.step_minutes == 0 {
            return bad("step_minutes must be positive".into());
        }
        if self.tick_seconds == 0 {
            return bad("tick_seconds must be positive".into());
        }
        let mut tokens = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for u in &self.users {
            if u.token.is_empty() || !tokens.insert(&u.token) {
                return bad(format!("user {}: token is empty or reused", u.id));
            }
            if u.id.is_empty() || !ids.insert(&u.id) {
                return bad(format!("user id {:?} is empty or duplicated", u.id));
            }
            if let Err(e) = parse_tz(&u.timezone) {
                return bad(format!("user {}: {e}", u.id));
            }
            if !(u.default_power_watts > 0.0 && u.default_power_watts.is_finite()) {
                return bad(format!("user {}: default_power_watts must be positive", u.id));
            }
            if let Some(p) = &u.panel {
                if let Err(e) = p.validate() {
                    return bad(format!("user {}: {e}", u.id));
                }
            }
            if self.forecast.endpoint.is_some() && self.forecast.fixture.is_none() && u.panel.is_none() {
                return bad(format!("user {}: a panel is required with a remote forecast", u.id));
            }
        }
        if self.llm.backend == LlmBackendKind::Remote
            && self.llm.url.is_none()
            && std::env::var(washy::agent::remote::ENV_URL).is_err()
        {
            return bad("llm.backend = \"remote\" needs llm.url or WASHY_LLM_URL".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        virtual_clock = "2024-06-01T08:00:00Z"
        [forecast]
        fixture = "f.json"
        [[users]]
        token = "t1"
        id = "alice"
        display_name = "Alice"
        timezone = "Europe/Rome"
        persona = "traditional"
    "#;

    #[test]
    fn parses_with_defaults() {
        let mut c = ServiceConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.listen, "127.0.0.1:8080");
        assert_eq!(c.step_minutes, 15);
        assert_eq!(c.plug, PlugConfig::Simulated);
        assert_eq!(c.llm.backend, LlmBackendKind::Mock);
        assert_eq!(c.users[0].default_power_watts, 1000.0);
        c.resolve_paths(Path::new("/etc/washy"));
        assert_eq!(c.data_dir, PathBuf::from("/etc/washy/data"));
        assert_eq!(c.forecast.fixture, Some(PathBuf::from("/etc/washy/f.json")));
    }

    #[test]
    fn http_plug_section() {
        let c = ServiceConfig::parse(
            r#"
            [plug]
            driver = "http"
            on_url = "http://plug/{user}/on"
            off_url = "http://plug/{user}/off"
            status_url = "http://plug/{user}"
            "#,
        )
        .unwrap();
        match c.plug {
            PlugConfig::Http(h) => assert_eq!(h.status_field, "ison"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_users() {
        let dup = SAMPLE.to_string()
            + SAMPLE
                .split("[[users]]")
                .nth(1)
                .map(|u| format!("[[users]]{u}"))
                .unwrap()
                .as_str();
        assert!(ServiceConfig::parse(&dup).is_err());
        assert!(ServiceConfig::parse(&SAMPLE.replace("Europe/Rome", "Mars/Base")).is_err());
        assert!(ServiceConfig::parse("bogus = 1").is_err());
    }
}
