//! Forecast sources used by a running service.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration as StdDuration, SystemTime};

use chrono::{DateTime, Duration, Utc};
use washy::agent::{ForecastProvider, UserProfile};
use washy::forecast::{fetch_forecast, load_forecast_file, ForecastError, ForecastSeries, PanelSpec};
use washy::reminders::UserId;

/// A forecast file shared by every user, reloaded when it changes on disk.
pub struct FileForecast {
    path: PathBuf,
    cache: Mutex<Option<(Option<SystemTime>, ForecastSeries)>>,
}

impl FileForecast {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            cache: Mutex::new(None),
        }
    }
}

impl ForecastProvider for FileForecast {
    fn forecast(&self, _: &UserProfile, _: DateTime<Utc>) -> Result<ForecastSeries, ForecastError> {
        let mtime = std::fs::metadata(&self.path).and_then(|m| m.modified()).ok();
        let mut cache = self.cache.lock().expect("forecast cache poisoned");
        if let Some((seen, series)) = cache.as_ref() {
            if *seen == mtime && mtime.is_some() {
                return Ok(series.clone());
            }
        }
        let series = load_forecast_file(&self.path)?;
        *cache = Some((mtime, series.clone()));
        Ok(series)
    }
}

/// Per-user forecasts fetched from a forecast.solar-compatible endpoint.
/// A stale copy is served when a refresh fails.
pub struct RemoteForecast {
    endpoint: String,
    timeout: StdDuration,
    refresh: Duration,
    panels: BTreeMap<UserId, PanelSpec>,
    cache: Mutex<BTreeMap<UserId, (DateTime<Utc>, ForecastSeries)>>,
}

impl RemoteForecast {
    pub fn new(
        endpoint: impl Into<String>,
        timeout: StdDuration,
        refresh: Duration,
        panels: BTreeMap<UserId, PanelSpec>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            refresh,
            panels,
            cache: Mutex::new(BTreeMap::new()),
        }
    }
}

impl ForecastProvider for RemoteForecast {
    fn forecast(&self, user: &UserProfile, now: DateTime<Utc>) -> Result<ForecastSeries, ForecastError> {
        let panel = self
            .panels
            .get(&user.id)
            .ok_or_else(|| ForecastError::InvalidPanel(format!("no panel configured for {}", user.id)))?;
        let stale = {
            let cache = self.cache.lock().expect("forecast cache poisoned");
            match cache.get(&user.id) {
                Some((at, series)) if now - *at < self.refresh && now >= *at => return Ok(series.clone()),
                other => other.map(|(_, s)| s.clone()),
            }
        };
        match fetch_forecast(panel, &self.endpoint, now, self.timeout) {
            Ok(series) => {
                self.cache
                    .lock()
                    .expect("forecast cache poisoned")
                    .insert(user.id.clone(), (now, series.clone()));
                Ok(series)
            }
            Err(e) => match stale {
                Some(series) => {
                    log::warn!("forecast refresh for {} failed, serving cached copy: {e}", user.id);
                    Ok(series)
                }
                None => Err(e),
            },
        }
    }
}
