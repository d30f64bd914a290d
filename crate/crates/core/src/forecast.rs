//! Solar production forecasts: acquisition, fixtures, synthesis and
//! point evaluation.
//!
//! A [`ForecastSeries`] is an ordered list of instantaneous power samples.
//! Between samples power is interpolated linearly; outside the covered span
//! it is zero.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Forecasts never reach further than this past the instant they were
/// produced at.
pub const HORIZON_HOURS: i64 = 72;

pub fn horizon() -> Duration {
    Duration::hours(HORIZON_HOURS)
}

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("forecast request failed: {message}")]
    Network { message: String, retriable: bool },
    #[error("malformed forecast payload: {0}")]
    Decode(String),
    #[error("forecast contains no samples")]
    Empty,
    #[error("sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(DateTime<Utc>),
    #[error("requested {days} days of forecast, at most 3 are available")]
    Horizon { days: u32 },
    #[error("invalid panel specification: {0}")]
    InvalidPanel(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
}

impl ForecastError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ForecastError::Network { retriable: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastSource {
    Remote,
    File,
    Synthetic,
}

/// One forecast point. Serializes as the `{"t": ..., "w": ...}` fixture record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSample {
    #[serde(rename = "t")]
    pub at: DateTime<Utc>,
    #[serde(rename = "w")]
    pub watts: f64,
}

impl ForecastSample {
    pub fn new(at: DateTime<Utc>, watts: f64) -> Self {
        Self { at, watts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    samples: Vec<ForecastSample>,
    source: ForecastSource,
}

impl ForecastSeries {
    /// Builds a series from samples that are already strictly increasing.
    pub fn new(samples: Vec<ForecastSample>, source: ForecastSource) -> Result<Self, ForecastError> {
        for (index, s) in samples.iter().enumerate() {
            check_watts(index, s.watts)?;
        }
        for (i, pair) in samples.windows(2).enumerate() {
            if pair[1].at == pair[0].at {
                return Err(ForecastError::DuplicateTimestamp(pair[1].at));
            }
            if pair[1].at < pair[0].at {
                return Err(ForecastError::InvalidSample {
                    index: i + 1,
                    reason: "timestamps are not increasing".into(),
                });
            }
        }
        Ok(Self { samples, source })
    }

    /// Sorts samples by timestamp first; duplicates are still rejected.
    pub fn from_unsorted(mut samples: Vec<ForecastSample>, source: ForecastSource) -> Result<Self, ForecastError> {
        for (index, s) in samples.iter().enumerate() {
            check_watts(index, s.watts)?;
        }
        samples.sort_by_key(|s| s.at);
        Self::new(samples, source)
    }

    pub fn samples(&self) -> &[ForecastSample] {
        &self.samples
    }

    pub fn source(&self) -> ForecastSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> Option<DateTime<Utc>> {
        self.samples.first().map(|s| s.at)
    }

    pub fn end(&self) -> Option<DateTime<Utc>> {
        self.samples.last().map(|s| s.at)
    }

    /// Keeps only the samples inside `[now, now + 72h]`.
    pub fn clamp_to_horizon(mut self, now: DateTime<Utc>) -> Self {
        let limit = now + horizon();
        self.samples.retain(|s| s.at >= now && s.at <= limit);
        self
    }

    /// Instantaneous power at `t`, linearly interpolated; zero outside the
    /// covered span.
    pub fn power_at(&self, t: DateTime<Utc>) -> f64 {
        let idx = self.samples.partition_point(|s| s.at < t);
        match self.samples.get(idx) {
            None => 0.0,
            Some(s) if s.at == t => s.watts,
            Some(_) if idx == 0 => 0.0,
            Some(right) => {
                let left = &self.samples[idx - 1];
                let span = seconds_between(left.at, right.at);
                let frac = seconds_between(left.at, t) / span;
                left.watts + (right.watts - left.watts) * frac
            }
        }
    }
}

pub(crate) fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_milliseconds() as f64 / 1000.0
}

fn check_watts(index: usize, watts: f64) -> Result<(), ForecastError> {
    if !watts.is_finite() {
        return Err(ForecastError::InvalidSample {
            index,
            reason: format!("power {watts} is not finite"),
        });
    }
    if watts < 0.0 {
        return Err(ForecastError::InvalidSample {
            index,
            reason: format!("power {watts} W is negative"),
        });
    }
    Ok(())
}

/// Location and rating of a rooftop installation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub latitude: f64,
    pub longitude: f64,
    /// Tilt from horizontal, degrees.
    pub declination: f64,
    /// Degrees from south (forecast.solar convention).
    pub azimuth: f64,
    /// Peak power in kilowatts.
    pub peak_power: f64,
}

impl PanelSpec {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |msg: String| Err(ForecastError::InvalidPanel(msg));
        if !(self.peak_power > 0.0 && self.peak_power.is_finite()) {
            return bad(format!("peak power must be positive, got {}", self.peak_power));
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return bad(format!("latitude {} outside [-90, 90]", self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return bad(format!("longitude {} outside [-180, 180]", self.longitude));
        }
        if !self.declination.is_finite() || !self.azimuth.is_finite() {
            return bad("declination and azimuth must be finite".into());
        }
        Ok(())
    }

    /// Path component for the `/estimate/...` endpoint.
    pub fn estimate_path(&self) -> String {
        format!(
            "/estimate/{}/{}/{}/{}/{}",
            self.latitude, self.longitude, self.declination, self.azimuth, self.peak_power
        )
    }
}

impl fmt::Display for PanelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} kWp at ({}, {}), tilt {}, azimuth {}",
            self.peak_power, self.latitude, self.longitude, self.declination, self.azimuth
        )
    }
}

#[derive(Deserialize)]
struct EstimatePayload {
    result: EstimateResult,
}

#[derive(Deserialize)]
struct EstimateResult {
    watts: serde_json::Map<String, serde_json::Value>,
}

/// Parses an ISO-8601 timestamp. An explicit offset is honoured; a bare
/// local datetime is read as UTC.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%:z", "%Y-%m-%d %H:%M:%S%z", "%Y-%m-%dT%H:%M:%S%z"] {
        if let Ok(t) = DateTime::parse_from_str(raw, fmt) {
            return Some(t.with_timezone(&Utc));
        }
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// Decodes a forecast.solar-style `/estimate` response body.
pub fn decode_estimate(body: &str) -> Result<Vec<ForecastSample>, ForecastError> {
    let payload: EstimatePayload = serde_json::from_str(body).map_err(|e| ForecastError::Decode(e.to_string()))?;
    let mut samples = Vec::with_capacity(payload.result.watts.len());
    for (key, value) in payload.result.watts {
        let at = parse_timestamp(&key).ok_or_else(|| ForecastError::Decode(format!("bad timestamp {key:?}")))?;
        let watts = value
            .as_f64()
            .ok_or_else(|| ForecastError::Decode(format!("non-numeric watts at {key:?}")))?;
        samples.push(ForecastSample::new(at, watts));
    }
    Ok(samples)
}

/// Queries a forecast.solar-compatible endpoint and clamps the result to the
/// 72 hour horizon starting at `now`.
pub fn fetch_forecast(
    spec: &PanelSpec,
    endpoint: &str,
    now: DateTime<Utc>,
    timeout: StdDuration,
) -> Result<ForecastSeries, ForecastError> {
    spec.validate()?;
    let url = format!("{}{}", endpoint.trim_end_matches('/'), spec.estimate_path());
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut response = agent.get(&url).call().map_err(network_error)?;
    let body = response.body_mut().read_to_string().map_err(network_error)?;
    let samples = decode_estimate(&body)?;
    if samples.is_empty() {
        return Err(ForecastError::Empty);
    }
    let series = ForecastSeries::from_unsorted(samples, ForecastSource::Remote)?.clamp_to_horizon(now);
    if series.is_empty() {
        return Err(ForecastError::Empty);
    }
    Ok(series)
}

fn network_error(err: ureq::Error) -> ForecastError {
    let retriable = match &err {
        ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
        _ => true,
    };
    ForecastError::Network {
        message: err.to_string(),
        retriable,
    }
}

/// Reads a JSON fixture (`[{"t": ..., "w": ...}, ...]`). Records may be out
/// of order; horizon clamping is left to the caller.
pub fn load_forecast_file(path: impl AsRef<Path>) -> Result<ForecastSeries, ForecastError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ForecastError::Io {
        path: display.clone(),
        source,
    })?;
    let samples: Vec<ForecastSample> = serde_json::from_str(&text).map_err(|e| ForecastError::Parse {
        path: display.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    ForecastSeries::from_unsorted(samples, ForecastSource::File)
}

/// Writes `series` in the fixture format read by [`load_forecast_file`].
pub fn save_forecast_file(series: &ForecastSeries, path: impl AsRef<Path>) -> Result<(), ForecastError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(series.samples()).map_err(|e| ForecastError::Decode(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|source| ForecastError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Repeats a daily profile of `(hour offset, watts)` points for `days` days
/// starting at `start`.
pub fn synth_forecast(
    day_profile: &[(f64, f64)],
    days: u32,
    start: DateTime<Utc>,
) -> Result<ForecastSeries, ForecastError> {
    if days > 3 {
        return Err(ForecastError::Horizon { days });
    }
    if days == 0 {
        return Err(ForecastError::InvalidProfile("days must be at least 1".into()));
    }
    if day_profile.is_empty() {
        return Err(ForecastError::InvalidProfile("profile has no points".into()));
    }
    if let Some((hour, _)) = day_profile.iter().find(|(hour, _)| !(0.0..24.0).contains(hour)) {
        return Err(ForecastError::InvalidProfile(format!("hour {hour} outside [0, 24)")));
    }
    let mut samples = Vec::with_capacity(day_profile.len() * days as usize);
    for day in 0..days {
        let day_start = start + Duration::days(day as i64);
        for &(hour, watts) in day_profile {
            let offset = Duration::milliseconds((hour * 3_600_000.0).round() as i64);
            samples.push(ForecastSample::new(day_start + offset, watts));
        }
    }
    ForecastSeries::from_unsorted(samples, ForecastSource::Synthetic)
}

/// Hourly profile that rises linearly from zero to `peak_watts` at
/// `peak_hour` and falls back to zero `half_width` hours either side.
pub fn triangular_profile(peak_hour: f64, half_width: f64, peak_watts: f64) -> Vec<(f64, f64)> {
    (0..24)
        .map(|h| {
            let h = h as f64;
            let w = peak_watts * (1.0 - (h - peak_hour).abs() / half_width);
            (h, w.max(0.0))
        })
        .collect()
}

/// Hourly profile at constant power.
pub fn flat_profile(watts: f64) -> Vec<(f64, f64)> {
    (0..24).map(|h| (h as f64, watts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, h, m, 0).unwrap()
    }

    fn two_point() -> ForecastSeries {
        ForecastSeries::new(
            vec![
                ForecastSample::new(at(10, 0), 0.0),
                ForecastSample::new(at(11, 0), 1000.0),
            ],
            ForecastSource::File,
        )
        .unwrap()
    }

    #[test]
    fn power_at_interpolates_midpoint() {
        assert_eq!(two_point().power_at(at(10, 30)), 500.0);
    }

    #[test]
    fn power_at_sample_is_exact() {
        assert_eq!(two_point().power_at(at(11, 0)), 1000.0);
        assert_eq!(two_point().power_at(at(10, 0)), 0.0);
    }

    #[test]
    fn power_outside_coverage_is_zero() {
        assert_eq!(two_point().power_at(at(9, 59)), 0.0);
        assert_eq!(two_point().power_at(at(11, 1)), 0.0);
    }

    #[test]
    fn duplicate_timestamps_rejected() {
        let err = ForecastSeries::from_unsorted(
            vec![ForecastSample::new(at(10, 0), 1.0), ForecastSample::new(at(10, 0), 2.0)],
            ForecastSource::File,
        )
        .unwrap_err();
        assert!(matches!(err, ForecastError::DuplicateTimestamp(_)));
    }

    #[test]
    fn new_rejects_unsorted_input() {
        let err = ForecastSeries::new(
            vec![ForecastSample::new(at(11, 0), 1.0), ForecastSample::new(at(10, 0), 2.0)],
            ForecastSource::File,
        )
        .unwrap_err();
        assert!(matches!(err, ForecastError::InvalidSample { index: 1, .. }));
    }

    #[test]
    fn nan_power_rejected() {
        let err =
            ForecastSeries::new(vec![ForecastSample::new(at(10, 0), f64::NAN)], ForecastSource::File).unwrap_err();
        assert!(matches!(err, ForecastError::InvalidSample { index: 0, .. }));
    }

    #[test]
    fn synth_triangular_peaks_at_noon() {
        let series = synth_forecast(&triangular_profile(12.0, 6.0, 1000.0), 1, at(0, 0)).unwrap();
        let max = series
            .samples()
            .iter()
            .max_by(|a, b| a.watts.total_cmp(&b.watts))
            .unwrap();
        assert_eq!(max.at, at(12, 0));
        assert_eq!(max.watts, 1000.0);
        assert_eq!(series.source(), ForecastSource::Synthetic);
    }

    #[test]
    fn synth_flat_two_days() {
        let series = synth_forecast(&flat_profile(500.0), 2, at(0, 0)).unwrap();
        assert_eq!(series.len(), 48);
        assert!(series.samples().iter().all(|s| s.watts == 500.0));
        assert_eq!(series.end().unwrap(), at(0, 0) + Duration::hours(47));
    }

    #[test]
    fn synth_rejects_four_days() {
        let err = synth_forecast(&flat_profile(500.0), 4, at(0, 0)).unwrap_err();
        assert!(matches!(err, ForecastError::Horizon { days: 4 }));
    }

    #[test]
    fn synth_rejects_hour_out_of_range() {
        let err = synth_forecast(&[(24.0, 1.0)], 1, at(0, 0)).unwrap_err();
        assert!(matches!(err, ForecastError::InvalidProfile(_)));
    }

    #[test]
    fn clamp_drops_past_and_beyond_horizon() {
        let series = synth_forecast(&flat_profile(1.0), 3, at(0, 0)).unwrap();
        let now = at(6, 0);
        let clamped = series.clamp_to_horizon(now);
        assert_eq!(clamped.start().unwrap(), now);
        assert!(clamped.end().unwrap() <= now + horizon());
    }

    #[test]
    fn panel_validation() {
        let mut spec = PanelSpec {
            latitude: 45.46,
            longitude: 9.19,
            declination: 30.0,
            azimuth: 0.0,
            peak_power: 3.0,
        };
        assert!(spec.validate().is_ok());
        assert_eq!(spec.estimate_path(), "/estimate/45.46/9.19/30/0/3");
        spec.peak_power = 0.0;
        assert!(spec.validate().is_err());
        spec.peak_power = 3.0;
        spec.latitude = 91.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn timestamps_with_offsets_normalize_to_utc() {
        assert_eq!(parse_timestamp("2024-06-01T12:00:00+02:00"), Some(at(10, 0)));
        assert_eq!(parse_timestamp("2024-06-01 12:00:00+02:00"), Some(at(10, 0)));
        assert_eq!(parse_timestamp("2024-06-01 10:00:00"), Some(at(10, 0)));
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn decode_estimate_reads_watts_map() {
        let body = r#"{"result":{"watts":{"2024-06-01T11:00:00Z":5,"2024-06-01T10:00:00Z":3}},"message":{}}"#;
        let mut samples = decode_estimate(body).unwrap();
        samples.sort_by_key(|s| s.at);
        assert_eq!(
            samples,
            vec![ForecastSample::new(at(10, 0), 3.0), ForecastSample::new(at(11, 0), 5.0)]
        );
        assert!(matches!(
            decode_estimate("{\"result\":{}}"),
            Err(ForecastError::Decode(_))
        ));
    }
}
