//! Candidate laundry windows: energy integration, enumeration, ranking and
//! quality labels.

use std::cmp::Ordering;
use std::fmt;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{horizon, seconds_between, ForecastSeries};

/// Candidate grid spacing used when the caller does not choose one.
pub const DEFAULT_STEP_MINUTES: u32 = 15;

/// Energy comparisons treat values closer than this (Wh) as equal.
pub const ENERGY_EPSILON_WH: f64 = 1e-6;

/// Windows producing at least this share of the best window are good.
pub const GOOD_RATIO: f64 = 0.85;
/// Windows between this share and [`GOOD_RATIO`] are average.
pub const AVERAGE_RATIO: f64 = 0.70;

const MAX_DURATION_MINUTES: u32 = 72 * 60;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid laundry request: {0}")]
    InvalidRequest(String),
    #[error("enumeration step must be positive")]
    InvalidStep,
    #[error("forecast is empty")]
    EmptyForecast,
    #[error("no {duration_minutes}-minute window fits in the remaining forecast horizon")]
    NoFeasibleWindow { duration_minutes: u32 },
    #[error("forecast has no coverage after {0}")]
    NoCoverage(DateTime<Utc>),
}

/// Power draw and length of one laundry cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaundryRequest {
    pub power_watts: f64,
    pub duration_minutes: u32,
}

impl LaundryRequest {
    pub fn new(power_watts: f64, duration_minutes: u32) -> Result<Self, ScheduleError> {
        let req = Self {
            power_watts,
            duration_minutes,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.power_watts > 0.0 && self.power_watts.is_finite()) {
            return Err(ScheduleError::InvalidRequest(format!(
                "power must be positive, got {}",
                self.power_watts
            )));
        }
        if self.duration_minutes == 0 {
            return Err(ScheduleError::InvalidRequest("duration must be positive".into()));
        }
        if self.duration_minutes > MAX_DURATION_MINUTES {
            return Err(ScheduleError::InvalidRequest(format!(
                "duration {} min exceeds 72 h",
                self.duration_minutes
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> Duration {
        Duration::minutes(self.duration_minutes as i64)
    }
}

/// Energy (Wh) the cycle consumes.
pub fn required_energy(req: &LaundryRequest) -> f64 {
    req.power_watts * req.duration_minutes as f64 / 60.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Average,
    Bad,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Average => "average",
            Quality::Bad => "bad",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label for a window producing `production` Wh when the best candidate
/// produces `best` Wh. Boundaries are closed on the favourable side.
pub fn quality_for(production: f64, best: f64) -> Quality {
    if best <= ENERGY_EPSILON_WH {
        return Quality::Bad;
    }
    if production + ENERGY_EPSILON_WH >= GOOD_RATIO * best {
        Quality::Good
    } else if production + ENERGY_EPSILON_WH >= AVERAGE_RATIO * best {
        Quality::Average
    } else {
        Quality::Bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub duration_minutes: u32,
    pub production_wh: f64,
    /// Production relative to the best window of the same query.
    pub ratio: f64,
    pub quality: Quality,
    pub exceeds_required: bool,
}

impl TimeWindow {
    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::minutes(self.duration_minutes as i64)
    }
}

/// Windows sorted by production, best first. Never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWindows {
    windows: Vec<TimeWindow>,
}

impl RankedWindows {
    pub fn windows(&self) -> &[TimeWindow] {
        &self.windows
    }

    pub fn best(&self) -> &TimeWindow {
        &self.windows[0]
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_windows(self) -> Vec<TimeWindow> {
        self.windows
    }

    /// The candidate starting exactly at `start`, if any.
    pub fn find(&self, start: DateTime<Utc>) -> Option<&TimeWindow> {
        self.windows.iter().find(|w| w.start == start)
    }

    /// Sorts arbitrary windows into ranking order. Returns `None` for an
    /// empty input.
    pub fn from_windows(mut windows: Vec<TimeWindow>) -> Option<Self> {
        if windows.is_empty() {
            return None;
        }
        windows.sort_by(rank_order);
        Some(Self { windows })
    }
}

fn energy_key(wh: f64) -> i64 {
    (wh / ENERGY_EPSILON_WH).round() as i64
}

fn rank_order(a: &TimeWindow, b: &TimeWindow) -> Ordering {
    energy_key(b.production_wh)
        .cmp(&energy_key(a.production_wh))
        .then(a.start.cmp(&b.start))
}

/// Integrated production (Wh) over `[start, start + duration]`.
///
/// The interpolated power curve is piecewise linear, so trapezoids between
/// consecutive breakpoints give the exact integral.
pub fn window_energy(series: &ForecastSeries, start: DateTime<Utc>, duration_minutes: u32) -> f64 {
    let end = start + Duration::minutes(duration_minutes as i64);
    integrate(series, start, end)
}

pub(crate) fn integrate(series: &ForecastSeries, start: DateTime<Utc>, end: DateTime<Utc>) -> f64 {
    let (Some(first), Some(last)) = (series.start(), series.end()) else {
        return 0.0;
    };
    let lo = start.max(first);
    let hi = end.min(last);
    if lo >= hi {
        return 0.0;
    }
    let samples = series.samples();
    let inner_from = samples.partition_point(|s| s.at <= lo);
    let inner_to = samples.partition_point(|s| s.at < hi);

    let mut prev_t = lo;
    let mut prev_p = series.power_at(lo);
    let mut joules = 0.0;
    for s in &samples[inner_from..inner_to] {
        joules += seconds_between(prev_t, s.at) * (prev_p + s.watts) / 2.0;
        prev_t = s.at;
        prev_p = s.watts;
    }
    let end_p = series.power_at(hi);
    joules += seconds_between(prev_t, hi) * (prev_p + end_p) / 2.0;
    joules / 3600.0
}

/// Rounds `t` up to the next multiple of `step_minutes` since the Unix epoch.
pub fn align_up(t: DateTime<Utc>, step_minutes: u32) -> DateTime<Utc> {
    let step_ms = step_minutes as i64 * 60_000;
    let ms = t.timestamp_millis();
    let aligned = ms.div_euclid(step_ms) * step_ms;
    let aligned = if aligned < ms { aligned + step_ms } else { aligned };
    Utc.timestamp_millis_opt(aligned).single().unwrap_or(t)
}

/// Last instant a window may end at: the end of forecast coverage, capped
/// at the 72 hour horizon from `now`.
pub fn horizon_end(series: &ForecastSeries, now: DateTime<Utc>) -> Option<DateTime<Utc>> {
    series.end().map(|end| end.min(now + horizon()))
}

/// Scores every grid-aligned window of the requested length that starts at
/// or after `now` and ends inside the horizon, then ranks and labels them.
pub fn enumerate_windows(
    series: &ForecastSeries,
    req: &LaundryRequest,
    now: DateTime<Utc>,
    step_minutes: u32,
) -> Result<RankedWindows, ScheduleError> {
    req.validate()?;
    if step_minutes == 0 {
        return Err(ScheduleError::InvalidStep);
    }
    let limit = horizon_end(series, now).ok_or(ScheduleError::EmptyForecast)?;
    let step = Duration::minutes(step_minutes as i64);
    let duration = req.duration();

    let mut windows = Vec::new();
    let mut start = align_up(now, step_minutes);
    while start + duration <= limit {
        windows.push(TimeWindow {
            start,
            duration_minutes: req.duration_minutes,
            production_wh: window_energy(series, start, req.duration_minutes),
            ratio: 0.0,
            quality: Quality::Bad,
            exceeds_required: false,
        });
        start += step;
    }
    let ranked = RankedWindows::from_windows(windows).ok_or(ScheduleError::NoFeasibleWindow {
        duration_minutes: req.duration_minutes,
    })?;
    Ok(classify(ranked, required_energy(req)))
}

/// Assigns ratio, quality and the required-energy flag to every window.
/// A best window with no production leaves everything bad.
pub fn classify(mut ranked: RankedWindows, required_wh: f64) -> RankedWindows {
    let best = ranked.best().production_wh;
    let dark = best <= ENERGY_EPSILON_WH;
    for w in &mut ranked.windows {
        if dark {
            w.ratio = 0.0;
            w.quality = Quality::Bad;
            w.exceeds_required = false;
        } else {
            w.ratio = w.production_wh / best;
            w.quality = quality_for(w.production_wh, best);
            w.exceeds_required = w.production_wh + ENERGY_EPSILON_WH >= required_wh;
        }
    }
    ranked
}

/// Instant of highest forecast power within `[now, horizon]`, earliest on ties.
pub fn best_solar_time(series: &ForecastSeries, now: DateTime<Utc>) -> Result<(DateTime<Utc>, f64), ScheduleError> {
    let (first, last) = match (series.start(), series.end()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(ScheduleError::EmptyForecast),
    };
    let limit = last.min(now + horizon());
    if now > limit {
        return Err(ScheduleError::NoCoverage(now));
    }

    let mut candidates: Vec<DateTime<Utc>> = Vec::new();
    if now >= first {
        candidates.push(now);
    }
    candidates.extend(
        series
            .samples()
            .iter()
            .map(|s| s.at)
            .filter(|t| *t >= now && *t <= limit),
    );
    candidates.push(limit);

    let mut best: Option<(DateTime<Utc>, f64)> = None;
    for t in candidates {
        let p = series.power_at(t);
        match best {
            Some((bt, bp)) if p > bp || (p == bp && t < bt) => best = Some((t, p)),
            None => best = Some((t, p)),
            _ => {}
        }
    }
    best.ok_or(ScheduleError::NoCoverage(now))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{flat_profile, synth_forecast, triangular_profile, ForecastSample, ForecastSource};

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, h, m, 0).unwrap()
    }

    fn window(production_wh: f64, minute: u32) -> TimeWindow {
        TimeWindow {
            start: at(8, minute),
            duration_minutes: 60,
            production_wh,
            ratio: 0.0,
            quality: Quality::Bad,
            exceeds_required: false,
        }
    }

    #[test]
    fn required_energy_examples() {
        let wh = |p, d| required_energy(&LaundryRequest::new(p, d).unwrap());
        assert_eq!(wh(1000.0, 60), 1000.0);
        assert_eq!(wh(2000.0, 30), 1000.0);
        assert_eq!(wh(800.0, 90), 1200.0);
    }

    #[test]
    fn request_validation() {
        assert!(LaundryRequest::new(0.0, 60).is_err());
        assert!(LaundryRequest::new(100.0, 0).is_err());
        assert!(LaundryRequest::new(100.0, 72 * 60 + 1).is_err());
        assert!(LaundryRequest::new(100.0, 72 * 60).is_ok());
    }

    #[test]
    fn constant_series_energy() {
        let series = synth_forecast(&flat_profile(500.0), 1, at(0, 0)).unwrap();
        assert!((window_energy(&series, at(3, 17), 120) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn triangle_area() {
        let series = ForecastSeries::new(
            vec![
                ForecastSample::new(at(10, 0), 0.0),
                ForecastSample::new(at(11, 0), 1000.0),
            ],
            ForecastSource::File,
        )
        .unwrap();
        assert!((window_energy(&series, at(10, 0), 60) - 500.0).abs() < 1e-9);
    }

    #[test]
    fn window_outside_coverage_is_zero() {
        let series = synth_forecast(&flat_profile(500.0), 1, at(0, 0)).unwrap();
        assert_eq!(window_energy(&series, at(0, 0) - Duration::hours(3), 60), 0.0);
        assert_eq!(window_energy(&series, at(23, 0), 60), 0.0);
    }

    #[test]
    fn flat_series_ties_break_to_earliest() {
        let series = synth_forecast(&flat_profile(500.0), 1, at(0, 0)).unwrap();
        let req = LaundryRequest::new(1000.0, 60).unwrap();
        let ranked = enumerate_windows(&series, &req, at(0, 0), 60).unwrap();
        assert_eq!(ranked.len(), 23);
        assert_eq!(ranked.best().start, at(0, 0));
        let starts: Vec<_> = ranked.windows().iter().map(|w| w.start).collect();
        let mut sorted = starts.clone();
        sorted.sort();
        assert_eq!(starts, sorted);
        assert!(ranked.windows().iter().all(|w| w.quality == Quality::Good));
    }

    #[test]
    fn start_rounds_up_to_grid() {
        let series = synth_forecast(&flat_profile(500.0), 1, at(0, 0)).unwrap();
        let req = LaundryRequest::new(1000.0, 60).unwrap();
        let ranked = enumerate_windows(&series, &req, at(9, 7), 15).unwrap();
        let earliest = ranked.windows().iter().map(|w| w.start).min().unwrap();
        assert_eq!(earliest, at(9, 15));
        assert_eq!(align_up(at(9, 15), 15), at(9, 15));
    }

    #[test]
    fn too_long_duration_has_no_window() {
        let series = synth_forecast(&flat_profile(500.0), 3, at(0, 0)).unwrap();
        let req = LaundryRequest {
            power_watts: 1000.0,
            duration_minutes: 80 * 60,
        };
        assert!(enumerate_windows(&series, &req, at(0, 0), 15).is_err());
        let req = LaundryRequest::new(1000.0, 71 * 60 + 1).unwrap();
        assert_eq!(
            enumerate_windows(&series, &req, at(0, 0), 15).unwrap_err(),
            ScheduleError::NoFeasibleWindow {
                duration_minutes: 71 * 60 + 1
            }
        );
    }

    #[test]
    fn classify_ratio_examples() {
        let ranked = RankedWindows::from_windows(vec![window(1000.0, 0), window(800.0, 1), window(500.0, 2)]).unwrap();
        let ranked = classify(ranked, 0.0);
        let labels: Vec<_> = ranked.windows().iter().map(|w| w.quality).collect();
        assert_eq!(labels, vec![Quality::Good, Quality::Average, Quality::Bad]);
    }

    #[test]
    fn single_window_is_good() {
        let ranked = classify(RankedWindows::from_windows(vec![window(10.0, 0)]).unwrap(), 0.0);
        assert_eq!(ranked.best().quality, Quality::Good);
        assert_eq!(ranked.best().ratio, 1.0);
    }

    #[test]
    fn required_energy_flag() {
        let ranked = classify(RankedWindows::from_windows(vec![window(1000.0, 0)]).unwrap(), 1200.0);
        assert!(!ranked.best().exceeds_required);
        let ranked = classify(ranked, 1000.0);
        assert!(ranked.best().exceeds_required);
    }

    #[test]
    fn night_only_forecast_is_all_bad() {
        let ranked = classify(
            RankedWindows::from_windows(vec![window(0.0, 0), window(0.0, 1)]).unwrap(),
            0.0,
        );
        assert!(ranked
            .windows()
            .iter()
            .all(|w| w.quality == Quality::Bad && !w.exceeds_required));
    }

    #[test]
    fn best_solar_time_examples() {
        let tri = synth_forecast(&triangular_profile(12.0, 6.0, 1000.0), 1, at(0, 0)).unwrap();
        assert_eq!(best_solar_time(&tri, at(0, 0)).unwrap(), (at(12, 0), 1000.0));

        let flat = synth_forecast(&flat_profile(300.0), 1, at(0, 0)).unwrap();
        assert_eq!(best_solar_time(&flat, at(0, 0)).unwrap(), (at(0, 0), 300.0));

        // Past the peak the best remaining point is `now` itself.
        let (t, p) = best_solar_time(&tri, at(13, 30)).unwrap();
        assert_eq!(t, at(13, 30));
        assert!((p - 750.0).abs() < 1e-9);

        assert!(matches!(
            best_solar_time(&tri, at(23, 30)),
            Err(ScheduleError::NoCoverage(_))
        ));
    }
}
