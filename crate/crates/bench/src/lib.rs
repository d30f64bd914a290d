//! Forecast fixtures shared by the benchmarks.

use chrono::{DateTime, Duration, Utc};
use washy::forecast::{synth_forecast, triangular_profile};
use washy::{ForecastSample, ForecastSeries, ForecastSource};

pub fn start() -> DateTime<Utc> {
    "2024-06-01T00:00:00Z".parse().expect("valid instant")
}

/// Three clear days with a noon peak, hourly samples.
pub fn clear_days() -> ForecastSeries {
    synth_forecast(&triangular_profile(12.0, 6.0, 3000.0), 3, start()).expect("valid profile")
}

/// Three days at `resolution_minutes`, with a passing-cloud ripple on the
/// daily bell so every segment has a different slope.
pub fn cloudy_days(resolution_minutes: i64) -> ForecastSeries {
    let samples = (0..=72 * 60 / resolution_minutes)
        .map(|i| {
            let at = start() + Duration::minutes(i * resolution_minutes);
            let hour = (i * resolution_minutes) as f64 / 60.0 % 24.0;
            let bell = (1.0 - ((hour - 12.5) / 6.5).powi(2)).max(0.0);
            let ripple = 0.75 + 0.25 * (i as f64 * 0.7).sin();
            ForecastSample::new(at, 3500.0 * bell * ripple)
        })
        .collect();
    ForecastSeries::new(samples, ForecastSource::Synthetic).expect("ordered samples")
}
