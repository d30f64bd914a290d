use std::io::Write;

use anyhow::Result;
use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use washy::forecast::ForecastSeries;
use washy::localtime::{iso_local, iso_utc};
use washy::scheduler::{enumerate_windows, required_energy, LaundryRequest, TimeWindow};

pub struct WindowReport {
    pub power: f64,
    pub duration: u32,
    pub now: DateTime<Utc>,
    pub tz: Tz,
    pub step: u32,
    pub limit: Option<usize>,
}

fn windows(series: &ForecastSeries, opts: &WindowReport) -> Result<(f64, Vec<TimeWindow>)> {
    let req = LaundryRequest::new(opts.power, opts.duration)?;
    let ranked = enumerate_windows(series, &req, opts.now, opts.step)?;
    let mut all = ranked.into_windows();
    if let Some(n) = opts.limit {
        all.truncate(n);
    }
    Ok((required_energy(&req), all))
}

pub fn write_csv(series: &ForecastSeries, opts: &WindowReport, out: &mut impl Write) -> Result<()> {
    let (_, rows) = windows(series, opts)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "start_utc",
        "start_local",
        "production_wh",
        "ratio",
        "quality",
        "exceeds_required",
    ])?;
    for row in rows {
        w.write_record([
            iso_utc(row.start),
            iso_local(row.start, opts.tz),
            format!("{:.3}", row.production_wh),
            format!("{:.4}", row.ratio),
            row.quality.to_string(),
            row.exceeds_required.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const BAR_WIDTH: f64 = 40.0;

/// Fixed-width table with a bar proportional to the ratio.
pub fn write_table(series: &ForecastSeries, opts: &WindowReport, out: &mut impl Write) -> Result<()> {
    let (required, rows) = windows(series, opts)?;
    writeln!(
        out,
        "{} W for {} min, required {:.0} Wh, times in {}",
        opts.power,
        opts.duration,
        required,
        opts.tz.name()
    )?;
    writeln!(
        out,
        "{:<25} {:>10} {:>6}  {:<7} {:<7}",
        "start", "Wh", "ratio", "quality", "exceeds"
    )?;
    for row in rows {
        let bar = "#".repeat((row.ratio * BAR_WIDTH).round() as usize);
        writeln!(
            out,
            "{:<25} {:>10.1} {:>6.3}  {:<7} {:<7} {bar}",
            iso_local(row.start, opts.tz),
            row.production_wh,
            row.ratio,
            row.quality.as_str(),
            if row.exceeds_required { "yes" } else { "no" },
        )?;
    }
    Ok(())
}
