//! `washy`: run the service, seed forecasts, replay scripted dialogues,
//! step a test server's clock and print window reports.
//!
//! Exit codes: 0 success, 1 replay mismatch, 2 environment or usage error.

mod report;
mod step;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration as StdDuration;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use washy::agent::{MockBackend, PersonaKind};
use washy::forecast::{
    fetch_forecast, flat_profile, load_forecast_file, save_forecast_file, synth_forecast, triangular_profile, PanelSpec,
};
use washy::replay::{run_replay, ReplayOverrides, ReplayScript};

#[derive(Parser)]
#[command(name = "washy", version, about = "Solar-aware laundry scheduler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the HTTP service.
    Serve {
        /// TOML configuration file.
        #[arg(long, short, default_value = "washy.toml")]
        config: PathBuf,
    },
    /// Forecast fixtures.
    Forecast {
        #[command(subcommand)]
        command: ForecastCommand,
    },
    /// Run a scripted dialogue against the mock backend and report mismatches.
    Replay(ReplayArgs),
    /// Control the virtual clock of a server started with `virtual_clock`.
    Clock {
        #[command(subcommand)]
        command: ClockCommand,
    },
    /// Tabular reports.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Subcommand)]
enum ForecastCommand {
    /// Write a forecast file into the data directory.
    Seed {
        /// Data directory; the file is written as `forecast.json` inside it.
        #[arg(long, default_value = "data", global = true)]
        data_dir: PathBuf,
        /// Explicit output path, overriding `--data-dir`.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
        #[command(subcommand)]
        source: SeedSource,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Triangular,
    Flat,
}

#[derive(Subcommand)]
enum SeedSource {
    /// Synthesize from a repeated daily profile.
    Profile {
        #[arg(long, value_enum, default_value = "triangular")]
        shape: Shape,
        /// Peak (triangular) or constant (flat) power in watts.
        #[arg(long, default_value_t = 3000.0)]
        peak_watts: f64,
        /// UTC hour of the peak.
        #[arg(long, default_value_t = 12.0)]
        peak_hour: f64,
        /// Hours from the peak to zero production.
        #[arg(long, default_value_t = 6.0)]
        half_width: f64,
        /// Number of days, at most 3.
        #[arg(long, default_value_t = 3)]
        days: u32,
        /// First day as an RFC 3339 instant; defaults to today's UTC midnight.
        #[arg(long)]
        start: Option<DateTime<Utc>>,
    },
    /// Download an estimate from a forecast.solar-compatible endpoint.
    Fetch {
        #[arg(long, default_value = "https://api.forecast.solar")]
        endpoint: String,
        #[arg(long, allow_hyphen_values = true)]
        latitude: f64,
        #[arg(long, allow_hyphen_values = true)]
        longitude: f64,
        /// Panel tilt in degrees.
        #[arg(long)]
        declination: f64,
        /// Degrees from south.
        #[arg(long, allow_hyphen_values = true)]
        azimuth: f64,
        /// Peak power in kilowatts.
        #[arg(long)]
        kwp: f64,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PersonaArg {
    Traditional,
    Personified,
    Both,
}

#[derive(Args)]
struct ReplayArgs {
    /// Script file (JSON list of steps, or an object with `setup` and `steps`).
    script: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    persona: PersonaArg,
    /// Start instant of the virtual clock, overriding the script setup.
    #[arg(long)]
    virtual_clock: Option<DateTime<Utc>>,
    /// Forecast file overriding the script setup.
    #[arg(long)]
    forecast: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ClockCommand {
    /// Advance by a duration such as `90s`, `2m`, `1h30m` (bare numbers are minutes).
    Step {
        duration: String,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        /// Bearer token of any configured user.
        #[arg(long, env = "WASHY_TOKEN")]
        token: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Ranked time windows with quality labels.
    Windows {
        /// Appliance power in watts.
        #[arg(long, default_value_t = 1000.0)]
        power: f64,
        /// Cycle length in minutes.
        #[arg(long, default_value_t = 60)]
        duration: u32,
        #[arg(long, default_value = "data/forecast.json")]
        forecast: PathBuf,
        /// Reference instant; defaults to the first forecast sample.
        #[arg(long)]
        now: Option<DateTime<Utc>>,
        /// IANA zone for the local column.
        #[arg(long, default_value = "UTC")]
        timezone: String,
        #[arg(long, default_value_t = washy::scheduler::DEFAULT_STEP_MINUTES)]
        step: u32,
        /// Print only the best N windows.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

/// Failures that map to exit code 1 rather than 2.
#[derive(Debug)]
struct Mismatches;

impl std::fmt::Display for Mismatches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("replay found mismatches")
    }
}

impl std::error::Error for Mismatches {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Mismatches>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { config } => {
            let config = washy_service::ServiceConfig::load(&config)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(washy_service::serve(&config))?;
            Ok(())
        }
        Command::Forecast {
            command: ForecastCommand::Seed { data_dir, out, source },
        } => seed(out.unwrap_or_else(|| data_dir.join("forecast.json")), source),
        Command::Replay(args) => replay(args),
        Command::Clock {
            command: ClockCommand::Step { duration, url, token },
        } => {
            let seconds = step::parse_duration(&duration)?;
            let now = step::advance(&url, &token, seconds)?;
            println!("{now}");
            Ok(())
        }
        Command::Report {
            command:
                ReportCommand::Windows {
                    power,
                    duration,
                    forecast,
                    now,
                    timezone,
                    step,
                    limit,
                    format,
                },
        } => {
            let series = load_forecast_file(&forecast)?;
            let tz = washy::localtime::parse_tz(&timezone).map_err(anyhow::Error::msg)?;
            let now = match now.or(series.start()) {
                Some(t) => t,
                None => bail!("forecast {} is empty", forecast.display()),
            };
            let opts = report::WindowReport {
                power,
                duration,
                now,
                tz,
                step,
                limit,
            };
            let mut stdout = std::io::stdout().lock();
            match format {
                Format::Csv => report::write_csv(&series, &opts, &mut stdout),
                Format::Table => report::write_table(&series, &opts, &mut stdout),
            }
        }
    }
}

fn seed(out: PathBuf, source: SeedSource) -> Result<()> {
    let series = match source {
        SeedSource::Profile {
            shape,
            peak_watts,
            peak_hour,
            half_width,
            days,
            start,
        } => {
            let start = start.unwrap_or_else(|| {
                Utc::now()
                    .date_naive()
                    .and_hms_opt(0, 0, 0)
                    .expect("midnight")
                    .and_utc()
            });
            let profile = match shape {
                Shape::Triangular => triangular_profile(peak_hour, half_width, peak_watts),
                Shape::Flat => flat_profile(peak_watts),
            };
            synth_forecast(&profile, days, start)?
        }
        SeedSource::Fetch {
            endpoint,
            latitude,
            longitude,
            declination,
            azimuth,
            kwp,
            timeout_ms,
        } => {
            let spec = PanelSpec {
                latitude,
                longitude,
                declination,
                azimuth,
                peak_power: kwp,
            };
            fetch_forecast(&spec, &endpoint, Utc::now(), StdDuration::from_millis(timeout_ms))?
        }
    };
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_forecast_file(&series, &out)?;
    println!("wrote {} samples to {}", series.len(), out.display());
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let script = ReplayScript::load(&args.script)?;
    let overrides = ReplayOverrides {
        start: args.virtual_clock,
        forecast: args.forecast.as_ref().map(load_forecast_file).transpose()?,
    };
    let personas = match args.persona {
        PersonaArg::Traditional => vec![PersonaKind::Traditional],
        PersonaArg::Personified => vec![PersonaKind::Personified],
        PersonaArg::Both => vec![PersonaKind::Traditional, PersonaKind::Personified],
    };
    let mut text = String::new();
    let mut passed = true;
    for persona in personas {
        let mut backend = MockBackend::for_persona(persona);
        let report = run_replay(&script, persona, &mut backend, &overrides)?;
        passed &= report.passed();
        text.push_str(&report.render());
    }
    print!("{text}");
    if let Some(path) = &args.output {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    if passed {
        Ok(())
    } else {
        Err(Mismatches.into())
    }
}
