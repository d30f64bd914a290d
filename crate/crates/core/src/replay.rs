//! Scripted conversations against a virtual clock.
//!
//! A script is a JSON list of steps, or an object with a `setup` block and
//! `steps`. Each step may advance the clock, act on the appliance, run a
//! reminder tick, send one user message, and then check what happened.
//! Within a step these run in that order.
//!
//! ```json
//! [
//!   { "user": "I want to do a laundry lasting 1 hour",
//!     "expect_tools": [{ "name": "get_timewindows", "arguments": { "duration_minutes": 60 } }],
//!     "expect_class": "recommend" },
//!   { "advance_minutes": 120, "tick": true, "expect_tick": { "notified": 1 } }
//! ]
//! ```
//!
//! Expected tool arguments match as a subset of the actual arguments.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{
    run_turn, BackendError, BackendReply, BackendRequest, ChatBackend, ChatSession, FixedForecast, PersonaKind,
    ReplyClass, ToolCall, ToolEnv, UserProfile,
};
use crate::clock::{Clock, VirtualClock};
use crate::forecast::{synth_forecast, triangular_profile, ForecastSample, ForecastSeries, ForecastSource};
use crate::household::Household;
use crate::localtime::{iso_utc, parse_tz};
use crate::reminders::{ReminderState, TickEvent, UserId};
use crate::scheduler::DEFAULT_STEP_MINUTES;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("invalid setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecastSetup {
    /// Repeated daily triangle starting at the UTC midnight of the start.
    Triangular {
        peak_hour: f64,
        half_width: f64,
        peak_watts: f64,
        days: u32,
    },
    Samples {
        samples: Vec<ForecastSample>,
    },
}

impl Default for ForecastSetup {
    fn default() -> Self {
        ForecastSetup::Triangular {
            peak_hour: 12.0,
            half_width: 6.0,
            peak_watts: 3000.0,
            days: 3,
        }
    }
}

impl ForecastSetup {
    pub fn build(&self, start: DateTime<Utc>) -> Result<ForecastSeries, ReplayError> {
        let series = match self {
            ForecastSetup::Triangular {
                peak_hour,
                half_width,
                peak_watts,
                days,
            } => {
                let midnight = Utc.from_utc_datetime(&start.date_naive().and_hms_opt(0, 0, 0).expect("midnight"));
                synth_forecast(
                    &triangular_profile(*peak_hour, *half_width, *peak_watts),
                    *days,
                    midnight,
                )
            }
            ForecastSetup::Samples { samples } => ForecastSeries::from_unsorted(samples.clone(), ForecastSource::File),
        };
        series.map_err(|e| ReplayError::Setup(e.to_string()))
    }
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 1, 8, 0, 0).unwrap()
}

fn default_timezone() -> String {
    "Europe/Rome".into()
}

fn default_user() -> String {
    "alice".into()
}

fn default_power() -> f64 {
    1000.0
}

fn default_step() -> u32 {
    DEFAULT_STEP_MINUTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySetup {
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    #[serde(default = "default_timezone")]
    pub timezone: String,
    #[serde(default = "default_user")]
    pub user: String,
    #[serde(default = "default_power")]
    pub power_watts: f64,
    #[serde(default = "default_step")]
    pub step_minutes: u32,
    #[serde(default)]
    pub forecast: ForecastSetup,
}

impl Default for ReplaySetup {
    fn default() -> Self {
        Self {
            start: default_start(),
            timezone: default_timezone(),
            user: default_user(),
            power_watts: default_power(),
            step_minutes: default_step(),
            forecast: ForecastSetup::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceAction {
    LatchProgram,
    ClearLatch,
    PlugOn,
    PlugOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedTick {
    pub notified: Option<usize>,
    pub started: Option<usize>,
    pub expired: Option<usize>,
    pub start_failed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedReminder {
    pub slot_start_utc: String,
    pub state: ReminderState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedDevice {
    pub plug_on: Option<bool>,
    pub running: Option<bool>,
    pub program_latched: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayStep {
    /// Run the step only for this persona.
    #[serde(default)]
    pub only: Option<PersonaKind>,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub advance_minutes: Option<i64>,
    #[serde(default)]
    pub device: Option<DeviceAction>,
    #[serde(default)]
    pub tick: bool,
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub expect_tools: Option<Vec<ExpectedCall>>,
    #[serde(default)]
    pub expect_class: Option<ReplyClass>,
    #[serde(default)]
    pub expect_tick: Option<ExpectedTick>,
    #[serde(default)]
    pub expect_reminders: Option<Vec<ExpectedReminder>>,
    #[serde(default)]
    pub expect_device: Option<ExpectedDevice>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayScript {
    #[serde(default)]
    pub setup: ReplaySetup,
    pub steps: Vec<ReplayStep>,
}

impl ReplayScript {
    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ReplayError::Script(e.to_string()))?;
        let script = if value.is_array() {
            ReplayScript {
                setup: ReplaySetup::default(),
                steps: serde_json::from_value(value).map_err(|e| ReplayError::Script(e.to_string()))?,
            }
        } else {
            serde_json::from_value(value).map_err(|e| ReplayError::Script(e.to_string()))?
        };
        Ok(script)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ReplayError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub what: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub at: DateTime<Utc>,
    pub skipped: bool,
    pub actions: Vec<String>,
    pub user: Option<String>,
    pub reply: Option<String>,
    pub class: Option<ReplyClass>,
    pub tools: Vec<String>,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub persona: PersonaKind,
    pub steps: Vec<StepReport>,
    /// Largest number of non-system messages sent in one backend request.
    pub max_history_sent: usize,
    pub backend_calls: usize,
}

impl ReplayReport {
    pub fn mismatch_count(&self) -> usize {
        self.steps.iter().map(|s| s.mismatches.len()).sum()
    }

    pub fn passed(&self) -> bool {
        self.mismatch_count() == 0
    }

    /// Human-readable transcript with a diff under every failing step.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "replay persona={} steps={}", self.persona, self.steps.len());
        for s in &self.steps {
            let status = if s.skipped {
                "SKIP"
            } else if s.mismatches.is_empty() {
                "ok  "
            } else {
                "FAIL"
            };
            let _ = writeln!(out, "[{:>2}] {status} {}", s.index, iso_utc(s.at));
            for a in &s.actions {
                let _ = writeln!(out, "       {a}");
            }
            if let Some(u) = &s.user {
                let _ = writeln!(out, "       user: {u}");
                let _ = writeln!(out, "       tools: [{}]", s.tools.join(", "));
                let class = s.class.map(|c| c.as_str()).unwrap_or("-");
                let _ = writeln!(out, "       class: {class}");
            }
            if let Some(r) = &s.reply {
                for line in r.lines() {
                    let _ = writeln!(out, "       | {line}");
                }
            }
            for m in &s.mismatches {
                let _ = writeln!(out, "       mismatch in {}", m.what);
                let _ = writeln!(out, "       - expected: {}", m.expected);
                let _ = writeln!(out, "       + actual:   {}", m.actual);
            }
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "result: {verdict} ({} mismatches, max history {})",
            self.mismatch_count(),
            self.max_history_sent
        );
        out
    }
}

/// Counts backend traffic on the way through.
struct Recording<'a> {
    inner: &'a mut dyn ChatBackend,
    max_history: usize,
    calls: usize,
}

impl ChatBackend for Recording<'_> {
    fn complete(&mut self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        self.calls += 1;
        self.max_history = self.max_history.max(request.non_system_len());
        self.inner.complete(request)
    }
}

/// Optional overrides applied on top of a script's own setup.
#[derive(Debug, Clone, Default)]
pub struct ReplayOverrides {
    pub start: Option<DateTime<Utc>>,
    pub forecast: Option<ForecastSeries>,
}

pub fn run_replay(
    script: &ReplayScript,
    persona: PersonaKind,
    backend: &mut dyn ChatBackend,
    overrides: &ReplayOverrides,
) -> Result<ReplayReport, ReplayError> {
    let setup = &script.setup;
    parse_tz(&setup.timezone).map_err(ReplayError::Setup)?;
    let start = overrides.start.unwrap_or(setup.start);
    let series = match &overrides.forecast {
        Some(s) => s.clone(),
        None => setup.forecast.build(start)?,
    };
    let forecast = FixedForecast(series);
    let clock = VirtualClock::new(start);
    let household = Mutex::new(Household::in_memory());
    let user = UserId(setup.user.clone());
    let profile = UserProfile {
        id: user.clone(),
        display_name: setup.user.clone(),
        timezone: setup.timezone.clone(),
        persona,
        default_power_watts: setup.power_watts,
    };
    let mut session = ChatSession::new(user.clone(), persona);
    let mut recording = Recording {
        inner: backend,
        max_history: 0,
        calls: 0,
    };

    let mut reports = Vec::with_capacity(script.steps.len());
    for (i, step) in script.steps.iter().enumerate() {
        let mut report = StepReport {
            index: i + 1,
            at: clock.now(),
            skipped: false,
            actions: Vec::new(),
            user: None,
            reply: None,
            class: None,
            tools: Vec::new(),
            mismatches: Vec::new(),
        };
        if step.only.is_some_and(|p| p != persona) {
            report.skipped = true;
            reports.push(report);
            continue;
        }
        if let Some(note) = &step.note {
            report.actions.push(format!("note: {note}"));
        }
        if let Some(m) = step.advance_minutes {
            let now = clock.advance(Duration::minutes(m));
            report.actions.push(format!("clock +{m}m -> {}", iso_utc(now)));
        }
        report.at = clock.now();
        let now = clock.now();

        if let Some(action) = step.device {
            let mut home = household.lock().expect("household lock");
            let appliance = home.appliance(&user, now);
            let result = match action {
                DeviceAction::LatchProgram => Ok(appliance.latch_program(now)),
                DeviceAction::ClearLatch => Ok(appliance.clear_latch(now)),
                DeviceAction::PlugOn => appliance.plug_on(now),
                DeviceAction::PlugOff => appliance.plug_off(now),
            };
            match result {
                Ok(_) => report.actions.push(format!("device {action:?}")),
                Err(e) => report.actions.push(format!("device {action:?} failed: {e}")),
            }
        }

        let mut tick_events = Vec::new();
        if step.tick {
            tick_events = household.lock().expect("household lock").tick(now);
            report.actions.push(format!("tick: {}", summarize_tick(&tick_events)));
        }

        if let Some(text) = &step.user {
            report.user = Some(text.clone());
            let env = ToolEnv {
                profile: &profile,
                now,
                forecast: &forecast,
                step_minutes: setup.step_minutes,
                household: &household,
            };
            match run_turn(&mut session, text, &mut recording, &env) {
                Ok(outcome) => {
                    report.reply = Some(outcome.text.clone());
                    report.class = outcome.tags.class;
                    report.tools = outcome.tool_calls.iter().map(describe_call).collect();
                    check_tools(step, &outcome.tool_calls, &mut report.mismatches);
                    if let Some(expected) = step.expect_class {
                        if outcome.tags.class != Some(expected) {
                            report.mismatches.push(Mismatch {
                                what: "reply class".into(),
                                expected: expected.to_string(),
                                actual: outcome
                                    .tags
                                    .class
                                    .map(|c| c.to_string())
                                    .unwrap_or_else(|| "untagged".into()),
                            });
                        }
                    }
                }
                Err(e) => report.mismatches.push(Mismatch {
                    what: "turn".into(),
                    expected: "a reply".into(),
                    actual: e.to_string(),
                }),
            }
        }

        if let Some(expected) = &step.expect_tick {
            check_tick(expected, &tick_events, &mut report.mismatches);
        }
        if let Some(expected) = &step.expect_reminders {
            let home = household.lock().expect("household lock");
            let actual: Vec<String> = home
                .reminders
                .for_user(&user)
                .iter()
                .map(|r| format!("{} {}", iso_utc(r.slot_start), r.state.as_str()))
                .collect();
            let wanted: Vec<String> = expected
                .iter()
                .map(|r| format!("{} {}", r.slot_start_utc, r.state.as_str()))
                .collect();
            if actual != wanted {
                report.mismatches.push(Mismatch {
                    what: "reminders".into(),
                    expected: format!("[{}]", wanted.join(", ")),
                    actual: format!("[{}]", actual.join(", ")),
                });
            }
        }
        if let Some(expected) = &step.expect_device {
            let state = household.lock().expect("household lock").device_state(&user, now);
            let checks = [
                ("plug_on", expected.plug_on, state.plug_on),
                ("running", expected.running, state.running),
                ("program_latched", expected.program_latched, state.program_latched),
            ];
            for (what, want, got) in checks {
                if let Some(want) = want {
                    if want != got {
                        report.mismatches.push(Mismatch {
                            what: format!("device {what}"),
                            expected: want.to_string(),
                            actual: got.to_string(),
                        });
                    }
                }
            }
        }
        reports.push(report);
    }

    Ok(ReplayReport {
        persona,
        steps: reports,
        max_history_sent: recording.max_history,
        backend_calls: recording.calls,
    })
}

/// Tool name with its arguments, leaving out generated identifiers so the
/// transcript is stable across runs.
fn describe_call(call: &ToolCall) -> String {
    let mut args = call.arguments.clone();
    if let Some(obj) = args.as_object_mut() {
        if obj.contains_key("id") {
            obj.insert("id".into(), Value::String("<id>".into()));
        }
    }
    match args.as_object() {
        Some(obj) if !obj.is_empty() => format!("{}({args})", call.name),
        _ => call.name.clone(),
    }
}

fn check_tools(step: &ReplayStep, calls: &[ToolCall], out: &mut Vec<Mismatch>) {
    let Some(expected) = &step.expect_tools else {
        return;
    };
    let names: Vec<&str> = calls.iter().map(|c| c.name.as_str()).collect();
    let wanted: Vec<&str> = expected.iter().map(|c| c.name.as_str()).collect();
    if names != wanted {
        out.push(Mismatch {
            what: "tool calls".into(),
            expected: format!("[{}]", wanted.join(", ")),
            actual: format!("[{}]", names.join(", ")),
        });
        return;
    }
    for (exp, call) in expected.iter().zip(calls) {
        if let Some(args) = &exp.arguments {
            if !is_subset(args, &call.arguments) {
                out.push(Mismatch {
                    what: format!("{} arguments", call.name),
                    expected: args.to_string(),
                    actual: call.arguments.to_string(),
                });
            }
        }
    }
}

/// Every key of `expected` is present in `actual` with an equal value.
/// Numbers compare by value, so `60` matches `60.0`.
pub fn is_subset(expected: &Value, actual: &Value) -> bool {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => e.iter().all(|(k, v)| a.get(k).is_some_and(|av| is_subset(v, av))),
        (Value::Number(e), Value::Number(a)) => e.as_f64() == a.as_f64(),
        (e, a) => e == a,
    }
}

fn summarize_tick(events: &[TickEvent]) -> String {
    let (mut n, mut s, mut e, mut f) = (0, 0, 0, 0);
    for ev in events {
        match ev {
            TickEvent::Notified(_) => n += 1,
            TickEvent::Started(_) => s += 1,
            TickEvent::Expired(_) => e += 1,
            TickEvent::StartFailed { .. } => f += 1,
        }
    }
    format!("notified={n} started={s} expired={e} start_failed={f}")
}

fn check_tick(expected: &ExpectedTick, events: &[TickEvent], out: &mut Vec<Mismatch>) {
    let count = |pred: fn(&TickEvent) -> bool| events.iter().filter(|e| pred(e)).count();
    let checks = [
        (
            "notified",
            expected.notified,
            count(|e| matches!(e, TickEvent::Notified(_))),
        ),
        (
            "started",
            expected.started,
            count(|e| matches!(e, TickEvent::Started(_))),
        ),
        (
            "expired",
            expected.expired,
            count(|e| matches!(e, TickEvent::Expired(_))),
        ),
        (
            "start_failed",
            expected.start_failed,
            count(|e| matches!(e, TickEvent::StartFailed { .. })),
        ),
    ];
    for (what, want, got) in checks {
        if let Some(want) = want {
            if want != got {
                out.push(Mismatch {
                    what: format!("tick {what}"),
                    expected: want.to_string(),
                    actual: got.to_string(),
                });
            }
        }
    }
}
