//! Tool descriptors offered to the language model and their server-side
//! implementations.
//!
//! `get_timewindows` mirrors the published descriptor field for field. The
//! remaining tools are reconstructed from the capabilities the general
//! prompt describes.

use std::collections::BTreeMap;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::ToolCall;
use crate::forecast::{ForecastError, ForecastSeries};
use crate::household::Household;
use crate::localtime::{iso_local, iso_utc, parse_tz};
use crate::reminders::{Reminder, ReminderId, UserId};
use crate::scheduler::{
    best_solar_time, enumerate_windows, quality_for, required_energy, window_energy, LaundryRequest, Quality,
    TimeWindow, ENERGY_EPSILON_WH,
};

use super::prompt::PersonaKind;

pub const GET_TIMEWINDOWS: &str = "get_timewindows";
pub const SCHEDULE_NOTIFICATION: &str = "schedule_notification";
pub const LIST_NOTIFICATIONS: &str = "list_notifications";
pub const DELETE_NOTIFICATION: &str = "delete_notification";
pub const CONFIRM_NOTIFICATION: &str = "confirm_notification";
pub const PLUG_ON: &str = "plug_on";
pub const PLUG_OFF: &str = "plug_off";
pub const BEST_SOLAR_TIME: &str = "best_solar_time";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Integer,
    String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub kind: ParamType,
    pub description: String,
    pub required: bool,
}

/// A function the model may call, serialized in the chat-completions
/// `{"type": "function", "function": {...}}` form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "WireTool", try_from = "WireTool")]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl ToolDescriptor {
    fn new(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            parameters: BTreeMap::new(),
        }
    }

    fn param(mut self, name: &str, kind: ParamType, description: &str, required: bool) -> Self {
        self.parameters.insert(
            name.to_string(),
            ParamSpec {
                kind,
                description: description.to_string(),
                required,
            },
        );
        self
    }
}

#[derive(Serialize, Deserialize)]
struct WireTool {
    #[serde(rename = "type")]
    kind: String,
    function: WireFunction,
}

#[derive(Serialize, Deserialize)]
struct WireFunction {
    name: String,
    description: String,
    parameters: WireParams,
}

#[derive(Serialize, Deserialize)]
struct WireParams {
    #[serde(rename = "type")]
    kind: String,
    properties: BTreeMap<String, WireProp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    required: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct WireProp {
    #[serde(rename = "type")]
    kind: ParamType,
    description: String,
}

impl From<ToolDescriptor> for WireTool {
    fn from(d: ToolDescriptor) -> Self {
        let required = d
            .parameters
            .iter()
            .filter(|(_, p)| p.required)
            .map(|(n, _)| n.clone())
            .collect();
        let properties = d
            .parameters
            .into_iter()
            .map(|(n, p)| {
                (
                    n,
                    WireProp {
                        kind: p.kind,
                        description: p.description,
                    },
                )
            })
            .collect();
        WireTool {
            kind: "function".into(),
            function: WireFunction {
                name: d.name,
                description: d.description,
                parameters: WireParams {
                    kind: "object".into(),
                    properties,
                    required,
                },
            },
        }
    }
}

impl TryFrom<WireTool> for ToolDescriptor {
    type Error = String;

    fn try_from(w: WireTool) -> Result<Self, Self::Error> {
        if w.kind != "function" {
            return Err(format!("unsupported tool type {:?}", w.kind));
        }
        if w.function.parameters.kind != "object" {
            return Err("tool parameters must be an object".into());
        }
        let required = w.function.parameters.required;
        let parameters = w
            .function
            .parameters
            .properties
            .into_iter()
            .map(|(n, p)| {
                let spec = ParamSpec {
                    kind: p.kind,
                    description: p.description,
                    required: required.contains(&n),
                };
                (n, spec)
            })
            .collect();
        Ok(ToolDescriptor {
            name: w.function.name,
            description: w.function.description,
            parameters,
        })
    }
}

/// Every tool the agent exposes, in a stable order.
pub fn tool_descriptors() -> Vec<ToolDescriptor> {
    use ParamType::*;
    vec![
        ToolDescriptor::new(
            GET_TIMEWINDOWS,
            "Return the list of time windows for scheduling a laundry cycle, based on the forecasted solar energy production.",
        )
        .param("power", Integer, "The power of the laundry machine in watts", false)
        .param("duration_minutes", Integer, "The duration of the laundry cycle in minutes", false),
        ToolDescriptor::new(
            SCHEDULE_NOTIFICATION,
            "Book a laundry slot and schedule a notification before it starts. The slot start must be converted to UTC.",
        )
        .param("slot_start_utc", String, "Start of the laundry slot as an ISO-8601 UTC timestamp", true)
        .param("duration_minutes", Integer, "The duration of the laundry cycle in minutes", true)
        .param("lead_minutes", Integer, "Minutes before the slot start at which to notify the user (0-60)", false),
        ToolDescriptor::new(
            LIST_NOTIFICATIONS,
            "Return the user's active laundry notifications and the recently expired ones.",
        ),
        ToolDescriptor::new(DELETE_NOTIFICATION, "Delete one of the user's laundry notifications.")
            .param("id", String, "The identifier of the notification", true),
        ToolDescriptor::new(
            CONFIRM_NOTIFICATION,
            "Confirm a notified laundry slot so the washing machine starts automatically at the slot start.",
        )
        .param("id", String, "The identifier of the notification", true),
        ToolDescriptor::new(
            PLUG_ON,
            "Turn on the smart plug of the washing machine, starting the program selected on the machine.",
        ),
        ToolDescriptor::new(PLUG_OFF, "Turn off the smart plug of the washing machine, stopping it."),
        ToolDescriptor::new(
            BEST_SOLAR_TIME,
            "Return the time of highest forecasted solar energy production in the next 3 days and the forecasted power.",
        ),
    ]
}

/// A user as the agent sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: UserId,
    pub display_name: String,
    pub timezone: String,
    pub persona: PersonaKind,
    pub default_power_watts: f64,
}

impl UserProfile {
    pub fn tz(&self) -> Result<Tz, String> {
        parse_tz(&self.timezone)
    }
}

/// Supplies the forecast the tools evaluate windows against.
pub trait ForecastProvider: Send + Sync {
    fn forecast(&self, user: &UserProfile, now: DateTime<Utc>) -> Result<ForecastSeries, ForecastError>;
}

/// The same series for everyone; windows are still limited to the horizon
/// from `now` by the scheduler.
#[derive(Debug, Clone)]
pub struct FixedForecast(pub ForecastSeries);

impl ForecastProvider for FixedForecast {
    fn forecast(&self, _: &UserProfile, _: DateTime<Utc>) -> Result<ForecastSeries, ForecastError> {
        Ok(self.0.clone())
    }
}

/// What a tool execution may read and mutate.
pub struct ToolEnv<'a> {
    pub profile: &'a UserProfile,
    pub now: DateTime<Utc>,
    pub forecast: &'a dyn ForecastProvider,
    pub step_minutes: u32,
    pub household: &'a Mutex<Household>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ToolError(pub String);

impl ToolError {
    fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Deserialize)]
struct WindowArgs {
    power: Option<f64>,
    duration_minutes: Option<f64>,
}

#[derive(Deserialize)]
struct ScheduleArgs {
    slot_start_utc: String,
    duration_minutes: f64,
    #[serde(default)]
    lead_minutes: Option<f64>,
}

#[derive(Deserialize)]
struct IdArgs {
    id: String,
}

fn args<T: for<'de> Deserialize<'de>>(call: &ToolCall) -> Result<T, ToolError> {
    let value = if call.arguments.is_null() {
        json!({})
    } else {
        call.arguments.clone()
    };
    serde_json::from_value(value).map_err(|e| ToolError::new(format!("invalid arguments for {}: {e}", call.name)))
}

fn whole_minutes(v: f64, what: &str) -> Result<u32, ToolError> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(ToolError::new(format!(
            "{what} must be a non-negative whole number of minutes"
        )))
    }
}

impl ToolEnv<'_> {
    fn tz(&self) -> Result<Tz, ToolError> {
        self.profile.tz().map_err(ToolError)
    }

    fn series(&self) -> Result<ForecastSeries, ToolError> {
        self.forecast
            .forecast(self.profile, self.now)
            .map_err(|e| ToolError::new(format!("forecast unavailable: {e}")))
    }

    fn household(&self) -> std::sync::MutexGuard<'_, Household> {
        self.household.lock().expect("household lock poisoned")
    }
}

/// Runs one tool call. Failures come back as [`ToolError`] so the caller
/// can hand them to the model as a tool result.
pub fn execute_tool(call: &ToolCall, env: &ToolEnv<'_>) -> Result<Value, ToolError> {
    match call.name.as_str() {
        GET_TIMEWINDOWS => get_timewindows(call, env),
        SCHEDULE_NOTIFICATION => schedule_notification(call, env),
        LIST_NOTIFICATIONS => list_notifications(env),
        DELETE_NOTIFICATION => {
            let a: IdArgs = args(call)?;
            let removed = env
                .household()
                .reminders
                .delete(&ReminderId(a.id), &env.profile.id)
                .map_err(|e| ToolError::new(e.to_string()))?;
            Ok(json!({ "deleted": reminder_json(&removed, env.tz()?) }))
        }
        CONFIRM_NOTIFICATION => {
            let a: IdArgs = args(call)?;
            let confirmed = env
                .household()
                .reminders
                .confirm(&ReminderId(a.id), &env.profile.id)
                .map_err(|e| ToolError::new(e.to_string()))?;
            Ok(json!({ "confirmed": reminder_json(&confirmed, env.tz()?) }))
        }
        PLUG_ON | PLUG_OFF => {
            let mut home = env.household();
            let appliance = home.appliance(&env.profile.id, env.now);
            let state = if call.name == PLUG_ON {
                appliance.plug_on(env.now)
            } else {
                appliance.plug_off(env.now)
            }
            .map_err(|e| ToolError::new(e.to_string()))?;
            Ok(json!({
                "plug_on": state.plug_on,
                "running": state.running,
                "program_latched": state.program_latched,
            }))
        }
        BEST_SOLAR_TIME => {
            let tz = env.tz()?;
            let series = env.series()?;
            let (at, watts) = best_solar_time(&series, env.now).map_err(|e| ToolError::new(e.to_string()))?;
            Ok(json!({
                "time_local": iso_local(at, tz),
                "time_utc": iso_utc(at),
                "power_watts": watts.round(),
            }))
        }
        other => Err(ToolError::new(format!("unknown tool {other:?}"))),
    }
}

fn window_json(w: &TimeWindow, tz: Tz) -> Value {
    json!({
        "start_local": iso_local(w.start, tz),
        "end_local": iso_local(w.end(), tz),
        "start_utc": iso_utc(w.start),
        "production_wh": round1(w.production_wh),
        "ratio": (w.ratio * 1000.0).round() / 1000.0,
        "quality": w.quality,
        "exceeds_required": w.exceeds_required,
    })
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn laundry_request(env: &ToolEnv<'_>, power: Option<f64>, duration: u32) -> Result<LaundryRequest, ToolError> {
    let power = power.unwrap_or(env.profile.default_power_watts);
    LaundryRequest::new(power, duration).map_err(|e| ToolError::new(e.to_string()))
}

fn get_timewindows(call: &ToolCall, env: &ToolEnv<'_>) -> Result<Value, ToolError> {
    let a: WindowArgs = args(call)?;
    let duration = a
        .duration_minutes
        .ok_or_else(|| ToolError::new("duration_minutes is required"))?;
    let req = laundry_request(env, a.power, whole_minutes(duration, "duration_minutes")?)?;
    let tz = env.tz()?;
    let series = env.series()?;
    let ranked =
        enumerate_windows(&series, &req, env.now, env.step_minutes).map_err(|e| ToolError::new(e.to_string()))?;
    Ok(json!({
        "timezone": env.profile.timezone,
        "power_watts": req.power_watts,
        "duration_minutes": req.duration_minutes,
        "required_energy_wh": round1(required_energy(&req)),
        "best": window_json(ranked.best(), tz),
        "windows": ranked.windows().iter().map(|w| window_json(w, tz)).collect::<Vec<_>>(),
    }))
}

/// Production and label of an arbitrary slot, relative to the best window
/// of the same length.
pub fn evaluate_slot(
    series: &ForecastSeries,
    req: &LaundryRequest,
    start: DateTime<Utc>,
    now: DateTime<Utc>,
    step_minutes: u32,
) -> (f64, Quality, bool) {
    let production = window_energy(series, start, req.duration_minutes);
    let best = enumerate_windows(series, req, now, step_minutes)
        .map(|r| r.best().production_wh)
        .unwrap_or(0.0)
        .max(production);
    let exceeds = best > ENERGY_EPSILON_WH && production + ENERGY_EPSILON_WH >= required_energy(req);
    (production, quality_for(production, best), exceeds)
}

fn schedule_notification(call: &ToolCall, env: &ToolEnv<'_>) -> Result<Value, ToolError> {
    let a: ScheduleArgs = args(call)?;
    let start = crate::forecast::parse_timestamp(&a.slot_start_utc)
        .ok_or_else(|| ToolError::new(format!("cannot parse slot_start_utc {:?}", a.slot_start_utc)))?;
    let duration = whole_minutes(a.duration_minutes, "duration_minutes")?;
    let lead = whole_minutes(a.lead_minutes.unwrap_or(0.0), "lead_minutes")?;
    if start <= env.now {
        return Err(ToolError::new(
            "cannot schedule a notification in the past; ask the user for a future time",
        ));
    }
    let req = laundry_request(env, None, duration)?;
    let tz = env.tz()?;
    let series = env.series()?;
    let (production, quality, exceeds) = evaluate_slot(&series, &req, start, env.now, env.step_minutes);
    let reminder = env
        .household()
        .reminders
        .schedule(&env.profile.id, start, duration, lead, quality, env.now)
        .map_err(|e| ToolError::new(e.to_string()))?;
    let mut out = reminder_json(&reminder, tz);
    out["production_wh"] = json!(round1(production));
    out["exceeds_required"] = json!(exceeds);
    Ok(out)
}

fn reminder_json(r: &Reminder, tz: Tz) -> Value {
    json!({
        "id": r.id,
        "slot_start_local": iso_local(r.slot_start, tz),
        "slot_start_utc": iso_utc(r.slot_start),
        "notify_at_local": iso_local(r.notify_at(), tz),
        "duration_minutes": r.duration_minutes,
        "lead_minutes": r.lead_minutes,
        "state": r.state,
        "quality": r.quality_at_booking,
    })
}

fn list_notifications(env: &ToolEnv<'_>) -> Result<Value, ToolError> {
    let tz = env.tz()?;
    let listing = env.household().reminders.list(&env.profile.id, env.now);
    Ok(json!({
        "active": listing.active.iter().map(|r| reminder_json(r, tz)).collect::<Vec<_>>(),
        "recently_expired": listing.recently_expired.iter().map(|r| reminder_json(r, tz)).collect::<Vec<_>>(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let tools = tool_descriptors();
        let mut names: Vec<_> = tools.iter().map(|t| t.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), tools.len());
    }

    #[test]
    fn get_timewindows_has_two_integer_params() {
        let d = &tool_descriptors()[0];
        assert_eq!(d.name, GET_TIMEWINDOWS);
        let names: Vec<_> = d.parameters.keys().map(String::as_str).collect();
        assert_eq!(names, vec!["duration_minutes", "power"]);
        assert!(d
            .parameters
            .values()
            .all(|p| p.kind == ParamType::Integer && !p.required));
    }

    #[test]
    fn descriptors_round_trip_through_json() {
        for d in tool_descriptors() {
            let text = serde_json::to_string(&d).unwrap();
            let back: ToolDescriptor = serde_json::from_str(&text).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn required_list_only_when_needed() {
        let v = serde_json::to_value(&tool_descriptors()[0]).unwrap();
        assert!(v["function"]["parameters"].get("required").is_none());
        let v = serde_json::to_value(&tool_descriptors()[1]).unwrap();
        assert_eq!(
            v["function"]["parameters"]["required"],
            json!(["duration_minutes", "slot_start_utc"])
        );
    }

    #[test]
    fn whole_minutes_rejects_fractions() {
        assert_eq!(whole_minutes(60.0, "d").unwrap(), 60);
        assert!(whole_minutes(1.5, "d").is_err());
        assert!(whole_minutes(-1.0, "d").is_err());
    }
}
