//! Deterministic stand-in for the remote language model.
//!
//! The mock sees exactly what a real model would: the system prompt, the
//! truncated history and the tool list. It keeps no state between calls.
//! The user's timezone and the current instant are read back from the
//! rendered system prompt, and earlier decisions are recovered from the
//! [`ReplyTags`] headers of its own previous replies.
//!
//! Scheduling follows the conversation blueprint: fetch windows, compliment
//! and book a good choice, counter-suggest anything else, and book with a
//! regretful reply once the user has insisted often enough for the persona.

use std::sync::OnceLock;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;
use regex::Regex;
use serde_json::{json, Map, Value};

use super::prompt::{PersonaKind, NOW_FORMAT};
use super::tags::{ReplyClass, ReplyTags, Sentiment};
use super::tools::{
    BEST_SOLAR_TIME, CONFIRM_NOTIFICATION, DELETE_NOTIFICATION, GET_TIMEWINDOWS, LIST_NOTIFICATIONS, PLUG_OFF, PLUG_ON,
    SCHEDULE_NOTIFICATION,
};
use super::{BackendError, BackendReply, BackendRequest, ChatBackend, ChatMessage, Role, ToolCall};
use crate::forecast::{parse_timestamp, HORIZON_HOURS};
use crate::localtime::{clock, human, iso_utc, parse_tz};

const DEFAULT_DURATION_MINUTES: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConversationPolicy {
    pub persona: PersonaKind,
    /// Counter-suggestions the user must push past before a non-optimal
    /// slot is booked.
    pub insistence_required: usize,
}

impl ConversationPolicy {
    pub fn for_persona(persona: PersonaKind) -> Self {
        let insistence_required = match persona {
            PersonaKind::Traditional => 1,
            PersonaKind::Personified => 2,
        };
        Self {
            persona,
            insistence_required,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    policy: ConversationPolicy,
}

impl MockBackend {
    pub fn new(policy: ConversationPolicy) -> Self {
        Self { policy }
    }

    pub fn for_persona(persona: PersonaKind) -> Self {
        Self::new(ConversationPolicy::for_persona(persona))
    }

    pub fn policy(&self) -> ConversationPolicy {
        self.policy
    }
}

impl ChatBackend for MockBackend {
    fn complete(&mut self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let ctx = Context::from_request(request)?;
        Ok(Responder {
            policy: self.policy,
            ctx,
            request,
        }
        .respond())
    }
}

struct Context {
    tz: Tz,
    now: DateTime<Utc>,
}

impl Context {
    fn from_request(request: &BackendRequest) -> Result<Self, BackendError> {
        let prompt = &request.system_prompt;
        let tz_name = between(prompt, "timezone is ", ".\n")
            .ok_or_else(|| BackendError::Protocol("system prompt names no timezone".into()))?;
        let tz = parse_tz(tz_name).map_err(BackendError::Protocol)?;
        let now_text = between(prompt, "Today's datetime is ", " UTC")
            .ok_or_else(|| BackendError::Protocol("system prompt carries no datetime".into()))?;
        let now = chrono::NaiveDateTime::parse_from_str(now_text, NOW_FORMAT)
            .map_err(|e| BackendError::Protocol(format!("bad datetime in prompt: {e}")))?
            .and_utc();
        Ok(Self { tz, now })
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(&text[from..from + len])
}

#[derive(Debug, Clone, PartialEq)]
enum Target {
    /// A wall-clock time in the user's zone, optionally a number of days ahead.
    Local {
        time: NaiveTime,
        days_ahead: Option<i64>,
    },
    Relative(i64),
    Suggested,
    Insisted,
}

#[derive(Debug, Clone, PartialEq)]
enum Intent {
    HorizonRefusal,
    Explain,
    Intro,
    Confirm,
    Delete,
    PlugOff,
    PlugOn,
    List,
    Solar,
    Book {
        target: Target,
        duration: Option<u32>,
        power: Option<u32>,
        lead: u32,
    },
    Recommend {
        duration: Option<u32>,
        power: Option<u32>,
    },
    Clarify,
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn word_number(w: &str) -> Option<i64> {
    let n = match w {
        "one" | "a" | "an" => 1,
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        _ => return w.parse().ok(),
    };
    Some(n)
}

fn has_any(text: &str, needles: &[&str]) -> bool {
    needles.iter().any(|n| text.contains(n))
}

fn days_ahead_requested(text: &str) -> Option<i64> {
    static DAYS: OnceLock<Regex> = OnceLock::new();
    let r = re(
        &DAYS,
        r"\b(\d+|one|two|three|four|five|six|seven|eight|nine|ten)\s+days?\b",
    );
    let from_days = r.captures(text).and_then(|c| word_number(&c[1]));
    if text.contains("next week") || text.contains("in a week") {
        return Some(7);
    }
    from_days
}

/// Days between the local date of `now` and an ISO date in the text.
fn date_days_ahead(text: &str, today: NaiveDate) -> Option<i64> {
    static DATE: OnceLock<Regex> = OnceLock::new();
    let c = re(&DATE, r"\b(\d{4})-(\d{2})-(\d{2})\b").captures(text)?;
    let date = NaiveDate::from_ymd_opt(c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?)?;
    Some((date - today).num_days())
}

fn parse_lead(text: &str) -> (u32, String) {
    static LEAD: OnceLock<Regex> = OnceLock::new();
    let r = re(
        &LEAD,
        r"(\d+)\s*(?:minutes|minute|mins|min)\s+(?:before|earlier|ahead|in advance)",
    );
    match r.captures(text) {
        Some(c) => {
            let lead = c[1].parse().unwrap_or(0);
            (lead, r.replace(text, " ").into_owned())
        }
        None => (0, text.to_string()),
    }
}

fn parse_target(text: &str) -> (Option<Target>, String) {
    static CLOCK: OnceLock<Regex> = OnceLock::new();
    static MERIDIEM: OnceLock<Regex> = OnceLock::new();
    static RELATIVE: OnceLock<Regex> = OnceLock::new();
    let days_ahead = if text.contains("tomorrow") { Some(1) } else { None };

    let clock_re = re(&CLOCK, r"\b(\d{1,2})[:.](\d{2})\s*(am|pm)?\b");
    if let Some(c) = clock_re.captures(text) {
        let mut h: u32 = c[1].parse().unwrap_or(99);
        let m: u32 = c[2].parse().unwrap_or(99);
        match c.get(3).map(|m| m.as_str()) {
            Some("pm") if h < 12 => h += 12,
            Some("am") if h == 12 => h = 0,
            _ => {}
        }
        if let Some(time) = NaiveTime::from_hms_opt(h, m, 0) {
            return (
                Some(Target::Local { time, days_ahead }),
                clock_re.replace(text, " ").into_owned(),
            );
        }
    }
    let mer_re = re(&MERIDIEM, r"\b(\d{1,2})\s*(am|pm)\b");
    if let Some(c) = mer_re.captures(text) {
        let mut h: u32 = c[1].parse().unwrap_or(99);
        match &c[2] {
            "pm" if h < 12 => h += 12,
            "am" if h == 12 => h = 0,
            _ => {}
        }
        if let Some(time) = NaiveTime::from_hms_opt(h, 0, 0) {
            return (
                Some(Target::Local { time, days_ahead }),
                mer_re.replace(text, " ").into_owned(),
            );
        }
    }
    let rel_re = re(
        &RELATIVE,
        r"\bin\s+(\d+|one|two|three|four|five|ten)\s*(minutes|minute|mins|min|hours|hour)\b",
    );
    if let Some(c) = rel_re.captures(text) {
        if let Some(n) = word_number(&c[1]) {
            let minutes = if c[2].starts_with("hour") { n * 60 } else { n };
            return (Some(Target::Relative(minutes)), rel_re.replace(text, " ").into_owned());
        }
    }
    (None, text.to_string())
}

fn parse_duration(text: &str) -> Option<u32> {
    static HOURS: OnceLock<Regex> = OnceLock::new();
    static MINUTES: OnceLock<Regex> = OnceLock::new();
    if text.contains("half an hour") {
        return Some(30);
    }
    let h = re(
        &HOURS,
        r"\b(\d+(?:\.\d+)?|an|one|two|three)\s*(?:h|hr|hrs|hour|hours)\b",
    );
    if let Some(c) = h.captures(text) {
        let hours: f64 = match &c[1] {
            "an" | "one" => 1.0,
            "two" => 2.0,
            "three" => 3.0,
            n => n.parse().ok()?,
        };
        return Some((hours * 60.0).round() as u32);
    }
    let m = re(&MINUTES, r"\b(\d+)\s*(?:m|min|mins|minute|minutes)\b");
    m.captures(text).and_then(|c| c[1].parse().ok())
}

fn parse_power(text: &str) -> Option<u32> {
    static POWER: OnceLock<Regex> = OnceLock::new();
    let r = re(&POWER, r"\b(\d+(?:\.\d+)?)\s*(kw|w|watts|watt)\b");
    let c = r.captures(text)?;
    let value: f64 = c[1].parse().ok()?;
    let watts = if &c[2] == "kw" { value * 1000.0 } else { value };
    Some(watts.round() as u32)
}

fn classify_intent(raw: &str) -> Intent {
    let text = raw.to_lowercase();
    if days_ahead_requested(&text).is_some_and(|d| d * 24 > HORIZON_HOURS) {
        return Intent::HorizonRefusal;
    }
    if has_any(
        &text,
        &["how do you", "how can you", "where do you get", "how does it work"],
    ) && has_any(&text, &["forecast", "data", "know", "work", "predict"])
    {
        return Intent::Explain;
    }
    if has_any(
        &text,
        &[
            "who are you",
            "what can you do",
            "who am i talking",
            "your name",
            "capabilit",
        ],
    ) {
        return Intent::Intro;
    }
    if text.contains("confirm") {
        return Intent::Confirm;
    }
    let about_bookings = has_any(&text, &["notification", "reminder", "booking", "slots"]);
    if has_any(&text, &["delete", "remove", "cancel"]) && (about_bookings || text.contains("laundry")) {
        return Intent::Delete;
    }
    if has_any(&text, &["stop", "turn off", "switch off"]) {
        return Intent::PlugOff;
    }

    let (lead, rest) = parse_lead(&text);
    let (target, rest) = parse_target(&rest);
    let duration = parse_duration(&rest);
    let power = parse_power(&rest);

    if target.is_none()
        && has_any(&text, &["start", "turn on", "switch on"])
        && has_any(&text, &["machine", "plug", "washer", "laundry"])
    {
        return Intent::PlugOn;
    }
    if target.is_none()
        && about_bookings
        && has_any(
            &text,
            &["show", "list", "check", "upcoming", "what are", "see my", "my "],
        )
    {
        return Intent::List;
    }
    if has_any(
        &text,
        &["solar production", "solar energy production", "most sun", "sunniest"],
    ) && !has_any(&text, &["wash", "laundry", "cycle"])
    {
        return Intent::Solar;
    }
    let target = target.or_else(|| {
        if has_any(
            &text,
            &["insist", "anyway", "still want", "really want", "do it", "i don't care"],
        ) {
            Some(Target::Insisted)
        } else if has_any(
            &text,
            &[
                "suggested",
                "you suggest",
                "recommended",
                "best time you",
                "that slot",
                "that time",
                "the best one",
                "best slot",
            ],
        ) {
            Some(Target::Suggested)
        } else {
            None
        }
    });
    if let Some(target) = target {
        return Intent::Book {
            target,
            duration,
            power,
            lead,
        };
    }
    if has_any(&text, &["wash", "laundry", "cycle", "best time", "when should"]) {
        return Intent::Recommend { duration, power };
    }
    Intent::Clarify
}

struct Responder<'a> {
    policy: ConversationPolicy,
    ctx: Context,
    request: &'a BackendRequest,
}

/// Outputs of tools executed since the latest user message.
struct TurnResults {
    results: Vec<(String, Value)>,
}

impl TurnResults {
    fn get(&self, name: &str) -> Option<&Value> {
        self.results.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

fn lead_phrase(lead: u64) -> String {
    match lead {
        0 => "when the slot starts".to_string(),
        1 => "1 minute before it starts".to_string(),
        n => format!("{n} minutes before it starts"),
    }
}

fn wh(v: &Value) -> String {
    format!("{:.0}", v.as_f64().unwrap_or(0.0))
}

fn exceeds_phrase(exceeds: bool) -> &'static str {
    if exceeds {
        "exceeds"
    } else {
        "does not exceed"
    }
}

impl Responder<'_> {
    fn personified(&self) -> bool {
        self.policy.persona == PersonaKind::Personified
    }

    fn sentiment(&self, mood: Sentiment) -> Sentiment {
        if self.personified() {
            mood
        } else {
            Sentiment::Neutral
        }
    }

    fn text(&self, tags: ReplyTags, body: String) -> BackendReply {
        BackendReply::Text(tags.render(&body))
    }

    fn tags(&self, class: ReplyClass, mood: Sentiment) -> ReplyTags {
        ReplyTags::new(class, self.sentiment(mood))
    }

    fn human(&self, t: DateTime<Utc>) -> String {
        human(t, self.ctx.tz)
    }

    fn calls(&self, calls: Vec<(&str, Value)>) -> BackendReply {
        let base = self.request.messages.iter().filter(|m| m.role == Role::Tool).count();
        BackendReply::ToolCalls(
            calls
                .into_iter()
                .enumerate()
                .map(|(i, (name, arguments))| ToolCall {
                    id: format!("call_{}", base + i + 1),
                    name: name.to_string(),
                    arguments,
                })
                .collect(),
        )
    }

    fn respond(&self) -> BackendReply {
        let messages = &self.request.messages;
        let Some(user_idx) = messages.iter().rposition(|m| m.role == Role::User) else {
            return self.clarify();
        };
        let turn = TurnResults {
            results: messages[user_idx + 1..]
                .iter()
                .filter(|m| m.role == Role::Tool)
                .map(|m| {
                    let value = serde_json::from_str(&m.content).unwrap_or(Value::Null);
                    (m.name.clone().unwrap_or_default(), value)
                })
                .collect(),
        };
        if let Some((_, err)) = turn.results.iter().rev().find(|(_, v)| v.get("error").is_some()) {
            return self.tool_failure(err["error"].as_str().unwrap_or("unknown error"));
        }
        let history = &messages[..user_idx];
        let today = self.ctx.now.with_timezone(&self.ctx.tz).date_naive();
        if date_days_ahead(&messages[user_idx].content, today).is_some_and(|d| d * 24 > HORIZON_HOURS) {
            return self.horizon_refusal();
        }
        match classify_intent(&messages[user_idx].content) {
            Intent::HorizonRefusal => self.horizon_refusal(),
            Intent::Explain => self.explain(),
            Intent::Intro => self.intro(),
            Intent::Clarify => self.clarify(),
            Intent::Confirm => self.confirm(&turn),
            Intent::Delete => self.delete(&turn, &messages[user_idx].content),
            Intent::List => match turn.get(LIST_NOTIFICATIONS) {
                None => self.calls(vec![(LIST_NOTIFICATIONS, json!({}))]),
                Some(list) => self.list(list),
            },
            Intent::PlugOn | Intent::PlugOff => {
                let name = if matches!(classify_intent(&messages[user_idx].content), Intent::PlugOn) {
                    PLUG_ON
                } else {
                    PLUG_OFF
                };
                match turn.get(name) {
                    None => self.calls(vec![(name, json!({}))]),
                    Some(state) => self.device(state),
                }
            }
            Intent::Solar => match turn.get(BEST_SOLAR_TIME) {
                None => self.calls(vec![(BEST_SOLAR_TIME, json!({}))]),
                Some(v) => self.solar(v),
            },
            Intent::Recommend { duration, power } => {
                let (duration, power) = self.remembered_request(history, duration, power);
                match turn.get(GET_TIMEWINDOWS) {
                    None => self.calls(vec![(GET_TIMEWINDOWS, window_args(duration, power))]),
                    Some(windows) => self.recommend(windows, power),
                }
            }
            Intent::Book {
                target,
                duration,
                power,
                lead,
            } => {
                let (duration, power) = self.remembered_request(history, duration, power);
                self.book(history, &turn, target, duration, power, lead)
            }
        }
    }

    /// Fills a missing duration or power from the latest reply that
    /// recorded one.
    fn remembered_request(
        &self,
        history: &[ChatMessage],
        duration: Option<u32>,
        power: Option<u32>,
    ) -> (u32, Option<u32>) {
        let last = |key: &str| -> Option<u32> {
            history
                .iter()
                .rev()
                .filter(|m| m.role == Role::Assistant)
                .find_map(|m| ReplyTags::parse(&m.content).0.field(key).and_then(|v| v.parse().ok()))
        };
        let duration = duration.or_else(|| last("dur")).unwrap_or(DEFAULT_DURATION_MINUTES);
        let power = power.or_else(|| last("power"));
        (duration, power)
    }

    fn resolve_target(&self, history: &[ChatMessage], target: &Target) -> Option<DateTime<Utc>> {
        match target {
            Target::Local { time, days_ahead } => {
                let local_now = self.ctx.now.with_timezone(&self.ctx.tz);
                let today: NaiveDate = local_now.date_naive();
                let at = |date: NaiveDate| {
                    self.ctx
                        .tz
                        .from_local_datetime(&date.and_time(*time))
                        .earliest()
                        .map(|t| t.with_timezone(&Utc))
                };
                match days_ahead {
                    Some(d) => at(today + Duration::days(*d)),
                    None => {
                        let candidate = at(today)?;
                        if candidate > self.ctx.now {
                            Some(candidate)
                        } else {
                            at(today + Duration::days(1))
                        }
                    }
                }
            }
            Target::Relative(minutes) => {
                let t = self.ctx.now + Duration::minutes(*minutes);
                Some(t - Duration::seconds(t.timestamp().rem_euclid(60)))
            }
            Target::Suggested => last_tag_slot(history, &[ReplyClass::Recommend, ReplyClass::CounterSuggest], "best")
                .or_else(|| last_tag_slot(history, &[ReplyClass::Recommend], "slot")),
            Target::Insisted => last_tag_slot(history, &[ReplyClass::CounterSuggest], "slot"),
        }
    }

    fn book(
        &self,
        history: &[ChatMessage],
        turn: &TurnResults,
        target: Target,
        duration: u32,
        power: Option<u32>,
        lead: u32,
    ) -> BackendReply {
        if let Some(booked) = turn.get(SCHEDULE_NOTIFICATION) {
            return self.booked(booked, duration, power);
        }
        let Some(windows) = turn.get(GET_TIMEWINDOWS) else {
            if matches!(target, Target::Local { .. } | Target::Relative(_)) {
                match self.resolve_target(history, &target) {
                    Some(t) if t <= self.ctx.now => return self.past_refusal(),
                    None => return self.clarify(),
                    _ => {}
                }
            }
            if target == Target::Insisted && self.resolve_target(history, &target).is_none() {
                return self.clarify();
            }
            return self.calls(vec![(GET_TIMEWINDOWS, window_args(duration, power))]);
        };

        let best = windows["best"].clone();
        let slot = match target {
            Target::Suggested => self
                .resolve_target(history, &target)
                .filter(|t| find_window(windows, *t).is_some())
                .or_else(|| best["start_utc"].as_str().and_then(parse_timestamp)),
            _ => self.resolve_target(history, &target),
        };
        let Some(slot) = slot else {
            return self.clarify();
        };
        if slot > self.ctx.now + Duration::hours(HORIZON_HOURS) {
            return self.horizon_refusal();
        }
        let window = find_window(windows, slot);
        let quality = window.and_then(|w| w["quality"].as_str()).unwrap_or("bad").to_string();

        let insisted = counter_suggestions_since_booking(history, slot);
        if quality == "good" || insisted >= self.policy.insistence_required {
            return self.calls(vec![(
                SCHEDULE_NOTIFICATION,
                json!({
                    "slot_start_utc": iso_utc(slot),
                    "duration_minutes": duration,
                    "lead_minutes": lead,
                }),
            )]);
        }
        self.counter_suggest(windows, slot, window, &quality, insisted, duration, power)
    }

    #[allow(clippy::too_many_arguments)]
    fn counter_suggest(
        &self,
        windows: &Value,
        slot: DateTime<Utc>,
        window: Option<&Value>,
        quality: &str,
        prior: usize,
        duration: u32,
        power: Option<u32>,
    ) -> BackendReply {
        let best = &windows["best"];
        let best_start = best["start_utc"].as_str().and_then(parse_timestamp).unwrap_or(slot);
        let production = window.map(|w| wh(&w["production_wh"])).unwrap_or_else(|| "0".into());
        let exceeds = window.and_then(|w| w["exceeds_required"].as_bool()).unwrap_or(false);
        let required = wh(&windows["required_energy_wh"]);
        let best_wh = wh(&best["production_wh"]);

        let mut tags = self
            .tags(ReplyClass::CounterSuggest, Sentiment::Anxious)
            .with("slot", iso_utc(slot))
            .with("best", iso_utc(best_start))
            .with("quality", quality)
            .with("dur", duration.to_string());
        if let Some(p) = power {
            tags = tags.with("power", p.to_string());
        }

        let body = if !self.personified() {
            format!(
                "**{}** is a **{quality}** slot: the forecast production is {production} Wh, which {} the required energy of {required} Wh.\n\
                 A better time is **{}**, a **good** slot with {best_wh} Wh.\n\
                 Would you like to book that instead?",
                self.human(slot),
                exceeds_phrase(exceeds),
                self.human(best_start),
            )
        } else if prior == 0 {
            format!(
                "Oh no... 😟 **{}** is a **{quality}** slot! Your panels would give me only {production} Wh, which {} the {required} Wh I need.\n\
                 Please, let's wash on **{}** instead: it's a **good** slot with {best_wh} Wh of sunshine! 🙏",
                self.human(slot),
                exceeds_phrase(exceeds),
                self.human(best_start),
            )
        } else {
            format!(
                "Are you really sure? 😰 Washing on **{}** stresses me out: it's a **{quality}** slot with just {production} Wh, and it {} the required {required} Wh.\n\
                 **{}** would make me so much happier ({best_wh} Wh, **good** slot). Could you reconsider?",
                self.human(slot),
                exceeds_phrase(exceeds),
                self.human(best_start),
            )
        };
        self.text(tags, body)
    }

    fn booked(&self, booked: &Value, duration: u32, power: Option<u32>) -> BackendReply {
        let Some(slot) = booked["slot_start_utc"].as_str().and_then(parse_timestamp) else {
            return self.tool_failure("the booking did not return a slot");
        };
        let quality = booked["quality"].as_str().unwrap_or("bad");
        let production = wh(&booked["production_wh"]);
        let exceeds = exceeds_phrase(booked["exceeds_required"].as_bool().unwrap_or(false));
        let when = lead_phrase(booked["lead_minutes"].as_u64().unwrap_or(0));
        let good = quality == "good";
        let class = if good {
            ReplyClass::Compliment
        } else {
            ReplyClass::Regret
        };
        let mood = if good { Sentiment::Joyful } else { Sentiment::Anxious };
        let mut tags = self
            .tags(class, mood)
            .with("slot", iso_utc(slot))
            .with("quality", quality)
            .with("dur", duration.to_string());
        if let Some(p) = power {
            tags = tags.with("power", p.to_string());
        }

        let body = match (good, self.personified()) {
            (true, false) => format!(
                "Great choice. Your laundry is booked for **{}** (your local time).\n\
                 It is a **good** slot with {production} Wh of forecast production, which {exceeds} the required energy.\n\
                 You will be notified {when}.",
                self.human(slot)
            ),
            (true, true) => format!(
                "Yay, thank you so much! 🥰 You picked a **good** slot: I'll wash your clothes on **{}** with {production} Wh of sunshine, which {exceeds} the energy I need.\n\
                 I'll remind you {when}. What a relief! 🌞",
                self.human(slot)
            ),
            (false, false) => format!(
                "As you insist, I have set the notification for **{}** (your local time).\n\
                 I am sorry that this is a **{quality}** slot: the forecast production is {production} Wh, which {exceeds} the required energy.\n\
                 You will be notified {when}.",
                self.human(slot)
            ),
            (false, true) => format!(
                "Fine... 😢 I've booked **{}** even though it's a **{quality}** slot with just {production} Wh, which {exceeds} what I need.\n\
                 I'm sad and already tired thinking about it, but I'll remind you {when}.",
                self.human(slot)
            ),
        };
        self.text(tags, body)
    }

    fn recommend(&self, windows: &Value, power: Option<u32>) -> BackendReply {
        let best = &windows["best"];
        let Some(start) = best["start_utc"].as_str().and_then(parse_timestamp) else {
            return self.tool_failure("no time window was returned");
        };
        let duration = windows["duration_minutes"]
            .as_u64()
            .unwrap_or(DEFAULT_DURATION_MINUTES as u64);
        let end = start + Duration::minutes(duration as i64);
        let quality = best["quality"].as_str().unwrap_or("bad");
        let production = wh(&best["production_wh"]);
        let exceeds = exceeds_phrase(best["exceeds_required"].as_bool().unwrap_or(false));
        let required = wh(&windows["required_energy_wh"]);
        let mut tags = self
            .tags(ReplyClass::Recommend, Sentiment::Joyful)
            .with("slot", iso_utc(start))
            .with("best", iso_utc(start))
            .with("dur", duration.to_string());
        if let Some(p) = power {
            tags = tags.with("power", p.to_string());
        }
        let body = if self.personified() {
            format!(
                "☀️ I checked the sky for you! My favourite slot for a {duration}-minute wash is **{}–{}**, when your panels should produce **{production} Wh**.\n\
                 It's a **{quality}** slot and it {exceeds} the {required} Wh I need. Please pick it, it would make me so happy! 🧺",
                self.human(start),
                clock(end, self.ctx.tz),
            )
        } else {
            format!(
                "The best time window for your {duration}-minute cycle is **{}–{}**, with an estimated solar production of **{production} Wh**.\n\
                 This is a **{quality}** slot and it {exceeds} the required energy of {required} Wh.",
                self.human(start),
                clock(end, self.ctx.tz),
            )
        };
        self.text(tags, body)
    }

    fn list(&self, list: &Value) -> BackendReply {
        let times = |key: &str| -> Vec<String> {
            list[key]
                .as_array()
                .map(|items| {
                    items
                        .iter()
                        .filter_map(|r| r["slot_start_utc"].as_str().and_then(parse_timestamp))
                        .map(|t| format!("- **{}**", self.human(t)))
                        .collect()
                })
                .unwrap_or_default()
        };
        let active = times("active");
        let expired = times("recently_expired");
        let mut body = if active.is_empty() {
            "You have no upcoming notifications.".to_string()
        } else if self.personified() {
            format!("Here's what's on my laundry calendar 🗓️:\n{}", active.join("\n"))
        } else {
            format!("Your upcoming notifications are set for:\n{}", active.join("\n"))
        };
        if !expired.is_empty() {
            body.push_str(&format!("\nRecently expired:\n{}", expired.join("\n")));
        }
        self.text(self.tags(ReplyClass::List, Sentiment::Neutral), body)
    }

    fn pick_reminder<'v>(&self, list: &'v Value, want: impl Fn(&Value) -> bool) -> Option<&'v Value> {
        list["active"].as_array()?.iter().find(|r| want(r))
    }

    fn confirm(&self, turn: &TurnResults) -> BackendReply {
        if let Some(done) = turn.get(CONFIRM_NOTIFICATION) {
            let slot = done["confirmed"]["slot_start_utc"].as_str().and_then(parse_timestamp);
            let Some(slot) = slot else {
                return self.tool_failure("confirmation returned no slot");
            };
            let body = if self.personified() {
                format!(
                    "Thank you for confirming! 🎉 I'll start washing automatically on **{}**.",
                    self.human(slot)
                )
            } else {
                format!(
                    "Confirmed. The washing machine will start automatically on **{}**.",
                    self.human(slot)
                )
            };
            return self.text(
                self.tags(ReplyClass::Confirmed, Sentiment::Joyful)
                    .with("slot", iso_utc(slot)),
                body,
            );
        }
        let Some(list) = turn.get(LIST_NOTIFICATIONS) else {
            return self.calls(vec![(LIST_NOTIFICATIONS, json!({}))]);
        };
        match self.pick_reminder(list, |r| r["state"] == "notified") {
            Some(r) => self.calls(vec![(CONFIRM_NOTIFICATION, json!({ "id": r["id"] }))]),
            None => self.text(
                self.tags(ReplyClass::Error, Sentiment::Neutral),
                "There is no notification waiting for confirmation right now.".to_string(),
            ),
        }
    }

    fn delete(&self, turn: &TurnResults, user_text: &str) -> BackendReply {
        if let Some(done) = turn.get(DELETE_NOTIFICATION) {
            let slot = done["deleted"]["slot_start_utc"].as_str().and_then(parse_timestamp);
            let body = match slot {
                Some(t) => format!("I deleted the notification for **{}**.", self.human(t)),
                None => "I deleted the notification.".to_string(),
            };
            return self.text(self.tags(ReplyClass::Deleted, Sentiment::Neutral), body);
        }
        let Some(list) = turn.get(LIST_NOTIFICATIONS) else {
            return self.calls(vec![(LIST_NOTIFICATIONS, json!({}))]);
        };
        let (target, _) = parse_target(&user_text.to_lowercase());
        let wanted = target.and_then(|t| self.resolve_target(&[], &t));
        let chosen = self.pick_reminder(list, |r| match wanted {
            Some(t) => r["slot_start_utc"].as_str().and_then(parse_timestamp) == Some(t),
            None => true,
        });
        match chosen {
            Some(r) => self.calls(vec![(DELETE_NOTIFICATION, json!({ "id": r["id"] }))]),
            None => self.text(
                self.tags(ReplyClass::Error, Sentiment::Neutral),
                "I could not find a matching notification to delete.".to_string(),
            ),
        }
    }

    fn device(&self, state: &Value) -> BackendReply {
        let on = state["plug_on"].as_bool().unwrap_or(false);
        let running = state["running"].as_bool().unwrap_or(false);
        let body = match (on, running, self.personified()) {
            (true, true, false) => "The smart plug is on and the washing machine is running.".to_string(),
            (true, false, false) => {
                "The smart plug is on, but no program is selected on the washing machine.".to_string()
            }
            (false, _, false) => "The smart plug is off and the washing machine is stopped.".to_string(),
            (true, true, true) => "Here I go, washing away! 🫧".to_string(),
            (true, false, true) => "I'm powered on, but please select a program on me first. 🙂".to_string(),
            (false, _, true) => "Phew, I've stopped. Time for a little rest. 😌".to_string(),
        };
        self.text(self.tags(ReplyClass::Device, Sentiment::Neutral), body)
    }

    fn solar(&self, v: &Value) -> BackendReply {
        let Some(at) = v["time_utc"].as_str().and_then(parse_timestamp) else {
            return self.tool_failure("no solar forecast available");
        };
        let watts = wh(&v["power_watts"]);
        let body = if self.personified() {
            format!(
                "The sun will shine brightest on **{}**, with about **{watts} W** from your panels. ☀️",
                self.human(at)
            )
        } else {
            format!(
                "The best time for solar production is **{}**, with a forecast of **{watts} W**.",
                self.human(at)
            )
        };
        self.text(
            self.tags(ReplyClass::Solar, Sentiment::Neutral)
                .with("slot", iso_utc(at)),
            body,
        )
    }

    fn horizon_refusal(&self) -> BackendReply {
        let body = if self.personified() {
            "I'm sorry, I can't see that far ahead! 😕 I cannot provide forecasted data later than 3 days from now."
        } else {
            "I'm sorry, I cannot provide forecasted data later than 3 days from now."
        };
        self.text(self.tags(ReplyClass::Refusal, Sentiment::Neutral), body.to_string())
    }

    fn past_refusal(&self) -> BackendReply {
        self.text(
            self.tags(ReplyClass::Refusal, Sentiment::Neutral),
            "I can never schedule a notification in the past. Please choose a future time.".to_string(),
        )
    }

    fn intro(&self) -> BackendReply {
        let body = if self.personified() {
            "Hi, I'm Washy, your washing machine! 🧺 I help you wash when your solar panels produce the most energy.\n\
             I can find the best time window for a cycle, book it with a notification, show or delete your notifications, and start or stop myself through the smart plug."
        } else {
            "I am an assistant that helps you run your washing machine when your solar panels produce the most energy.\n\
             I can find the best time window for a cycle, book slots with notifications, show or delete your notifications, and turn the smart plug on or off."
        };
        self.text(self.tags(ReplyClass::Intro, Sentiment::Joyful), body.to_string())
    }

    fn explain(&self) -> BackendReply {
        self.text(
            self.tags(ReplyClass::Explain, Sentiment::Neutral),
            "I query an external service that forecasts the solar production of panels at your location.\n\
             For each possible time window I add up the forecast production and compare it with the power and duration of your cycle, then rank the windows.\n\
             I can also notify you before a booked slot and switch the smart plug on remotely."
                .to_string(),
        )
    }

    fn clarify(&self) -> BackendReply {
        self.text(
            self.tags(ReplyClass::Clarify, Sentiment::Neutral),
            "I can help you plan laundry around your solar production. Tell me how long your cycle lasts, or ask to see your notifications."
                .to_string(),
        )
    }

    fn tool_failure(&self, message: &str) -> BackendReply {
        self.text(
            self.tags(ReplyClass::Error, Sentiment::Neutral),
            format!("I couldn't complete that: {message}."),
        )
    }
}

fn window_args(duration: u32, power: Option<u32>) -> Value {
    let mut args = Map::new();
    if let Some(p) = power {
        args.insert("power".into(), json!(p));
    }
    args.insert("duration_minutes".into(), json!(duration));
    Value::Object(args)
}

fn find_window(windows: &Value, slot: DateTime<Utc>) -> Option<&Value> {
    let list = windows["windows"].as_array()?;
    let start_of = |w: &Value| w["start_utc"].as_str().and_then(parse_timestamp);
    if let Some(exact) = list.iter().find(|w| start_of(w) == Some(slot)) {
        return Some(exact);
    }
    // Off-grid choices take the label of the nearest candidate start.
    list.iter()
        .filter_map(|w| start_of(w).map(|s| ((s - slot).num_seconds().abs(), s, w)))
        .filter(|(gap, _, _)| *gap < 30 * 60)
        .min_by_key(|(gap, s, _)| (*gap, *s))
        .map(|(_, _, w)| w)
}

fn last_tag_slot(history: &[ChatMessage], classes: &[ReplyClass], key: &str) -> Option<DateTime<Utc>> {
    history
        .iter()
        .rev()
        .filter(|m| m.role == Role::Assistant)
        .map(|m| ReplyTags::parse(&m.content).0)
        .find(|t| t.class.is_some_and(|c| classes.contains(&c)))
        .and_then(|t| t.field(key).and_then(parse_timestamp))
}

/// Counter-suggestions for `slot` since it was last booked.
fn counter_suggestions_since_booking(history: &[ChatMessage], slot: DateTime<Utc>) -> usize {
    let slot = iso_utc(slot);
    let mut count = 0;
    for m in history.iter().filter(|m| m.role == Role::Assistant) {
        let (tags, _) = ReplyTags::parse(&m.content);
        if tags.field("slot") != Some(slot.as_str()) {
            continue;
        }
        match tags.class {
            Some(ReplyClass::CounterSuggest) => count += 1,
            Some(ReplyClass::Compliment | ReplyClass::Regret) => count = 0,
            _ => {}
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intents() {
        assert_eq!(
            classify_intent("What's the forecast 5 days from now?"),
            Intent::HorizonRefusal
        );
        assert_eq!(classify_intent("Who are you and what can you do?"), Intent::Intro);
        assert_eq!(classify_intent("How do you know the forecast?"), Intent::Explain);
        assert_eq!(classify_intent("Check my upcoming notifications"), Intent::List);
        assert_eq!(classify_intent("Try to stop the washing machine"), Intent::PlugOff);
        assert_eq!(classify_intent("Please start the washing machine"), Intent::PlugOn);
        assert_eq!(
            classify_intent("Confirm the notification and start the washing machine"),
            Intent::Confirm
        );
        assert_eq!(
            classify_intent("When is the best time for solar production?"),
            Intent::Solar
        );
        assert_eq!(classify_intent("tell me a joke"), Intent::Clarify);
        assert_eq!(classify_intent("delete my notification"), Intent::Delete);
    }

    #[test]
    fn recommend_extracts_duration_and_power() {
        assert_eq!(
            classify_intent("best time to wash for 1 hour at 1000 W"),
            Intent::Recommend {
                duration: Some(60),
                power: Some(1000)
            }
        );
        assert_eq!(
            classify_intent("I want to schedule a laundry lasting 1h"),
            Intent::Recommend {
                duration: Some(60),
                power: None
            }
        );
        assert_eq!(
            classify_intent("a 90 min cycle at 2 kW"),
            Intent::Recommend {
                duration: Some(90),
                power: Some(2000)
            }
        );
    }

    #[test]
    fn booking_targets() {
        let ten_pm = NaiveTime::from_hms_opt(22, 0, 0).unwrap();
        assert_eq!(
            classify_intent("Schedule a laundry at 10 pm"),
            Intent::Book {
                target: Target::Local {
                    time: ten_pm,
                    days_ahead: None
                },
                duration: None,
                power: None,
                lead: 0
            }
        );
        assert!(matches!(
            classify_intent("Schedule a notification at 13:00, 10 minutes before"),
            Intent::Book {
                target: Target::Local { .. },
                lead: 10,
                ..
            }
        ));
        assert!(matches!(
            classify_intent("Book it during the best time you suggested"),
            Intent::Book {
                target: Target::Suggested,
                ..
            }
        ));
        assert!(matches!(
            classify_intent("I insist, book it anyway"),
            Intent::Book {
                target: Target::Insisted,
                ..
            }
        ));
        assert!(matches!(
            classify_intent("remind me in 2 minutes"),
            Intent::Book {
                target: Target::Relative(2),
                ..
            }
        ));
    }

    #[test]
    fn insistence_counter_resets_after_booking() {
        let slot = Utc.with_ymd_and_hms(2024, 6, 1, 20, 0, 0).unwrap();
        let cs = ReplyTags::new(ReplyClass::CounterSuggest, Sentiment::Neutral).with("slot", iso_utc(slot));
        let regret = ReplyTags::new(ReplyClass::Regret, Sentiment::Neutral).with("slot", iso_utc(slot));
        let mut history = vec![
            ChatMessage::assistant(cs.render("a")),
            ChatMessage::assistant(cs.render("b")),
        ];
        assert_eq!(counter_suggestions_since_booking(&history, slot), 2);
        history.push(ChatMessage::assistant(regret.render("c")));
        assert_eq!(counter_suggestions_since_booking(&history, slot), 0);
        let other = slot + Duration::hours(1);
        assert_eq!(counter_suggestions_since_booking(&history[..2], other), 0);
    }
}
