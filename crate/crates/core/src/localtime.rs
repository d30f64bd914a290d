//! Rendering instants for people and for the wire.
//!
//! Everything is stored in UTC; these helpers only format.

use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use chrono_tz::Tz;

pub fn parse_tz(name: &str) -> Result<Tz, String> {
    Tz::from_str(name).map_err(|_| format!("unknown timezone {name:?}"))
}

/// `Saturday 1 June at 13:30` in `tz`.
pub fn human(t: DateTime<Utc>, tz: Tz) -> String {
    t.with_timezone(&tz).format("%A %-d %B at %H:%M").to_string()
}

/// `13:30` in `tz`.
pub fn clock(t: DateTime<Utc>, tz: Tz) -> String {
    t.with_timezone(&tz).format("%H:%M").to_string()
}

/// RFC 3339 with the zone's offset, e.g. `2024-06-01T13:30:00+02:00`.
pub fn iso_local(t: DateTime<Utc>, tz: Tz) -> String {
    t.with_timezone(&tz).to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// RFC 3339 in UTC with a `Z` suffix.
pub fn iso_utc(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}
