//! System prompt assembly.
//!
//! The prompt is the persona text followed by the general prompt and the
//! explanation prompt, one newline between each part. Only the
//! `{username}`, `{timezone}` and `{now}` placeholders of the general prompt
//! are substituted; every other byte is kept verbatim.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TRADITIONAL: &str = include_str!("prompts/traditional.txt");
const PERSONIFIED: &str = include_str!("prompts/personified.txt");
const GENERAL: &str = include_str!("prompts/general.txt");
const EXPLANATION: &str = include_str!("prompts/explanation.txt");

/// `{now}` is rendered in this format, followed in the template by " UTC".
pub const NOW_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaKind {
    Traditional,
    Personified,
}

impl PersonaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PersonaKind::Traditional => "traditional",
            PersonaKind::Personified => "personified",
        }
    }
}

impl fmt::Display for PersonaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PersonaKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "traditional" => Ok(PersonaKind::Traditional),
            "personified" => Ok(PersonaKind::Personified),
            other => Err(format!(
                "unknown persona {other:?} (expected traditional or personified)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persona {
    pub kind: PersonaKind,
    pub persona_text: &'static str,
}

impl Persona {
    pub fn of(kind: PersonaKind) -> Self {
        let persona_text = match kind {
            PersonaKind::Traditional => TRADITIONAL,
            PersonaKind::Personified => PERSONIFIED,
        };
        Self { kind, persona_text }
    }
}

pub fn general_prompt_template() -> &'static str {
    GENERAL
}

pub fn explanation_prompt() -> &'static str {
    EXPLANATION
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub username: String,
    pub timezone: String,
    pub now: DateTime<Utc>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("timezone is missing")]
    MissingTimezone,
    #[error("unknown timezone {0:?}")]
    UnknownTimezone(String),
    #[error("unresolved placeholder {{{0}}}")]
    Unresolved(String),
}

impl PromptContext {
    pub fn tz(&self) -> Result<Tz, TemplateError> {
        if self.timezone.trim().is_empty() {
            return Err(TemplateError::MissingTimezone);
        }
        Tz::from_str(&self.timezone).map_err(|_| TemplateError::UnknownTimezone(self.timezone.clone()))
    }
}

pub fn build_system_prompt(persona: &Persona, ctx: &PromptContext) -> Result<String, TemplateError> {
    ctx.tz()?;
    let now = ctx.now.format(NOW_FORMAT).to_string();
    let general = substitute(GENERAL, |name| match name {
        "username" => Some(ctx.username.as_str()),
        "timezone" => Some(ctx.timezone.as_str()),
        "now" => Some(now.as_str()),
        _ => None,
    })?;
    let mut out = String::with_capacity(persona.persona_text.len() + general.len() + EXPLANATION.len() + 2);
    out.push_str(persona.persona_text);
    out.push('\n');
    out.push_str(&general);
    out.push('\n');
    out.push_str(EXPLANATION);
    Ok(out)
}

/// Replaces `{identifier}` occurrences in `template`. Braces that do not
/// wrap an identifier are copied through.
fn substitute<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                let value = lookup(n).ok_or_else(|| TemplateError::Unresolved(n.to_string()))?;
                out.push_str(value);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
