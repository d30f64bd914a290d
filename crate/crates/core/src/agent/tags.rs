//! Machine-readable reply markers.
//!
//! A tagged reply starts with a header line such as
//! `[[class=counter-suggest sentiment=anxious slot=2024-06-01T20:00:00Z]]`.
//! The mock backend emits them; replies from a live model normally carry
//! none and parse as untagged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplyClass {
    Intro,
    Explain,
    Recommend,
    Compliment,
    CounterSuggest,
    Regret,
    List,
    Deleted,
    Confirmed,
    Device,
    Solar,
    Refusal,
    Clarify,
    Error,
}

impl ReplyClass {
    pub const ALL: [ReplyClass; 14] = [
        ReplyClass::Intro,
        ReplyClass::Explain,
        ReplyClass::Recommend,
        ReplyClass::Compliment,
        ReplyClass::CounterSuggest,
        ReplyClass::Regret,
        ReplyClass::List,
        ReplyClass::Deleted,
        ReplyClass::Confirmed,
        ReplyClass::Device,
        ReplyClass::Solar,
        ReplyClass::Refusal,
        ReplyClass::Clarify,
        ReplyClass::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReplyClass::Intro => "intro",
            ReplyClass::Explain => "explain",
            ReplyClass::Recommend => "recommend",
            ReplyClass::Compliment => "compliment",
            ReplyClass::CounterSuggest => "counter-suggest",
            ReplyClass::Regret => "regret",
            ReplyClass::List => "list",
            ReplyClass::Deleted => "deleted",
            ReplyClass::Confirmed => "confirmed",
            ReplyClass::Device => "device",
            ReplyClass::Solar => "solar",
            ReplyClass::Refusal => "refusal",
            ReplyClass::Clarify => "clarify",
            ReplyClass::Error => "error",
        }
    }
}

impl fmt::Display for ReplyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReplyClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReplyClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown reply class {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Neutral,
    Anxious,
    Joyful,
}

impl Sentiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Neutral => "neutral",
            Sentiment::Anxious => "anxious",
            Sentiment::Joyful => "joyful",
        }
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" => Ok(Sentiment::Neutral),
            "anxious" => Ok(Sentiment::Anxious),
            "joyful" => Ok(Sentiment::Joyful),
            other => Err(format!("unknown sentiment {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplyTags {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<ReplyClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<Sentiment>,
    /// Remaining `key=value` pairs (e.g. `slot`, `best`).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

impl ReplyTags {
    pub fn new(class: ReplyClass, sentiment: Sentiment) -> Self {
        Self {
            class: Some(class),
            sentiment: Some(sentiment),
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.fields.insert(key.to_string(), value.into());
        self
    }

    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_none() && self.sentiment.is_none() && self.fields.is_empty()
    }

    /// Prefixes `body` with the header line.
    pub fn render(&self, body: &str) -> String {
        let mut parts = Vec::new();
        if let Some(c) = self.class {
            parts.push(format!("class={c}"));
        }
        if let Some(s) = self.sentiment {
            parts.push(format!("sentiment={}", s.as_str()));
        }
        for (k, v) in &self.fields {
            parts.push(format!("{k}={v}"));
        }
        format!("[[{}]]\n{body}", parts.join(" "))
    }

    /// Splits a reply into its tags and the user-facing body. Text without a
    /// header yields empty tags and the text unchanged.
    pub fn parse(text: &str) -> (ReplyTags, &str) {
        let Some(rest) = text.strip_prefix("[[") else {
            return (ReplyTags::default(), text);
        };
        let Some(end) = rest.find("]]") else {
            return (ReplyTags::default(), text);
        };
        let header = &rest[..end];
        let body = rest[end + 2..].strip_prefix('\n').unwrap_or(&rest[end + 2..]);
        let mut tags = ReplyTags::default();
        for pair in header.split_whitespace() {
            let Some((k, v)) = pair.split_once('=') else {
                continue;
            };
            match k {
                "class" => tags.class = v.parse().ok(),
                "sentiment" => tags.sentiment = v.parse().ok(),
                _ => {
                    tags.fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        (tags, body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_then_parse() {
        let tags = ReplyTags::new(ReplyClass::CounterSuggest, Sentiment::Anxious).with("slot", "2024-06-01T20:00:00Z");
        let text = tags.render("Please pick a sunnier time.");
        let (parsed, body) = ReplyTags::parse(&text);
        assert_eq!(parsed, tags);
        assert_eq!(body, "Please pick a sunnier time.");
    }

    #[test]
    fn untagged_text_passes_through() {
        let (tags, body) = ReplyTags::parse("Hello [[not a header");
        assert!(tags.is_empty());
        assert_eq!(body, "Hello [[not a header");
    }

    #[test]
    fn class_names_round_trip() {
        for c in ReplyClass::ALL {
            assert_eq!(c.as_str().parse::<ReplyClass>().unwrap(), c);
            assert_eq!(serde_json::to_value(c).unwrap(), serde_json::json!(c.as_str()));
        }
    }
}
