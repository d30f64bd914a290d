use std::time::Duration as StdDuration;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

/// Parses `90s`, `2m`, `1h30m` or a bare number of minutes into seconds.
pub fn parse_duration(text: &str) -> Result<i64> {
    let text = text.trim();
    if let Ok(minutes) = text.parse::<i64>() {
        return check(minutes * 60, text);
    }
    let mut total = 0i64;
    let mut digits = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
            continue;
        }
        let unit = match c {
            'd' => 86_400,
            'h' => 3_600,
            'm' => 60,
            's' => 1,
            _ => bail!("unknown unit {c:?} in duration {text:?}"),
        };
        let n: i64 = digits
            .parse()
            .with_context(|| format!("missing number before {c:?} in {text:?}"))?;
        total += n * unit;
        digits.clear();
    }
    if !digits.is_empty() {
        bail!("trailing number without unit in {text:?}");
    }
    check(total, text)
}

fn check(seconds: i64, text: &str) -> Result<i64> {
    if seconds <= 0 {
        bail!("duration {text:?} must be positive");
    }
    Ok(seconds)
}

/// Advances a test-mode server's clock and returns its new local time.
pub fn advance(base: &str, token: &str, seconds: i64) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(StdDuration::from_secs(30)))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/clock/advance", base.trim_end_matches('/'));
    let mut resp = agent
        .post(&url)
        .header("Authorization", &format!("Bearer {token}"))
        .send_json(json!({ "seconds": seconds }))
        .with_context(|| format!("POST {url}"))?;
    let status = resp.status();
    let body: Value = resp.body_mut().read_json().context("reading response")?;
    if !status.is_success() {
        bail!(
            "server answered {status}: {}",
            body["message"].as_str().unwrap_or("no message")
        );
    }
    Ok(body["now"].as_str().unwrap_or_default().to_string())
}
