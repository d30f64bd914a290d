//! Chat-completions client for a hosted language model.

use std::time::Duration as StdDuration;

use serde_json::{json, Value};

use super::{BackendError, BackendReply, BackendRequest, ChatBackend, ChatMessage, Role, ToolCall};

pub const ENV_URL: &str = "WASHY_LLM_URL";
pub const ENV_KEY: &str = "WASHY_LLM_KEY";
pub const ENV_MODEL: &str = "WASHY_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full endpoint, e.g. `https://api.openai.com/v1/chat/completions`.
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: StdDuration,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: model.into(),
            timeout: StdDuration::from_secs(60),
        }
    }

    /// Reads the endpoint, key and model from the environment. `None` when
    /// no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|u| !u.is_empty())?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        let mut config = Self::new(url, model);
        config.api_key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        Some(config)
    }
}

pub struct ChatCompletionsBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl ChatCompletionsBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }
}

/// Request body in chat-completions form.
pub fn encode_request(model: &str, request: &BackendRequest) -> Value {
    let mut messages = vec![json!({ "role": "system", "content": request.system_prompt })];
    // Truncation can cut an assistant tool call off from its results;
    // the API rejects tool messages that answer nothing.
    let first = request
        .messages
        .iter()
        .position(|m| m.role != Role::Tool)
        .unwrap_or(request.messages.len());
    messages.extend(
        request.messages[first..]
            .iter()
            .filter(|m| m.role != Role::System)
            .map(encode_message),
    );
    let tools: Vec<Value> = request
        .tools
        .iter()
        .map(|t| serde_json::to_value(t).expect("descriptor serializes"))
        .collect();
    let mut body = json!({ "model": model, "messages": messages });
    if !tools.is_empty() {
        body["tools"] = Value::Array(tools);
    }
    body
}

fn encode_message(m: &ChatMessage) -> Value {
    match m.role {
        Role::Tool => json!({
            "role": "tool",
            "tool_call_id": m.tool_call_id,
            "content": m.content,
        }),
        Role::Assistant if !m.tool_calls.is_empty() => json!({
            "role": "assistant",
            "content": Value::Null,
            "tool_calls": m.tool_calls.iter().map(|c| json!({
                "id": c.id,
                "type": "function",
                "function": { "name": c.name, "arguments": c.arguments.to_string() },
            })).collect::<Vec<_>>(),
        }),
        role => json!({ "role": role, "content": m.content }),
    }
}

/// Interprets a chat-completions response body.
pub fn decode_response(body: &Value) -> Result<BackendReply, BackendError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        if !calls.is_empty() {
            return calls
                .iter()
                .map(decode_call)
                .collect::<Result<_, _>>()
                .map(BackendReply::ToolCalls);
        }
    }
    match message.get("content").and_then(Value::as_str) {
        Some(text) => Ok(BackendReply::Text(text.to_string())),
        None => Err(BackendError::Protocol(
            "message has neither content nor tool calls".into(),
        )),
    }
}

fn decode_call(call: &Value) -> Result<ToolCall, BackendError> {
    let field = |p: &str| {
        call.pointer(p)
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol(format!("tool call lacks {p}")))
    };
    let raw = field("/function/arguments")?;
    let arguments = if raw.trim().is_empty() {
        json!({})
    } else {
        serde_json::from_str(raw).map_err(|e| BackendError::Protocol(format!("tool arguments are not JSON: {e}")))?
    };
    Ok(ToolCall {
        id: field("/id")?.to_string(),
        name: field("/function/name")?.to_string(),
        arguments,
    })
}

impl ChatBackend for ChatCompletionsBackend {
    fn complete(&mut self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let body = encode_request(&self.config.model, request);
        let mut call = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
        decode_response(&value)
    }
}
