//! The conversational layer.
//!
//! A turn appends the user's message, then alternates between the language
//! model backend and local tool execution until the model answers in text:
//!
//! ```text
//! user ─▶ backend ─▶ tool_calls ─▶ execute ─▶ backend ─▶ text ─▶ user
//! ```
//!
//! Every backend request carries the freshly rendered system prompt, at most
//! [`MAX_HISTORY`] recent messages and the tool descriptors.

pub mod lint;
pub mod mock;
pub mod prompt;
pub mod remote;
pub mod tags;
pub mod tools;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reminders::UserId;

pub use mock::{ConversationPolicy, MockBackend};
pub use prompt::{build_system_prompt, Persona, PersonaKind, PromptContext, TemplateError};
pub use remote::{ChatCompletionsBackend, RemoteConfig};
pub use tags::{ReplyClass, ReplyTags, Sentiment};
pub use tools::{
    execute_tool, tool_descriptors, FixedForecast, ForecastProvider, ToolDescriptor, ToolEnv, ToolError, UserProfile,
};

/// Non-system messages sent with each backend request.
pub const MAX_HISTORY: usize = 20;

/// Backend round trips allowed per user turn.
pub const MAX_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self::plain(Role::User, text.into())
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, text.into())
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::plain(Role::System, text.into())
    }

    pub fn tool_calls(calls: Vec<ToolCall>) -> Self {
        Self {
            role: Role::Assistant,
            content: String::new(),
            tool_calls: calls,
            tool_call_id: None,
            name: None,
        }
    }

    pub fn tool_result(call: &ToolCall, content: String) -> Self {
        Self {
            role: Role::Tool,
            content,
            tool_calls: Vec::new(),
            tool_call_id: Some(call.id.clone()),
            name: Some(call.name.clone()),
        }
    }

    fn plain(role: Role, content: String) -> Self {
        Self {
            role,
            content,
            tool_calls: Vec::new(),
            tool_call_id: None,
            name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolDescriptor>,
}

impl BackendRequest {
    /// Panics if `messages` exceeds the history bound; this is the single
    /// point every backend call passes through.
    pub fn new(system_prompt: String, messages: Vec<ChatMessage>, tools: Vec<ToolDescriptor>) -> Self {
        let non_system = messages.iter().filter(|m| m.role != Role::System).count();
        assert!(
            non_system <= MAX_HISTORY,
            "backend request carries {non_system} non-system messages (limit {MAX_HISTORY})"
        );
        Self {
            system_prompt,
            messages,
            tools,
        }
    }

    pub fn non_system_len(&self) -> usize {
        self.messages.iter().filter(|m| m.role != Role::System).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendReply {
    Text(String),
    ToolCalls(Vec<ToolCall>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("backend returned an unusable response: {0}")]
    Protocol(String),
}

/// A language model that answers a request with text or tool calls.
pub trait ChatBackend: Send {
    fn complete(&mut self, request: &BackendRequest) -> Result<BackendReply, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&mut self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub user: UserId,
    pub persona: PersonaKind,
    #[serde(default)]
    pub history: Vec<ChatMessage>,
}

impl ChatSession {
    pub fn new(user: UserId, persona: PersonaKind) -> Self {
        Self {
            user,
            persona,
            history: Vec::new(),
        }
    }
}

/// The most recent [`MAX_HISTORY`] non-system messages, in order.
pub fn truncate_history(history: &[ChatMessage]) -> Vec<ChatMessage> {
    let convo: Vec<&ChatMessage> = history.iter().filter(|m| m.role != Role::System).collect();
    let skip = convo.len().saturating_sub(MAX_HISTORY);
    convo.into_iter().skip(skip).cloned().collect()
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("the model kept calling tools for {0} rounds without answering")]
    ToolLoopExceeded(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    /// Reply shown to the user, without the tag header.
    pub text: String,
    pub tags: ReplyTags,
    pub tool_calls: Vec<ToolCall>,
    pub rounds: usize,
    /// Set when the backend failed and `text` is a canned apology.
    pub backend_error: Option<String>,
}

const BACKEND_APOLOGY: &str = "Sorry, I cannot reach my assistant service right now. Please try again in a moment.";

/// Runs one user turn to completion.
pub fn run_turn(
    session: &mut ChatSession,
    user_msg: &str,
    backend: &mut dyn ChatBackend,
    env: &ToolEnv<'_>,
) -> Result<TurnOutcome, AgentError> {
    let ctx = prompt_context(env.profile, env.now);
    let system_prompt = build_system_prompt(&Persona::of(session.persona), &ctx)?;
    let descriptors = tool_descriptors();

    session.history.push(ChatMessage::user(user_msg));
    let mut executed = Vec::new();

    for round in 1..=MAX_ROUNDS {
        let request = BackendRequest::new(
            system_prompt.clone(),
            truncate_history(&session.history),
            descriptors.clone(),
        );
        let reply = match backend.complete(&request) {
            Ok(reply) => reply,
            Err(e) => {
                log::error!("chat backend failed for user {}: {e}", session.user);
                let tags = ReplyTags::new(ReplyClass::Error, Sentiment::Neutral);
                session.history.push(ChatMessage::assistant(BACKEND_APOLOGY));
                return Ok(TurnOutcome {
                    text: BACKEND_APOLOGY.to_string(),
                    tags,
                    tool_calls: executed,
                    rounds: round,
                    backend_error: Some(e.to_string()),
                });
            }
        };
        match reply {
            BackendReply::Text(text) => {
                session.history.push(ChatMessage::assistant(text.clone()));
                let (tags, body) = ReplyTags::parse(&text);
                return Ok(TurnOutcome {
                    text: body.to_string(),
                    tags,
                    tool_calls: executed,
                    rounds: round,
                    backend_error: None,
                });
            }
            BackendReply::ToolCalls(calls) => {
                session.history.push(ChatMessage::tool_calls(calls.clone()));
                for call in calls {
                    let content = match execute_tool(&call, env) {
                        Ok(value) => value.to_string(),
                        Err(e) => {
                            log::info!("tool {} failed: {e}", call.name);
                            serde_json::json!({ "error": e.to_string() }).to_string()
                        }
                    };
                    session.history.push(ChatMessage::tool_result(&call, content));
                    executed.push(call);
                }
            }
        }
    }
    Err(AgentError::ToolLoopExceeded(MAX_ROUNDS))
}

pub fn prompt_context(profile: &UserProfile, now: DateTime<Utc>) -> PromptContext {
    PromptContext {
        username: profile.display_name.clone(),
        timezone: profile.timezone.clone(),
        now,
    }
}
