//! HTTP service: authenticated multi-user access to the agent, reminders,
//! notifications and appliance, with JSON persistence under a data
//! directory.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/chat` | one agent turn, body `{"message": "..."}` |
//! | GET | `/slots` | active and recently expired reminders |
//! | POST | `/reminders/{id}/confirm`, `/reminders/{id}/cancel` | form actions |
//! | GET | `/notifications/poll` | unacknowledged notification events |
//! | POST | `/notifications/{id}/ack` | acknowledge by reminder id |
//! | GET | `/device` | plug and machine state |
//! | POST | `/device/program` | `{"latched": true}` simulates selecting a program |
//! | GET | `/me` | account and persona |
//! | GET | `/clock`, POST `/clock/advance` | virtual clock (test mode only) |
//!
//! All requests need `Authorization: Bearer <token>` except `/healthz`.

pub mod config;
mod error;
pub mod providers;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use washy::agent::{
    run_turn, ChatBackend, ChatCompletionsBackend, ChatSession, ForecastProvider, MockBackend, PersonaKind,
    RemoteConfig, ToolEnv, UserProfile,
};
use washy::clock::{Clock, SystemClock, VirtualClock};
use washy::devices::{Appliance, DeviceState, HttpPlug};
use washy::forecast::PanelSpec;
use washy::household::{Household, NotificationEvent};
use washy::localtime::{iso_local, iso_utc};
use washy::reminders::{write_json_atomic, Reminder, ReminderId, TickEvent, UserId};

pub use config::{LlmBackendKind, PlugConfig, ServiceConfig, UserConfig};
pub use error::{ApiError, ErrorEnvelope};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type BackendFactory = Arc<dyn Fn(PersonaKind) -> Box<dyn ChatBackend> + Send + Sync>;

/// Stored account record. Tokens stay in the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: UserId,
    pub display_name: String,
    pub timezone: String,
    pub persona: PersonaKind,
    pub default_power_watts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PanelSpec>,
}

#[derive(Serialize, Deserialize)]
struct ClockRecord {
    now: DateTime<Utc>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, ServiceError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))
}

/// Conversation histories, one lock per user so turns of different users
/// run concurrently while turns of the same user queue.
struct Sessions {
    live: Mutex<BTreeMap<UserId, Arc<Mutex<ChatSession>>>>,
    saved: Mutex<BTreeMap<UserId, ChatSession>>,
    path: PathBuf,
}

impl Sessions {
    fn open(path: PathBuf) -> Result<Self, ServiceError> {
        let saved: BTreeMap<UserId, ChatSession> = read_json(&path)?.unwrap_or_default();
        Ok(Self {
            live: Mutex::new(BTreeMap::new()),
            saved: Mutex::new(saved),
            path,
        })
    }

    fn get(&self, profile: &UserProfile) -> Arc<Mutex<ChatSession>> {
        let mut live = self.live.lock().expect("sessions poisoned");
        live.entry(profile.id.clone())
            .or_insert_with(|| {
                let saved = self.saved.lock().expect("sessions poisoned").get(&profile.id).cloned();
                let mut session = saved.unwrap_or_else(|| ChatSession::new(profile.id.clone(), profile.persona));
                session.persona = profile.persona;
                Arc::new(Mutex::new(session))
            })
            .clone()
    }

    fn save(&self, session: &ChatSession) -> Result<(), ServiceError> {
        let mut saved = self.saved.lock().expect("sessions poisoned");
        saved.insert(session.user.clone(), session.clone());
        write_json_atomic(&self.path, &*saved).map_err(ServiceError::Store)
    }
}

pub struct AppState {
    clock: Arc<dyn Clock>,
    virtual_clock: Option<VirtualClock>,
    data_dir: PathBuf,
    step_minutes: u32,
    tick_period: StdDuration,
    household: Mutex<Household>,
    tokens: BTreeMap<String, UserProfile>,
    forecast: Box<dyn ForecastProvider>,
    backends: BackendFactory,
    sessions: Sessions,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("data_dir", &self.data_dir)
            .field("users", &self.tokens.len())
            .field("virtual_clock", &self.virtual_clock.is_some())
            .finish()
    }
}

/// Merges configured users into the stored accounts. A stored persona wins
/// over the configuration: assignment is fixed once an account exists.
fn merge_accounts(stored: Vec<UserAccount>, configured: &[UserConfig]) -> Vec<UserAccount> {
    let mut by_id: BTreeMap<UserId, UserAccount> = stored.into_iter().map(|a| (a.id.clone(), a)).collect();
    for u in configured {
        let id = UserId::new(&u.id);
        let persona = match by_id.get(&id) {
            Some(existing) if existing.persona != u.persona => {
                log::warn!(
                    "user {id}: keeping stored persona {} (config says {})",
                    existing.persona,
                    u.persona
                );
                existing.persona
            }
            _ => u.persona,
        };
        by_id.insert(
            id.clone(),
            UserAccount {
                id,
                display_name: u.display_name.clone(),
                timezone: u.timezone.clone(),
                persona,
                default_power_watts: u.default_power_watts,
                panel: u.panel,
            },
        );
    }
    by_id.into_values().collect()
}

impl AppState {
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let data_dir = config.data_dir.clone();
        std::fs::create_dir_all(&data_dir)?;

        let users_path = data_dir.join("users.json");
        let accounts = merge_accounts(read_json(&users_path)?.unwrap_or_default(), &config.users);
        write_json_atomic(&users_path, &accounts).map_err(ServiceError::Store)?;
        let by_id: BTreeMap<&UserId, &UserAccount> = accounts.iter().map(|a| (&a.id, a)).collect();
        let tokens = config
            .users
            .iter()
            .map(|u| {
                let a = by_id[&UserId::new(&u.id)];
                let profile = UserProfile {
                    id: a.id.clone(),
                    display_name: a.display_name.clone(),
                    timezone: a.timezone.clone(),
                    persona: a.persona,
                    default_power_watts: a.default_power_watts,
                };
                (u.token.clone(), profile)
            })
            .collect();

        let (clock, virtual_clock): (Arc<dyn Clock>, Option<VirtualClock>) = match config.virtual_clock {
            Some(start) => {
                let saved: Option<ClockRecord> = read_json(&data_dir.join("clock.json"))?;
                let vc = VirtualClock::new(start);
                if let Some(rec) = saved {
                    vc.set(rec.now);
                }
                (Arc::new(vc.clone()), Some(vc))
            }
            None => (Arc::new(SystemClock), None),
        };

        let household = Household::open(&data_dir).map_err(|e| ServiceError::Store(e.to_string()))?;
        let household = match &config.plug {
            PlugConfig::Simulated => household,
            PlugConfig::Http(http) => {
                let http = http.clone();
                household.with_appliance_factory(move |user, now| {
                    Appliance::new(Box::new(HttpPlug::new(http.for_user(user.as_str()))), now)
                })
            }
        };

        let forecast: Box<dyn ForecastProvider> = match (&config.forecast.fixture, &config.forecast.endpoint) {
            (Some(path), _) => Box::new(providers::FileForecast::new(path)),
            (None, Some(endpoint)) => {
                let panels = accounts
                    .iter()
                    .filter_map(|a| a.panel.map(|p| (a.id.clone(), p)))
                    .collect();
                Box::new(providers::RemoteForecast::new(
                    endpoint,
                    StdDuration::from_millis(config.forecast.timeout_ms),
                    Duration::minutes(config.forecast.refresh_minutes),
                    panels,
                ))
            }
            (None, None) => Box::new(providers::FileForecast::new(data_dir.join("forecast.json"))),
        };

        let backends: BackendFactory = match config.llm.backend {
            LlmBackendKind::Mock => Arc::new(|persona| Box::new(MockBackend::for_persona(persona))),
            LlmBackendKind::Remote => {
                use washy::agent::remote::{DEFAULT_MODEL, ENV_KEY, ENV_MODEL, ENV_URL};
                let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
                let url = env(ENV_URL).or_else(|| config.llm.url.clone()).unwrap_or_default();
                let model = env(ENV_MODEL)
                    .or_else(|| config.llm.model.clone())
                    .unwrap_or_else(|| DEFAULT_MODEL.to_string());
                let mut remote = RemoteConfig::new(url, model);
                remote.api_key = env(ENV_KEY);
                Arc::new(move |_| Box::new(ChatCompletionsBackend::new(remote.clone())))
            }
        };

        Ok(Self {
            clock,
            virtual_clock,
            sessions: Sessions::open(data_dir.join("sessions.json"))?,
            data_dir,
            step_minutes: config.step_minutes,
            tick_period: StdDuration::from_secs(config.tick_seconds),
            household: Mutex::new(household),
            tokens,
            forecast,
            backends,
        })
    }

    /// Replaces the language model backend, e.g. with a failing stub.
    pub fn with_backend_factory(mut self, factory: BackendFactory) -> Self {
        self.backends = factory;
        self
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn tick(&self) -> Vec<TickEvent> {
        let now = self.now();
        self.household().tick(now)
    }

    fn household(&self) -> std::sync::MutexGuard<'_, Household> {
        self.household.lock().expect("household poisoned")
    }

    /// Steps the virtual clock and runs a tick at the new instant.
    pub fn advance_clock(&self, step: Duration) -> Result<DateTime<Utc>, ApiError> {
        let vc = self
            .virtual_clock
            .as_ref()
            .ok_or_else(|| ApiError::conflict("the service is running on the wall clock"))?;
        let now = vc.advance(step);
        write_json_atomic(&self.data_dir.join("clock.json"), &ClockRecord { now }).map_err(ApiError::internal)?;
        self.household().tick(now);
        Ok(now)
    }

    pub fn authenticate(&self, headers: &HeaderMap) -> Result<UserProfile, ApiError> {
        let token = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(ApiError::unauthorized)?;
        self.tokens.get(token).cloned().ok_or_else(ApiError::unauthorized)
    }

    /// Runs one chat turn for `profile`. Blocks on the backend.
    pub fn chat(&self, profile: &UserProfile, message: &str) -> Result<Value, ApiError> {
        let session = self.sessions.get(profile);
        let mut session = session.lock().expect("session poisoned");
        let mut backend = (self.backends)(profile.persona);
        let env = ToolEnv {
            profile,
            now: self.now(),
            forecast: self.forecast.as_ref(),
            step_minutes: self.step_minutes,
            household: &self.household,
        };
        let outcome =
            run_turn(&mut session, message, &mut backend, &env).map_err(|e| ApiError::bad_gateway(e.to_string()))?;
        if let Err(e) = self.sessions.save(&session) {
            log::error!("{e}");
        }
        Ok(json!({
            "reply": outcome.text,
            "class": outcome.tags.class,
            "sentiment": outcome.tags.sentiment,
            "persona": profile.persona,
            "tool_calls": outcome.tool_calls.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            "degraded": outcome.backend_error.is_some(),
        }))
    }

    pub fn slots(&self, profile: &UserProfile) -> Result<Value, ApiError> {
        let tz = tz_of(profile)?;
        let now = self.now();
        let listing = self.household().reminders.list(&profile.id, now);
        Ok(json!({
            "now": iso_local(now, tz),
            "timezone": profile.timezone,
            "active": listing.active.iter().map(|r| reminder_view(r, tz)).collect::<Vec<_>>(),
            "recently_expired": listing.recently_expired.iter().map(|r| reminder_view(r, tz)).collect::<Vec<_>>(),
        }))
    }

    pub fn confirm(&self, profile: &UserProfile, id: &str) -> Result<Value, ApiError> {
        let r = self
            .household()
            .reminders
            .confirm(&ReminderId(id.to_string()), &profile.id)?;
        Ok(reminder_view(&r, tz_of(profile)?))
    }

    pub fn cancel(&self, profile: &UserProfile, id: &str) -> Result<Value, ApiError> {
        let r = self
            .household()
            .reminders
            .cancel(&ReminderId(id.to_string()), &profile.id)?;
        Ok(reminder_view(&r, tz_of(profile)?))
    }

    pub fn poll(&self, profile: &UserProfile) -> Result<Value, ApiError> {
        let tz = tz_of(profile)?;
        let events = self.household().poll(&profile.id);
        Ok(json!({ "events": events.iter().map(|e| event_view(e, tz)).collect::<Vec<_>>() }))
    }

    pub fn acknowledge(&self, profile: &UserProfile, id: &str) -> Result<Value, ApiError> {
        let event = self.household().acknowledge(&profile.id, &ReminderId(id.to_string()))?;
        Ok(event_view(&event, tz_of(profile)?))
    }

    pub fn device(&self, profile: &UserProfile) -> Result<Value, ApiError> {
        let now = self.now();
        let state = self
            .household()
            .appliance(&profile.id, now)
            .plug_status(now)
            .map_err(|e| ApiError::bad_gateway(e.to_string()))?;
        Ok(device_view(&state, tz_of(profile)?))
    }

    pub fn set_program(&self, profile: &UserProfile, latched: bool) -> Result<Value, ApiError> {
        let now = self.now();
        let mut home = self.household();
        let appliance = home.appliance(&profile.id, now);
        let state = if latched {
            appliance.latch_program(now)
        } else {
            appliance.clear_latch(now)
        };
        Ok(device_view(&state, tz_of(profile)?))
    }

    pub fn me(&self, profile: &UserProfile) -> Value {
        json!({
            "id": profile.id,
            "display_name": profile.display_name,
            "timezone": profile.timezone,
            "persona": profile.persona,
            "default_power_watts": profile.default_power_watts,
        })
    }

    pub fn clock_view(&self, profile: &UserProfile) -> Result<Value, ApiError> {
        let now = self.now();
        Ok(json!({
            "now": iso_local(now, tz_of(profile)?),
            "now_utc": iso_utc(now),
            "virtual": self.virtual_clock.is_some(),
        }))
    }
}

fn tz_of(profile: &UserProfile) -> Result<Tz, ApiError> {
    profile.tz().map_err(ApiError::internal)
}

pub fn reminder_view(r: &Reminder, tz: Tz) -> Value {
    json!({
        "id": r.id,
        "slot_start": iso_local(r.slot_start, tz),
        "slot_start_utc": iso_utc(r.slot_start),
        "slot_end": iso_local(r.slot_end(), tz),
        "notify_at": iso_local(r.notify_at(), tz),
        "duration_minutes": r.duration_minutes,
        "lead_minutes": r.lead_minutes,
        "state": r.state,
        "quality": r.quality_at_booking,
    })
}

fn event_view(e: &NotificationEvent, tz: Tz) -> Value {
    json!({
        "reminder_id": e.reminder_id,
        "fires_at": iso_local(e.fires_at, tz),
        "slot_start": iso_local(e.slot_start, tz),
        "acknowledged": e.acknowledged,
    })
}

fn device_view(s: &DeviceState, tz: Tz) -> Value {
    json!({
        "plug_on": s.plug_on,
        "running": s.running,
        "program_latched": s.program_latched,
        "last_change": iso_local(s.last_change, tz),
    })
}

type Shared = Arc<AppState>;
type ApiResult = Result<Json<Value>, ApiError>;

async fn blocking<F>(f: F) -> ApiResult
where
    F: FnOnce() -> Result<Value, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map(Json)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::unprocessable("malformed request body").with_detail(e.to_string()))
}

#[derive(Deserialize)]
struct ChatBody {
    message: String,
}

#[derive(Deserialize)]
struct ProgramBody {
    latched: bool,
}

#[derive(Deserialize)]
struct AdvanceBody {
    #[serde(default)]
    minutes: i64,
    #[serde(default)]
    seconds: i64,
}

async fn chat(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    let body: ChatBody = parse_body(&body)?;
    if body.message.trim().is_empty() {
        return Err(ApiError::unprocessable("message must not be empty"));
    }
    blocking(move || st.chat(&profile, &body.message)).await
}

async fn slots(State(st): State<Shared>, headers: HeaderMap) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.slots(&profile)).await
}

async fn confirm(State(st): State<Shared>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.confirm(&profile, &id)).await
}

async fn cancel(State(st): State<Shared>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.cancel(&profile, &id)).await
}

async fn poll(State(st): State<Shared>, headers: HeaderMap) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.poll(&profile)).await
}

async fn ack(State(st): State<Shared>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.acknowledge(&profile, &id)).await
}

async fn device(State(st): State<Shared>, headers: HeaderMap) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    blocking(move || st.device(&profile)).await
}

async fn program(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    let body: ProgramBody = parse_body(&body)?;
    blocking(move || st.set_program(&profile, body.latched)).await
}

async fn me(State(st): State<Shared>, headers: HeaderMap) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    Ok(Json(st.me(&profile)))
}

async fn clock_now(State(st): State<Shared>, headers: HeaderMap) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    st.clock_view(&profile).map(Json)
}

async fn clock_advance(State(st): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let profile = st.authenticate(&headers)?;
    let body: AdvanceBody = parse_body(&body)?;
    let total = body.minutes.saturating_mul(60).saturating_add(body.seconds);
    if total <= 0 {
        return Err(ApiError::unprocessable("the clock only moves forward"));
    }
    blocking(move || {
        st.advance_clock(Duration::seconds(total))?;
        st.clock_view(&profile)
    })
    .await
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/chat", post(chat))
        .route("/slots", get(slots))
        .route("/reminders/{id}/confirm", post(confirm))
        .route("/reminders/{id}/cancel", post(cancel))
        .route("/notifications/poll", get(poll))
        .route("/notifications/{id}/ack", post(ack))
        .route("/device", get(device))
        .route("/device/program", post(program))
        .route("/me", get(me))
        .route("/clock", get(clock_now))
        .route("/clock/advance", post(clock_advance))
        .route("/healthz", get(|| async { "ok" }))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Runs `tick` on the configured cadence until the runtime shuts down.
pub fn spawn_tick_loop(state: Shared) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(state.tick_period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let st = state.clone();
            match tokio::task::spawn_blocking(move || st.tick()).await {
                Ok(events) if !events.is_empty() => log::info!("tick produced {} events", events.len()),
                Ok(_) => {}
                Err(e) => log::error!("tick failed: {e}"),
            }
        }
    })
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::from_config(config)?);
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let ticker = spawn_tick_loop(state.clone());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    ticker.abort();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_persona_is_kept() {
        let stored = vec![UserAccount {
            id: UserId::new("alice"),
            display_name: "Alice".into(),
            timezone: "Europe/Rome".into(),
            persona: PersonaKind::Personified,
            default_power_watts: 1000.0,
            panel: None,
        }];
        let configured = vec![UserConfig {
            token: "t".into(),
            id: "alice".into(),
            display_name: "Alice R.".into(),
            timezone: "Europe/Rome".into(),
            persona: PersonaKind::Traditional,
            default_power_watts: 1200.0,
            panel: None,
        }];
        let merged = merge_accounts(stored, &configured);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].persona, PersonaKind::Personified);
        assert_eq!(merged[0].display_name, "Alice R.");
        assert_eq!(merged[0].default_power_watts, 1200.0);
    }
}
