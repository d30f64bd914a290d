use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;
use washy::agent::{BackendError, BackendReply, BackendRequest, ChatBackend};
use washy::forecast::{save_forecast_file, synth_forecast, triangular_profile};
use washy_service::{router, AppState, ServiceConfig};

const ALICE: &str = "tok-alice";
const BOB: &str = "tok-bob";

fn write_setup(dir: &std::path::Path) -> ServiceConfig {
    let midnight = Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap();
    let series = synth_forecast(&triangular_profile(12.0, 6.0, 3000.0), 3, midnight).unwrap();
    save_forecast_file(&series, dir.join("forecast.json")).unwrap();
    let text = r#"
        data_dir = "data"
        virtual_clock = "2024-06-01T08:00:00Z"
        [forecast]
        fixture = "forecast.json"
        [[users]]
        token = "tok-alice"
        id = "alice"
        display_name = "alice"
        timezone = "Europe/Rome"
        persona = "traditional"
        [[users]]
        token = "tok-bob"
        id = "bob"
        display_name = "bob"
        timezone = "Europe/Rome"
        persona = "personified"
    "#;
    std::fs::write(dir.join("washy.toml"), text).unwrap();
    ServiceConfig::load(dir.join("washy.toml")).unwrap()
}

struct Api {
    state: Arc<AppState>,
}

impl Api {
    fn new(config: &ServiceConfig) -> Self {
        Self {
            state: Arc::new(AppState::from_config(config).unwrap()),
        }
    }

    async fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        };
        let resp = router(self.state.clone())
            .oneshot(req.header("content-type", "application/json").body(body).unwrap())
            .await
            .unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value =
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, value)
    }

    async fn chat(&self, token: &str, message: &str) -> Value {
        let (status, body) = self
            .call("POST", "/chat", Some(token), Some(json!({ "message": message })))
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }

    async fn get(&self, token: &str, path: &str) -> Value {
        let (status, body) = self.call("GET", path, Some(token), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }

    async fn advance(&self, token: &str, minutes: i64) -> Value {
        let (status, body) = self
            .call(
                "POST",
                "/clock/advance",
                Some(token),
                Some(json!({ "minutes": minutes })),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }
}

fn assert_envelope(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(body.get("detail").is_some());
}

#[tokio::test]
async fn requests_without_a_known_token_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));
    for token in [None, Some("nope")] {
        let (status, body) = api.call("GET", "/slots", token, None).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        assert_envelope(&body, "unauthorized");
    }
    let (status, _) = api.call("GET", "/healthz", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = api.call("GET", "/nowhere", Some(ALICE), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_envelope(&body, "not_found");
}

#[tokio::test]
async fn bad_chat_bodies_are_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));
    for body in [json!({ "message": "   " }), json!({ "text": "hi" }), json!([1, 2])] {
        let (status, resp) = api.call("POST", "/chat", Some(ALICE), Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_envelope(&resp, "invalid_request");
    }
}

#[tokio::test]
async fn account_reports_persona() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));
    assert_eq!(api.get(ALICE, "/me").await["persona"], "traditional");
    assert_eq!(api.get(BOB, "/me").await["persona"], "personified");
    let clock = api.get(ALICE, "/clock").await;
    assert_eq!(clock["now"], "2024-06-01T10:00:00+02:00");
    assert_eq!(clock["virtual"], true);
}

#[tokio::test]
async fn booking_to_running_machine_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));

    let r = api.chat(ALICE, "I want to do a laundry lasting 1 hour").await;
    assert_eq!(r["class"], "recommend");
    assert_eq!(r["tool_calls"], json!(["get_timewindows"]));
    let r = api.chat(ALICE, "Schedule it during the best time you suggested").await;
    assert_eq!(r["class"], "compliment");

    let slots = api.get(ALICE, "/slots").await;
    assert_eq!(slots["active"].as_array().unwrap().len(), 1);
    assert_eq!(slots["active"][0]["slot_start"], "2024-06-01T13:30:00+02:00");
    assert_eq!(slots["active"][0]["state"], "scheduled");
    assert_eq!(slots["active"][0]["quality"], "good");

    api.advance(ALICE, 178).await;
    let r = api.chat(ALICE, "Schedule a notification at 13:00").await;
    assert_eq!(r["class"], "compliment");
    assert!(api.get(ALICE, "/notifications/poll").await["events"]
        .as_array()
        .unwrap()
        .is_empty());

    api.advance(ALICE, 2).await;
    let events = api.get(ALICE, "/notifications/poll").await["events"].clone();
    assert_eq!(events.as_array().unwrap().len(), 1);
    assert_eq!(events[0]["slot_start"], "2024-06-01T13:00:00+02:00");
    let id = events[0]["reminder_id"].as_str().unwrap().to_string();

    let (status, dev) = api
        .call("POST", "/device/program", Some(ALICE), Some(json!({ "latched": true })))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dev["running"], false);

    let (status, confirmed) = api
        .call("POST", &format!("/reminders/{id}/confirm"), Some(ALICE), None)
        .await;
    assert_eq!(status, StatusCode::OK, "{confirmed}");
    assert_eq!(confirmed["state"], "confirmed");

    api.state.tick();
    let dev = api.get(ALICE, "/device").await;
    assert_eq!(dev["running"], true);
    assert_eq!(dev["plug_on"], true);
    assert_eq!(dev["last_change"], "2024-06-01T13:00:00+02:00");

    let (status, _) = api
        .call("POST", &format!("/notifications/{id}/ack"), Some(ALICE), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert!(api.get(ALICE, "/notifications/poll").await["events"]
        .as_array()
        .unwrap()
        .is_empty());

    let r = api.chat(ALICE, "Try to stop the washing machine").await;
    assert_eq!(r["class"], "device");
    assert_eq!(api.get(ALICE, "/device").await["running"], false);
}

#[tokio::test]
async fn form_actions_follow_the_transition_table() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));
    api.chat(ALICE, "Schedule a notification at 13:00").await;
    let id = api.get(ALICE, "/slots").await["active"][0]["id"]
        .as_str()
        .unwrap()
        .to_string();

    let (status, body) = api
        .call("POST", &format!("/reminders/{id}/confirm"), Some(ALICE), None)
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_envelope(&body, "conflict");
    assert_eq!(body["detail"]["state"], "scheduled");

    let (status, body) = api.call("POST", "/reminders/missing/confirm", Some(ALICE), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_envelope(&body, "not_found");

    let (status, body) = api
        .call("POST", &format!("/reminders/{id}/cancel"), Some(ALICE), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"], "cancelled");
    let slots = api.get(ALICE, "/slots").await;
    assert!(slots["active"].as_array().unwrap().is_empty());
    assert_eq!(slots["recently_expired"][0]["state"], "cancelled");

    let (status, _) = api
        .call("POST", &format!("/reminders/{id}/cancel"), Some(ALICE), None)
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn advancing_a_wall_clock_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = write_setup(dir.path());
    config.virtual_clock = None;
    let api = Api::new(&config);
    let (status, body) = api
        .call("POST", "/clock/advance", Some(ALICE), Some(json!({ "minutes": 5 })))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_envelope(&body, "conflict");
    let (status, _) = api
        .call("POST", "/clock/advance", Some(ALICE), Some(json!({ "minutes": -5 })))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn restart_reproduces_slots_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_setup(dir.path());
    let (slots_before, poll_before) = {
        let api = Api::new(&config);
        api.chat(ALICE, "I want to do a laundry lasting 1 hour").await;
        api.chat(ALICE, "Schedule a notification at 13:00").await;
        api.chat(BOB, "Schedule a laundry at 10 pm").await;
        api.chat(BOB, "I insist, book it at 10 pm anyway").await;
        api.chat(BOB, "I really want to wash at 10 pm, please book it").await;
        api.advance(ALICE, 185).await;
        let id = api.get(ALICE, "/notifications/poll").await["events"][0]["reminder_id"].clone();
        let (status, _) = api
            .call(
                "POST",
                &format!("/reminders/{}/confirm", id.as_str().unwrap()),
                Some(ALICE),
                None,
            )
            .await;
        assert_eq!(status, StatusCode::OK);
        (
            api.get(ALICE, "/slots").await,
            api.get(ALICE, "/notifications/poll").await,
        )
    };
    let api = Api::new(&config);
    assert_eq!(api.get(ALICE, "/slots").await, slots_before);
    assert_eq!(api.get(ALICE, "/notifications/poll").await, poll_before);
    assert_eq!(
        api.get(BOB, "/slots").await["active"][0]["slot_start"],
        "2024-06-01T22:00:00+02:00"
    );

    // The recommendation made before the restart is still in the history.
    let r = api.chat(ALICE, "Schedule it during the best time you suggested").await;
    assert_eq!(r["class"], "compliment");
    let active = api.get(ALICE, "/slots").await["active"].clone();
    assert!(active
        .as_array()
        .unwrap()
        .iter()
        .any(|s| s["slot_start"] == "2024-06-01T13:30:00+02:00"));
}

struct Unreachable;

impl ChatBackend for Unreachable {
    fn complete(&mut self, _: &BackendRequest) -> Result<BackendReply, BackendError> {
        Err(BackendError::Transport("connection refused".into()))
    }
}

#[tokio::test]
async fn backend_outage_yields_an_apology() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::from_config(&write_setup(dir.path()))
        .unwrap()
        .with_backend_factory(Arc::new(|_| Box::new(Unreachable)));
    let api = Api { state: Arc::new(state) };
    let r = api.chat(ALICE, "hello").await;
    assert_eq!(r["degraded"], true);
    assert_eq!(r["class"], "error");
    assert!(r["reply"].as_str().unwrap().contains("try again"));
}

#[derive(Debug, Clone)]
enum Op {
    Book(bool, usize),
    Confirm(bool, usize),
    Cancel(bool, usize),
    Ack(bool, usize),
    Latch(bool),
    Advance(i64),
}

fn op() -> impl Strategy<Value = Op> {
    let who = any::<bool>();
    prop_oneof![
        (who, 0..5usize).prop_map(|(w, i)| Op::Book(w, i)),
        (who, 0..8usize).prop_map(|(w, i)| Op::Confirm(w, i)),
        (who, 0..8usize).prop_map(|(w, i)| Op::Cancel(w, i)),
        (who, 0..8usize).prop_map(|(w, i)| Op::Ack(w, i)),
        who.prop_map(Op::Latch),
        (1..90i64).prop_map(Op::Advance),
    ]
}

const GOOD_TIMES: [&str; 5] = ["12:30", "13:00", "13:30", "14:00", "14:30"];

fn ids(slots: &Value) -> Vec<String> {
    ["active", "recently_expired"]
        .iter()
        .flat_map(|k| slots[k].as_array().cloned().unwrap_or_default())
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect()
}

async fn interleave(ops: Vec<Op>) {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(&write_setup(dir.path()));
    let token = |alice: bool| if alice { ALICE } else { BOB };
    let mut owned: [Vec<String>; 2] = [Vec::new(), Vec::new()];

    for op in ops {
        let before = [api.get(ALICE, "/slots").await, api.get(BOB, "/slots").await];
        match &op {
            Op::Book(a, i) => {
                api.chat(token(*a), &format!("Schedule a notification at {}", GOOD_TIMES[*i]))
                    .await;
            }
            Op::Confirm(a, i) | Op::Cancel(a, i) | Op::Ack(a, i) => {
                let all: Vec<(usize, String)> = owned
                    .iter()
                    .enumerate()
                    .flat_map(|(u, v)| v.iter().map(move |id| (u, id.clone())))
                    .collect();
                if all.is_empty() {
                    continue;
                }
                let (owner, id) = &all[i % all.len()];
                let path = match op {
                    Op::Confirm(..) => format!("/reminders/{id}/confirm"),
                    Op::Cancel(..) => format!("/reminders/{id}/cancel"),
                    _ => format!("/notifications/{id}/ack"),
                };
                let actor = if *a { 0 } else { 1 };
                let (status, _) = api.call("POST", &path, Some(token(*a)), None).await;
                if actor != *owner {
                    assert_eq!(status, StatusCode::NOT_FOUND, "{op:?} crossed users");
                    let other = if *owner == 0 { ALICE } else { BOB };
                    assert_eq!(
                        api.get(other, "/slots").await,
                        before[*owner],
                        "{op:?} mutated the owner"
                    );
                }
            }
            Op::Latch(a) => {
                let (status, _) = api
                    .call(
                        "POST",
                        "/device/program",
                        Some(token(*a)),
                        Some(json!({ "latched": true })),
                    )
                    .await;
                assert_eq!(status, StatusCode::OK);
            }
            Op::Advance(m) => {
                api.advance(ALICE, *m).await;
            }
        }
        let after = [api.get(ALICE, "/slots").await, api.get(BOB, "/slots").await];
        for (u, slots) in after.iter().enumerate() {
            for id in ids(slots) {
                if !owned[u].contains(&id) {
                    owned[u].push(id);
                }
            }
        }
        assert!(
            owned[0].iter().all(|id| !owned[1].contains(id)),
            "a reminder is visible to both users"
        );
        for (u, tok) in [ALICE, BOB].iter().enumerate() {
            let events = api.get(tok, "/notifications/poll").await;
            for e in events["events"].as_array().unwrap() {
                assert!(owned[u].contains(&e["reminder_id"].as_str().unwrap().to_string()));
            }
        }
        let a = api.get(ALICE, "/device").await;
        let b = api.get(BOB, "/device").await;
        for d in [a, b] {
            assert!(d["running"] == false || d["plug_on"] == true);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, .. ProptestConfig::default() })]

    #[test]
    fn users_never_see_each_other(ops in prop::collection::vec(op(), 1..14)) {
        tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap()
            .block_on(interleave(ops));
    }
}
