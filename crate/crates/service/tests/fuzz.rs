mod common;

use std::sync::OnceLock;

use axum::http::StatusCode;
use axum::Router;
use common::*;
use diag_assistant::api::types::*;
use diag_assistant::store::LearningNote;
use proptest::prelude::*;
use serde_json::{json, Value};

struct Fixture {
    rt: tokio::runtime::Runtime,
    app: Router,
    ids: Vec<String>,
    _state: tempfile::TempDir,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = trained("fuzz");
        let state = tempfile::tempdir().unwrap();
        let cfg = with_fresh_state(&cfg, state.path());
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        let (app, st) = rt.block_on(async { app(&cfg) });
        let ids = st
            .dataset
            .records()
            .iter()
            .map(|r| r.card_id.clone())
            .collect();
        Fixture {
            rt,
            app,
            ids,
            _state: state,
        }
    })
}

fn card_id() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (0usize..90).prop_map(|i| fixture().ids[i].clone()),
        1 => "[a-z0-9-]{0,12}",
    ]
}

fn coordinate() -> impl Strategy<Value = f64> {
    prop_oneof![-80.0..80.0, Just(0.0), Just(1e9)]
}

fn selection() -> impl Strategy<Value = Value> {
    let space = prop_oneof![
        Just("indicator"),
        Just("text"),
        Just("image"),
        Just("fusion"),
        Just("other")
    ];
    let by_ids = prop::collection::vec(card_id(), 0..6).prop_map(|ids| json!(ids));
    let polygon = prop::collection::vec((coordinate(), coordinate()), 0..7)
        .prop_map(|v| json!(v.into_iter().map(|(x, y)| [x, y]).collect::<Vec<_>>()));
    (
        space,
        prop::option::of(by_ids),
        prop::option::of(polygon),
        prop::option::of("[a-z]{1,6}"),
    )
        .prop_map(|(space, ids, poly, actor)| {
            let mut body = json!({"space": space});
            if let Some(ids) = ids {
                body["card_ids"] = ids;
            }
            if let Some(p) = poly {
                body["polygon"] = p;
            }
            if let Some(a) = actor {
                body["actor"] = json!(a);
            }
            body
        })
}

#[derive(Debug)]
enum Call {
    Select(Value),
    Patient(String, Option<String>),
    Compare(String, String),
    Note(Value),
}

fn call() -> impl Strategy<Value = Call> {
    let class = prop_oneof![
        Just("normal"),
        Just("herniated"),
        Just("bulging"),
        Just("2"),
        Just("7"),
        Just("disc")
    ];
    prop_oneof![
        selection().prop_map(Call::Select),
        (card_id(), prop::option::of(class))
            .prop_map(|(id, c)| Call::Patient(id, c.map(String::from))),
        (card_id(), card_id()).prop_map(|(a, b)| Call::Compare(a, b)),
        (prop::collection::vec(card_id(), 0..3), "[ a-z]{0,20}")
            .prop_map(|(ids, text)| Call::Note(json!({"card_ids": ids, "text": text}))),
    ]
}

/// Checks the body against the type for the route or the error shape.
fn check<T: serde::de::DeserializeOwned + serde::Serialize>(
    status: StatusCode,
    body: &Value,
    ok: StatusCode,
    errors: &[StatusCode],
) -> Result<(), TestCaseError> {
    if status == ok {
        conforms::<T>(body).map_err(TestCaseError::fail)?;
    } else {
        prop_assert!(errors.contains(&status), "status {status} for {body}");
        conforms::<ErrorBody>(body).map_err(TestCaseError::fail)?;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn responses_follow_the_published_shapes(c in call()) {
        let f = fixture();
        let bad = StatusCode::BAD_REQUEST;
        let missing = StatusCode::NOT_FOUND;
        f.rt.block_on(async {
            match c {
                Call::Select(body) => {
                    let (s, b) = post_json(&f.app, "/api/selection", body).await;
                    check::<SelectionResponse>(s, &b, StatusCode::OK, &[bad, missing])
                }
                Call::Patient(id, class) => {
                    let uri = match class {
                        Some(c) => format!("/api/patient/{id}?class={c}"),
                        None => format!("/api/patient/{id}"),
                    };
                    // ids drawn from the regex may be empty, which misses the route
                    let (s, b) = get_json(&f.app, &uri).await;
                    check::<PatientDetail>(s, &b, StatusCode::OK, &[bad, missing])
                }
                Call::Compare(a, b) => {
                    let (s, body) = post_json(&f.app, "/api/compare", json!({"card_a": a, "card_b": b})).await;
                    check::<ComparisonRecord>(s, &body, StatusCode::OK, &[bad, missing])
                }
                Call::Note(body) => {
                    let (s, b) = post_json(&f.app, "/api/notes", body).await;
                    check::<LearningNote>(s, &b, StatusCode::CREATED, &[bad, missing])
                }
            }
        })?;
    }
}
