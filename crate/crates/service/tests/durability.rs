mod common;

use std::collections::BTreeSet;

use axum::http::StatusCode;
use common::*;
use diag_assistant::store::{ActionKind, ActionLogEntry, LearningNote};
use serde_json::json;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn notes_and_log_survive_restart_and_concurrent_writers() {
    let cfg = trained("durability");
    let ids: Vec<String> = {
        let (ds, _) = diag_assistant::pipeline::load_dataset(&cfg).unwrap();
        ds.records().iter().map(|r| r.card_id.clone()).collect()
    };

    let before = {
        let (app, _) = app(&cfg);
        let mut tasks = Vec::new();
        for k in 0..24 {
            let app = app.clone();
            let id = ids[k % ids.len()].clone();
            tasks.push(tokio::spawn(async move {
                let body = json!({"author": format!("writer{k}"), "card_ids": [id], "text": format!("note {k}")});
                post_json(&app, "/api/notes", body).await
            }));
        }
        let mut notes = Vec::new();
        for t in tasks {
            let (status, body) = t.await.unwrap();
            assert_eq!(status, StatusCode::CREATED);
            notes.push(conforms::<LearningNote>(&body).unwrap());
        }
        let got: BTreeSet<u64> = notes.iter().map(|n| n.note_id).collect();
        assert_eq!(got, (1..=24).collect());
        post_json(
            &app,
            "/api/compare",
            json!({"card_a": ids[0], "card_b": ids[1]}),
        )
        .await;
        let (_, listed) = get_json(&app, "/api/notes").await;
        let listed: Vec<LearningNote> = conforms(&listed).unwrap();
        // the store hands out ids in write order
        assert!(listed
            .windows(2)
            .all(|w| w[0].note_id < w[1].note_id && w[0].created_at <= w[1].created_at));
        let (_, log) = get_json(&app, "/api/actions").await;
        (listed, conforms::<Vec<ActionLogEntry>>(&log).unwrap())
    };
    assert_eq!(before.1.len(), 25);

    // a new service instance over the same directories
    let (app, _) = app(&cfg);
    let (_, listed) = get_json(&app, "/api/notes").await;
    assert_eq!(conforms::<Vec<LearningNote>>(&listed).unwrap(), before.0);
    let (_, log) = get_json(&app, "/api/actions").await;
    assert_eq!(conforms::<Vec<ActionLogEntry>>(&log).unwrap(), before.1);

    let (_, body) = post_json(&app, "/api/notes", json!({"text": "after restart"})).await;
    assert_eq!(conforms::<LearningNote>(&body).unwrap().note_id, 25);
    let (_, log) = get_json(&app, "/api/actions").await;
    let log: Vec<ActionLogEntry> = conforms(&log).unwrap();
    assert_eq!(log.last().unwrap().seq, 26);
    assert_eq!(log.last().unwrap().kind, ActionKind::Note);
    assert_eq!(
        log.iter().filter(|e| e.kind == ActionKind::Compare).count(),
        1
    );
}
