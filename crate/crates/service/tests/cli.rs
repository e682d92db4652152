mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::*;
use diag_core::explain::AttributionBundle;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diag-assistant"))
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn serve_before_train_names_the_missing_step() {
    let dir = scratch("cli-untrained");
    small_config(&dir);
    let out = bin(&dir, &["serve", "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("diag-assistant train"),
        "{}",
        stderr(&out)
    );

    let out = bin(&dir, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("generate-data"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2() {
    let dir = scratch("cli-config");
    std::fs::write(
        dir.join("diag-assistant.toml"),
        "[synthetic]\nn_patients = 90\nflavour = 1\n",
    )
    .unwrap();
    let out = bin(&dir, &["generate-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("flavour"), "{}", stderr(&out));

    std::fs::write(
        dir.join("diag-assistant.toml"),
        "bind = \"not an address\"\n",
    )
    .unwrap();
    assert_eq!(bin(&dir, &["generate-data"]).status.code(), Some(2));

    // argument errors share the code
    assert_eq!(
        bin(&dir, &["evaluate", "--fusion", "sideways"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(bin(&dir, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn pipeline_runs_end_to_end_from_an_empty_directory() {
    let dir = scratch("cli-pipeline");
    small_config(&dir);
    for step in ["generate-data", "train", "evaluate", "project"] {
        let out = bin(&dir, &[step]);
        assert!(out.status.success(), "{step}: {}", stderr(&out));
    }
    let artifacts = dir.join("artifacts");
    let eval = std::fs::read(artifacts.join("evaluation.json")).unwrap();
    let report = std::fs::read(artifacts.join("fusion-report.json")).unwrap();
    assert!(bin(&dir, &["evaluate"]).status.success());
    assert_eq!(
        std::fs::read(artifacts.join("evaluation.json")).unwrap(),
        eval
    );
    assert_eq!(
        std::fs::read(artifacts.join("fusion-report.json")).unwrap(),
        report
    );

    let out = bin(&dir, &["evaluate", "--fusion", "decision"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("decision-level"));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("feature-level"));

    let cfg = small_config(&dir);
    let (ds, _) = diag_assistant::pipeline::load_dataset(&cfg).unwrap();
    let id = ds.records()[4].card_id.clone();
    let out = bin(&dir, &["explain", &id]);
    assert!(out.status.success(), "{}", stderr(&out));
    let printed: AttributionBundle = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed.card_id, id);
    assert_eq!(printed.indicator.as_ref().unwrap().phi.len(), 37);

    let file = dir.join("bundle.json");
    let out = bin(
        &dir,
        &[
            "explain",
            &id,
            "--class",
            "bulging",
            "--out",
            file.to_str().unwrap(),
        ],
    );
    assert!(out.status.success());
    let written: AttributionBundle =
        serde_json::from_slice(&std::fs::read(&file).unwrap()).unwrap();
    assert_eq!(written.target_class.name(), "bulging");

    let out = bin(&dir, &["explain", "nobody"]);
    assert_eq!(out.status.code(), Some(1));

    serve_answers_http(&dir);
}

fn serve_answers_http(dir: &Path) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_diag-assistant"))
        .arg("--dir")
        .arg(dir)
        .args(["serve", "--bind", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let line = lines.next().unwrap().unwrap();
    let addr = line.rsplit("http://").next().unwrap().trim().to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /api/summary HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = &response[response.find("\r\n\r\n").unwrap() + 4..];
    let summary: diag_assistant::api::types::SummaryResponse = serde_json::from_str(body).unwrap();
    assert_eq!(summary.cohort.n_records, 90);
}
