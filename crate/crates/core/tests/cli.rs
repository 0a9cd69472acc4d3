//! Runs the `inpaint` binary end to end.

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use inpaint_core::dialog::Dialog;
use inpaint_core::fixtures::example_dialogs;

fn inpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inpaint"))
        .args(args)
        .env_remove("INPAINT_LM_ENDPOINT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_passages(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("passages.jsonl");
    fs::write(
        &p,
        concat!(
            r#"{"id": "a", "title": "Alpha", "text": "Alpha is first. It has two sentences."}"#,
            "\n",
            r#"{"id": "b", "title": "Beta", "text": "Beta is second. Dr. Smith wrote it. It ends here."}"#,
            "\n"
        ),
    )
    .unwrap();
    p
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&inpaint(&["--help"])), 0);
    assert_eq!(code(&inpaint(&["eval", "--help"])), 0);
    assert_eq!(code(&inpaint(&[])), 1);
    assert_eq!(code(&inpaint(&["no-such-command"])), 1);
    assert_eq!(code(&inpaint(&["eval", "--run", "x"])), 1);
}

#[test]
fn missing_input_is_a_data_error_naming_the_file() {
    let o = inpaint(&["analyze-questions", "--dialogs", "/nonexistent/d.jsonl", "--out", "/tmp/x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/d.jsonl"));
}

#[test]
fn stub_inpainting_writes_dialogs() {
    let dir = tempfile::tempdir().unwrap();
    let passages = write_passages(dir.path());
    let out = dir.path().join("dialogs.jsonl");
    let o = inpaint(&["inpaint", "--passages", path(&passages), "--out", path(&out), "--stub-template", "Q{step} on {title}?"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dialogs: Vec<Dialog> = fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(dialogs.len(), 2);
    assert_eq!(dialogs[1].len(), 7);
    assert_eq!(dialogs[1].utterances[4].text, "Dr. Smith wrote it.");
    assert_eq!(dialogs[1].utterances[5].text, "Q3 on Beta?");
}

#[test]
fn unreachable_generator_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let passages = write_passages(dir.path());
    let out = dir.path().join("dialogs.jsonl");
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let o = inpaint(&[
        "inpaint", "--passages", path(&passages), "--out", path(&out), "--backend", "http", "--endpoint", &endpoint,
        "--timeout", "0.2",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let rejects = fs::read_to_string(dir.path().join("dialogs.jsonl.rejects.jsonl")).unwrap();
    assert_eq!(rejects.lines().count(), 2);
}

#[test]
fn http_backend_without_endpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let passages = write_passages(dir.path());
    let o = inpaint(&["inpaint", "--passages", path(&passages), "--out", "/tmp/unused.jsonl", "--backend", "http"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_with_cast20_preset() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.txt");
    let qrels = dir.path().join("qrels.txt");
    fs::write(&run, "q1 Q0 d1 1 3.0 t\nq1 Q0 d2 2 2.0 t\nq1 Q0 d3 3 1.0 t\nq2 Q0 d4 1 1.0 t\n").unwrap();
    fs::write(&qrels, "q1 0 d1 1\nq1 0 d2 2\nq2 0 d4 3\n").unwrap();
    let csv = dir.path().join("report.csv");
    let o = inpaint(&[
        "eval", "--run", path(&run), "--qrels", path(&qrels), "--preset", "cast20", "--metrics", "mrr", "--out",
        path(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // grade-1 d1 does not count under cast20: q1 scores 1/2, q2 scores 1
    let report = fs::read_to_string(&csv).unwrap();
    assert!(report.lines().any(|l| l == "mrr,all,0.75"), "{report}");

    let o = inpaint(&["eval", "--run", path(&run), "--qrels", path(&qrels), "--metrics", "map"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn analysis_commands() {
    let dir = tempfile::tempdir().unwrap();
    let dialogs = dir.path().join("fixtures.jsonl");
    let lines: Vec<String> = example_dialogs().iter().map(|d| serde_json::to_string(d).unwrap()).collect();
    fs::write(&dialogs, lines.join("\n")).unwrap();

    let dist = dir.path().join("dist.csv");
    assert_eq!(code(&inpaint(&["analyze-questions", "--dialogs", path(&dialogs), "--out", path(&dist)])), 0);
    assert!(fs::read_to_string(&dist).unwrap().contains(",what is,"));

    let ratings = dir.path().join("ratings.csv");
    fs::write(&ratings, "a,a,b\nb,b,b\na,,a\n").unwrap();
    let o = inpaint(&["alpha", "--ratings", path(&ratings)]);
    assert_eq!(code(&o), 0);
    let alpha: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(alpha < 1.0 && alpha > 0.0);

    fs::write(&ratings, "a,a\n").unwrap();
    assert_eq!(code(&inpaint(&["alpha", "--ratings", path(&ratings)])), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let passages = write_passages(dir.path());
    let out = dir.path().join("dialogs.jsonl");
    let config = dir.path().join("config.toml");
    fs::write(&config, "[inpaint]\nstub_template = \"From config {step}?\"\nmax_sentences = 1\n").unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", path(&config), "inpaint", "--passages", path(&passages), "--out", path(&out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&inpaint(&args)), 0);
        let first: Dialog = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
        first
    };
    let d = run(&[]);
    assert_eq!(d.len(), 3);
    assert_eq!(d.utterances[1].text, "From config 1?");
    let d = run(&["--max-sentences", "2"]);
    assert_eq!(d.len(), 5);
}
