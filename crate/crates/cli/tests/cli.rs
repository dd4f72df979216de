use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxmesh"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// A serving node, killed on drop.
struct Node {
    child: Child,
    url: String,
}

impl Drop for Node {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn(args: &[&str]) -> Node {
    let mut child = bin()
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn ctxmesh");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Node { child, url }
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("run ctxmesh")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn query_against_empty_broker_prints_empty_list() {
    let b = spawn(&["broker", "serve"]);
    let out = run(&["query", "--broker", &b.url, "--type", "Room"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "[]");
}

#[test]
fn publish_then_query_round_trips() {
    let b = spawn(&["broker", "serve", "--node-id", "b1"]);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("elements.json");
    let elements = json!([{"entity": {"type": "Room", "id": "r1"},
        "attributes": [{"name": "temperature", "type": "Number", "value": 21.5,
                        "metadata": [{"name": "unit", "type": "Text", "value": "celsius"}]}]}]);
    std::fs::write(&file, elements.to_string()).unwrap();
    let out = run(&["publish", "--broker", &b.url, "--file", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["query", "--broker", &b.url, "--type", "Room", "--id", "r1"]);
    assert_eq!(out.status.code(), Some(0));
    let got = stdout_json(&out);
    assert_eq!(got[0]["entity"]["id"], "r1");
    assert_eq!(got[0]["attributes"][0]["value"], 21.5);
    assert_eq!(got[0]["attributes"][0]["metadata"][0]["value"], "celsius");
}

#[test]
fn federation_over_http() {
    let b = spawn(&["broker", "serve"]);
    let d = spawn(&["discovery", "serve"]);
    let f = spawn(&["federate", "serve", "--node-id", "f1", "--discovery", &d.url]);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("e.json");
    std::fs::write(
        &file,
        json!([{"entity": {"type": "Vehicle", "id": "car-1"},
                "attributes": [{"name": "speed", "type": "Number", "value": 42}]}])
        .to_string(),
    )
    .unwrap();
    assert!(run(&["publish", "--broker", &b.url, "--file", file.to_str().unwrap()]).status.success());

    let reg = json!({"entities": [{"type": "Vehicle", "id": ".*", "isPattern": true}],
                     "providingEndpoint": b.url});
    let out = bin_request(&d.url, "/v1/registerContext", &reg);
    assert!(out.get("registrationId").is_some(), "{out}");

    let out = run(&["discover", "--discovery", &d.url, "--type", "Vehicle"]);
    assert_eq!(stdout_json(&out)[0]["providingEndpoint"], json!(b.url));

    let out = run(&["query", "--broker", &f.url, "--type", "Vehicle"]);
    assert_eq!(out.status.code(), Some(0));
    let got = stdout_json(&out);
    assert_eq!(got.as_array().unwrap().len(), 1);
    assert_eq!(got[0]["attributes"][0]["value"], 42);
}

/// Raw HTTP POST for paths the CLI has no command for.
fn bin_request(base: &str, path: &str, body: &Value) -> Value {
    let addr = base.strip_prefix("http://").unwrap();
    let payload = body.to_string();
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    s.write_all(req.as_bytes()).unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let body = resp.split("\r\n\r\n").nth(1).unwrap_or_default();
    serde_json::from_str(body).unwrap_or(Value::Null)
}

#[test]
fn waterproof_scenario_exits_zero() {
    let script = scenarios().join("waterproof.json");
    let out = run(&["scenario", "run", "--script", script.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("scenario waterproof: PASS"));

    let out = run(&["scenario", "run", "--script", script.to_str().unwrap(), "--format", "json"]);
    assert_eq!(stdout_json(&out)["passed"], json!(true));
}

#[test]
fn failed_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    std::fs::write(
        &file,
        r#"{"nodes": [{"kind": "broker", "name": "b"}],
            "steps": [{"do": "expectQuery", "node": "b",
                       "query": {"entities": [{"type": "Room", "id": "r1"}]}, "elements": [], "count": 1}]}"#,
    )
    .unwrap();
    let out = run(&["scenario", "run", "--script", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_and_script_errors_exit_two() {
    assert_eq!(run(&["query", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("broken.json");
    std::fs::write(&file, "{\n  \"steps\": [\n    {\"do\": \"publish\", \"node\": \"ghost\", \"elements\": []}\n  ]\n}").unwrap();
    let out = run(&["scenario", "run", "--script", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let out = run(&["scenario", "run", "--script", "/nonexistent/script.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_broker_exits_one() {
    let out = run(&["query", "--broker", "http://127.0.0.1:9", "--type", "Room"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn history_follows_broker_over_http() {
    let b = spawn(&["broker", "serve"]);
    let data = tempfile::tempdir().unwrap();
    let h = spawn(&[
        "history",
        "serve",
        "--broker",
        &b.url,
        "--type",
        "Room",
        "--data-dir",
        data.path().to_str().unwrap(),
    ]);
    for (i, v) in [20.0, 21.0, 22.5].iter().enumerate() {
        let el = json!({"elements": [{"entity": {"type": "Room", "id": "r1"},
            "attributes": [{"name": "t", "type": "Number", "value": v,
                "metadata": [{"name": "timestamp", "type": "number", "value": 1000 * (i + 1)}]}]}]});
        bin_request(&b.url, "/v1/updateContext", &el);
    }
    let q = json!({"entity": {"type": "Room", "id": "r1"}, "attribute": "t", "from": 0, "to": 10_000});
    let mut got = Value::Null;
    for _ in 0..100 {
        got = bin_request(&h.url, "/v1/history/raw", &q)["records"].take();
        if got.as_array().is_some_and(|a| a.len() == 3) {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let values: Vec<f64> = got.as_array().unwrap().iter().map(|r| r["value"].as_f64().unwrap()).collect();
    assert_eq!(values, vec![20.0, 21.0, 22.5]);
}
