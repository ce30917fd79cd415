use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use armstack::wire::{Mode, ServerMessage};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_armstack");
const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../demo/pick_place");

fn armstack(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A `serve --sim` child on an ephemeral port.
struct Served {
    child: Child,
    addr: String,
}

impl Served {
    fn start(extra: &[&str]) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--sim", "--bind", "127.0.0.1:0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_owned();
        Self { child, addr }
    }

    fn get(&self, path: &str) -> (u16, String) {
        http_get(&self.addr, path)
    }

    fn interrupt(mut self) -> std::process::ExitStatus {
        let ok = Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap();
        assert!(ok.success());
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            assert!(Instant::now() < deadline, "serve ignored SIGINT");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn http_get(addr: &str, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let status = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = text
        .split_once("\r\n\r\n")
        .map(|(_, b)| b.to_owned())
        .unwrap_or_default();
    (status, body)
}

fn wait_for_state(served: &Served) -> Value {
    let deadline = Instant::now() + Duration::from_secs(1);
    loop {
        let (status, body) = served.get("/state");
        if status == 200 {
            return serde_json::from_str(&body).unwrap();
        }
        assert!(Instant::now() < deadline, "no /state within 1 s");
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn script_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn serve_without_transport_is_a_config_error() {
    let o = armstack(&["serve"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--sim"), "{}", stderr(&o));
}

#[test]
fn serve_rejects_two_transports() {
    let o = armstack(&["serve", "--sim", "--serial", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_serial_device_is_a_transport_error() {
    let o = armstack(&["serve", "--serial", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent"), "{}", stderr(&o));
}

#[test]
fn bad_description_is_a_config_error() {
    let o = armstack(&["--description", "/nonexistent.toml", "serve", "--sim"]);
    assert_eq!(o.status.code(), Some(2));
    let f = script_file("schema_version = 1\nh0 = [\n");
    let o = armstack(&["envelope", "--description", f.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn serve_answers_and_shuts_down_cleanly() {
    let served = Served::start(&[]);
    let state = wait_for_state(&served);
    assert_eq!(state["mode"], "idle");
    assert_eq!(state["v"], 1);
    let (status, body) = served.get("/description");
    assert_eq!(status, 200);
    assert!(body.contains("\"motor_id\""));
    assert_eq!(served.interrupt().code(), Some(0));
}

#[test]
fn bind_address_comes_from_the_environment() {
    let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = probe.local_addr().unwrap().to_string();
    drop(probe);
    let mut child = Command::new(BIN)
        .args(["serve", "--sim"])
        .env("ARMSTACK_BIND", &addr)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(line.trim(), format!("listening on {addr}"));
}

fn jog(served: &Served, keys: &str) -> Output {
    let mut child = Command::new(BIN)
        .args([
            "jog",
            "--porcelain",
            "--connect",
            &format!("ws://{}/ws", served.addr),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(keys.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn messages(o: &Output) -> Vec<ServerMessage> {
    stdout(o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l:?}: {e}")))
        .collect()
}

#[test]
fn keyboard_jog_moves_the_selected_motor() {
    let served = Served::start(&[]);
    wait_for_state(&served);
    let o = jog(&served, "1++q");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let msgs = messages(&o);
    let acks: Vec<_> = msgs
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Ack(a) => Some(a),
            _ => None,
        })
        .collect();
    assert_eq!(acks.len(), 2);
    assert!(acks.iter().all(|a| a.ok));
    let Some(ServerMessage::State(last)) = msgs.last() else {
        panic!("no final state")
    };
    assert_eq!(last.mode, Mode::Idle);
    // default step 20 ticks, twice
    assert_eq!(last.ticks[0], 2048 + 40);
    assert!((last.q[0].to_degrees() - 2.0 * 20.0 * 360.0 / 4096.0).abs() < 1e-9);
}

#[test]
fn gripper_keys_and_motor_selection() {
    let served = Served::start(&[]);
    wait_for_state(&served);
    let o = jog(&served, "3--q");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let Some(ServerMessage::State(last)) = messages(&o).pop() else {
        panic!()
    };
    assert_eq!(last.ticks[2], 2048 - 40);
    // a gripper move replaces an unfinished jog, so it gets its own session
    let o = jog(&served, "G q");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let Some(ServerMessage::State(last)) = messages(&o).pop() else {
        panic!()
    };
    assert_eq!(last.ticks[2], 2048 - 40);
    assert!((last.w - 0.06).abs() < 1e-3, "{}", last.w);
}

#[test]
fn quitting_at_once_sends_nothing() {
    let served = Served::start(&[]);
    wait_for_state(&served);
    let o = jog(&served, "q");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(messages(&o)
        .iter()
        .all(|m| !matches!(m, ServerMessage::Ack(_))));
    assert_eq!(wait_for_state(&served)["cmd_seq"], 0);
}

#[test]
fn jog_without_service_is_a_connection_error() {
    let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = probe.local_addr().unwrap();
    drop(probe);
    let o = Command::new(BIN)
        .args(["jog", "--connect", &format!("ws://{addr}/ws")])
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unreachable_script_line_is_a_motion_error() {
    let f = script_file("gripper 0.03\nmove_line 0.35 0 0.10 1.5708\nhome\n");
    let path = f.path().to_str().unwrap();
    for extra in [&["--sim"][..], &["--dry-run"][..]] {
        let mut args = vec!["script", "run", path];
        args.extend_from_slice(extra);
        let o = armstack(&args);
        assert_eq!(o.status.code(), Some(4), "{extra:?}");
        let err = stderr(&o);
        assert!(
            err.contains("line 2") && err.contains("unreachable"),
            "{err}"
        );
    }
}

#[test]
fn script_syntax_error_is_a_config_error() {
    let f = script_file("home\nmove_joints 0 0\n");
    let o = armstack(&["script", "run", f.path().to_str().unwrap(), "--sim"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn script_needs_a_transport_unless_dry() {
    let o = armstack(&["script", "run", DEMO]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_reports_durations_without_sending() {
    let o = armstack(&["script", "run", DEMO, "--dry-run", "--porcelain"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (summary, reports) = lines.split_last().unwrap();
    assert_eq!(summary["commands_sent"], 0);
    let total: f64 = reports
        .iter()
        .map(|r| r["duration_s"].as_f64().unwrap())
        .sum();
    assert!((summary["total_duration_s"].as_f64().unwrap() - total).abs() < 1e-9);
    assert!(total > 0.0);
    assert!(reports
        .iter()
        .all(|r| r.get("reached").is_none() && r.get("seq").is_none()));
}

#[test]
fn dry_run_matches_executed_durations() {
    let dry = armstack(&["script", "run", DEMO, "--dry-run", "--porcelain"]);
    let wet = armstack(&["script", "run", DEMO, "--sim", "--porcelain"]);
    assert_eq!(wet.status.code(), Some(0), "{}", stderr(&wet));
    let parse = |o: &Output| -> Vec<Value> {
        stdout(o)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let (dry, wet) = (parse(&dry), parse(&wet));
    assert_eq!(dry.len(), wet.len());
    for (d, w) in dry.iter().zip(&wet).take(dry.len() - 1) {
        assert_eq!(d["line"], w["line"]);
        let diff = w["duration_s"].as_f64().unwrap() - d["duration_s"].as_f64().unwrap();
        assert!(diff.abs() < 1e-9, "{d} vs {w}");
    }
}

#[test]
fn envelope_of_default_and_custom_descriptions() {
    let o = armstack(&["envelope", "--samples", "20000"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("max horizontal radius  0.3000 m"), "{out}");
    assert!(out.contains("max tool height        0.4000 m"), "{out}");

    let text = armstack::description::DEFAULT_DESCRIPTION.replacen("h0 = 0.10", "h0 = 0.20", 1);
    let f = script_file(&text);
    let o = armstack(&[
        "envelope",
        "--samples",
        "20000",
        "--description",
        f.path().to_str().unwrap(),
    ]);
    assert!(
        stdout(&o).contains("max tool height        0.5000 m"),
        "{}",
        stdout(&o)
    );
}
