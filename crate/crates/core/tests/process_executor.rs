use std::time::{Duration, Instant};

use strategy_distill::runtime::{format_feedback, ExecResult, Executor, ExecutorError, ProcessExecutor, KILL_GRACE};

/// A fake shim: answers the request with a fixed envelope derived from it.
const FAKE_SHIM: &str = r#"
import json, sys
req = json.load(sys.stdin)
code = req["code"]
if code == "boom":
    out = {"stdout": "", "stderr": "RuntimeError: boom", "exit_status": 1, "timed_out": False, "duration_ms": 3}
elif code == "garbage":
    print("not json")
    sys.exit(0)
else:
    out = {"stdout": "ran %s in %.1fs\n" % (code, req["timeout_s"]), "stderr": "", "exit_status": 0, "timed_out": False, "duration_ms": 1}
print(json.dumps(out))
"#;

fn python_available() -> bool {
    std::process::Command::new("python3").arg("-c").arg("pass").status().is_ok_and(|s| s.success())
}

fn fake_shim() -> ProcessExecutor {
    ProcessExecutor::new(vec!["python3".into(), "-c".into(), FAKE_SHIM.into()])
}

#[test]
fn speaks_the_json_protocol() {
    if !python_available() {
        eprintln!("python3 not found; skipping");
        return;
    }
    let exec = fake_shim();
    let ok = exec.submit("print(1)", Duration::from_secs(3)).unwrap();
    assert_eq!(ok, ExecResult { duration_ms: 1, ..ExecResult::ok("ran print(1) in 3.0s\n") });

    let failed = exec.submit("boom", Duration::from_secs(3)).unwrap();
    assert_eq!(failed.exit_status, 1);
    assert_eq!(format_feedback(&failed, Duration::from_secs(3), 2048), "[error] RuntimeError: boom");

    let broken = exec.submit("garbage", Duration::from_secs(3)).unwrap();
    assert_eq!(broken.exit_status, -1);
    assert!(broken.stderr.starts_with("protocol error"), "{}", broken.stderr);
}

#[test]
fn hung_process_is_killed_after_grace() {
    let exec = ProcessExecutor::new(vec!["sleep".into(), "5".into()]);
    let timeout = Duration::from_millis(500);
    let started = Instant::now();
    let result = exec.submit("while True: pass", timeout).unwrap();
    let elapsed = started.elapsed();
    assert!(result.timed_out);
    assert!(elapsed >= timeout + KILL_GRACE, "{elapsed:?}");
    assert!(elapsed < timeout + KILL_GRACE + Duration::from_millis(700), "{elapsed:?}");
    assert_eq!(format_feedback(&result, Duration::from_secs(3), 2048), "[timeout after 3s]");
}

#[test]
fn missing_program_is_unavailable() {
    let exec = ProcessExecutor::new(vec!["/definitely/not/here".into()]);
    assert!(matches!(exec.submit("1", Duration::from_secs(1)), Err(ExecutorError::Unavailable(_))));
    assert!(matches!(
        ProcessExecutor::new(vec![]).submit("1", Duration::from_secs(1)),
        Err(ExecutorError::Unavailable(_))
    ));
}

#[test]
fn tool_loop_reports_timeout_within_cap_plus_grace() {
    use strategy_distill::policy::{ConnectOptions, PolicyHandle, PolicyRole, ScriptedResponses};
    use strategy_distill::{run_agent, Problem, SegmentKind, ToolLoopConfig, TransitionCatalog, WhitespaceTagCounter};

    let policy = PolicyHandle::scripted(
        "s",
        PolicyRole::Student,
        [("p".to_string(), ScriptedResponses::from("<code>import time; time.sleep(5)</code><answer>0</answer>"))],
    )
    .connect(&ConnectOptions::default())
    .unwrap();
    // stands in for a shim running the sleeping snippet
    let exec = ProcessExecutor::new(vec!["sleep".into(), "5".into()]);
    let cfg = ToolLoopConfig::default();
    let started = Instant::now();
    let trace = run_agent(
        &Problem::new("p", "x", "0"),
        policy.as_ref(),
        &exec,
        &cfg,
        &WhitespaceTagCounter,
        &TransitionCatalog::default(),
        None,
    )
    .unwrap();
    let elapsed = started.elapsed();
    assert!(elapsed <= cfg.exec_timeout + KILL_GRACE + Duration::from_millis(500), "{elapsed:?}");
    let feedback = trace
        .trajectory
        .segments
        .iter()
        .find(|s| s.kind == SegmentKind::Executor)
        .unwrap();
    assert_eq!(feedback.text, "[timeout after 3s]");
}
