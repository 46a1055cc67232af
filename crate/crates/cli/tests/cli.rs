//! Exit-code contract of the binary.

use std::process::Command;

fn modeground() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modeground"))
}

#[test]
fn gen_env_then_demo_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.json");
    let demos = dir.path().join("demos.jsonl");
    let st = modeground()
        .args(["gen-env", "--kind", "nav", "--k", "3", "--seed", "1", "--out"])
        .arg(&env)
        .status()
        .unwrap();
    assert!(st.success());
    let st = modeground()
        .args(["demo", "--n", "2", "--env"])
        .arg(&env)
        .arg("--out")
        .arg(&demos)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(std::fs::read_to_string(&demos).unwrap().lines().count(), 2);
}

#[test]
fn out_of_range_k_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = modeground()
        .args(["gen-env", "--kind", "nav", "--k", "1", "--out"])
        .arg(dir.path().join("env.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_input_file_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = modeground()
        .args(["demo", "--env"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("demos.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_structure_response_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.json");
    assert!(modeground()
        .args(["gen-env", "--kind", "nav", "--k", "3", "--out"])
        .arg(&env)
        .status()
        .unwrap()
        .success());
    let fixture = dir.path().join("reply.txt");
    std::fs::write(&fixture, "no json here").unwrap();
    let out = modeground()
        .args(["llm", "--task", "reach the goal", "--env"])
        .arg(&env)
        .arg("--fixture")
        .arg(&fixture)
        .arg("--out")
        .arg(dir.path().join("structure.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
