use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lw2g"))
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn twin() -> PathBuf {
    root().join("configs/twin.toml")
}

fn trace(name: &str) -> PathBuf {
    root().join("crates/core/tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn run_twin(out: &Path, mode: &str) {
    let o = run(&[
        "run",
        "--config",
        twin().to_str().unwrap(),
        "--mode",
        mode,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn twin_run_writes_outputs_and_compares() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("lw2g");
    let g = tmp.path().join("grow");
    run_twin(&a, "lw2g");
    run_twin(&g, "grow_always");
    for f in [
        "report.json",
        "metrics.csv",
        "trace.jsonl",
        "snapshot.bin",
        "manifest.json",
        "config.toml",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let ra = report(&a);
    let rg = report(&g);
    assert_eq!(ra["schema"], 1);
    assert!(ra["ssp"].as_u64().unwrap() <= 2);
    assert_eq!(rg["ssp"], 2);

    let o = run(&[
        "compare",
        g.join("report.json").to_str().unwrap(),
        a.join("report.json").to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success());
    let d: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(d["d_ssp"].as_i64().unwrap() < 0);

    // the run's own trace replays to the same decisions
    let o = run(&["replay", a.join("trace.jsonl").to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let steps: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let decisions: Vec<_> = steps.iter().map(|s| s["decision"].clone()).collect();
    assert_eq!(serde_json::Value::Array(decisions), ra["decisions"]);
}

#[test]
fn identical_runs_have_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_twin(&a, "lw2g");
    run_twin(&b, "lw2g");
    for f in ["report.json", "trace.jsonl", "metrics.csv", "snapshot.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let o = run(&[
        "compare",
        a.join("report.json").to_str().unwrap(),
        b.join("report.json").to_str().unwrap(),
    ]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("dFAA +0.0000") && text.contains("dSSP +0"),
        "{text}"
    );
}

#[test]
fn replay_reference_traces() {
    let o = run(&["--replay", trace("trace_six_sets.jsonl").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let decisions: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("task"))
        .map(|l| l.split(": ").nth(1).unwrap().split("  ").next().unwrap())
        .collect();
    assert_eq!(
        decisions,
        [
            "grow", "grow", "grow", "reuse 0", "grow", "reuse 3", "reuse 2", "grow", "grow",
            "reuse 4"
        ]
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("set ")).count(), 6);

    let o = run(&["replay", trace("trace_two_sets.jsonl").to_str().unwrap()]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("set 1: tasks [9, 10]"), "{text}");
}

#[test]
fn empty_trace_prints_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let o = run(&["replay", p.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    assert_eq!(
        run(&["run", "--config", bad.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["run", "--config", "/no/such/file.toml", "--out", out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["run", "--mode", "sometimes", "--out", out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&[]).status.code(), Some(1));

    let malformed = tmp.path().join("m.jsonl");
    std::fs::write(&malformed, "{\"task\": 1, \"records\": []}\nnot json\n").unwrap();
    let o = run(&["replay", malformed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));

    assert_eq!(
        run(&["compare", "/no/a.json", "/no/b.json"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
