use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn mortar(args: &[&str]) -> Output {
    mortar_env(args, &[])
}

fn mortar_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mortar"));
    cmd.args(args);
    for var in [
        "MORTAR_CONFIG",
        "MORTAR_OUT_DIR",
        "MORTAR_PARALLELISM",
        "MORTAR_EMBEDDER_ENDPOINT",
        "MORTAR_EXTRACTOR_ENDPOINT",
        "MORTAR_COREF_ENDPOINT",
        "MORTAR_SUT_ENDPOINT",
    ] {
        cmd.env_remove(var);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn generate_tea(out: &Path, extra: &[&str]) -> Output {
    let dataset = fixture("tea_dialogue.json");
    let mock = fixture("tea_extractor.json");
    let mut args = vec![
        "generate",
        "--dataset",
        s(&dataset),
        "--mock-extractor",
        s(&mock),
        "--out-dir",
        s(out),
    ];
    args.extend_from_slice(extra);
    mortar(&args)
}

fn mr_count(summary: &Value, mr: &str, field: &str) -> u64 {
    summary["overall"]["per_mr"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["mr"] == mr)
        .map(|m| m[field].as_u64().unwrap())
        .unwrap()
}

#[test]
fn generate_run_detect_report() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    let o = generate_tea(&gen, &["--perturbations", "ds,dd,dsd", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for kind in ["DS", "DD", "DSD"] {
        let lines = jsonl(&gen.join(format!("perturbed/{kind}.jsonl")));
        assert!(lines[0].get("manifest").is_some());
        assert_eq!(lines.len(), 2);
        assert!(lines[1]["rounds"][0]["answerable"].is_boolean());
    }
    let manifest = read_json(&gen.join("manifest.json"));
    assert!(manifest["settings"]["llm_requests"].as_u64().unwrap() >= 6);
    assert_eq!(manifest["settings"]["seed"], 3);

    let unanswerable: usize = ["DS", "DD", "DSD"]
        .iter()
        .flat_map(|k| jsonl(&gen.join(format!("perturbed/{k}.jsonl"))).into_iter().skip(1))
        .map(|d| d["rounds"].as_array().unwrap().iter().filter(|r| r["answerable"] == false).count())
        .sum();

    let mut detections = Vec::new();
    for profile in ["oracle", "stubborn"] {
        let run_dir = tmp.path().join(format!("run-{profile}"));
        let sut = format!("mock:{profile}");
        let o = mortar(&["run", s(&gen), "--sut", &sut, "--fallback-embedder", "--out-dir", s(&run_dir)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let transcript = jsonl(&run_dir.join("transcripts/DS.jsonl"));
        assert_eq!(transcript[0]["manifest"]["settings"]["sut"], sut.as_str());
        assert_eq!(transcript.len(), 1 + 4);

        let det = tmp.path().join(format!("det-{profile}"));
        let o = mortar(&["detect", s(&run_dir), "--fallback-embedder", "--out-dir", s(&det)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let summary = read_json(&det.join("summary.json"));
        let bugs = jsonl(&det.join("bugs.jsonl"));
        if profile == "oracle" {
            assert_eq!(mr_count(&summary, "MR1", "conflicts"), 0);
            assert_eq!(mr_count(&summary, "MR2", "conflicts"), 0);
        } else {
            assert!(unanswerable > 0);
            assert_eq!(mr_count(&summary, "MR1", "conflicts") as usize, unanswerable);
            let mr1 = bugs.iter().filter(|b| b["mr"] == "MR1").count();
            assert_eq!(mr1, unanswerable);
        }
        assert!(det.join("mr_table.csv").exists());
        detections.push(det);
    }

    let rep = tmp.path().join("report");
    let a = format!("oracle={}", s(&detections[0]));
    let b = format!("stubborn={}", s(&detections[1]));
    let o = mortar(&[
        "report",
        "--datasets",
        s(&gen),
        "--detections",
        s(&detections[0]),
        s(&detections[1]),
        "--overlap",
        &a,
        &b,
        "--out-dir",
        s(&rep),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&rep.join("report.json"));
    let ds = report["dataset_summary"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["kind"] == "DS")
        .unwrap()
        .clone();
    assert_eq!(ds["total_rounds"], 4);
    assert_eq!(ds["total_dialogues"], 1);
    assert!(rep.join("dataset_summary.csv").exists());
    assert!(rep.join("mr_table.txt").exists());
    assert!(rep.join("overlap.txt").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("DS"));
}

#[test]
fn generation_is_deterministic_and_cached() {
    let tmp = tempfile::tempdir().unwrap();
    let body = |dir: &Path| -> BTreeSet<String> {
        ["DS", "DR", "DD", "DSR", "DSD"]
            .iter()
            .flat_map(|k| {
                fs::read_to_string(dir.join(format!("perturbed/{k}.jsonl")))
                    .unwrap()
                    .lines()
                    .skip(1)
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&generate_tea(&a, &["--seed", "9"])), 0);
    assert_eq!(code(&generate_tea(&b, &["--seed", "9"])), 0);
    assert_eq!(body(&a), body(&b));

    assert_eq!(code(&generate_tea(&a, &["--seed", "9"])), 0);
    assert_eq!(read_json(&a.join("manifest.json"))["settings"]["llm_requests"], 0);
}

#[test]
fn flags_beat_environment_beat_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let from_file = tmp.path().join("file-out");
    let from_env = tmp.path().join("env-out");
    let from_flag = tmp.path().join("flag-out");
    let config = tmp.path().join("mortar.toml");
    fs::write(
        &config,
        format!(
            "dataset = {:?}\nmock_extractor = {:?}\nperturbations = [\"ds\"]\nseed = 1\nout_dir = {:?}\n",
            s(&fixture("tea_dialogue.json")),
            s(&fixture("tea_extractor.json")),
            s(&from_file),
        ),
    )
    .unwrap();

    let o = mortar(&["--config", s(&config), "generate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&from_file.join("manifest.json"));
    assert_eq!(m["settings"]["seed"], 1);
    assert_eq!(m["settings"]["perturbations"], serde_json::json!(["DS"]));

    let o = mortar_env(&["--config", s(&config), "generate", "--seed", "2"], &[("MORTAR_OUT_DIR", s(&from_env))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&from_env.join("manifest.json"))["settings"]["seed"], 2);

    let o = mortar_env(
        &["generate", "--out-dir", s(&from_flag)],
        &[("MORTAR_CONFIG", s(&config)), ("MORTAR_OUT_DIR", s(&from_env))],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(from_flag.join("manifest.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&mortar(&[])), 1);
    assert_eq!(code(&mortar(&["--help"])), 0);
    assert_eq!(code(&mortar(&["generate", "--out-dir", s(tmp.path())])), 1);
    assert_eq!(code(&generate_tea(tmp.path(), &["--perturbations", "ds,zz"])), 1);
    assert_eq!(code(&generate_tea(tmp.path(), &["--reduce-ratio", "1.5"])), 1);
    let missing = tmp.path().join("nope");
    assert_eq!(
        code(&mortar(&["run", s(&missing), "--sut", "mock:oracle", "--out-dir", s(tmp.path())])),
        1
    );
    assert_eq!(
        code(&mortar(&["run", s(&missing), "--sut", "mock:bogus", "--out-dir", s(tmp.path())])),
        1
    );
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&mortar(&["--config", s(&bad), "generate"])), 1);
}

#[test]
fn extraction_failure_for_every_dialogue_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.json");
    fs::write(&empty, r#"{"model": "none", "entries": []}"#).unwrap();
    let out = tmp.path().join("out");
    let dataset = fixture("tea_dialogue.json");
    let o = mortar(&[
        "generate",
        "--dataset",
        s(&dataset),
        "--mock-extractor",
        s(&empty),
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let excluded = read_json(&out.join("excluded.json"));
    assert_eq!(excluded.as_array().unwrap().len(), 1);
}
