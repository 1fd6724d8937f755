use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gridflow");

fn case5() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases/case5.txt")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("GRIDFLOW_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

/// Small data set, checkpoint and samples shared by several tests.
fn small_run(dir: &Path) {
    let c = case5();
    let c = c.to_str().unwrap();
    ok(dir, &["gen-data", "--case", c, "--n", "120", "--seed", "7", "--out", "d.csv"]);
    ok(
        dir,
        &[
            "train", "--case", c, "--data", "d.csv", "--steps", "60", "--T", "40", "--hidden", "16,16",
            "--seed", "1", "--out", "m.ckpt",
        ],
    );
    ok(dir, &["sample", "--checkpoint", "m.ckpt", "--n", "120", "--seed", "3", "--out", "s.csv"]);
}

#[test]
fn gen_data_contract() {
    let dir = tempfile::tempdir().unwrap();
    let c = case5();
    ok(dir.path(), &["gen-data", "--case", c.to_str().unwrap(), "--n", "1000", "--seed", "7", "--out", "d.csv"]);
    let text = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = ["p", "q", "v", "theta"]
        .iter()
        .flat_map(|k| (1..=5).map(move |b| format!("{k}_{b}")))
        .collect();
    assert_eq!(lines.next().unwrap(), header.join(","));
    assert_eq!(lines.count(), 1000);
    assert!(dir.path().join("d.csv.manifest.toml").exists());
}

#[test]
fn unknown_flag_exits_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["code"], 2);
    assert_eq!(e["kind"], "usage");
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--case", "nope.txt"]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["path"], "nope.txt");
}

#[test]
fn eval_width_mismatch_leaves_no_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let two_bus = "p_1,p_2,q_1,q_2,v_1,v_2,theta_1,theta_2\n0,0,0,0,1,1,0,0\n";
    fs::write(dir.path().join("x.csv"), two_bus).unwrap();
    let o = run(dir.path(), &["eval", "--real", "d.csv", "--syn", "x.csv", "--out-dir", "rep"]);
    assert_eq!(o.status.code(), Some(3));
    error_line(&o);
    assert!(!dir.path().join("rep").exists());
}

#[test]
fn eval_size_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let c = case5();
    ok(dir.path(), &["sample", "--checkpoint", "m.ckpt", "--n", "50", "--seed", "3", "--out", "few.csv"]);
    let o = run(dir.path(), &["eval", "--real", "d.csv", "--syn", "few.csv", "--case", c.to_str().unwrap(), "--out-dir", "rep"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("rep").exists());
}

#[test]
fn eval_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let c = case5();
    ok(dir.path(), &["eval", "--real", "d.csv", "--syn", "s.csv", "--case", c.to_str().unwrap(), "--out-dir", "rep"]);
    let rep = dir.path().join("rep");
    let w1: f64 = fs::read_to_string(rep.join("w1.txt")).unwrap().lines().next().unwrap().parse().unwrap();
    assert!(w1.is_finite() && w1 > 0.0);
    let mm = fs::read_to_string(rep.join("mismatch_case5.csv")).unwrap();
    assert_eq!(mm.lines().count(), 6);
    for b in 1..=5 {
        for k in ["dp", "dq"] {
            let h = fs::read_to_string(rep.join(format!("hist_{b}_{k}.csv"))).unwrap();
            assert_eq!(h.lines().count(), 51);
        }
    }
}

#[test]
fn numerical_abort_exits_4_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(case5()).unwrap();
    // no PQ voltage can satisfy an empty band
    let bad: String = text
        .lines()
        .map(|l| {
            if l.starts_with("bus ") && l.contains(" pq ") {
                let mut toks: Vec<String> = l.split_whitespace().map(String::from).collect();
                let i = toks.iter().position(|t| t == "vmin").unwrap();
                toks[i + 1] = "1.2".into();
                let j = toks.iter().position(|t| t == "vmax").unwrap();
                toks[j + 1] = "1.3".into();
                toks.join(" ")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(dir.path().join("bad.txt"), bad).unwrap();
    let o = run(dir.path(), &["gen-data", "--case", "bad.txt", "--n", "5", "--out", "d.csv"]);
    assert_eq!(o.status.code(), Some(4));
    let e = error_line(&o);
    assert_eq!(e["kind"], "numerical");
    assert!(e["step"].is_u64());
    assert!(!dir.path().join("d.csv").exists());
    let m = fs::read_to_string(dir.path().join("d.csv.manifest.toml")).unwrap();
    assert!(m.contains("status = \"aborted\""));
}

#[test]
fn sample_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    for lambda in ["0", "0.01"] {
        ok(dir.path(), &["sample", "--checkpoint", "m.ckpt", "--n", "100", "--lambda", lambda, "--seed", "3", "--out", "a.csv"]);
        ok(dir.path(), &["sample", "--checkpoint", "m.ckpt", "--n", "100", "--lambda", lambda, "--seed", "3", "--out", "b.csv"]);
        assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    }
}

#[test]
fn every_subcommand_reruns_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let c = case5();
    let c = c.to_str().unwrap();
    ok(d, &["gen-data", "--case", c, "--n", "60", "--seed", "8", "--out", "t.csv"]);
    ok(d, &["eval", "--real", "d.csv", "--syn", "s.csv", "--case", c, "--out-dir", "ev"]);
    ok(
        d,
        &["downstream", "--case", c, "--train", "gt=d.csv", "--train", "syn=s.csv", "--test", "t.csv", "--steps", "50", "--seed", "2", "--out-dir", "ds"],
    );
    let runs = [
        ("d.csv.manifest.toml", vec!["d.csv"]),
        ("m.ckpt.manifest.toml", vec!["m.ckpt"]),
        ("s.csv.manifest.toml", vec!["s.csv"]),
        ("ev/eval.manifest.toml", vec!["w1.txt", "mismatch_case5.csv", "hist_3_dq.csv"]),
        ("ds/downstream.manifest.toml", vec!["downstream.csv"]),
    ];
    for (k, (manifest, files)) in runs.iter().enumerate() {
        let fresh = format!("re{k}");
        ok(d, &["rerun", "--manifest", manifest, "--out-dir", &fresh]);
        let orig_dir = Path::new(manifest).parent().unwrap();
        for f in files {
            let a = fs::read(d.join(orig_dir).join(f)).unwrap();
            let b = fs::read(d.join(&fresh).join(f)).unwrap();
            assert_eq!(a, b, "{manifest}: {f}");
        }
        // the rerun's own manifest is also identical apart from out_dir
        let m0 = fs::read_to_string(d.join(manifest)).unwrap();
        let name = Path::new(manifest).file_name().unwrap();
        let m1 = fs::read_to_string(d.join(&fresh).join(name)).unwrap();
        let strip = |s: &str| s.lines().filter(|l| !l.starts_with("out_dir")).collect::<Vec<_>>().join("\n");
        assert_eq!(strip(&m0), strip(&m1));
    }
}

#[test]
fn rerun_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    fs::write(dir.path().join("d.csv"), "garbage").unwrap();
    let o = run(dir.path(), &["rerun", "--manifest", "m.ckpt.manifest.toml", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let c = case5();
    let cfg = format!("case = {:?}\nn = 30\nseed = 5\nout = \"c.csv\"\n", c.to_str().unwrap());
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    ok(dir.path(), &["gen-data", "--config", "run.toml"]);
    ok(dir.path(), &["gen-data", "--config", "run.toml", "--n", "10", "--out", "f.csv"]);
    let a = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert_eq!(a.lines().count(), 31);
    assert_eq!(b.lines().count(), 11);
    // same seed, so the shorter file is a prefix
    assert!(a.starts_with(&b));
    // a manifest works as a config
    ok(dir.path(), &["gen-data", "--config", "c.csv.manifest.toml", "--out", "g.csv"]);
    assert_eq!(fs::read_to_string(dir.path().join("g.csv")).unwrap(), a);
    fs::write(dir.path().join("bad.toml"), "nonsense_key = 1\n").unwrap();
    let o = run(dir.path(), &["gen-data", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let c = case5();
    let c = c.to_str().unwrap();
    ok(dir.path(), &["gen-data", "--case", c, "--n", "20", "--seed", "42", "--out", "a.csv"]);
    let o = Command::new(BIN)
        .args(["gen-data", "--case", c, "--n", "20", "--out", "b.csv"])
        .current_dir(dir.path())
        .env("GRIDFLOW_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    ok(dir.path(), &["gen-data", "--case", c, "--n", "20", "--out", "z.csv"]);
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("z.csv"));
    let m = fs::read_to_string(dir.path().join("z.csv.manifest.toml")).unwrap();
    assert!(m.contains("seed = 0"));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = case5();
    let c = c.to_str().unwrap();
    ok(dir.path(), &["--threads", "1", "gen-data", "--case", c, "--n", "150", "--seed", "4", "--out", "a.csv"]);
    ok(dir.path(), &["--threads", "3", "gen-data", "--case", c, "--n", "150", "--seed", "4", "--out", "b.csv"]);
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    ok(dir.path(), &["--threads", "1", "train", "--case", c, "--data", "a.csv", "--steps", "20", "--T", "30", "--hidden", "8", "--out", "m.ckpt"]);
    ok(dir.path(), &["--threads", "1", "sample", "--checkpoint", "m.ckpt", "--n", "300", "--seed", "1", "--out", "s1.csv"]);
    ok(dir.path(), &["--threads", "4", "sample", "--checkpoint", "m.ckpt", "--n", "300", "--seed", "1", "--out", "s4.csv"]);
    assert_eq!(read("s1.csv"), read("s4.csv"));
}

#[test]
fn inputs_are_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let before: Vec<Vec<u8>> = ["d.csv", "m.ckpt", "s.csv"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    let c = case5();
    ok(dir.path(), &["eval", "--real", "d.csv", "--syn", "s.csv", "--case", c.to_str().unwrap()]);
    ok(dir.path(), &["sample", "--checkpoint", "m.ckpt", "--n", "10", "--out", "other.csv"]);
    let o = run(dir.path(), &["sample", "--checkpoint", "m.ckpt", "--n", "10", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    let after: Vec<Vec<u8>> = ["d.csv", "m.ckpt", "s.csv"].iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn sample_defaults_lambda_from_case() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    let m = fs::read_to_string(dir.path().join("s.csv.manifest.toml")).unwrap();
    assert!(m.contains("lambda = 0.01"), "{m}");
}
