use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_visitcast"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(out.status.success(), "visitcast {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        run(&["generate", "--out", s(&f.path("gen")), "--patients", "60", "--seed", "5"]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn data(&self) -> String {
        s(&self.path("gen/corpus.jsonl")).to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let data = self.data();
        let mut args = vec!["train", "--data", &data, "--out", s(&dir), "--dim", "4", "--batch-size", "8"];
        if !extra.contains(&"--epochs") {
            args.extend_from_slice(&["--epochs", "2"]);
        }
        args.extend_from_slice(extra);
        run(&args);
        dir
    }
}

fn data_rows(csv_text: &str) -> Vec<Vec<String>> {
    let body: String = csv_text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn column(rows: &[Vec<String>], name: &str) -> usize {
    rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn generate_is_reproducible_and_rejects_empty() {
    let f = Fixture::new();
    run(&["generate", "--out", s(&f.path("again")), "--patients", "60", "--seed", "5"]);
    for name in ["corpus.jsonl", "provenance.jsonl", "taxonomy.txt", "manifest.json"] {
        assert_eq!(fs::read(f.path("gen").join(name)).unwrap(), fs::read(f.path("again").join(name)).unwrap(), "{name}");
    }
    let out = bin().args(["generate", "--out", s(&f.path("zero")), "--patients", "0"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn training_is_bitwise_reproducible() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &[]);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    assert_eq!(fs::read(a.join("training_log.csv")).unwrap(), fs::read(b.join("training_log.csv")).unwrap());
}

#[test]
fn outputs_embed_config_and_input_hash() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let log = fs::read_to_string(a.join("training_log.csv")).unwrap();
    assert!(log.starts_with("# command: train"));
    assert!(log.contains("# config: {"));
    assert!(log.contains("# data_sha256: "));
}

#[test]
fn config_precedence_flag_over_set_over_file() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    fs::write(&cfg, "# test config\nbeta = 3\nalpha = 0.5\nl2 = 0.01\n").unwrap();
    let a = f.train("a", &["--config", s(&cfg), "--set", "beta=7", "--set", "alpha=0.25", "--alpha", "0.125"]);
    let log = fs::read_to_string(a.join("training_log.csv")).unwrap();
    let line = log.lines().find(|l| l.starts_with("# config: ")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim_start_matches("# config: ")).unwrap();
    assert_eq!(v["l2"], 0.01);
    assert_eq!(v["beta"], 7.0);
    assert_eq!(v["alpha"], 0.125);
}

#[test]
fn evaluate_on_train_reproduces_logged_metrics() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let metrics = f.path("m.csv");
    run(&["evaluate", "--checkpoint", s(&a.join("checkpoint.json")), "--data", &f.data(), "--split", "train", "--out", s(&metrics)]);
    let log = data_rows(&fs::read_to_string(a.join("training_log.csv")).unwrap());
    let m = data_rows(&fs::read_to_string(&metrics).unwrap());
    let last = log.last().unwrap();
    let overall = m.iter().find(|r| r[0] == "overall").unwrap();
    for name in ["rmse_log_time", "recall_at_10", "recall_at_20", "recall_at_30", "micro_auc"] {
        let logged: f64 = last[column(&log, &format!("train_{name}"))].parse().unwrap();
        let now: f64 = overall[column(&m, name)].parse().unwrap();
        assert!((logged - now).abs() <= 1e-9, "{name}: {logged} vs {now}");
    }
    let buckets: Vec<&String> = m.iter().filter(|r| r[0] == "cold_start").map(|r| &r[3]).collect();
    assert_eq!(buckets, ["(0,2]", "(2,5]", "(5,10]", "(10,20]"]);
}

fn first_code(f: &Fixture) -> String {
    fs::read_to_string(f.path("gen/taxonomy.txt")).unwrap().lines().next().unwrap().to_string()
}

fn predict(ck: &Path, prefix: &Path) -> serde_json::Value {
    let out = run(&["predict", "--checkpoint", s(ck), "--prefix", s(prefix), "--top", "5"]);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn predict_single_visit_prefix() {
    let f = Fixture::new();
    let ck = f.train("a", &[]).join("checkpoint.json");
    let prefix = f.path("p.json");
    fs::write(&prefix, format!(r#"[{{"t": 3.0, "codes": ["{}"]}}]"#, first_code(&f))).unwrap();
    let v = predict(&ck, &prefix);
    assert!(v["t_hat"].as_f64().unwrap() > 3.0);
    assert_eq!(v["top_codes"].as_array().unwrap().len(), 5);
    let att: Vec<f64> = v["attention"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(att.len(), 1);
    assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn predict_is_deterministic_and_attention_sums_to_one() {
    let f = Fixture::new();
    let ck = f.train("a", &[]).join("checkpoint.json");
    let c = first_code(&f);
    let prefix = f.path("p.json");
    fs::write(&prefix, format!(r#"[{{"t": 0, "codes": ["{c}"]}}, {{"t": 9, "codes": ["{c}"]}}, {{"t": 20, "codes": ["{c}"]}}]"#)).unwrap();
    let a = predict(&ck, &prefix);
    let b = predict(&ck, &prefix);
    assert_eq!(a, b);
    let att: f64 = a["attention"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((att - 1.0).abs() < 1e-9);
    let scores: Vec<f64> = a["top_codes"].as_array().unwrap().iter().map(|x| x["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn predict_rejects_unknown_code() {
    let f = Fixture::new();
    let ck = f.train("a", &[]).join("checkpoint.json");
    let prefix = f.path("p.json");
    fs::write(&prefix, r#"[{"t": 0, "codes": ["NOT_A_CODE"]}]"#).unwrap();
    let out = bin().args(["predict", "--checkpoint", s(&ck), "--prefix", s(&prefix)]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn resume_continues_step_count_and_matches_uninterrupted_run() {
    let f = Fixture::new();
    let two = f.train("two", &[]);
    let four = f.train("four", &["--epochs", "4"]);
    let resumed = f.train("resumed", &["--epochs", "4", "--resume", s(&two.join("checkpoint.json"))]);
    let log2 = data_rows(&fs::read_to_string(two.join("training_log.csv")).unwrap());
    let log_r = data_rows(&fs::read_to_string(resumed.join("training_log.csv")).unwrap());
    let step = |rows: &[Vec<String>], i: usize| rows[i][1].parse::<u64>().unwrap();
    let per_epoch = step(&log2, 1);
    assert_eq!(log_r[1][0], "3");
    assert_eq!(step(&log_r, 1), 3 * per_epoch);
    assert_eq!(step(&log_r, log_r.len() - 1), 4 * per_epoch);

    let params = |dir: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("checkpoint.json")).unwrap()).unwrap();
        (v["params"].clone(), v["optimizer"].clone(), v["epochs_done"].clone())
    };
    assert_eq!(params(&four), params(&resumed));
}

#[test]
fn sweep_row_count_and_single_cell_matches_train_evaluate() {
    let f = Fixture::new();
    let out = f.path("sweep.csv");
    let data = f.data();
    let base = ["--dim", "4", "--batch-size", "8", "--epochs", "2", "--set", "sweep_marker_dim=4", "--set", "sweep_time_dim=4"];
    let mut args = vec!["sweep", "--data", &data, "--out", s(&out), "--set", "sweep_alpha=0.01,0.1", "--set", "sweep_beta=100", "--set", "seeds=0,1"];
    args.extend_from_slice(&base);
    run(&args);
    let rows = data_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len() - 1, 2 * 2);

    let single = f.path("single.csv");
    let mut args = vec!["sweep", "--data", &data, "--out", s(&single), "--set", "sweep_alpha=0.01", "--set", "sweep_beta=100", "--set", "seeds=0"];
    args.extend_from_slice(&base);
    run(&args);
    let sw = data_rows(&fs::read_to_string(&single).unwrap());
    let trained = f.train("a", &[]);
    let metrics = f.path("m.csv");
    run(&["evaluate", "--checkpoint", s(&trained.join("checkpoint.json")), "--data", &data, "--out", s(&metrics)]);
    let m = data_rows(&fs::read_to_string(&metrics).unwrap());
    let overall = m.iter().find(|r| r[0] == "overall").unwrap();
    for name in ["rmse_log_time", "recall_at_10", "micro_auc"] {
        assert_eq!(sw[1][column(&sw, name)], overall[column(&m, name)], "{name}");
    }
}

#[test]
fn ablate_and_baseline_write_csv() {
    let f = Fixture::new();
    let data = f.data();
    let out = f.path("ablate.csv");
    run(&["ablate", "--data", &data, "--out", s(&out), "--dim", "4", "--epochs", "1", "--variants", "full,no_graph", "--set", "seeds=0,1,2"]);
    let rows = data_rows(&fs::read_to_string(&out).unwrap());
    let variants: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["full", "no_graph"]);

    let out = f.path("baseline.csv");
    run(&["baseline", "--data", &data, "--out", s(&out)]);
    let rows = data_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows[1][0], "hpp");
    assert_eq!(rows[2][0], "hawkes");
    assert!(rows[2][column(&rows, "test_rmse_log_time")].parse::<f64>().unwrap().is_finite());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let f = Fixture::new();
    let data = f.data();
    for args in [
        vec!["train", "--data", "missing.jsonl", "--out", "x"],
        vec!["train", "--data", &data, "--out", "x", "--set", "bogus=1"],
        vec!["train", "--data", &data, "--out", "x", "--variant", "nonsense"],
        vec!["evaluate", "--checkpoint", &data, "--data", &data, "--out", "x.csv"],
    ] {
        let out = bin().args(&args).current_dir(f.dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error"));
    }
}
