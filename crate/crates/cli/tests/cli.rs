//! End-to-end runs of the `stas` binary on a tiny synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a few seconds per command
generator.grid_h = 14
generator.grid_w = 14
generator.timestamps = 26
generator.stations = 4
generator.scales = 7, 5, 3
generator.max_lag = 3
model.latent = 6
model.enc_width = 4
model.msm_width = 4
model.mtm_width = 4
model.mtm_hidden = 8
model.hidden = 4
model.or_width = 8
model.rc_width = 4
lr = 0.003
batch_size = 16
epochs = 1
eval_every = 1
sfm_epochs = 1
tfm_epochs = 1
mlp_epochs = 3
";

fn stas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stas"))
        .args(args)
        .env_remove("STAS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self) -> String {
        p(&self.path("tiny.cfg")).to_string()
    }

    fn gen_data(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let cfg = self.cfg();
        let mut args = vec!["gen-data", "--config", &cfg, "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(stas(&args));
        out
    }

    fn train(&self, data: &Path) -> PathBuf {
        let out = self.path("ckpt");
        let cfg = self.cfg();
        ok(stas(&["train", "--config", &cfg, "--data", p(data), "--out", p(&out), "--seed", "1"]));
        out
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        for f in ["fields.f32", "meta.json"] {
            let path = dir.join(split).join(f);
            out.push((format!("{split}/{f}"), fs::read(&path).unwrap()));
        }
    }
    out
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_data_writes_splits_deterministically() {
    let ws = Workspace::new();
    let a = ws.gen_data("a", &["--seed", "7"]);
    let b = ws.gen_data("b", &["--seed", "7"]);
    assert_eq!(files(&a), files(&b));
    assert!(a.join("config.txt").is_file());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let ws = Workspace::new();
    let flag = ws.gen_data("flag", &["--seed", "3"]);
    let env_out = ws.path("env");
    let cfg = ws.cfg();
    let out = Command::new(env!("CARGO_BIN_EXE_stas"))
        .args(["gen-data", "--config", &cfg, "--out", p(&env_out)])
        .env("STAS_SEED", "3")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(files(&flag), files(&env_out));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = stas(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let ws = Workspace::new();
    let cfg = ws.cfg();
    let target = ws.path("x");
    for bad in ["no_such_key=1", "epochs=-1", "generator.grid_h=5"] {
        let out = stas(&["gen-data", "--config", &cfg, "--set", bad, "--out", p(&target)]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
    fs::write(ws.path("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    let out = stas(&["gen-data", "--config", p(&ws.path("bad.cfg")), "--out", p(&target)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_3() {
    let ws = Workspace::new();
    let data = ws.gen_data("data", &[]);
    let missing = ws.path("nowhere");
    let out = stas(&["eval", "--checkpoint", p(&missing), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(3));
    let out = stas(&["predict", "--checkpoint", p(&missing), "--data", p(&data), "--out", p(&ws.path("p.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    let cfg = ws.cfg();
    let out = stas(&["train", "--config", &cfg, "--data", p(&missing), "--out", p(&ws.path("c"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn non_finite_training_exits_4() {
    let ws = Workspace::new();
    let data = ws.gen_data("data", &[]);
    let cfg = ws.cfg();
    let out = stas(&[
        "train", "--config", &cfg, "--set", "lr=1e300", "--set", "epochs=3", "--data", p(&data), "--out",
        p(&ws.path("c")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_predict_and_report() {
    let ws = Workspace::new();
    let data = ws.gen_data("data", &["--seed", "2"]);
    let ckpt = ws.train(&data);
    for f in ["checkpoint.json", "params.f32", "history.jsonl", "metrics.csv"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(ckpt.join("history.jsonl")).unwrap();
    assert!(history.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let metrics = ws.path("eval.csv");
    ok(stas(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "ECbH", "--out", p(&metrics)]));
    let rows = csv_rows(&metrics);
    assert_eq!(rows[0], "split,method,MAE,MAPE,TS_0.1,TS_1,TS_10");
    assert!(rows[1].starts_with("ECbH,STAS,"));

    let preds = ws.path("stas.csv");
    ok(stas(&["predict", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--out", p(&preds)]));
    let rows = csv_rows(&preds);
    assert_eq!(rows[0], "station_id,timestamp,y_tp,y_rc,y_t");
    let test_len = fs::read_to_string(data.join("test/meta.json"))
        .map(|t| serde_json::from_str::<serde_json::Value>(&t).unwrap()["sample_station"].as_array().unwrap().len())
        .unwrap();
    assert_eq!(rows.len() - 1, test_len);

    let base = ws.path("mlp");
    let cfg = ws.cfg();
    ok(stas(&["baseline", "--kind", "MLP", "--config", &cfg, "--data", p(&data), "--out", p(&base)]));
    let base_rows = csv_rows(&base.join("metrics.csv"));
    assert_eq!(base_rows.len(), 1 + 5);
    assert!(base_rows[1].starts_with("test,MLP,"));

    let report = ws.path("report");
    let stas_arg = format!("STAS={}", p(&preds));
    let mlp_arg = format!("MLP={}", p(&base.join("predictions_test.csv")));
    ok(stas(&[
        "report", "--data", p(&data), "--pred", &stas_arg, "--pred", &mlp_arg, "--split", "test", "--split", "ECbT",
        "--frames", "2", "--out", p(&report),
    ]));
    let summary = fs::read_to_string(report.join("summary.md")).unwrap();
    let table: Vec<&str> = summary.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| split")).collect();
    assert_eq!(table.len(), 4, "{summary}");
    let pngs: Vec<_> = fs::read_dir(&report)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 2);

    // a prediction file without rows is rejected
    let empty = ws.path("empty.csv");
    fs::write(&empty, "station_id,timestamp,y_tp,y_rc,y_t\n").unwrap();
    let empty_arg = format!("X={}", p(&empty));
    let out = stas(&["report", "--data", p(&data), "--pred", &empty_arg, "--out", p(&ws.path("r2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn undefined_threshold_scores_print_na() {
    let ws = Workspace::new();
    // peak intensity far below the 10 mm threshold
    let data = ws.gen_data("dry", &["--set", "generator.max_rain=3", "--set", "generator.heavy_fraction=0.01"]);
    let base = ws.path("lr");
    let cfg = ws.cfg();
    ok(stas(&[
        "baseline", "--kind", "lr", "--config", &cfg, "--set", "generator.max_rain=3", "--data", p(&data), "--split",
        "test", "--out", p(&base),
    ]));
    let rows = csv_rows(&base.join("metrics.csv"));
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(cols[0], "test");
    assert_eq!(cols[6], "N/A", "{}", rows[1]);
}
