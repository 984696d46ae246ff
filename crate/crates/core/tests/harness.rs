use std::path::Path;
use std::process::Command;

use rgbt_crowd::checkpoint::Checkpoint;
use rgbt_crowd::data::read_dataset;
use rgbt_crowd::harness::report::{read_csv, round4};
use rgbt_crowd::harness::{cmd_ablate, cmd_eval, cmd_pretrain, cmd_synth, cmd_train, Axis, RunConfig, HEATMAP_COLUMNS};
use rgbt_crowd::model::ModelState;
use rgbt_crowd::train::TrainRecord;
use rgbt_crowd::Error;

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.synth.train = 4;
    c.synth.val = 2;
    c.synth.test = 3;
    c.synth.scene.canvas = [64, 64];
    c.synth.scene.count_range = [2, 6];
    c.model.train.pretrain_epochs = 1;
    c.model.train.train_epochs = 2;
    c.model.train.eval_every = 1;
    c
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn log_lines(path: &Path) -> Vec<TrainRecord> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let sum = cmd_synth(&cfg, &tmp.path().join("a")).unwrap();
    cmd_synth(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert_eq!(sum.iter().map(|s| s.samples).collect::<Vec<_>>(), [4, 2, 3]);
    assert_eq!(read_dataset(&tmp.path().join("a/test")).unwrap().len(), 3);
    let mut other = small();
    other.seed = 1;
    cmd_synth(&other, &tmp.path().join("c")).unwrap();
    assert_ne!(files(&tmp.path().join("a")), files(&tmp.path().join("c")));
}

#[test]
fn pipeline_pretrain_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs) = (tmp.path().join("data"), tmp.path().join("runs"));
    let cfg = small();
    cmd_synth(&cfg, &data).unwrap();

    let mut zero = cfg.clone();
    zero.model.train.pretrain_epochs = 0;
    let z = cmd_pretrain(&zero, &data, &runs.join("pre0")).unwrap();
    assert_eq!(z.steps, 0);
    assert!(z.checkpoint.exists());
    assert_eq!(std::fs::read_to_string(runs.join("pre0/pretrain_log.jsonl")).unwrap(), "");

    let pre = cmd_pretrain(&cfg, &data, &runs.join("pre")).unwrap();
    assert_eq!(pre.steps, 1);
    assert!(pre.shift_recovery.is_some());

    let with = cmd_train(&cfg, &data, &runs.join("with"), Some(&pre.checkpoint)).unwrap();
    let without = cmd_train(&cfg, &data, &runs.join("without"), None).unwrap();
    for (s, dir) in [(&with, "with"), (&without, "without")] {
        assert!(s.best_checkpoint.exists() && s.last_checkpoint.exists());
        let (header, rows) = read_csv(&runs.join(dir).join("metrics.csv")).unwrap();
        assert_eq!(header, ["epoch", "step", "game0", "game1", "game2", "game3", "rmse"]);
        assert_eq!(rows.len(), 2);
        let min = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(min, round4(s.best.game[0]));
        assert_eq!(log_lines(&runs.join(dir).join("train_log.jsonl")).len(), 2);
    }

    let out = runs.join("eval");
    let ev = cmd_eval(&with.best_checkpoint, &data.join("test"), &out).unwrap();
    let ck = Checkpoint::load(&with.best_checkpoint).unwrap();
    let st = ModelState::from_checkpoint(&ck).unwrap();
    let test = read_dataset(&data.join("test")).unwrap();
    let (m, per, _) = st.model.evaluate(&st.params, &test).unwrap();
    assert_eq!(ev.metrics, m);
    let (_, rows) = read_csv(&out.join("metrics.csv")).unwrap();
    let want: Vec<f64> = m.game.iter().chain([&m.rmse]).map(|&v| round4(v)).collect();
    let got: Vec<f64> = rows[0].iter().map(|c| c.parse().unwrap()).collect();
    assert_eq!(got, want);
    let (_, per_rows) = read_csv(&out.join("per_image.csv")).unwrap();
    for (row, r) in per_rows.iter().zip(&per) {
        assert_eq!(row[0], r.id);
        assert_eq!(row[2].parse::<f64>().unwrap(), round4(r.predicted));
    }
    for s in &test {
        for col in HEATMAP_COLUMNS {
            assert!(out.join(format!("heatmaps/{}_{col}.png", s.id)).exists(), "{} {col}", s.id);
            assert!(out.join(format!("arrays/{}_{col}.npy", s.id)).exists());
        }
    }

    // a stage-1 checkpoint cannot be evaluated
    assert!(matches!(cmd_eval(&pre.checkpoint, &data.join("test"), &out), Err(Error::Config(_))));
}

#[test]
fn no_cons_logs_zero_discrepancy_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut cfg = small();
    cmd_synth(&cfg, &data).unwrap();
    cfg.model.lambda_cons = 0.0;
    cmd_train(&cfg, &data, &tmp.path().join("nc"), None).unwrap();
    let log = log_lines(&tmp.path().join("nc/train_log.jsonl"));
    assert!(log.iter().all(|r| r.disc_grad_norm == 0.0 && r.l_total == r.l_cnt));

    cfg.model.lambda_cons = 0.1;
    cmd_train(&cfg, &data, &tmp.path().join("c"), None).unwrap();
    let log = log_lines(&tmp.path().join("c/train_log.jsonl"));
    assert!(log.iter().all(|r| r.disc_grad_norm > 0.0));
}

#[test]
fn ablation_sweeps_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("ablate"));
    let mut cfg = small();
    cfg.model.train.train_epochs = 1;
    cmd_synth(&cfg, &data).unwrap();
    let values = Axis::LambdaCons.default_values();
    let rows = cmd_ablate(&cfg, &data, &out, Axis::LambdaCons, &values, true).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(out.join("pretrain/pretrain.ckpt").exists());
    let (header, table) = read_csv(&out.join("report.csv")).unwrap();
    assert_eq!(header.last().unwrap(), "checkpoint");
    assert_eq!(table.len(), 5);
    for (row, v) in table.iter().zip(&values) {
        assert_eq!(&row[0], v);
        assert!(Path::new(row.last().unwrap()).exists());
    }
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().starts_with("| lambda_cons |"));

    let stamp =
        |v: &str| std::fs::metadata(out.join(format!("lambda_cons={v}/best.ckpt"))).unwrap().modified().unwrap();
    let before: Vec<_> = values.iter().map(|v| stamp(v)).collect();
    let again = cmd_ablate(&cfg, &data, &out, Axis::LambdaCons, &values, true).unwrap();
    assert_eq!(again, rows);
    assert_eq!(values.iter().map(|v| stamp(v)).collect::<Vec<_>>(), before);

    assert!(matches!(cmd_ablate(&cfg, &data, &out, Axis::Kn, &["3".into(), "4".into()], true), Err(Error::Config(_))));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rgbt-crowd")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = tmp.path().join("runs");
    let (m, o) = (missing.to_str().unwrap(), out.to_str().unwrap());

    let r = cli(&["train", "--data", m, "--out", o]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    let r = cli(&["train", "--data", m, "--out", o, "--kn", "4"]);
    assert_eq!(r.status.code(), Some(2));
    let r = cli(&["ablate", "--data", m, "--out", o, "--axis", "bogus"]);
    assert_eq!(r.status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nnot_a_key = 1\n").unwrap();
    let r = cli(&["synth", "--config", cfg.to_str().unwrap(), "--data", m]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}
