mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{files_below, tiny_config};
use dds_cli::decompose::run_nmf;
use dds_cli::layout::{note_target, piece_target};
use dds_cli::synth::{load_frames, Manifest};
use dds_cli::table::{column, read_csv, read_labelled_matrix};
use dds_cli::{cmd_decompose, cmd_eval, cmd_synth, cmd_train, Layout, Method, RunConfig};
use dds_core::{SolverSchedule, Tensor};

fn dds(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dds"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn error_line(out: &std::process::Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-readable error line")
}

#[test]
fn synth_is_reproducible_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    assert!(dds(&["synth", "--config", &cfg, "--out", out_s]).status.success());
    let manifest = fs::read(out.join("data/manifest.json")).unwrap();

    let again = dds(&["synth", "--config", &cfg, "--out", out_s]);
    assert!(!again.status.success());
    assert!(error_line(&again)["error"].as_str().unwrap().contains("--force"));

    assert!(dds(&["synth", "--config", &cfg, "--out", out_s, "--force"]).status.success());
    assert_eq!(fs::read(out.join("data/manifest.json")).unwrap(), manifest);
    assert!(out.join("data/config.toml").exists());
}

#[test]
fn bad_preset_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data.splits[0].test_presets = vec![9];
    let path = write_config(dir.path(), &cfg);
    let out = dds(&["synth", "--config", &path, "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(error_line(&out).to_string().contains("unknown preset id 9"));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dds(&["train", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(error_line(&out)["error"].as_str().unwrap().contains("dds synth"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("out");
    assert!(dds(&["synth", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]).status.success());
    let echoed = RunConfig::load(&out.join("data/config.toml")).unwrap();
    assert_eq!(echoed.seed, 7);
}

#[test]
fn nmf_recovers_a_training_frame() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let manifest = cmd_synth(&cfg, &layout, false).unwrap();
    let train = load_frames(&layout.data().join(&manifest.splits[0].train_files[0])).unwrap();
    let frame = Tensor::from_rows(&[train.row(5)]);
    let dict: Vec<Tensor> = (0..2).map(|r| Tensor::from_rows(&[train.row(r + 4), train.row(r + 5)])).collect();
    let dec = run_nmf(&frame, &dict, &SolverSchedule::default()).unwrap();
    assert!(dec.losses[0] < 1e-6, "{}", dec.losses[0]);
}

#[test]
fn pipeline_stages_write_their_outputs() {
    let mut cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let manifest = cmd_synth(&cfg, &layout, false).unwrap();
    let notes = manifest.notes.clone();

    // eval before anything else lists what is missing
    let err = cmd_eval(&cfg, &layout).unwrap_err().to_string();
    assert!(err.contains("note57.flow") && err.contains("piece_test_H.csv"), "{err}");

    let trained = cmd_train(&cfg, &layout, false).unwrap();
    assert_eq!(trained.len(), notes.len());
    for m in &trained {
        assert!(layout.model("s0", m.pitch).exists());
        let (_, rows) = read_csv(&layout.history("s0", m.pitch)).unwrap();
        assert_eq!(rows.len(), m.epochs);
    }
    let model_bytes = fs::read(layout.model("s0", 57)).unwrap();
    let again = cmd_train(&cfg, &layout, false).unwrap();
    assert_eq!(again, trained);
    assert_eq!(fs::read(layout.model("s0", 57)).unwrap(), model_bytes);

    cmd_decompose(&cfg, &layout, Method::Nmf, None).unwrap();
    cfg.dds.c = 0.0;
    cmd_decompose(&cfg, &layout, Method::Dds, None).unwrap();
    for target in [note_target(57), piece_target("test")] {
        let (h, rows) = read_csv(&layout.output(Method::Dds, "s0", &target, "loss")).unwrap();
        let loss = column(&h, &rows, "loss").unwrap();
        let residual = column(&h, &rows, "residual").unwrap();
        for (l, r) in loss.iter().zip(&residual) {
            assert!((l - r).abs() <= 1e-12 * r.max(1.0), "{l} vs {r}");
        }
        for what in ["H", "recon"] {
            let (_, a) = read_labelled_matrix(&layout.output(Method::Nmf, "s0", &target, what)).unwrap();
            let (_, b) = read_labelled_matrix(&layout.output(Method::Dds, "s0", &target, what)).unwrap();
            assert_eq!(a.shape(), b.shape(), "{target} {what}");
        }
    }
    let (_, trace) = read_csv(&layout.output(Method::Nmf, "s0", &piece_target("train"), "trace")).unwrap();
    assert!(!trace.is_empty());

    let report = cmd_eval(&cfg, &layout).unwrap();
    assert_eq!(report.scores.len(), 4);
    for set in ["train", "test"] {
        let (labels, cm) = read_labelled_matrix(&layout.report(&format!("confusion_s0_{set}.csv"))).unwrap();
        assert_eq!(labels, vec!["57", "64"]);
        assert_eq!(cm.shape(), &[2, 2]);
        for k in 0..2 {
            assert_eq!(cm.get(k, k), 1.0);
        }
        assert!(cm.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let (h, rows) = read_csv(&layout.report("f1_summary.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(column(&h, &rows, "f1").unwrap().iter().all(|f| (0.0..=1.0).contains(f)));
    for name in ["fig3_errors.csv", "fig3_scatter.csv", "fig3_likelihood.csv", "heatmap_s0_dds_test.csv"] {
        let (_, rows) = read_csv(&layout.report(name)).unwrap();
        assert!(!rows.is_empty(), "{name}");
    }
    for sub in ["data", "models", "decompose/nmf", "decompose/dds", "reports"] {
        assert!(dir.path().join(sub).join("config.toml").exists(), "{sub}");
    }
    assert!(Manifest::load(&layout).is_ok());
    assert!(files_below(dir.path()).len() > 30);
}

#[test]
fn decompose_accepts_an_audio_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(dds(&["synth", "--config", &cfg_path, "--out", out_s]).status.success());
    let wav = out.join("data/pieces/s0_test.wav");
    let res = dds(&[
        "decompose", "--config", &cfg_path, "--out", out_s, "--method", "nmf", "--input", wav.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (labels, h) = read_labelled_matrix(&out.join("decompose/nmf/s0/input_s0_test_H.csv")).unwrap();
    assert_eq!(labels, vec!["57", "64"]);
    assert!(h.cols() > 0);

    let res = dds(&["decompose", "--config", &cfg_path, "--out", out_s, "--method", "dds"]);
    assert!(!res.status.success());
    assert!(error_line(&res)["error"].as_str().unwrap().contains("dds train"));
}
