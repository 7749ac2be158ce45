//! End-to-end pipeline through the command-line interface: generation,
//! pretraining, training, evaluation, and the depth sweep on a tiny
//! dataset, plus exit-code behavior of the installed binary.

use std::path::Path;
use std::process::Command;

use ewsgcn::cli::run_with_args;

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        r#"
schema_version = 1
train_fraction = 0.75
val_fraction = 0.15
sweep_layers = [0, 1]
sweep_seeds = [1]
bootstrap_resamples = 50

[gen]
n_clients = 48
mean_degree = 2.0
tx_per_client = [4, 6]
transfers_per_edge = [1, 2]
w0 = 1.0
w1 = 0.5
w2 = 0.5
base_rate = 0.4
seed = 11

[model]
variant = "ews-gcn"
layers = 1
channels = 6
init_seed = 3

[model.encoder]
hidden_dim = 8
currency_embed_dim = 2
mcc_embed_dim = 3

[train]
stage_epochs = [1, 1, 1]
pretrain_epochs = 1
batch_size = 8
seed = 5
"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) {
    run_with_args(std::iter::once("ewsgcn").chain(args.iter().copied())).unwrap();
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    // generation: graph, ground truth, manifest
    run(&["synth-gen", "--config", cfg, "--out", &s("data")]);
    for f in ["graph.jsonl", "ground_truth.jsonl", "manifest.json", "resolved_config.json"] {
        assert!(p("data").join(f).is_file(), "missing {f}");
    }

    // identical configs produce identical dataset hashes
    run(&["synth-gen", "--config", cfg, "--out", &s("data2")]);
    let manifest1 = std::fs::read_to_string(p("data/manifest.json")).unwrap();
    let manifest2 = std::fs::read_to_string(p("data2/manifest.json")).unwrap();
    assert_eq!(manifest1, manifest2);
    let hash: serde_json::Value = serde_json::from_str(&manifest1).unwrap();
    assert!(hash["dataset_hash"].as_str().unwrap().len() == 64);

    // pretraining
    run(&["pretrain", "--data", &s("data"), "--config", cfg, "--out", &s("pre")]);
    assert!(p("pre/encoder.bin").is_file());
    assert!(p("pre/encoder.json").is_file());

    // training from the pretrained encoder
    run(&[
        "train",
        "--data",
        &s("data"),
        "--config",
        cfg,
        "--checkpoint",
        &s("pre/encoder.bin"),
        "--out",
        &s("model"),
    ]);
    assert!(p("model/model.bin").is_file());
    let epochs = std::fs::read_to_string(p("model/epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    for line in epochs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["stage", "epoch", "lr", "train_loss", "val_auc"] {
            assert!(v.get(key).is_some(), "epoch log missing {key}");
        }
    }

    // evaluation report
    run(&[
        "eval",
        "--data",
        &s("data"),
        "--config",
        cfg,
        "--checkpoint",
        &s("model/model.bin"),
        "--out",
        &s("eval"),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("eval/report.json")).unwrap()).unwrap();
    for key in ["scores", "labels", "auc", "auc_se", "fingerprint"] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(std::fs::read_to_string(p("eval/roc.csv")).unwrap().starts_with("fpr,tpr,threshold"));

    // reruns with identical seeds are byte-identical
    run(&[
        "train",
        "--data",
        &s("data"),
        "--config",
        cfg,
        "--checkpoint",
        &s("pre/encoder.bin"),
        "--out",
        &s("model_b"),
    ]);
    assert_eq!(
        std::fs::read(p("model/model.bin")).unwrap(),
        std::fs::read(p("model_b/model.bin")).unwrap()
    );
    run(&[
        "eval",
        "--data",
        &s("data"),
        "--config",
        cfg,
        "--checkpoint",
        &s("model_b/model.bin"),
        "--out",
        &s("eval_b"),
    ]);
    assert_eq!(
        std::fs::read(p("eval/report.json")).unwrap(),
        std::fs::read(p("eval_b/report.json")).unwrap()
    );
}

#[test]
fn zero_epoch_training_keeps_the_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("stage_epochs = [1, 1, 1]", "stage_epochs = [0, 0, 0]");
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    run(&["synth-gen", "--config", cfg, "--out", &s("data")]);
    run(&["pretrain", "--data", &s("data"), "--config", cfg, "--out", &s("pre")]);
    run(&[
        "train",
        "--data",
        &s("data"),
        "--config",
        cfg,
        "--checkpoint",
        &s("pre/encoder.bin"),
        "--out",
        &s("model"),
    ]);
    assert_eq!(std::fs::read_to_string(p("model/epochs.jsonl")).unwrap(), "");

    // the checkpoint must equal a fresh model initialized from the same
    // pretrained encoder
    let model = ewsgcn::models::Model::load_checkpoint(&p("model/model.bin")).unwrap();
    let pre = ewsgcn::cli::load_encoder(&p("pre/encoder.bin")).unwrap();
    let mut fresh = ewsgcn::models::Model::new(model.cfg.clone()).unwrap();
    fresh.init_encoders_from(&pre.params, "enc").unwrap();
    for (a, b) in model.params.ids().zip(fresh.params.ids()) {
        for (x, y) in model.params.value(a).data().iter().zip(fresh.params.value(b).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn sweep_outputs_one_row_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    run(&["synth-gen", "--config", cfg, "--out", &s("data")]);
    run(&["sweep-depth", "--data", &s("data"), "--config", cfg, "--out", &s("sweep")]);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["layers"], 0);
    assert_eq!(rows[1]["layers"], 1);
    let csv = std::fs::read_to_string(p("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(p("sweep/sweep.txt")).unwrap().contains("layers"));
}

#[test]
fn exit_codes_distinguish_config_io_failures() {
    let bin = env!("CARGO_BIN_EXE_ewsgcn");
    let dir = tempfile::tempdir().unwrap();

    // config error: invalid TOML contents
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "schema_version = 99\n").unwrap();
    let status = Command::new(bin)
        .args(["synth-gen", "--config", bad_cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // I/O error: config file that does not exist
    let status = Command::new(bin)
        .args(["synth-gen", "--config", "/definitely/missing.toml", "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // I/O error: data directory without a graph
    let cfg = tiny_config(dir.path());
    let status = Command::new(bin)
        .args(["pretrain", "--data"])
        .arg(dir.path().join("nodata"))
        .args(["--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("pre"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // success path exits 0
    let status = Command::new(bin)
        .args(["synth-gen", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("data"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}
