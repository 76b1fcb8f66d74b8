use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advforge"));
    c.env_remove("ADVFORGE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn advforge")
}

fn stdout_paths(o: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(PathBuf::from)
        .collect()
}

fn toy_config(dir: &Path, arch: &str) -> PathBuf {
    let cfg = json!({
        "dataset": {"format": "synthetic", "synthetic": {"per_class": 6}, "train_fraction": 0.5},
        "model": {"architecture": arch, "width": 4, "depth": 1},
        "train": {"epochs": 1, "batch_size": 16},
        "attack": {"images": 12},
        "analysis": {"curve_images": 8},
        "output_dir": dir.join("out"),
        "seed": 3
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn train(cfg: &Path, id: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--id", id];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout_paths(&o)[0].clone()
}

#[test]
fn missing_dataset_exits_3_naming_path() {
    let o = run(&[
        "train",
        "--format",
        "idx",
        "--images",
        "/no/such/images.idx",
        "--labels",
        "/no/such/labels.idx",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/images.idx"));
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"train\": {\"epochs\": \"many\"}}").unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--defense", "fixed_alpha"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_advf_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "linear");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--id", "toy"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = stdout_paths(&o);
    assert_eq!(paths.len(), 2);
    let bytes = std::fs::read(&paths[0]).unwrap();
    assert_eq!(&bytes[..4], b"ADVF");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);

    // Same config and seed reproduce the checkpoint bitwise.
    let again = run(&["train", "--config", cfg.to_str().unwrap(), "--id", "toy"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(&paths[0]).unwrap(), bytes);
}

#[test]
fn flagship_defense_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "linear");
    let ckpt = train(
        &cfg,
        "flag",
        &[
            "--defense",
            "beta_alpha_kl",
            "--p",
            "2",
            "--q",
            "4",
            "--kl-weight",
            "10",
        ],
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(ckpt.with_extension("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["defense"]["kind"], "beta_alpha_kl");
    assert_eq!(report["defense"]["lambda"], 10.0);
    let model = advforge::Model::load(&ckpt).unwrap();
    assert_eq!(model.meta.defense, "beta_alpha_kl");
}

#[test]
fn seed_flag_beats_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "dataset": {"synthetic": {"per_class": 4}, "train_fraction": 0.5},
        "model": {"architecture": "linear"},
        "train": {"epochs": 1},
        "output_dir": dir.path()
    });
    let p = dir.path().join("c.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    let go = |env: Option<&str>, flag: Option<&str>, id: &str| {
        let mut c = bin();
        c.args(["train", "--config", p.to_str().unwrap(), "--id", id]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("ADVFORGE_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        advforge::Model::load(dir.path().join(format!("{id}.advf")))
            .unwrap()
            .meta
            .seed
    };
    assert_eq!(go(None, None, "a"), 0);
    assert_eq!(go(Some("7"), None, "b"), 7);
    assert_eq!(go(Some("7"), Some("9"), "c"), 9);
}

#[test]
fn attack_eval_landscape_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "linear");
    let c = cfg.to_str().unwrap();
    let ckpts: Vec<PathBuf> = (0..3)
        .map(|k| train(&cfg, &format!("m{k}"), &["--seed", &k.to_string()]))
        .collect();

    let o = run(&[
        "attack",
        "--config",
        c,
        "--checkpoint",
        ckpts[0].to_str().unwrap(),
        "--name",
        "one",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(&stdout_paths(&o)[0]).unwrap()).unwrap();
    assert_eq!(manifest["config"]["iterations"], 20);
    assert_eq!(manifest["config"]["epsilon"], 16.0);
    assert_eq!(manifest["ensemble_ids"], json!(["m0"]));

    let o = run(&[
        "attack",
        "--config",
        c,
        "--checkpoint",
        ckpts[0].to_str().unwrap(),
        "--checkpoint",
        ckpts[1].to_str().unwrap(),
        "--epsilon",
        "8",
        "--name",
        "two",
    ]);
    assert!(o.status.success());
    let set = stdout_paths(&o)[0].clone();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&set).unwrap()).unwrap();
    assert_eq!(manifest["ensemble_ids"], json!(["m0", "m1"]));
    assert_eq!(manifest["config"]["iterations"], 10);
    assert_eq!(
        manifest["size"].as_u64().unwrap() as usize,
        manifest["labels"].as_array().unwrap().len()
    );

    let o = run(&[
        "eval",
        "--config",
        c,
        "--holdout",
        ckpts[2].to_str().unwrap(),
        "--set",
        set.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&stdout_paths(&o)[0]).unwrap()).unwrap();
    assert_eq!(report["transfer"][0]["model_id"], "m2");

    let o = run(&[
        "eval",
        "--config",
        c,
        "--holdout",
        ckpts[1].to_str().unwrap(),
        "--set",
        set.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("protocol"));

    let o = run(&[
        "landscape",
        "--config",
        c,
        "--subject",
        ckpts[0].to_str().unwrap(),
        "--surrogate",
        ckpts[1].to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&stdout_paths(&o)[0]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "eps1,eps2,loss");
    assert_eq!(lines.len(), 33 * 41 + 1);

    let o = run(&[
        "curve",
        "--config",
        c,
        "--checkpoint",
        ckpts[0].to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&stdout_paths(&o)[0]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "eps,mean_loss,max_loss,fool_rate");
    assert_eq!(lines.len(), 130);
}

#[test]
fn attack_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "linear");
    let a = train(&cfg, "a", &[]);
    let other =
        advforge::models::build_model(&advforge::ModelSpec::linear([1, 28, 28], 4), 0).unwrap();
    let b = dir.path().join("b.advf");
    other.save(&b).unwrap();
    let o = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        a.to_str().unwrap(),
        "--checkpoint",
        b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reproduce_small_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "dataset": {"synthetic": {"per_class": 5}, "train_fraction": 0.6},
        "model": {"architecture": "linear"},
        "train": {"epochs": 1},
        "attack": {"epsilon": 4, "images": 10},
        "models": 3,
        "ensemble_sizes": [1, 2],
        "output_dir": dir.path().join("r")
    });
    let p = dir.path().join("c.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    let o = run(&["reproduce", "--config", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = stdout_paths(&o);
    let eval = paths.iter().find(|p| p.ends_with("eval.json")).unwrap();
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval).unwrap()).unwrap();
    assert_eq!(report["original"].as_array().unwrap().len(), 3);
    let transfer = report["transfer"].as_array().unwrap();
    assert_eq!(transfer.len(), 2);
    assert!(transfer.iter().all(|t| t["model_id"] == "model-2"));
}

#[test]
fn synth_writes_idx_that_train_reads() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "synth",
        "--out",
        dir.path().to_str().unwrap(),
        "--per-class",
        "3",
    ]);
    assert!(o.status.success());
    let paths = stdout_paths(&o);
    let ds = advforge::data::load_idx(&paths[0], &paths[1]).unwrap();
    assert_eq!(ds.len(), 30);
    let o = run(&[
        "train",
        "--format",
        "idx",
        "--images",
        paths[0].to_str().unwrap(),
        "--labels",
        paths[1].to_str().unwrap(),
        "--architecture",
        "linear",
        "--epochs",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
