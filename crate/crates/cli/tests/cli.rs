// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use batchtopk_sae::activations::ActivationVariant;
use batchtopk_sae::checkpoint::{save_checkpoint, Checkpoint};
use batchtopk_sae::data::{read_activation_header, read_activations, read_codes};
use batchtopk_sae::rng::RngState;
use batchtopk_sae::sae::init_params;
use batchtopk_sae::Matrix;
use serde_json::Value;

fn sae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn sae")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sae(dir, args);
    assert!(
        out.status.success(),
        "sae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_data(dir: &Path) {
    ok(
        dir,
        &[
            "generate",
            "--out",
            "data.saeact",
            "--n",
            "3000",
            "--d",
            "16",
            "--m-true",
            "48",
            "--k-min",
            "1",
            "--k-max",
            "6",
            "--seed",
            "2",
        ],
    );
}

#[test]
fn generate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "generate", "--out", out, "--d", "64", "--m-true", "256", "--n", "100000", "--seed",
            "7",
        ]
    };
    ok(dir.path(), &args("a.saeact"));
    ok(dir.path(), &args("b.saeact"));
    for ext in ["saeact", "dict.saeact", "codes"] {
        let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert!(a == b, "{ext} differs between identical runs");
    }
    let header = read_activation_header(&dir.path().join("a.saeact")).unwrap();
    assert_eq!((header.d, header.n_rows), (64, 100_000));
    let m = json(dir.path().join("a.manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["planted"]["m_true"], 256);
}

#[test]
fn one_sparse_noise_free_data_matches_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "generate",
            "--out",
            "one.saeact",
            "--n",
            "500",
            "--d",
            "12",
            "--m-true",
            "20",
            "--noise-std",
            "0",
            "--k-min",
            "1",
            "--k-max",
            "1",
        ],
    );
    let x = read_activations(&dir.path().join("one.saeact")).unwrap();
    let dict = read_activations(&dir.path().join("one.dict.saeact")).unwrap();
    let (m_true, codes) = read_codes(&dir.path().join("one.codes")).unwrap();
    assert_eq!((m_true, codes.len(), dict.rows()), (20, 500, 20));
    for (r, code) in codes.iter().enumerate() {
        assert_eq!(code.indices.len(), 1);
        let j = code.indices[0] as usize;
        for (v, w) in x.row(r).iter().zip(dict.row(j)) {
            assert!((v - code.coeffs[0] * w).abs() < 1e-5);
        }
    }
}

#[test]
fn batchtopk_log_has_constant_l0() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let stdout = ok(
        dir.path(),
        &[
            "train",
            "--data",
            "data.saeact",
            "--variant",
            "batchtopk",
            "--k",
            "32",
            "--m",
            "64",
            "--batch-size",
            "200",
            "--token-budget",
            "3000",
            "--out",
            "b.ckpt",
        ],
    );
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    assert!(summary["theta_global"].as_f64().unwrap() > 0.0);
    let log = std::fs::read_to_string(dir.path().join("b.log.jsonl")).unwrap();
    let steps: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 15);
    assert!(steps.iter().all(|s| s["mean_l0"] == 32.0));
    let m = json(dir.path().join("b.manifest.json"));
    assert_eq!(m["config"]["train"]["k"], 32);
    assert_eq!(m["config"]["train"]["lr"], 3e-4);
}

#[test]
fn config_conflicts_are_explained() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = sae(
        dir.path(),
        &[
            "train",
            "--data",
            "data.saeact",
            "--variant",
            "batchtopk",
            "--k",
            "4",
            "--lambda",
            "0.1",
            "--m",
            "32",
            "--out",
            "x.ckpt",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda does not apply to batchtopk"), "{err}");
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn zero_budget_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = sae(
        dir.path(),
        &[
            "train",
            "--data",
            "data.saeact",
            "--variant",
            "topk",
            "--k",
            "3",
            "--m",
            "32",
            "--token-budget",
            "0",
            "--out",
            "init.ckpt",
        ],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("token budget is zero"));
    let info: Value =
        serde_json::from_str(&ok(dir.path(), &["inspect", "--checkpoint", "init.ckpt"])).unwrap();
    assert_eq!(info["step"], 0);
    assert_eq!(info["variant"], "topk");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"variant": "topk", "k": 4, "m": 32, "lr": 0.002, "batch_size": 500, "token_budget": 1000}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--data",
            "data.saeact",
            "--config",
            "cfg.json",
            "--k",
            "2",
            "--out",
            "c.ckpt",
        ],
    );
    let m = json(dir.path().join("c.manifest.json"));
    assert_eq!(m["config"]["train"]["k"], 2);
    assert_eq!(m["config"]["train"]["lr"], 0.002);
    assert_eq!(m["config"]["train"]["batch_size"], 500);

    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"variant": "topk", "k": 2, "m": 8, "bogus": 1}"#,
    )
    .unwrap();
    let out = sae(
        dir.path(),
        &[
            "train",
            "--data",
            "data.saeact",
            "--config",
            "bad.json",
            "--out",
            "z.ckpt",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let common = [
        "train",
        "--data",
        "data.saeact",
        "--variant",
        "batchtopk",
        "--k",
        "3",
        "--m",
        "32",
        "--batch-size",
        "100",
        "--lr",
        "0.001",
        "--dead-threshold-tokens",
        "300",
    ];
    let with = |extra: &[&'static str]| -> Vec<&str> {
        common
            .iter()
            .copied()
            .chain(extra.iter().copied())
            .collect()
    };
    ok(
        dir.path(),
        &with(&["--token-budget", "2000", "--out", "full.ckpt"]),
    );
    ok(
        dir.path(),
        &with(&["--token-budget", "1200", "--out", "half.ckpt"]),
    );
    ok(
        dir.path(),
        &with(&[
            "--token-budget",
            "2000",
            "--resume",
            "half.ckpt",
            "--out",
            "resumed.ckpt",
        ]),
    );
    let full = std::fs::read(dir.path().join("full.ckpt")).unwrap();
    let resumed = std::fs::read(dir.path().join("resumed.ckpt")).unwrap();
    assert!(
        full == resumed,
        "resumed checkpoint differs from uninterrupted run"
    );
}

#[test]
fn eval_compare_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    for (variant, out) in [("topk", "t.ckpt"), ("batchtopk", "b.ckpt")] {
        ok(
            dir.path(),
            &[
                "train",
                "--data",
                "data.saeact",
                "--variant",
                variant,
                "--k",
                "3",
                "--m",
                "48",
                "--batch-size",
                "250",
                "--lr",
                "0.002",
                "--token-budget",
                "3000",
                "--out",
                out,
            ],
        );
    }
    let report: Value = serde_json::from_str(&ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "t.ckpt",
            "--data",
            "data.saeact",
            "--out",
            "ev",
        ],
    ))
    .unwrap();
    assert_eq!(report["l0_variance"], 0.0);
    assert_eq!(report["l0_hist"].as_object().unwrap().len(), 1);
    assert_eq!(report["l0_hist"]["3"], 3000);
    let csv = std::fs::read_to_string(dir.path().join("ev.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let hist = std::fs::read_to_string(dir.path().join("ev.l0_hist.csv")).unwrap();
    assert_eq!(hist, "l0,count\n3,3000\n");

    let stdout = ok(
        dir.path(),
        &[
            "compare",
            "--checkpoint",
            "b.ckpt",
            "--checkpoint",
            "t.ckpt",
            "--data",
            "data.saeact",
            "--true-dict",
            "data.dict.saeact",
            "--mode",
            "train",
            "--out",
            "cmp",
        ],
    );
    assert_eq!(stdout.lines().count(), 3);
    let rows = json(dir.path().join("cmp.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows[0]["variant"], "batchtopk");
    assert_eq!(rows[1]["variant"], "topk");
    assert!(rows.iter().all(|r| r["mmcs"].as_f64().unwrap() > 0.0));

    let th: Value = serde_json::from_str(&ok(
        dir.path(),
        &[
            "threshold",
            "--checkpoint",
            "b.ckpt",
            "--data",
            "data.saeact",
            "--n-batches",
            "3",
            "--batch-size",
            "500",
            "--out",
            "b2.ckpt",
        ],
    ))
    .unwrap();
    assert_eq!(th["batches"], 3);
    let info: Value =
        serde_json::from_str(&ok(dir.path(), &["inspect", "--checkpoint", "b2.ckpt"])).unwrap();
    assert_eq!(info["theta_global"], th["theta_global"]);
}

#[test]
fn threshold_on_dead_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let mut p = init_params(
        &mut RngState::new(1),
        16,
        32,
        ActivationVariant::BatchTopK { k: 2 },
    )
    .unwrap();
    p.b_enc = Matrix::filled(1, 32, -1e4);
    save_checkpoint(&dir.path().join("dead.ckpt"), &Checkpoint::new(p)).unwrap();
    let out = sae(
        dir.path(),
        &[
            "threshold",
            "--checkpoint",
            "dead.ckpt",
            "--data",
            "data.saeact",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no positive activations"));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let p = init_params(
        &mut RngState::new(1),
        8,
        16,
        ActivationVariant::TopK { k: 2 },
    )
    .unwrap();
    save_checkpoint(&dir.path().join("narrow.ckpt"), &Checkpoint::new(p)).unwrap();
    let out = sae(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "narrow.ckpt",
            "--data",
            "data.saeact",
        ],
    );
    assert!(!out.status.success());
}
