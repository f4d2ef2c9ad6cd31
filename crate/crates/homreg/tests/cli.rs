//! End-to-end tests of the `homreg` binary: exit codes, artifact layout,
//! overwrite protection, and seeded reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn homreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"
[synth]
patch_size = 16
margin = 8
max_perturbation = 2
smoothing_bound = 0.0

[model]
base_channels = 8
mid_channels = 12
deep_channels = 16
inner_iterations = 1
search_radius = 1
histogram_bins = 8

[train]
total_iterations = 2
batch_size = 1
checkpoint_interval = 1
"#,
    )
    .unwrap();
}

#[test]
fn synth_count_zero_makes_valid_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let res = homreg(&["synth", "--count", "0", "--out", out.to_str().unwrap()]);
    assert_code(&res, 0);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
    assert_eq!(manifest["format_version"], "1");
}

#[test]
fn unknown_flag_exits_one_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let res = homreg(&[
        "synth",
        "--count",
        "1",
        "--out",
        out.to_str().unwrap(),
        "--no-such-flag",
    ]);
    assert_code(&res, 1);
    assert!(!out.exists(), "usage error must not create artifacts");
}

#[test]
fn missing_subcommand_prints_help() {
    let res = homreg(&[]);
    assert_code(&res, 1);
    let help = homreg(&["--help"]);
    assert_code(&help, 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["synth", "train", "eval", "viz", "inspect"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
}

#[test]
fn synth_is_seeded_and_protected_against_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    write_tiny_config(&cfg);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = homreg(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "2",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
    }
    for f in ["sample_000000/src.png", "sample_000000/gt.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical invocations"
        );
    }
    // refuses to clobber without --force
    let res = homreg(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--count",
        "2",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_code(&res, 1);
    // --force allows it
    let res = homreg(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--count",
        "2",
        "--seed",
        "9",
        "--out",
        a.to_str().unwrap(),
        "--force",
    ]);
    assert_code(&res, 0);
}

#[test]
fn inspect_prints_offsets_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    write_tiny_config(&cfg);
    let ds = dir.path().join("ds");
    assert_code(
        &homreg(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "1",
            "--out",
            ds.to_str().unwrap(),
        ]),
        0,
    );
    let res = homreg(&[
        "inspect",
        "--sample",
        ds.join("sample_000000").to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("offsets"));
    assert!(text.contains("provenance"));
    assert!(text.contains("rng_seed"));
}

#[test]
fn eval_runtime_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let res = homreg(&[
        "eval",
        "--baseline",
        "zero",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--report",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_code(&res, 2);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.starts_with("error: "), "{stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "single-line reason");
}

#[test]
fn full_pipeline_synth_train_eval_viz() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    write_tiny_config(&cfg);
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    assert_code(
        &homreg(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "3",
            "--out",
            ds.to_str().unwrap(),
        ]),
        0,
    );
    assert_code(
        &homreg(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]),
        0,
    );
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "one JSONL line per step");
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "L_pred", "L_color", "L_dis", "total", "train_mace", "lr"] {
            assert!(v.get(key).is_some(), "metrics line missing {key}");
        }
    }
    let ckpt = run.join("ckpt-00000002.bin");
    assert!(ckpt.exists());

    // training into the same directory again is refused without --force
    assert_code(
        &homreg(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]),
        1,
    );

    let report = dir.path().join("report.json");
    assert_code(
        &homreg(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]),
        0,
    );
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["count"], 3);
    assert_eq!(rep["per_sample_mace"].as_array().unwrap().len(), 3);
    // refuses to overwrite the report without --force
    assert_code(
        &homreg(&[
            "eval",
            "--baseline",
            "zero",
            "--data",
            ds.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]),
        1,
    );

    let viz = dir.path().join("viz");
    assert_code(
        &homreg(&[
            "viz",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--out",
            viz.to_str().unwrap(),
            "--limit",
            "2",
        ]),
        0,
    );
    let count = std::fs::read_dir(&viz).unwrap().count();
    assert_eq!(count, 2);
    assert!(viz.join("viz_000000.png").exists());
}
