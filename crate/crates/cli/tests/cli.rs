use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bdgf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdgf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn records(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const CONFIG: &str = r#"
scene = "scene"
out_dir = "runs"
seeds = [3]
patch_size = 5
samples_per_class = 8

[pretrain]
steps = 4
batch_size = 4

[train]
steps = 6
batch_size = 8
milestones = [3, 5]
"#;

#[test]
fn full_run_on_a_tiny_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bdgf(
        d,
        &[
            "synth",
            "--out",
            "scene",
            "--classes",
            "2",
            "--size",
            "12",
            "--bands",
            "6",
            "--sar-channels",
            "1",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::write(d.join("run.toml"), CONFIG).unwrap();

    for cmd in ["pretrain", "train"] {
        let out = bdgf(d, &[cmd, "--config", "run.toml"]);
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let r = records(&out);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0]["seed"], 3);
        assert_eq!(r[0]["weights_sha256"].as_str().unwrap().len(), 64);
    }

    let out = bdgf(d, &["eval", "--config", "run.toml", "--split", "test"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = records(&out);
    let oa = r[0]["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));
    assert_eq!(r[1]["summary"]["runs"], 1);
    assert!(d.join("runs/seed_3/classification_map.png").exists());
    assert!(d.join("runs/summary.json").exists());

    let out = bdgf(
        d,
        &["featdump", "--config", "run.toml", "--pixels", "0,1,2"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) =
        bdgf::pipeline::read_featdump(&d.join("runs/seed_3/features.bin")).unwrap();
    assert_eq!(header.rows, 3);
    assert_eq!(rows.len(), 3);
}

#[test]
fn seed_and_out_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(bdgf(
        d,
        &[
            "synth",
            "--out",
            "scene",
            "--classes",
            "2",
            "--size",
            "12",
            "--bands",
            "6"
        ]
    )
    .status
    .success());
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let out = bdgf(
        d,
        &[
            "pretrain",
            "--config",
            "run.toml",
            "--seed",
            "9",
            "--out",
            "elsewhere",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(d.join("elsewhere/seed_9/denoiser/manifest.json").exists());
}

#[test]
fn failures_emit_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bdgf(d, &["train", "--config", "missing.toml"]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.toml"));

    fs::write(d.join("bad.toml"), "patch_size = 4\n").unwrap();
    let out = bdgf(d, &["pretrain", "--config", "bad.toml"]);
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "config");

    // training before pretraining has no denoiser to load
    assert!(bdgf(
        d,
        &[
            "synth",
            "--out",
            "scene",
            "--classes",
            "2",
            "--size",
            "12",
            "--bands",
            "6"
        ]
    )
    .status
    .success());
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let out = bdgf(d, &["train", "--config", "run.toml"]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "io");
}
