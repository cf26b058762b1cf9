use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use myops_core::volume_io::{write_nifti, Volume};

fn myops(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_myops"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MYOPS_WORKDIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
crop_size = 32
warps_per_slice = 1
seed = 3
[synth]
n_cases = 3
held_out = 1
size = 32
slices = 1
[train]
epochs = 1
base_channels = 2
lr = 0.001
"#;

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_command_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = myops(tmp.path(), &["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("UnknownCommand"), "{}", stderr(&o));
}

#[test]
fn bad_config_fails() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "no_such_key = 1\n").unwrap();
    let o = myops(tmp.path(), &["synth", "--config", "c.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("ConfigError"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), TINY).unwrap();
    assert!(myops(tmp.path(), &["synth", "--config", "c.toml"]).status.success());
    let first = tree(&tmp.path().join("data"));
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with("labels.nii")).count(), 3);
    assert!(myops(tmp.path(), &["synth", "--config", "c.toml"]).status.success());
    assert_eq!(tree(&tmp.path().join("data")), first);
    let o = myops(tmp.path(), &["synth", "--config", "c.toml", "--seed", "4"]);
    assert!(o.status.success());
    assert_ne!(tree(&tmp.path().join("data")), first);
}

#[test]
fn evaluate_with_mismatched_dims_reports_dim_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let case = tmp.path().join("data/test/case_000");
    fs::create_dir_all(&case).unwrap();
    fs::create_dir_all(tmp.path().join("preds")).unwrap();
    let gt = Volume::new((8, 8, 1), vec![0.0; 64], true);
    let pred = Volume::new((8, 8, 2), vec![0.0; 128], true);
    fs::write(case.join("labels.nii"), write_nifti(&gt).unwrap()).unwrap();
    fs::write(tmp.path().join("preds/case_000.nii"), write_nifti(&pred).unwrap()).unwrap();
    fs::write(tmp.path().join("c.toml"), "predictions_dir = \"preds\"\n").unwrap();
    let o = myops(tmp.path(), &["evaluate", "--config", "c.toml"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("\"kind\":\"DimMismatch\""), "{err}");
    assert!(err.contains("\"stage\":\"evaluate\""), "{err}");
}

#[test]
fn gradcheck_prints_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = myops(tmp.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    for op in ["conv2d.input", "relu", "sigmoid", "maxpool2", "upsample2", "soft_dice_loss", "unet.depth1.end_to_end"] {
        assert!(out.contains(op), "missing {op} in\n{out}");
    }
}

#[test]
fn stages_need_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), TINY).unwrap();
    assert!(myops(tmp.path(), &["synth", "--config", "c.toml"]).status.success());
    let o = myops(tmp.path(), &["train", "--config", "c.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MissingInput"), "{}", stderr(&o));
}

#[test]
fn tiny_chain_produces_a_report_in_the_env_workdir() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), TINY).unwrap();
    assert!(myops(tmp.path(), &["synth", "--config", "c.toml"]).status.success());
    let run_all = || {
        Command::new(env!("CARGO_BIN_EXE_myops"))
            .args(["all", "--config", "c.toml", "--arch", "unet"])
            .current_dir(tmp.path())
            .env("RUST_LOG", "warn")
            .env("MYOPS_WORKDIR", tmp.path().join("elsewhere"))
            .output()
            .unwrap()
    };
    let o = run_all();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("dice_LVBP"), "{out}");
    assert!(!tmp.path().join("work").exists());
    let first = tree(&tmp.path().join("elsewhere"));
    assert!(first.iter().any(|(n, _)| n.ends_with("report.json")));
    assert!(first.iter().any(|(n, _)| n.ends_with("block4_m2.myot")));
    assert!(run_all().status.success());
    assert_eq!(tree(&tmp.path().join("elsewhere")), first);
}
