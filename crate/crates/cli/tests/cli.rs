use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 2
out_dir = "out"

[dataset]
dir = "data"
[dataset.synthetic]
users = 20
items = 25
interactions_per_user = 15
genres = 4

[model]
d = 8
n_layers = 1
n_heads = 2
max_positions = 64
mlp_hidden = 16

[[plan]]
name = "pretrain"
stage = "pretrain_patch"
batch_size = 4
lr = 0.01
k = 5
max_targets_per_user = 2

[[plan]]
name = "pft_i"
stage = "finetune_pft_i"
batch_size = 4
lr = 0.01
k = 5
m = 2
max_targets_per_user = 2
init_checkpoint = "pretrain"

[eval]
[[eval.run]]
checkpoint = "pft_i"
mode = "pft_i"
k = [5]
m = [2]
"#;

fn patchrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchrec"))
        .current_dir(dir)
        .args(args)
        .arg("-q")
        .output()
        .unwrap()
}

#[test]
fn full_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    for cmd in ["gen-data", "ingest", "train", "eval", "report"] {
        let out = patchrec(dir.path(), &[cmd, "-c", "exp.toml"]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout.starts_with("# resolved config"), "{cmd}: {stdout}");
        assert!(stdout.contains("seed = 2"));
    }
    let out = dir.path().join("out");
    assert!(out.join("checkpoints/pretrain/model.toml").exists());
    assert!(out.join("checkpoints/pft_i/params.bin").exists());
    assert!(out.join("eval/sweep.csv").exists());
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("pft_i"));

    // overrides land in the resolved config
    let res = patchrec(dir.path(), &["gen-data", "-c", "exp.toml", "--seed", "9", "--out", "other"]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success());
    assert!(stdout.contains("seed = 9") && stdout.contains("out_dir = \"other\""), "{stdout}");
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG.replace("d = 8", "d = 8\nwidth = 3")).unwrap();
    let out = patchrec(dir.path(), &["train", "-c", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    fs::write(dir.path().join("dep.toml"), CONFIG.replace("init_checkpoint = \"pretrain\"", "init_checkpoint = \"gone\"")).unwrap();
    let out = patchrec(dir.path(), &["train", "-c", "dep.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    // evaluating before training finds no checkpoint
    assert_eq!(patchrec(dir.path(), &["gen-data", "-c", "exp.toml"]).status.code(), Some(0));
    let out = patchrec(dir.path(), &["eval", "-c", "exp.toml"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
