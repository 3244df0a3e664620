use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[model]
capacity = 4
channels = 32
heads = 4
bidr_layers = 1
head_layers = 1

[synth]
height = 64
width = 64
min_objects = 1
max_objects = 2
min_size = 12
max_size = 24
length = 4

[train]
steps = 2
num_sequences = 2
"#;

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("unitrack-cli-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    dir
}

fn unitrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitrack"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr)
}

#[test]
fn synth_train_track_eval_viz() {
    let dir = workdir();
    ok(unitrack(&dir, &["synth", "--out", "data", "--count", "1", "--first-seed", "7"]));
    let seq = dir.join("data/synth-000007");
    assert!(seq.join("frames/00003.png").is_file() && seq.join("masks/00000.png").is_file());

    ok(unitrack(&dir, &["train", "--out", "model.safetensors", "--log", "log.jsonl"]));
    assert_eq!(fs::read_to_string(dir.join("log.jsonl")).unwrap().lines().count(), 2);

    for init in ["mask", "box"] {
        let out = format!("track-{init}/synth-000007");
        ok(unitrack(&dir, &["track", "--checkpoint", "model.safetensors", "--sequence", "data/synth-000007", "--init", init, "--out", &out]));
        assert_eq!(fs::read_to_string(dir.join(&out).join("boxes.txt")).unwrap().lines().count(), 4);
        let vos = ok(unitrack(&dir, &["eval", "--task", "vos", "--pred", &format!("track-{init}"), "--gt", "data"]));
        assert!(vos.contains("\"j\""), "{vos}");
        let report = dir.join(format!("vot-{init}.json"));
        ok(unitrack(&dir, &["eval", "--task", "vot", "--pred", &out, "--gt", "data/synth-000007", "--out", report.to_str().unwrap()]));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert!(json["summary"]["auc"].is_number(), "{json}");
    }

    ok(unitrack(&dir, &["viz", "--checkpoint", "model.safetensors", "--sequence", "data/synth-000007", "--out", "viz"]));
    assert!(dir.join("viz/overlay-00000.png").is_file());
    assert!(dir.join("viz/pinpoints-frame00001-object1.png").is_file());

    ok(unitrack(&dir, &["train", "--resume", "model.safetensors", "--steps", "3", "--out", "model3.safetensors"]));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = workdir();
    let out = unitrack(&dir, &["track", "--checkpoint", "missing.safetensors", "--sequence", "nowhere", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    fs::write(dir.join("run.toml"), "[model]\ncapacity = 1\n[synth]\nmax_objects = 3\n").unwrap();
    let out = unitrack(&dir, &["synth", "--out", "data"]);
    assert!(!out.status.success());
    fs::remove_dir_all(&dir).unwrap();
}
