use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[paths]
checkpoints = "ck"
output = "out"
[data.synthetic]
samples = 300
[data]
validation_fraction = 0.3
[classifier]
epochs = 2
[diffusion.schedule]
steps = 20
[diffusion.denoiser]
steps = 150
hidden = 64
[counterfactual]
k = 3
[counterfactual.guidance]
suspension_steps = 2
[metrics]
random_draws = 4
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptcf"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

#[test]
fn missing_dataset_is_rejected_before_any_work() {
    let dir = workspace();
    let out = run(dir.path(), &["-c", "run.toml", "--set", "paths.dataset=\"nowhere\"", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert!(!dir.path().join("ck").exists());
}

#[test]
fn bad_settings_exit_with_validation_code() {
    let dir = workspace();
    for args in [
        vec!["-c", "run.toml", "--set", "counterfactual.t_start=2", "config"],
        vec!["-c", "missing.toml", "config"],
        vec!["-c", "run.toml", "--set", "nonsense", "config"],
    ] {
        assert_eq!(run(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
    let out = run(dir.path(), &["-c", "run.toml", "index"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_file() {
    let dir = workspace();
    let text = ok(dir.path(), &["-c", "run.toml", "--set", "generate.seed=4", "config"]);
    assert!(text.contains("seed = 4"));
    assert!(text.contains("k = 3"));
    let a = ok(dir.path(), &["-c", "run.toml", "config"]);
    let b = ok(dir.path(), &["-c", "run.toml", "-o", "elsewhere", "config"]);
    let hash = |t: &str| t.lines().last().unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn full_pipeline() {
    let dir = workspace();
    let d = dir.path();
    let c = ["-c", "run.toml"];
    let with = |extra: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(extra.iter().copied()).collect() };

    ok(d, &with(&["train"]));
    for f in ["classifier.ccft", "denoiser.ccft", "codec.ccft", "train_log.json"] {
        assert!(d.join("ck").join(f).exists(), "{f}");
    }

    ok(d, &with(&["index"]));
    let index = std::fs::read(d.join("ck/index/index.ccft")).unwrap();
    let manifest = std::fs::read(d.join("ck/index/index.json")).unwrap();
    ok(d, &with(&["index"]));
    assert_eq!(index, std::fs::read(d.join("ck/index/index.ccft")).unwrap());
    assert_eq!(manifest, std::fs::read(d.join("ck/index/index.json")).unwrap());

    let text = ok(d, &with(&["generate", "--limit", "2"]));
    assert!(text.contains("2 new"), "{text}");
    let results = d.join("out/results");
    assert_eq!(std::fs::read_dir(&results).unwrap().count(), 2);
    let text = ok(d, &with(&["generate", "--limit", "2", "--workers", "2"]));
    assert!(text.contains("2 already complete"), "{text}");
    let text = ok(d, &with(&["generate", "--limit", "3"]));
    assert!(text.contains("1 new") && text.contains("2 already complete"), "{text}");

    ok(d, &with(&["evaluate"]));
    let report = std::fs::read(d.join("out/metrics.json")).unwrap();
    ok(d, &with(&["evaluate"]));
    assert_eq!(report, std::fs::read(d.join("out/metrics.json")).unwrap());

    // a second run with another k, compared against the first
    ok(d, &with(&["-o", "out_all", "generate", "--limit", "3", "-k", "all"]));
    let text = ok(d, &with(&["-o", "out_all", "--set", "counterfactual.k=\"all\"", "evaluate", "--run", "out"]));
    assert!(text.contains("| 3 |") && text.contains("| 32 |"), "{text}");
    assert!(d.join("out_all/comparison.md").exists());

    // results from a different configuration are refused
    let out = run(d, &with(&["--set", "counterfactual.k=4", "evaluate"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    ok(d, &with(&["report"]));
    let index_html = std::fs::read_to_string(d.join("out/report/index.html")).unwrap();
    assert_eq!(index_html.matches("<tr><td><a href=").count(), 3);

    // tampering with a stored counterfactual is detected
    let first = std::fs::read_dir(&results).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let other = std::fs::read_dir(&results).unwrap().map(|e| e.unwrap().path()).max().unwrap();
    std::fs::copy(other.join("original.png"), first.join("counterfactual.png")).unwrap();
    let out = run(d, &with(&["evaluate"]));
    assert_eq!(out.status.code(), Some(3));
    let name = first.file_name().unwrap().to_string_lossy().to_string();
    let id = name.split_once('_').unwrap().1;
    assert!(String::from_utf8_lossy(&out.stderr).contains(id));
    let out = run(d, &with(&["evaluate", "--force"]));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(id));

    // a removed artifact is listed and the other panels are still written
    std::fs::remove_file(other.join("original.png")).unwrap();
    let out = run(d, &with(&["report"]));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("original.png"));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("2 panels"));
}

#[test]
fn training_resumes_from_the_stored_step() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "run.toml", "--set", "diffusion.denoiser.steps=60", "train"]);
    ok(d, &["-c", "run.toml", "--set", "diffusion.denoiser.steps=90", "train", "--resume"]);
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ck/train_log.json")).unwrap()).unwrap();
    assert_eq!(log["resumed_from"], 60);
    assert_eq!(log["denoiser"]["steps"], 90);
}

#[test]
fn full_reference_split_warns() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["-c", "run.toml", "--set", "diffusion.denoiser.steps=1", "train"]);
    let out = run(d, &["-c", "run.toml", "--set", "index.ratio=1.0", "index"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 evaluation samples"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}
