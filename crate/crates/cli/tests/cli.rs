use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "testbed": {"channels": 2, "height": 4, "max_width": 24, "mean_duration": 3, "pitch_range": [-1, 1]},
  "network": {"hidden": 32, "time_dim": 8},
  "training": {"total_steps": 100, "checkpoint_every": 40},
  "schedule": {"timesteps": 100},
  "experiment": {"gaussian": {"samples": 2000, "tolerance": 0.1}}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylebridge"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(["--config", "tiny.json", "--out", "o"]).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn file_with_prefix(dir: &Path, prefix: &str) -> String {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with(prefix))
        .collect();
    names.sort();
    names.pop().unwrap_or_else(|| panic!("no file starting with {prefix}"))
}

#[test]
fn gen_train_resume_sample() {
    let dir = setup();
    let d = dir.path();
    ok(&run(d, &["gen-data", "--count", "16"]));
    assert!(d.join("o/dataset.blds").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("o/dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 16);

    ok(&run(d, &["train", "--data", "o/dataset.blds"]));
    let model = file_with_prefix(&d.join("o"), "model-");
    let full = fs::read(d.join("o").join(&model)).unwrap();
    let csv = fs::read_to_string(d.join("o/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,seconds"));
    assert_eq!(csv.lines().count(), 3);

    let first_ckpt = format!("o/{}", model.replace("model-", "ckpt-").replace(".blcp", "-40.blcp"));
    assert!(d.join(&first_ckpt).exists());
    ok(&run(d, &["train", "--data", "o/dataset.blds", "--resume", &first_ckpt]));
    assert_eq!(fs::read(d.join("o").join(&model)).unwrap(), full, "resumed run diverged");

    let stdout = ok(&run(d, &["sample", "--checkpoint", &format!("o/{model}"), "--data", "o/dataset.blds", "--count", "2"]));
    assert_eq!(stdout.lines().count(), 2);
    let pgm = fs::read(d.join("o/sample-0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}

#[test]
fn sample_rejects_checkpoint_for_other_sampler() {
    let dir = setup();
    let d = dir.path();
    ok(&run(d, &["gen-data", "--count", "4"]));
    ok(&run(d, &["train", "--data", "o/dataset.blds", "--total-steps", "10"]));
    let model = file_with_prefix(&d.join("o"), "model-");
    let out = run(d, &["sample", "--checkpoint", &format!("o/{model}"), "--data", "o/dataset.blds", "--sampler", "ddim"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sampler_flags_reach_the_config() {
    let dir = setup();
    let d = dir.path();
    ok(&run(d, &["gen-data", "--count", "4"]));
    ok(&run(
        d,
        &["train", "--data", "o/dataset.blds", "--total-steps", "10", "--ot-ode", "false", "--add-x1-noise", "false"],
    ));
    let model = file_with_prefix(&d.join("o"), "model-");
    let args = ["--steps", "5", "--eta", "0.5", "--guidance-w", "1", "--ot-ode", "false", "--add-x1-noise", "false"];
    let mut full = vec!["sample", "--data", "o/dataset.blds", "--count", "1"];
    let ck = format!("o/{model}");
    full.extend(["--checkpoint", ck.as_str()]);
    full.extend(args);
    ok(&run(d, &full));
    let out = run(d, &["sample", "--checkpoint", &ck, "--data", "o/dataset.blds", "--steps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let dir = setup();
    let stdout = ok(&run(dir.path(), &["grad-check", "--params", "100"]));
    assert!(stdout.contains("PASS"), "{stdout}");
}

#[test]
fn gaussian_experiment_writes_reports() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(&run(d, &["--seed", "3", "experiment", "gaussian-oracle", "--steps", "50"]));
    assert!(stdout.contains("ddim_50"), "{stdout}");
    let csv = fs::read_to_string(d.join("o/gaussian-oracle.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,mean,stderr,n_seeds"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("o/gaussian-oracle.json")).unwrap()).unwrap();
    assert_eq!(json["seeds"], serde_json::json!([3]));
}

#[test]
fn bad_input_is_reported() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(run(d, &["experiment", "nope"]).status.code(), Some(2));
    fs::write(d.join("tiny.json"), r#"{"trainng": {}}"#).unwrap();
    let out = run(d, &["grad-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
    let out = bin().current_dir(d).args(["--out", "o", "experiment", "cfg-sweep", "--sampler", "ddim"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite"));
}
