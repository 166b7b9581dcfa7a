use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lamol_forge::manifest::Manifest;

const CONFIG: &str = r#"
seeds = [1, 2]
output = "from-config"

[stream]
tasks = ["copy", "reverse"]
permutations = "all"

[model]
layers = 1
width = 16
heads = 2
ff_width = 32
max_len = 20

[[task]]
name = "copy"
kind = "copy"
train_size = 16
test_size = 4

[[task]]
name = "reverse"
kind = "reverse"
train_size = 16
test_size = 4

[[method]]
name = "finetune"
epochs = 1

[[method]]
name = "lamol_task"
gamma = 0.25
epochs = 1
"#;

fn forge(args: &[&str], env: Option<(&str, &Path)>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lamol-forge"));
    cmd.args(args).env_remove("LAMOL_FORGE_OUT");
    if let Some((k, v)) = env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, CONFIG).unwrap();
    let config = config.to_string_lossy().into_owned();
    (dir, config)
}

#[test]
fn run_resume_verify_render_inspect() {
    let (dir, config) = setup();
    let out = dir.path().join("out");
    let out_s = out.to_string_lossy().into_owned();

    let o = forge(&["run", "--config", &config, "--out", &out_s, "--jobs", "2"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("8 run(s) executed, 0 skipped"));

    let manifest = Manifest::load(&out).unwrap().unwrap();
    assert_eq!(manifest.runs.len(), 8);
    assert!(manifest.verify(&out).is_empty());
    let run = out.join("runs/lamol_task_g0.25__reverse-copy__s2");
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("checkpoints/task2_epoch1.ckpt").exists());
    assert!(run.join("replay/replay_task2.tsv").exists());

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let orders = summary["lamol_task_g0.25"]["orders"].as_object().unwrap();
    assert_eq!(orders.keys().collect::<Vec<_>>(), ["copy-reverse", "reverse-copy"]);
    assert_eq!(orders["copy-reverse"]["seeds"], serde_json::json!([1, 2]));
    assert!(summary["finetune"]["across_orders"]["std"].as_f64().unwrap() >= 0.0);
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 2);

    let o = forge(&["resume", "--config", &config, "--out", &out_s], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 run(s) executed, 8 skipped"), "{}", stdout(&o));

    // A tampered artifact is caught by verify and re-run by resume.
    let metrics = out.join("runs/finetune__copy-reverse__s1/metrics.csv");
    fs::write(&metrics, "tampered").unwrap();
    let o = forge(&["verify", &out_s], None);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("finetune__copy-reverse__s1/metrics.csv"));
    let o = forge(&["resume", "--config", &config, "--out", &out_s], None);
    assert!(stdout(&o).contains("1 run(s) executed, 7 skipped"), "{}", stdout(&o));
    assert!(forge(&["verify", &out_s], None).status.success());

    let svg = dir.path().join("svg");
    let o = forge(&["render", &out_s, "--out", &svg.to_string_lossy()], None);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&svg).unwrap().count(), 8 * 2);
    let chart = fs::read_to_string(svg.join("finetune__copy-reverse__s1__copy.svg")).unwrap();
    assert_eq!(chart.matches("task-boundary").count(), 1);

    let dump = run.join("replay/replay_task2.tsv").to_string_lossy().into_owned();
    let o = forge(&["inspect", &dump, "-n", "3"], None);
    assert!(o.status.success());
    assert!(stdout(&o).lines().count() <= 3);
    assert!(!forge(&["inspect", &dump, "-n", "0"], None).status.success());
}

#[test]
fn output_root_precedence_and_seed_override() {
    let (dir, config) = setup();
    let env_root = dir.path().join("env");
    let o = forge(
        &["run", "--config", &config, "--seeds", "7"],
        Some(("LAMOL_FORGE_OUT", &env_root)),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_root.join("runs/finetune__copy-reverse__s7/metrics.csv").exists());
    assert!(!dir.path().join("from-config").exists());

    let o = forge(&["run", "--config", &config, "--seeds", "7"], None);
    assert!(o.status.success());
    assert!(dir.path().join("from-config/manifest.json").exists());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "seeds = [1]\n[stream]\ntasks = [\"copy\"]\n[[method]]\nname = \"lamol_magic\"\n",
    )
    .unwrap();
    let o = forge(&["run", "--config", &bad.to_string_lossy()], None);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamol_magic"));

    let o = forge(&["verify", &dir.path().to_string_lossy()], None);
    assert!(!o.status.success());
    let o = forge(&["render", &dir.path().join("missing.csv").to_string_lossy()], None);
    assert!(!o.status.success());
}
