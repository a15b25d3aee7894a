use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn boltzppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boltzppo"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
episodes = 2
seeds = [0]
output_dir = "unused"
record_wall_time = false

[env]
preset = "six_node_deterministic"

[ppo]
n_steps = 30
n_epochs = 1
minibatch_size = 10

[policy]
type = "mlp"
hidden = [8]

[value]
type = "mlp"
hidden = [8]
"#;

#[test]
fn validate_accepts_shipped_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mlp_deterministic.toml", "four_variants.toml"] {
        let out = boltzppo(&["validate", "--config", root.join(name).to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: variant"));
    }
}

#[test]
fn invalid_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("episodes = 2", "episodes = 0"));
    let out = boltzppo(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("episodes"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = boltzppo(&["run", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_run_directory_and_resume_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("runs");
    let out = boltzppo(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--trace",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = out_dir.join("mlp-mlp/seed-0");
    for f in [
        "config.toml",
        "episodes.csv",
        "updates.csv",
        "checkpoint.json",
        "metadata.json",
        "trace.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let episodes = fs::read_to_string(run.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 3);

    // a finished checkpoint resumes to the same files
    let copy = tmp.path().join("resumed");
    let out = boltzppo(&[
        "run",
        "--config",
        &cfg,
        "--resume",
        run.join("checkpoint.json").to_str().unwrap(),
        "--out",
        copy.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        episodes,
        fs::read_to_string(copy.join("episodes.csv")).unwrap()
    );
}

#[test]
fn batch_then_report_over_two_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL.replace("seeds = [0]", "seeds = [0, 1]").replace(
        "[policy]\ntype = \"mlp\"\nhidden = [8]",
        "[policy]\ntype = \"dbm\"\nhidden_layers = [3, 3]",
    );
    let cfg = write_config(tmp.path(), &body);
    let out_dir = tmp.path().join("batch");
    let out = boltzppo(&[
        "batch",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for v in ["mlp-mlp", "dbm-mlp", "mlp-dbm", "dbm-dbm"] {
        for s in [0, 1] {
            assert!(out_dir
                .join(v)
                .join(format!("seed-{s}"))
                .join("episodes.csv")
                .exists());
        }
    }
    assert!(out_dir.join("report.md").exists());

    let rep = tmp.path().join("rep");
    let out = boltzppo(&[
        "report",
        out_dir.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn baselines_prints_both_returns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = boltzppo(&["baselines", "--config", &cfg]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("perfect defense") && text.contains("no-op"),
        "{text}"
    );
}
