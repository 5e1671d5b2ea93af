use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
subjects_per_domain = 3
frames_per_video = 2

[train]
max_epochs = 2
patience = 1
batch_size = 8
frames_per_video = 2
"#;

fn fasvit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fasvit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FASVIT_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn last_line_path(o: &Output, prefix: &str) -> PathBuf {
    let text = stdout(o);
    let line = text
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no {prefix} in {text}"));
    PathBuf::from(line[prefix.len()..].trim())
}

#[test]
fn unknown_config_key_is_named_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = fasvit(tmp.path(), &["--config", cfg.to_str().unwrap(), "train", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlr_head = -1.0\n").unwrap();
    let o = fasvit(tmp.path(), &["--config", cfg.to_str().unwrap(), "train", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr_head"));
}

#[test]
fn missing_dataset_exits_1_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = fasvit(
        tmp.path(),
        &["train", "--data", missing.to_str().unwrap(), "--test-domain", "d0"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn base_dry_run_reports_parameter_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("base.toml");
    fs::write(&cfg, "model_preset = \"base\"\n").unwrap();
    let o = fasvit(tmp.path(), &["--config", cfg.to_str().unwrap(), "train", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("256 patches + 1 class + 4 registers"), "{text}");
    let line = text.lines().find(|l| l.starts_with("parameters:")).unwrap();
    let n: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((n / 87e6 - 1.0).abs() < 0.02);
}

#[test]
fn fingerprint_follows_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let fp = |seed: &str| {
        let o = fasvit(tmp.path(), &["--seed", seed, "train", "--dry-run"]);
        stdout(&o).lines().next().unwrap().to_string()
    };
    assert_eq!(fp("3"), fp("3"));
    assert_ne!(fp("3"), fp("4"));
}

#[test]
fn synth_train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = small_config(out);
    let cfg = cfg.to_str().unwrap();
    let o = fasvit(out, &["--config", cfg, "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = last_line_path(&o, "dataset:");
    assert!(data.join("manifest.csv").exists());

    let data_s = data.to_str().unwrap();
    let o = fasvit(
        out,
        &["--config", cfg, "train", "--data", data_s, "--test-domain", "d3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let run = PathBuf::from(text.lines().last().unwrap().rsplit("run: ").next().unwrap());
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());
    let log_lines = fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count();
    assert!(log_lines >= 1);

    // A finished run resumes to the same place without training further.
    let o = fasvit(
        out,
        &[
            "--config",
            cfg,
            "train",
            "--data",
            data_s,
            "--test-domain",
            "d3",
            "--resume",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(),
        log_lines
    );

    let ckpt = run.join("best.ckpt");
    let o = fasvit(
        out,
        &[
            "--config",
            cfg,
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data_s,
            "--domain",
            "d3",
            "--tau",
            "0.5",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"auc\""));

    // Without --tau there is no calibration file next to a train checkpoint.
    let o = fasvit(
        out,
        &[
            "--config",
            cfg,
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data_s,
            "--domain",
            "d3",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_eval_and_report_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = small_config(out);
    let o = fasvit(
        out,
        &["--config", cfg.to_str().unwrap(), "--deterministic", "benchmark"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = last_line_path(&o, "run:");
    let table = stdout(&o);
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with('d') || l.starts_with("Avg."))
        .collect();
    assert_eq!(rows.len(), 5, "{table}");
    assert!(!run.join("timing.json").exists());

    let leg = run.join("d1");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(leg.join("report.json")).unwrap()).unwrap();
    let roc = out.join("roc.csv");
    let o = fasvit(
        out,
        &[
            "eval",
            "--scores",
            leg.join("scores.csv").to_str().unwrap(),
            "--roc",
            roc.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let again: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(again, report["metrics"]);
    let roc = fs::read_to_string(roc).unwrap();
    assert!(roc.starts_with("far,tpr\n0.000000000,"));
    assert!(roc.trim_end().ends_with("1.000000000,1.000000000"));

    let o = fasvit(out, &["report", "--run", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(run.join("summary.txt")).unwrap());
    assert!(run.join("plots/d1_roc.csv").exists() && run.join("plots/d1_curves.csv").exists());
}

#[test]
fn limited_source_benchmark_names_legs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let cfg = small_config(out);
    let o = fasvit(out, &["--config", cfg.to_str().unwrap(), "benchmark", "--mode", "lsd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("d0d1→d2") && table.contains("d0d1→d3"), "{table}");
    let run = last_line_path(&o, "run:");
    assert!(run.join("d0d1-to-d2/scores.csv").exists());
    assert!(run.join("timing.json").exists());
}
