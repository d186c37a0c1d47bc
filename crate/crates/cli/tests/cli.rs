//! End-to-end tests against the compiled `logitreg` binary.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn logitreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logitreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small blobs experiment: plain training plus FGSM and PGD evaluation.
fn smoke_config(out_dir: &Path) -> String {
    format!(
        "# smoke experiment\n\
         [dataset]\n\
         kind = blobs\n\
         shape = 1x8x8\n\
         classes = 10\n\
         noise = 0.15\n\
         train_examples = 2000\n\
         test_examples = 400\n\
         seed = 3\n\
         \n\
         [model]\n\
         arch = mlp\n\
         hidden = 16\n\
         \n\
         [training]\n\
         epochs = 5\n\
         warmup_epochs = 1\n\
         peak_lr = 0.05\n\
         decay_epochs = 3\n\
         batch_size = 128\n\
         seed = 0\n\
         \n\
         [objective]\n\
         kind = plain\n\
         \n\
         [threat]\n\
         epsilon = 0.1\n\
         step = 0.025\n\
         steps = 5\n\
         \n\
         [evaluation]\n\
         attacks = natural, fgsm, pgd-5\n\
         seed = 0\n\
         spsa_samples = 32\n\
         spsa_subsample = 64\n\
         \n\
         [output]\n\
         dir = {}\n",
        out_dir.display()
    )
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    let out_dir = dir.join("out");
    let path = dir.join("smoke.cfg");
    std::fs::write(&path, smoke_config(&out_dir)).unwrap();
    path
}

#[test]
fn train_writes_all_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out_dir = dir.path().join("out");

    let t0 = Instant::now();
    let run = logitreg(&["train", "--config", config.to_str().unwrap()]);
    let elapsed = t0.elapsed();
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    assert!(elapsed.as_secs() < 60, "smoke train took {elapsed:?}");

    for artifact in ["checkpoint.bin", "training_log.jsonl", "report.json", "report.md"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    // One JSON object per epoch in the log.
    let log = std::fs::read_to_string(out_dir.join("training_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("clean_accuracy").is_some());
    }

    // The rendered table reaches stdout and lists every configured adversary.
    let table = stdout(&run);
    assert!(table.starts_with("| training |"), "{table}");
    for column in ["natural", "fgsm", "pgd-5"] {
        assert!(table.contains(column), "missing column {column}: {table}");
    }

    // Raw counts ride along with the percentages.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["classes"], 10);
    assert_eq!(report["entries"][0]["attack"], "natural");
    assert!(report["entries"][0]["correct"].is_u64());
    assert!(report["entries"][0]["percent"].as_str().unwrap().ends_with('%'));

    // Byte-identical rerun, same seed and config.
    let before: Vec<(String, Vec<u8>)> = ["checkpoint.bin", "training_log.jsonl", "report.json", "report.md"]
        .iter()
        .map(|a| (a.to_string(), std::fs::read(out_dir.join(a)).unwrap()))
        .collect();
    let rerun = logitreg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&rerun), 0, "stderr: {}", stderr(&rerun));
    for (artifact, bytes) in &before {
        let after = std::fs::read(out_dir.join(artifact)).unwrap();
        assert_eq!(&after, bytes, "{artifact} changed across reruns");
    }
}

#[test]
fn evaluate_only_skips_training_and_matches_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out_dir = dir.path().join("out");

    let run = logitreg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let eval_dir = dir.path().join("eval-out");
    let checkpoint = out_dir.join("checkpoint.bin");
    let run = logitreg(&[
        "evaluate",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    // No training artifacts in evaluation-only mode.
    assert!(!eval_dir.join("checkpoint.bin").exists());
    assert!(!eval_dir.join("training_log.jsonl").exists());
    // Same model, same seed: evaluation reproduces the training-run report.
    let trained = std::fs::read(out_dir.join("report.json")).unwrap();
    let evaluated = std::fs::read(eval_dir.join("report.json")).unwrap();
    assert_eq!(trained, evaluated);
}

#[test]
fn probe_reports_masking_and_pairing_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out_dir = dir.path().join("out");

    let run = logitreg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let probe_dir = dir.path().join("probe-out");
    let run = logitreg(&[
        "probe",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        probe_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    assert!(probe_dir.join("probe.json").exists());
    assert!(probe_dir.join("probe.md").exists());

    let text = stdout(&run);
    assert!(text.contains("Gradient masking"), "{text}");
    assert!(text.contains("Pairing-gradient checks"), "{text}");

    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(probe_dir.join("probe.json")).unwrap())
            .unwrap();
    assert_eq!(probe["pairing_checks"].as_array().unwrap().len(), 4);
    for check in probe["pairing_checks"].as_array().unwrap() {
        assert_eq!(check["sign_agrees"], true, "{check}");
    }
    assert!(probe["masking"]["pgd"].as_array().unwrap().len() >= 2);
}

#[test]
fn transfer_renders_a_square_grid_and_report_merges_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());

    let dir_a = dir.path().join("model-a");
    let dir_b = dir.path().join("model-b");
    for (out, seed) in [(&dir_a, "0"), (&dir_b, "1")] {
        let run = logitreg(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    }

    let transfer_dir = dir.path().join("transfer-out");
    let ckpt_a = dir_a.join("checkpoint.bin");
    let ckpt_b = dir_b.join("checkpoint.bin");
    let run = logitreg(&[
        "transfer",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt_a.to_str().unwrap(),
        "--checkpoint",
        ckpt_b.to_str().unwrap(),
        "--attack",
        "fgsm",
        "--out",
        transfer_dir.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    // Pure grid: two header fields, two records, percent cells.
    let csv = stdout(&run);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0].split(',').count(), 2);
    for line in &lines[1..] {
        for cell in line.split(',') {
            assert!(cell.ends_with('%'), "{line}");
        }
    }
    assert!(transfer_dir.join("transfer.json").exists());
    assert!(transfer_dir.join("transfer.csv").exists());

    // Checkpoints differ, so the two rows cannot be identical everywhere.
    assert_ne!(lines[1], lines[2]);

    // Merging both stored reports yields one row per training run.
    let report_a = dir_a.join("report.json");
    let report_b = dir_b.join("report.json");
    let run = logitreg(&[
        "report",
        report_a.to_str().unwrap(),
        report_b.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    let merged = stdout(&run);
    let lines: Vec<&str> = merged.lines().collect();
    assert_eq!(lines.len(), 3, "{merged}");
    assert!(lines[0].starts_with("training,"), "{merged}");
}

#[test]
fn config_errors_exit_1_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();

    let bad_key = dir.path().join("bad-key.cfg");
    std::fs::write(
        &bad_key,
        "[dataset]\nkind = blobs\n[threat]\nepsilonn = 0.03\n",
    )
    .unwrap();
    let run = logitreg(&["train", "--config", bad_key.to_str().unwrap()]);
    assert_eq!(code(&run), 1);
    let msg = stderr(&run);
    assert!(msg.contains("line 4") && msg.contains("epsilonn"), "{msg}");

    let inconsistent = dir.path().join("inconsistent.cfg");
    std::fs::write(
        &inconsistent,
        "[dataset]\nkind = blobs\n[objective]\nkind = advtrain\n",
    )
    .unwrap();
    let run = logitreg(&["train", "--config", inconsistent.to_str().unwrap()]);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("threat"), "{}", stderr(&run));

    let run = logitreg(&["train", "--config", "/nonexistent/experiment.cfg"]);
    assert_eq!(code(&run), 1);

    let run = logitreg(&["report", "/nonexistent/report.json"]);
    assert_eq!(code(&run), 1);

    // Usage errors also land on exit status 1.
    let run = logitreg(&["launch", "--config", "x"]);
    assert_eq!(code(&run), 1);
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out_dir = dir.path().join("out");

    let run = logitreg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    // Same checkpoint against a different architecture: fingerprint error.
    let wider = dir.path().join("wider.cfg");
    let text = smoke_config(&dir.path().join("wider-out")).replace("hidden = 16", "hidden = 24");
    std::fs::write(&wider, text).unwrap();
    let run = logitreg(&[
        "evaluate",
        "--config",
        wider.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2, "stderr: {}", stderr(&run));
    assert!(stderr(&run).contains("fingerprint"), "{}", stderr(&run));

    // Transfer needs at least two checkpoints; that is an input error.
    let run = logitreg(&[
        "transfer",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1, "stderr: {}", stderr(&run));
}
