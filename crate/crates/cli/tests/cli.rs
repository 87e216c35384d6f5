use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddghm_cli::{cmd_evaluate, load_config, RunManifest, SplitChoice, CHECKPOINT_FILE, MANIFEST_FILE};
use ddghm_core::data::{Domain, InteractionEvent};
use ddghm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ddghm(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddghm"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("DDGHM_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(envs.iter().copied());
    cmd.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_log(path: &Path, users: usize, items: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    for u in 0..users {
        for d in Domain::BOTH {
            for _ in 0..12 {
                let e = InteractionEvent {
                    user_id: format!("user{u}"),
                    item_id: format!("{d}-{}", rng.gen_range(0..items)),
                    rating: 4.0,
                    timestamp: 5_000 + rng.gen_range(0..40 * 86_400),
                    domain: d,
                };
                lines.push(e.to_line());
            }
        }
    }
    lines.push("garbage line".into());
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Pipeline {
    _dir: tempfile::TempDir,
    processed: PathBuf,
    run: PathBuf,
}

fn pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    write_log(&log, 30, 8, 1);
    let processed = dir.path().join("seq.tsv");
    let out = ddghm(&["preprocess", p(&log), "--out", p(&processed)], &[]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("rejected lines\t1"), "{stdout}");
    assert!(stdout.contains("#Sequences\t30"), "{stdout}");

    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"dim": 8, "epochs": 2, "batch_size": 8}"#).unwrap();
    let run = dir.path().join("run");
    let out = ddghm(
        &["train", "--data", p(&processed), "--config", p(&config), "--out", p(&run), "--seed", "5"],
        &[("DDGHM_EPOCHS", "3")],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    Pipeline {
        _dir: dir,
        processed,
        run,
    }
}

#[test]
fn preprocess_train_evaluate_round_trip() {
    let pl = pipeline();
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(pl.run.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.status, "finished");
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.config.train.epochs, 3, "environment overrides the file");
    assert_eq!(manifest.inputs.len(), 2);
    assert!(manifest.inputs.iter().all(|i| i.sha256.len() == 64));
    assert!(manifest.finished_at_unix.unwrap() >= manifest.started_at_unix);

    let epochs = fs::read_to_string(pl.run.join("epochs.tsv")).unwrap();
    let rows: Vec<&str> = epochs.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("epoch\tL_A\tL_B\tL_col\tL_con\ttotal"));

    let ckpt = pl.run.join(CHECKPOINT_FILE);
    let report = pl.run.join("report");
    let out = ddghm(
        &["evaluate", "--checkpoint", p(&ckpt), "--data", p(&pl.processed), "--split", "all", "--cutoffs", "1,5", "--out", p(&report)],
        &[],
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let tsv = text(&out.stdout);
    assert!(tsv.starts_with("domain\tevaluated\tskipped\tHR@1"), "{tsv}");
    assert_eq!(fs::read_to_string(pl.run.join("report.tsv")).unwrap(), tsv);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(pl.run.join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());

    // The library path gives the same table as the binary.
    let table = cmd_evaluate(&ckpt, &pl.processed, SplitChoice::All, Some(&[1, 5])).unwrap();
    assert_eq!(table.to_tsv(), tsv);
    assert_eq!(table.domains["A"].evaluated, 30);
}

#[test]
fn evaluate_rejects_foreign_vocabulary_and_corrupt_checkpoints() {
    let pl = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("other.tsv");
    write_log(&log, 30, 9, 2);
    let other = dir.path().join("other.seq");
    assert!(ddghm(&["preprocess", p(&log), "--out", p(&other)], &[]).status.success());
    let ckpt = pl.run.join(CHECKPOINT_FILE);
    assert!(matches!(
        cmd_evaluate(&ckpt, &other, SplitChoice::Test, None),
        Err(Error::VocabularyMismatch(_))
    ));
    let out = ddghm(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&other)], &[]);
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 3);
    let broken = dir.path().join("broken.bin");
    fs::write(&broken, bytes).unwrap();
    let out = ddghm(&["evaluate", "--checkpoint", p(&broken), "--data", p(&pl.processed)], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
}

#[test]
fn exhausted_dataset_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.tsv");
    write_log(&log, 3, 8, 3);
    let out = ddghm(&["preprocess", p(&log), "--out", p(&dir.path().join("x"))], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = text(&out.stderr);
    assert!(err.contains("exhausted"), "{err}");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn invalid_configuration_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mask_ratio": 1.5, "lambda_con": -1}"#).unwrap();
    let out = ddghm(
        &["train", "--data", "missing.tsv", "--out", p(dir.path())],
        &[("DDGHM_CONFIG", p(&cfg)), ("DDGHM_BATCH_SIZE", "0")],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for key in ["mask_ratio", "lambda_con", "batch_size"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
    let out = ddghm(&["train", "--data", "missing.tsv", "--out", p(dir.path())], &[("DDGHM_MARGN", "1")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_environment_compose() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"dim": 12, "split": [0.5, 0.25, 0.25], "min_interactions": 3}"#).unwrap();
    let env = vec![("DDGHM_DIM".to_string(), "6".to_string()), ("DDGHM_SEED".to_string(), "99".to_string())];
    let cfg = load_config(Some(&path), env).unwrap();
    assert_eq!(cfg.train.dim, 6);
    assert_eq!(cfg.train.seed, 99);
    assert_eq!(cfg.train.split, (0.5, 0.25, 0.25));
    assert_eq!(cfg.preprocess.min_interactions, 3);
}

#[test]
fn gradcheck_command_passes() {
    let out = ddghm(&["gradcheck", "--seed", "3"], &[]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("PASS"));
}
