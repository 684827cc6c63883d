use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ulma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulma")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ulma(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "vocab_size": 200,
  "encoder": {"num_layers": 2, "hidden_size": 16, "num_heads": 2, "ffn_size": 32, "max_positions": 24},
  "fusion": {"blocks": [1, 2], "mode": "concatenate"},
  "train": {"base_encoder_lr": 0.001, "head_lr": 0.01},
  "mlm": {"steps": 6, "batch_size": 8, "lr": 0.001},
  "synth": {"clean": 60, "offensive": 24, "hate": 20},
  "epochs": 2,
  "batch_size": 16,
  "log_every": 1
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic corpus, vocabulary and a masked-LM checkpoint built from the tiny config.
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        std::fs::write(ws.path("run.json"), TINY).unwrap();
        ok(&["gen-synth", "--config", ws.p("run.json"), "--output", ws.p("corpus.tsv")]);
        ok(&["build-vocab", "--config", ws.p("run.json"), "--input", ws.p("corpus.tsv"), "--output", ws.p("vocab.json")]);
        ok(&[
            "pretrain-mlm", "--config", ws.p("run.json"), "--input", ws.p("corpus.tsv"), "--vocab", ws.p("vocab.json"),
            "--output", ws.p("mlm.ckpt"),
        ]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> &str {
        // Leaked so argument slices can borrow it for the test's duration.
        Box::leak(self.path(name).into_os_string().into_string().unwrap().into_boxed_str())
    }

    fn base(&self) -> Vec<&str> {
        vec!["--config", self.p("run.json"), "--input", self.p("corpus.tsv"), "--vocab", self.p("vocab.json")]
    }
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn help_lists_every_key_with_defaults() {
    let out = ok(&["--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "--train.base_encoder_lr 0.00001",
        "one eighth of an epoch",
        "--train.head_lr 0.0001",
        "--train.weight_decay 0.01",
        "--smoothing_alpha 0.2",
        "--masking.mask_ratio 0.15",
        "--k 10",
        "--epochs 10",
        "--batch_size 32",
        "--warmup_steps null",
        "--paths.corpus null",
        "--augment.copies 1",
    ] {
        assert!(help.contains(needle), "{needle} missing from help");
    }
    for (name, _) in [("preprocess", 0), ("kfold", 0), ("schedule-dump", 0), ("tune-mlm", 0)] {
        assert!(help.contains(name));
    }
}

#[test]
fn preprocess_examples() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.tsv");
    let output = dir.path().join("out.tsv");

    std::fs::write(&input, "").unwrap();
    ok(&["preprocess", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(std::fs::read_to_string(&output).unwrap(), "");

    std::fs::write(&input, "HATE\thello 😀\n").unwrap();
    ok(&["preprocess", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(std::fs::read_to_string(&output).unwrap(), "HATE\thello EMOJI\n");

    let mut lines: String = (0..199).map(|i| format!("CLEAN\tdoc {i}\n")).collect();
    lines.push_str("no tab here\n");
    std::fs::write(&input, &lines).unwrap();
    let out = ok(&["preprocess", "--input", s(&input), "--output", s(&output)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":200: skipped"));
    assert_eq!(std::fs::read_to_string(&output).unwrap().lines().count(), 199);

    lines.push_str("BOGUS\tlabel\nalso bad\n");
    std::fs::write(&input, &lines).unwrap();
    let out = ulma(&["preprocess", "--input", s(&input), "--output", s(&output)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3 of 202 lines malformed"));
}

#[test]
fn schedule_dump_peaks_at_warmup() {
    let out = ok(&["schedule-dump", "--train.warmup_steps", "100", "--train.total_steps", "800"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 801);
    let peak = rows.iter().cloned().fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    assert_eq!(peak, (100, 1.0));
    assert_eq!(rows[0].1, 0.0);
    assert_eq!(rows[800].1, 0.0);
}

#[test]
fn config_errors_list_every_field() {
    let out = ulma(&["train", "--k", "1", "--epochs", "0", "--masking.mask_ratio", "3", "--input", "/missing.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["k must", "epochs must", "mask_ratio", "/missing.tsv does not exist", "paths.vocab", "paths.output"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    let out = ulma(&["train", "--no-such-key", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"head_rl": 1}}"#).unwrap();
    let out = ulma(&["schedule-dump", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head_rl"));
}

#[test]
fn bad_checkpoint_is_a_data_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.ckpt"), b"NOPE0 not a checkpoint").unwrap();
    let mut args = vec!["evaluate"];
    args.extend(ws.base());
    args.extend(["--checkpoint", ws.p("bad.ckpt")]);
    let out = ulma(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ckpt"));
}

#[test]
fn pipeline_runs_and_resumes() {
    let ws = Workspace::new();
    let vocab = json(&std::fs::read(ws.path("vocab.json")).unwrap());
    assert!(vocab["tokens"].as_array().unwrap().len() <= 200);

    // Masked-LM stages are deterministic.
    let mut again = vec!["pretrain-mlm"];
    again.extend(ws.base());
    again.extend(["--output", ws.p("mlm2.ckpt")]);
    let out = ok(&again);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("step,loss,lr\n1,"));
    assert_eq!(std::fs::read(ws.path("mlm.ckpt")).unwrap(), std::fs::read(ws.path("mlm2.ckpt")).unwrap());
    let mut tune = vec!["tune-mlm"];
    tune.extend(ws.base());
    tune.extend(["--checkpoint", ws.p("mlm.ckpt"), "--output", ws.p("tuned.ckpt")]);
    ok(&tune);

    let mut aug = vec!["augment"];
    aug.extend(ws.base());
    aug.extend(["--checkpoint", ws.p("tuned.ckpt"), "--output", ws.p("aug.tsv")]);
    ok(&aug);
    let augmented = std::fs::read_to_string(ws.path("aug.tsv")).unwrap();
    assert_eq!(augmented.lines().count(), 104 + 44);

    let train = |extra: &[&str], ckpt: &str, out: &str, report: &str| {
        let mut args = vec!["train"];
        args.extend(ws.base());
        args.extend(["--epochs", "3", "--checkpoint", ckpt, "--output", out, "--out", report]);
        args.extend(extra);
        ok(&args);
        std::fs::read(report).unwrap()
    };
    let full = train(&[], ws.p("tuned.ckpt"), ws.p("full.ckpt"), ws.p("full.json"));
    let report = json(&full);
    assert_eq!(report["epochs_done"], 3);
    assert_eq!(report["selection"], "train");
    assert_eq!(report["history"].as_array().unwrap().len(), 3);

    // Interrupt after one epoch, then finish from the checkpoint.
    train(&["--stop_after_epoch", "1"], ws.p("tuned.ckpt"), ws.p("part.ckpt"), ws.p("part.json"));
    let resumed = train(&[], ws.p("part.ckpt"), ws.p("resumed.ckpt"), ws.p("resumed.json"));
    assert_eq!(resumed, full);
    assert_eq!(std::fs::read(ws.path("resumed.ckpt")).unwrap(), std::fs::read(ws.path("full.ckpt")).unwrap());

    // Nothing left to do: metrics and checkpoint unchanged.
    let idle = train(&[], ws.p("full.ckpt"), ws.p("idle.ckpt"), ws.p("idle.json"));
    assert_eq!(idle, full);
    assert_eq!(std::fs::read(ws.path("idle.ckpt")).unwrap(), std::fs::read(ws.path("full.ckpt")).unwrap());

    // A resumed run must keep the schedule it started with.
    let mut args = vec!["train"];
    args.extend(ws.base());
    args.extend(["--epochs", "4", "--checkpoint", ws.p("part.ckpt"), "--output", ws.p("x.ckpt")]);
    assert_eq!(ulma(&args).status.code(), Some(1));

    let mut eval = vec!["evaluate"];
    eval.extend(ws.base());
    eval.extend(["--checkpoint", ws.p("full.ckpt"), "--csv", ws.p("eval.csv")]);
    let out = ok(&eval);
    let metrics = json(&out.stdout);
    assert_eq!(metrics["macro_f1"], report["metrics"]["macro_f1"]);
    assert!(std::fs::read_to_string(ws.path("eval.csv")).unwrap().starts_with("fold,class,precision,recall,f1,macro_f1\n"));
}

#[test]
fn kfold_reports_every_fold_and_is_deterministic() {
    let ws = Workspace::new();
    let run = |jobs: &str, report: &str| {
        let mut args = vec!["kfold"];
        args.extend(ws.base());
        args.extend(["--epochs", "1", "--jobs", jobs, "--out", report, "--csv", ws.p("kfold.csv")]);
        ok(&args);
        std::fs::read(report).unwrap()
    };
    let serial = run("1", ws.p("k1.json"));
    let parallel = run("4", ws.p("k4.json"));
    assert_eq!(serial, parallel);
    let report = json(&serial);
    assert_eq!(report["k"], 10);
    assert_eq!(report["folds"].as_array().unwrap().len(), 10);
    assert!(report["mean"]["macro_f1"].as_f64().unwrap() >= 0.0);
    let csv = std::fs::read_to_string(ws.path("kfold.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 11 * 3);
}
