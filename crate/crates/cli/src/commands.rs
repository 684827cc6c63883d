//! One function per subcommand. Artifacts are written atomically; logs go to
//! standard error, reports to standard output unless a report path is set.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde_json::json;
use ulma_core::encoder::{init_parameters, Checkpoint, EncoderConfig, ModelParameters};
use ulma_core::optim::schedule_lr;
use ulma_core::pipeline::{
    augment_corpus, derive_seed, encode_samples, evaluate, generate_synthetic_corpus, predict_labels, run_kfold,
    train_until, tune_mlm, EvalReport, KFoldRun, TrainEvent, TrainState,
};
use ulma_core::preprocess::{clean, read_tsv, write_tsv, CleanDocument, TsvCorpus};
use ulma_core::tokenizer::{build_vocab, Vocabulary};
use ulma_core::{write_atomic, Error, Label};

use crate::config::{Needs, RunConfig};

/// Largest tolerated share of malformed input lines.
const MAX_SKIPPED: f64 = 0.01;

/// A failed run: the message for standard error and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::VocabTooSmall { .. } | Error::IndexOutOfRange { .. } => {
                EXIT_USAGE
            }
            Error::ShapeMismatch(_) | Error::NotOneHot | Error::LengthMismatch { .. } | Error::StepOutOfRange { .. } => {
                EXIT_INTERNAL
            }
            _ => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

pub const COMMANDS: [(&str, &str); 10] = [
    ("preprocess", "Normalize, mask PII and tokenize a TSV corpus"),
    ("build-vocab", "Learn a subword vocabulary from a corpus"),
    ("gen-synth", "Write a synthetic labeled corpus"),
    ("pretrain-mlm", "Initialize an encoder and train it with masked-LM"),
    ("tune-mlm", "Continue masked-LM training of a checkpoint on domain text"),
    ("augment", "Append masked-LM rewrites of minority-class documents"),
    ("train", "Fine-tune the classifier, resuming from training checkpoints"),
    ("evaluate", "Score a checkpoint on a labeled corpus"),
    ("kfold", "Stratified k-fold fine-tuning and macro-F1 report"),
    ("schedule-dump", "Write the learning-rate schedule as CSV"),
];

/// What each subcommand requires before it starts.
pub fn needs(command: &str) -> Needs {
    let (corpus, vocab, checkpoint, output) = match command {
        "preprocess" | "build-vocab" => (true, false, false, true),
        "gen-synth" => (false, false, false, true),
        "pretrain-mlm" => (true, true, false, true),
        "tune-mlm" | "augment" => (true, true, true, true),
        "train" => (true, true, false, true),
        "evaluate" => (true, true, true, false),
        "kfold" => (true, true, false, false),
        _ => (false, false, false, false),
    };
    Needs { corpus, vocab, checkpoint, output }
}

pub fn run(command: &str, cfg: &RunConfig) -> Outcome {
    match command {
        "preprocess" => preprocess(cfg),
        "build-vocab" => build_vocabulary(cfg),
        "gen-synth" => gen_synth(cfg),
        "pretrain-mlm" => masked_lm(cfg, false),
        "tune-mlm" => masked_lm(cfg, true),
        "augment" => augment(cfg),
        "train" => train(cfg),
        "evaluate" => evaluate_checkpoint(cfg),
        "kfold" => kfold(cfg),
        "schedule-dump" => schedule_dump(cfg),
        other => Err(Failure::usage(format!("unknown command {other}"))),
    }
}

fn required<'a>(path: &'a Option<std::path::PathBuf>, name: &str) -> Result<&'a Path, Failure> {
    path.as_deref().ok_or_else(|| Failure::usage(format!("{name} is required")))
}

/// Parse a TSV file, reporting malformed lines on standard error.
fn read_corpus(path: &Path) -> Result<TsvCorpus, Failure> {
    let file = File::open(path).map_err(|e| Failure::data(format!("cannot open {}: {e}", path.display())))?;
    let corpus = read_tsv(BufReader::new(file))?;
    for bad in &corpus.malformed {
        eprintln!("# {}:{}: skipped: {}", path.display(), bad.line, bad.reason);
    }
    Ok(corpus)
}

fn check_skipped(path: &Path, corpus: &TsvCorpus) -> Outcome {
    if corpus.skipped_fraction() > MAX_SKIPPED {
        return Err(Failure::data(format!(
            "{}: {} of {} lines malformed, above the {}% limit",
            path.display(),
            corpus.malformed.len(),
            corpus.records,
            MAX_SKIPPED * 100.0
        )));
    }
    Ok(())
}

/// Cleaned documents of a corpus that passed the malformed-line check.
fn load_documents(path: &Path) -> Result<Vec<CleanDocument>, Failure> {
    let corpus = read_corpus(path)?;
    check_skipped(path, &corpus)?;
    Ok(corpus.documents.iter().map(clean).collect())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, Failure> {
    Ok(Vocabulary::load(required(&cfg.paths.vocab, "paths.vocab")?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn check_vocab(config: &EncoderConfig, vocab: &Vocabulary) -> Outcome {
    if config.vocab_size != vocab.len() {
        return Err(Failure::data(format!(
            "checkpoint expects a vocabulary of {} entries, the vocabulary file has {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// The report goes to `paths.report` when set, else to standard output.
fn emit_report(cfg: &RunConfig, text: &str) -> Outcome {
    match &cfg.paths.report {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.write_all(b"\n")).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn tsv_bytes<'a>(docs: impl IntoIterator<Item = &'a CleanDocument>) -> Result<Vec<u8>, Failure> {
    let mut bytes = Vec::new();
    write_tsv(&mut bytes, docs)?;
    Ok(bytes)
}

fn log_event(every: usize, prefix: &str, event: &TrainEvent) {
    match event {
        TrainEvent::Step { step, loss, lr } => {
            if step % every == 0 || *step == 1 {
                eprintln!("{step},{loss:.6},{lr:.6e}");
            }
        }
        TrainEvent::Epoch(r) => eprintln!(
            "# {prefix}epoch {} train_loss {:.6} valid_macro_f1 {:.6}",
            r.epoch + 1,
            r.train_loss,
            r.valid_macro_f1
        ),
    }
}

fn preprocess(cfg: &RunConfig) -> Outcome {
    let input = required(&cfg.paths.corpus, "paths.corpus")?;
    let corpus = read_corpus(input)?;
    let docs: Vec<CleanDocument> = corpus.documents.iter().map(clean).collect();
    write_atomic(required(&cfg.paths.output, "paths.output")?, &tsv_bytes(&docs)?)?;
    eprintln!("# {} documents written, {} lines skipped", docs.len(), corpus.malformed.len());
    check_skipped(input, &corpus)
}

fn build_vocabulary(cfg: &RunConfig) -> Outcome {
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let vocab = build_vocab(&docs, cfg.vocab_size)?;
    write_atomic(required(&cfg.paths.output, "paths.output")?, vocab.to_json()?.as_bytes())?;
    eprintln!("# vocabulary of {} entries, {} merges", vocab.len(), vocab.merges().len());
    Ok(())
}

fn gen_synth(cfg: &RunConfig) -> Outcome {
    let docs = generate_synthetic_corpus(cfg.seed, cfg.synth)?;
    let mut text = String::new();
    for doc in &docs {
        let label = doc.label.map_or("-", Label::as_str);
        text.push_str(&format!("{label}\t{}\n", doc.text));
    }
    write_atomic(required(&cfg.paths.output, "paths.output")?, text.as_bytes())?;
    eprintln!("# {} documents", docs.len());
    Ok(())
}

/// Masked-LM training from a fresh initialization, or continued from
/// `paths.checkpoint` when `from_checkpoint` is set.
fn masked_lm(cfg: &RunConfig, from_checkpoint: bool) -> Outcome {
    let vocab = load_vocab(cfg)?;
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let (config, params, mut meta) = if from_checkpoint {
        let ckpt = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
        check_vocab(&ckpt.config, &vocab)?;
        let params = ckpt.params("")?;
        let meta = if ckpt.meta.is_object() { ckpt.meta } else { json!({}) };
        (ckpt.config, params, meta)
    } else {
        let config = cfg.encoder_config(vocab.len());
        config.validate()?;
        let params = init_parameters(&config, cfg.seed);
        (config, params, json!({}))
    };
    let sequences: Vec<Vec<u32>> = docs.iter().map(|d| vocab.encode(d, config.max_positions)).collect();
    let tuning = cfg.mlm_tuning();
    eprintln!("step,loss,lr");
    let outcome = tune_mlm(&params, &config, &sequences, &tuning, &mut |e| log_event(cfg.log_every, "", e))?;
    let stage = if from_checkpoint { "tune_mlm" } else { "pretrain_mlm" };
    meta[stage] = json!({
        "steps": tuning.steps,
        "lr": tuning.lr,
        "seed": tuning.seed,
        "final_loss": outcome.losses.last(),
    });
    let mut ckpt = Checkpoint::new(config);
    ckpt.push_params("", &outcome.params);
    ckpt.meta = meta;
    ckpt.save(required(&cfg.paths.output, "paths.output")?)?;
    Ok(())
}

fn augment(cfg: &RunConfig) -> Outcome {
    let vocab = load_vocab(cfg)?;
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let ckpt = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    check_vocab(&ckpt.config, &vocab)?;
    let params = ckpt.params("")?;
    let samples = encode_samples(&docs, &vocab, ckpt.config.max_positions);
    let extra = augment_corpus(&samples, &params, &ckpt.config, &cfg.augment.spec(), cfg.seed)?;
    let mut out = docs;
    for s in &extra {
        out.push(CleanDocument {
            tokens: vocab.decode(&s.ids)?,
            label: Some(s.label),
        });
    }
    write_atomic(required(&cfg.paths.output, "paths.output")?, &tsv_bytes(&out)?)?;
    eprintln!("# {} augmented documents appended", extra.len());
    Ok(())
}

/// Encoder config and parameters to start fine-tuning from: the checkpoint's
/// encoder (or a fresh one) with the configured fusion and a new head.
fn fine_tune_base(cfg: &RunConfig, vocab: &Vocabulary, ckpt: Option<&Checkpoint>) -> Result<(EncoderConfig, ModelParameters), Failure> {
    let (mut config, mut params) = match ckpt {
        Some(ckpt) => {
            check_vocab(&ckpt.config, vocab)?;
            (ckpt.config.clone(), ckpt.params("")?)
        }
        None => {
            let config = cfg.encoder_config(vocab.len());
            config.validate()?;
            let params = init_parameters(&config, cfg.seed);
            (config, params)
        }
    };
    config.fusion = cfg.fusion.clone();
    config.validate()?;
    params.reset_classifier(&config, derive_seed(cfg.seed, 3 << 40));
    Ok((config, params))
}

fn labeled(docs: &[CleanDocument], vocab: &Vocabulary, config: &EncoderConfig) -> Vec<ulma_core::pipeline::Sample> {
    encode_samples(docs, vocab, config.max_positions)
}

/// Fine-tune; a checkpoint written by an earlier `train` resumes its schedule.
fn train(cfg: &RunConfig) -> Outcome {
    let vocab = load_vocab(cfg)?;
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let valid_docs = match &cfg.paths.valid {
        Some(path) => load_documents(path)?,
        None => Vec::new(),
    };
    let spec = cfg.fine_tune();
    let spec_json = serde_json::to_value(&spec).map_err(Error::from)?;
    let ckpt = cfg.paths.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let (config, state) = match &ckpt {
        Some(ckpt) if ckpt.meta.get("training").is_some() => {
            check_vocab(&ckpt.config, &vocab)?;
            if ckpt.meta.get("fine_tune") != Some(&spec_json) {
                return Err(Failure::usage(format!(
                    "checkpoint was trained with fine-tuning settings {}, the config gives {spec_json}",
                    ckpt.meta.get("fine_tune").unwrap_or(&serde_json::Value::Null)
                )));
            }
            if ckpt.config.fusion != cfg.fusion {
                return Err(Failure::usage("checkpoint was trained with a different fusion"));
            }
            (ckpt.config.clone(), TrainState::from_checkpoint(ckpt)?)
        }
        other => {
            let (config, params) = fine_tune_base(cfg, &vocab, other.as_ref())?;
            (config, TrainState::new(params))
        }
    };
    let train_set = labeled(&docs, &vocab, &config);
    let valid_set = labeled(&valid_docs, &vocab, &config);
    let until = cfg.stop_after_epoch.unwrap_or(spec.epochs);
    eprintln!("step,loss,lr");
    let state = train_until(state, &config, &train_set, &valid_set, &spec, until, &mut |e| {
        log_event(cfg.log_every, "", e)
    })?;

    let mut out = state.to_checkpoint(&config);
    out.meta["fine_tune"] = spec_json;
    out.save(required(&cfg.paths.output, "paths.output")?)?;

    let selection = if valid_set.is_empty() { &train_set } else { &valid_set };
    let predicted = predict_labels(state.selected(), &config, selection, spec.batch_size)?;
    let truth: Vec<Label> = selection.iter().map(|s| s.label).collect();
    let metrics = evaluate(&predicted, &truth)?;
    let report = json!({
        "epochs_done": state.epochs_done,
        "best_epoch": state.best.as_ref().map(|b| b.epoch),
        "selection": if valid_set.is_empty() { "train" } else { "valid" },
        "history": state.history,
        "metrics": metrics,
    });
    emit_report(cfg, &serde_json::to_string_pretty(&report).map_err(Error::from)?)
}

fn evaluate_checkpoint(cfg: &RunConfig) -> Outcome {
    let vocab = load_vocab(cfg)?;
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let ckpt = load_checkpoint(required(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    check_vocab(&ckpt.config, &vocab)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let samples = labeled(&docs, &vocab, &ckpt.config);
    if samples.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let predicted = predict_labels(state.selected(), &ckpt.config, &samples, cfg.batch_size)?;
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let report = EvalReport::from_folds(vec![evaluate(&predicted, &truth)?])?;
    if let Some(csv) = &cfg.paths.report_csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    emit_report(cfg, &serde_json::to_string_pretty(&report.mean).map_err(Error::from)?)
}

fn kfold(cfg: &RunConfig) -> Outcome {
    let vocab = load_vocab(cfg)?;
    let docs = load_documents(required(&cfg.paths.corpus, "paths.corpus")?)?;
    let ckpt = cfg.paths.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let (config, base) = fine_tune_base(cfg, &vocab, ckpt.as_ref())?;
    let samples = labeled(&docs, &vocab, &config);
    let run = KFoldRun {
        k: cfg.k,
        seed: cfg.seed,
        jobs: cfg.jobs,
        fine_tune: cfg.fine_tune(),
        augment: cfg.augment.enabled.then(|| cfg.augment.spec()),
    };
    let every = cfg.log_every;
    eprintln!("step,loss,lr");
    let outcome = run_kfold(&base, &config, &samples, &run, &|fold, e| {
        log_event(every, &format!("fold {} ", fold + 1), e)
    })?;
    if let Some(csv) = &cfg.paths.report_csv {
        write_atomic(csv, outcome.report.to_csv().as_bytes())?;
    }
    eprintln!("# mean macro_f1 {:.6}", outcome.report.mean.macro_f1);
    emit_report(cfg, &outcome.report.to_json()?)
}

fn schedule_dump(cfg: &RunConfig) -> Outcome {
    let plan = &cfg.train;
    let mut csv = String::from("step,multiplier,encoder_lr,head_lr\n");
    for step in 0..=plan.total_steps {
        let m = schedule_lr(step, plan)?;
        csv.push_str(&format!("{step},{m},{},{}\n", plan.base_encoder_lr * m, plan.head_lr * m));
    }
    match &cfg.paths.output {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}
