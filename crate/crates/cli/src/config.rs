//! The JSON run configuration: defaults, file loading, `--key value`
//! overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use ulma_core::encoder::EncoderConfig;
use ulma_core::objectives::{FusionSpec, SmoothingSpec};
use ulma_core::optim::TrainPlan;
use ulma_core::pipeline::{AugmentSpec, ClassSizes, FineTuneSpec, MaskingSpec, MlmTuning};
use ulma_core::tokenizer::NUM_SPECIALS;
use ulma_core::Label;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input TSV corpus.
    pub corpus: Option<PathBuf>,
    /// Optional validation TSV for `train`.
    pub valid: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Input checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Artifact written by the subcommand.
    pub output: Option<PathBuf>,
    /// Report JSON; standard output when unset.
    pub report: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
}

/// Encoder size; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub tie_mlm_head: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        let desk = EncoderConfig::desk(NUM_SPECIALS + 1);
        ModelShape {
            num_layers: desk.num_layers,
            hidden_size: desk.hidden_size,
            num_heads: desk.num_heads,
            ffn_size: desk.ffn_size,
            max_positions: desk.max_positions,
            dropout_rate: desk.dropout_rate,
            tie_mlm_head: desk.tie_mlm_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmSettings {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: Option<usize>,
}

impl Default for MlmSettings {
    fn default() -> Self {
        let d = MlmTuning::default();
        MlmSettings {
            lr: d.lr,
            steps: d.steps,
            batch_size: d.batch_size,
            warmup_steps: d.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    /// Augment training folds in `kfold`.
    pub enabled: bool,
    pub repetitions: usize,
    pub copies: usize,
    pub temperature: Option<f64>,
    pub classes: Vec<Label>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        let d = AugmentSpec::default();
        AugmentSettings {
            enabled: false,
            repetitions: d.repetitions,
            copies: d.copies,
            temperature: d.temperature,
            classes: d.classes,
        }
    }
}

impl AugmentSettings {
    pub fn spec(&self) -> AugmentSpec {
        AugmentSpec {
            repetitions: self.repetitions,
            copies: self.copies,
            temperature: self.temperature,
            classes: self.classes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Target size of the subword vocabulary.
    pub vocab_size: usize,
    pub encoder: ModelShape,
    pub fusion: FusionSpec,
    /// `warmup_steps` and `total_steps` here only drive `schedule-dump`;
    /// training derives them from the data.
    pub train: TrainPlan,
    pub masking: MaskingSpec,
    pub smoothing_alpha: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fine-tuning warm-up; `null` means one eighth of an epoch's steps.
    pub warmup_steps: Option<usize>,
    /// Make `train` stop after this many epochs of the `epochs` schedule;
    /// running it again on the written checkpoint finishes the schedule.
    pub stop_after_epoch: Option<usize>,
    pub seed: u64,
    pub jobs: usize,
    /// Emit a `step,loss,lr` log line every this many steps.
    pub log_every: usize,
    pub mlm: MlmSettings,
    pub augment: AugmentSettings,
    pub synth: ClassSizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shape = ModelShape::default();
        let fine = FineTuneSpec::default();
        RunConfig {
            paths: Paths::default(),
            vocab_size: 2000,
            fusion: EncoderConfig::desk(NUM_SPECIALS + 1).fusion,
            encoder: shape,
            train: TrainPlan {
                warmup_steps: 100,
                total_steps: 800,
                ..fine.plan
            },
            masking: MaskingSpec::default(),
            smoothing_alpha: fine.smoothing_alpha,
            k: 10,
            epochs: fine.epochs,
            batch_size: fine.batch_size,
            warmup_steps: fine.warmup_steps,
            stop_after_epoch: None,
            seed: 0,
            jobs: 1,
            log_every: 10,
            mlm: MlmSettings::default(),
            augment: AugmentSettings::default(),
            synth: ClassSizes::default(),
        }
    }
}

/// Flag spellings that stand for a config key.
pub const ALIASES: [(&str, &str); 7] = [
    ("input", "paths.corpus"),
    ("valid", "paths.valid"),
    ("vocab", "paths.vocab"),
    ("checkpoint", "paths.checkpoint"),
    ("output", "paths.output"),
    ("out", "paths.report"),
    ("csv", "paths.report_csv"),
];

fn leaves(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Every config key with its default value, sorted by key.
pub fn default_keys() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    leaves("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

/// Help text listing every key and its default.
pub fn keys_help() -> String {
    let mut text = String::from("Configuration keys (set in --config FILE or override with --KEY VALUE):\n");
    for (key, value) in default_keys() {
        text.push_str(&format!("  --{key} {value}\n"));
    }
    text.push_str(
        "\nwarmup_steps null means one eighth of an epoch's steps. train.warmup_steps and\n\
         train.total_steps only shape schedule-dump; training derives them from the data.\n",
    );
    text.push_str("\nShort flags: ");
    text.push_str(&ALIASES.iter().map(|(a, k)| format!("--{a} = --{k}")).collect::<Vec<_>>().join(", "));
    text.push('\n');
    text
}

/// Resolve a flag name to a config key: aliases first, `-` read as `_`.
pub fn resolve_key(flag: &str) -> Option<String> {
    if let Some((_, key)) = ALIASES.iter().find(|(a, _)| *a == flag) {
        return Some(key.to_string());
    }
    let key = flag.replace('-', "_");
    default_keys().iter().any(|(k, _)| *k == key).then_some(key)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.get(*part).is_some_and(Value::is_object) {
            node[*part] = Value::Object(Map::new());
        }
        node = node.get_mut(*part).expect("just inserted");
    }
    let leaf = parts[parts.len() - 1];
    let as_string = key.starts_with("paths.") || node.get(leaf).is_some_and(Value::is_string);
    let value = if as_string {
        Value::String(raw.to_string())
    } else {
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
    };
    node[leaf] = value;
}

/// Defaults, then the config file, then each override in order.
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, String> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
        if !patch.is_object() {
            return Err(format!("config {} must hold a JSON object", path.display()));
        }
        merge(&mut value, patch);
    }
    for (key, raw) in overrides {
        set_path(&mut value, key, raw);
    }
    serde_json::from_value(value).map_err(|e| format!("invalid configuration: {e}"))
}

/// Inputs and outputs a subcommand needs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub corpus: bool,
    pub vocab: bool,
    pub checkpoint: bool,
    pub output: bool,
}

impl RunConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.encoder.num_layers,
            hidden_size: self.encoder.hidden_size,
            num_heads: self.encoder.num_heads,
            ffn_size: self.encoder.ffn_size,
            max_positions: self.encoder.max_positions,
            vocab_size,
            dropout_rate: self.encoder.dropout_rate,
            num_classes: Label::COUNT,
            tie_mlm_head: self.encoder.tie_mlm_head,
            fusion: self.fusion.clone(),
        }
    }

    pub fn fine_tune(&self) -> FineTuneSpec {
        FineTuneSpec {
            plan: self.train.clone(),
            smoothing_alpha: self.smoothing_alpha,
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
        }
    }

    pub fn mlm_tuning(&self) -> MlmTuning {
        MlmTuning {
            lr: self.mlm.lr,
            weight_decay: self.train.weight_decay,
            steps: self.mlm.steps,
            batch_size: self.mlm.batch_size,
            warmup_steps: self.mlm.warmup_steps,
            masking: self.masking,
            seed: self.seed,
        }
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self, needs: Needs) -> Vec<String> {
        let mut p = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        check(self.vocab_size > NUM_SPECIALS, format!("vocab_size must exceed {NUM_SPECIALS}, got {}", self.vocab_size));
        if let Err(e) = self.encoder_config(NUM_SPECIALS + 1).validate() {
            p.push(format!("encoder/fusion: {e}"));
        }
        if let Err(e) = self.train.validate() {
            p.push(format!("train: {e}"));
        }
        if let Err(e) = self.masking.validate() {
            p.push(format!("masking: {e}"));
        }
        if let Err(e) = SmoothingSpec::new(self.smoothing_alpha, Label::COUNT) {
            p.push(format!("smoothing_alpha: {e}"));
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        check(self.smoothing_alpha < 1.0, format!("smoothing_alpha must be below 1, got {}", self.smoothing_alpha));
        check(self.k >= 2, format!("k must be at least 2, got {}", self.k));
        check(self.epochs >= 1, "epochs must be at least 1".into());
        check(
            self.stop_after_epoch.is_none_or(|e| e <= self.epochs),
            format!("stop_after_epoch must not exceed epochs ({})", self.epochs),
        );
        check(self.batch_size >= 1, "batch_size must be at least 1".into());
        check(self.jobs >= 1, "jobs must be at least 1".into());
        check(self.log_every >= 1, "log_every must be at least 1".into());
        check(self.mlm.lr > 0.0, format!("mlm.lr must be positive, got {}", self.mlm.lr));
        check(self.mlm.batch_size >= 1, "mlm.batch_size must be at least 1".into());
        check(
            self.augment.temperature.is_none_or(|t| t > 0.0 && t.is_finite()),
            "augment.temperature must be positive".into(),
        );
        check(
            Label::ALL.iter().all(|&l| self.synth.get(l) > 0),
            "synth sizes must all be positive".into(),
        );
        let required = [
            (needs.corpus, "paths.corpus (--input)", &self.paths.corpus),
            (needs.vocab, "paths.vocab (--vocab)", &self.paths.vocab),
            (needs.checkpoint, "paths.checkpoint (--checkpoint)", &self.paths.checkpoint),
        ];
        for (needed, name, path) in required {
            match path {
                None if needed => p.push(format!("{name} is required")),
                Some(path) if needed && !path.exists() => p.push(format!("{name}: {} does not exist", path.display())),
                _ => {}
            }
        }
        if needs.output && self.paths.output.is_none() {
            p.push("paths.output (--output) is required".into());
        }
        if let Some(valid) = &self.paths.valid {
            if !valid.exists() {
                p.push(format!("paths.valid (--valid): {} does not exist", valid.display()));
            }
        }
        p
    }
}
