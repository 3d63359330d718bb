//! Run configuration, loaded from TOML.
//!
//! Every field that affects results has its default in [`defaults`], which is
//! mirrored by the table in the README. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use mnbr::data::HeaderMode;
use mnbr::dictionary::{Metric, ValueMode};
use mnbr::estimator::{HeadSpec, MlpSpec, OutputLayer, Task};
use mnbr::meta::{AlphaMode, DictionarySpec, ModelSpec, OptimizerKind, OptimizerSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Default values for every optional field.
pub mod defaults {
    pub fn seed() -> u64 {
        0
    }
    pub fn train_per_class() -> usize {
        500
    }
    pub fn test_per_class() -> usize {
        500
    }
    pub fn noise() -> f64 {
        0.1
    }
    pub fn turns() -> f64 {
        2.0
    }
    pub fn arms() -> usize {
        2
    }
    pub fn label_columns() -> Vec<i64> {
        vec![-1]
    }
    pub fn delimiter() -> char {
        ','
    }
    pub fn folds() -> usize {
        5
    }
    pub fn standardize_labels() -> bool {
        true
    }
    pub fn meta() -> bool {
        true
    }
    pub fn entries() -> usize {
        1000
    }
    pub fn gamma() -> f64 {
        5.0
    }
    pub fn inner_steps() -> usize {
        1
    }
    pub fn alpha_init() -> f64 {
        mnbr::meta::DEFAULT_ALPHA
    }
    pub fn tau_init() -> f64 {
        mnbr::meta::DEFAULT_TAU
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn validation_fraction() -> f64 {
        0.1
    }
    pub fn knn_k() -> usize {
        5
    }
    pub fn trace_every() -> usize {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub trace: TraceConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Spiral,
    Delimited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    // spiral
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    #[serde(default = "defaults::turns")]
    pub turns: f64,
    #[serde(default = "defaults::arms")]
    pub arms: usize,
    // delimited
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::label_columns")]
    pub label_columns: Vec<i64>,
    #[serde(default = "defaults::delimiter")]
    pub delimiter: char,
    #[serde(default = "default_header")]
    pub header: HeaderMode,
    #[serde(default = "defaults::folds")]
    pub folds: usize,
    #[serde(default = "defaults::standardize_labels")]
    pub standardize_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Fine-tune against a dictionary. `false` trains the plain network.
    #[serde(default = "defaults::meta")]
    pub meta: bool,
    /// Extractor layer widths after the input, e.g. `[32, 16]`. Empty: none.
    #[serde(default)]
    pub extractor: Vec<usize>,
    #[serde(default)]
    pub extractor_final_relu: bool,
    /// Hidden widths of the fine-tuned head.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_output")]
    pub output: OutputLayer,
    #[serde(default = "defaults::entries")]
    pub entries: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_alpha_mode")]
    pub alpha_mode: AlphaMode,
    #[serde(default = "defaults::alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "defaults::tau_init")]
    pub tau_init: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
}

fn default_header() -> HeaderMode {
    HeaderMode::Auto
}

fn default_output() -> OutputLayer {
    OutputLayer::Cosine
}

fn default_metric() -> Metric {
    Metric::Cosine
}

fn default_alpha_mode() -> AlphaMode {
    AlphaMode::Scalar
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub decay_values: bool,
    #[serde(default)]
    pub decay_alpha: bool,
    /// Epoch (1-based) from which the learning rate is divided by 10.
    #[serde(default)]
    pub lr_drop_epoch: Option<usize>,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adamw
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            lr: defaults::lr(),
            weight_decay: 0.0,
            momentum: 0.0,
            decay_values: false,
            decay_alpha: false,
            lr_drop_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Early-stopping patience in epochs; needs a validation split.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    /// Also train the plain network on the same splits and report it.
    #[serde(default)]
    pub baseline: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            patience: None,
            validation_fraction: defaults::validation_fraction(),
            baseline: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dictionary sizes; empty keeps the model's.
    #[serde(default)]
    pub entries: Vec<usize>,
    /// Temperatures; empty keeps the model's.
    #[serde(default)]
    pub gamma: Vec<f64>,
    /// Seeds shared by every grid point; empty keeps the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    #[serde(default = "defaults::knn_k")]
    pub k: usize,
    #[serde(default = "default_knn_metric")]
    pub metric: Metric,
}

fn default_knn_metric() -> Metric {
    Metric::Euclidean
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: defaults::knn_k(),
            metric: default_knn_metric(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// Dump the dictionary every this many optimizer steps.
    #[serde(default = "defaults::trace_every")]
    pub every: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            every: defaults::trace_every(),
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every field before any computation starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        match d.kind {
            DataKind::Spiral => {
                if self.task != Task::Classification {
                    return Err(field("data.kind", "spiral data is a classification task"));
                }
                if d.train_per_class == 0 || d.test_per_class == 0 {
                    return Err(field("data.train_per_class", "spiral splits need at least one point per class"));
                }
                if d.arms < 2 {
                    return Err(field("data.arms", "need at least 2 arms"));
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(field("data.noise", "must be non-negative"));
                }
                if !(d.turns > 0.0 && d.turns.is_finite()) {
                    return Err(field("data.turns", "must be positive"));
                }
            }
            DataKind::Delimited => {
                if d.path.is_none() {
                    return Err(field("data.path", "required for delimited data"));
                }
                if d.label_columns.is_empty() {
                    return Err(field("data.label_columns", "need at least one label column"));
                }
                if !d.delimiter.is_ascii() {
                    return Err(field("data.delimiter", "must be a single ASCII character"));
                }
                if d.folds < 2 {
                    return Err(field("data.folds", "need at least 2 folds"));
                }
                if self.task == Task::Classification && d.label_columns.len() != 1 {
                    return Err(field("data.label_columns", "classification takes one integer class column"));
                }
            }
        }
        let m = &self.model;
        if m.extractor.contains(&0) || m.head_hidden.contains(&0) {
            return Err(field("model", "layer widths must be positive"));
        }
        if m.meta {
            if m.entries == 0 {
                return Err(field("model.entries", "must be at least 1"));
            }
            if !(m.gamma > 0.0 && m.gamma.is_finite()) {
                return Err(field("model.gamma", "must be positive"));
            }
            if m.inner_steps == 0 {
                return Err(field("model.inner_steps", "must be at least 1"));
            }
        }
        if !m.alpha_init.is_finite() {
            return Err(field("model.alpha_init", "must be finite"));
        }
        if !(m.tau_init > 0.0 && m.tau_init.is_finite()) {
            return Err(field("model.tau_init", "must be positive"));
        }
        if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
            return Err(field("model.lambda", "must be non-negative"));
        }
        if self.task == Task::Regression && m.output == OutputLayer::Cosine {
            return Err(field("model.output", "regression needs a dot output layer"));
        }
        self.train_config(self.seed).optimizer.validate().map_err(|e| field("optimizer", e))?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(field("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(field("train.validation_fraction", "must lie in [0, 1)"));
        }
        if t.patience == Some(0) {
            return Err(field("train.patience", "must be at least 1"));
        }
        if t.patience.is_some() && t.validation_fraction == 0.0 {
            return Err(field("train.patience", "early stopping needs validation_fraction > 0"));
        }
        if let Some(s) = &self.sweep {
            if s.entries.contains(&0) {
                return Err(field("sweep.entries", "must be at least 1"));
            }
            if s.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                return Err(field("sweep.gamma", "must be positive"));
            }
        }
        if self.knn.k == 0 {
            return Err(field("knn.k", "must be at least 1"));
        }
        if self.trace.every == 0 {
            return Err(field("trace.every", "must be at least 1"));
        }
        Ok(())
    }

    /// Model spec for data of the given input and output widths.
    pub fn model_spec(&self, input_dim: usize, output_dim: usize, meta: bool) -> ModelSpec {
        let m = &self.model;
        let extractor = (!m.extractor.is_empty()).then(|| {
            let mut dims = vec![input_dim];
            dims.extend(&m.extractor);
            MlpSpec {
                dims,
                final_relu: m.extractor_final_relu,
            }
        });
        let head_in = m.extractor.last().copied().unwrap_or(input_dim);
        ModelSpec {
            task: self.task,
            extractor,
            head: HeadSpec {
                input_dim: head_in,
                hidden: m.head_hidden.clone(),
                output_dim,
                output: m.output,
            },
            dictionary: meta.then_some(DictionarySpec {
                entries: m.entries,
                metric: m.metric,
                gamma: m.gamma,
                value_mode: match self.task {
                    Task::Classification => ValueMode::SoftLabel,
                    Task::Regression => ValueMode::Raw,
                },
            }),
            alpha_mode: m.alpha_mode,
            alpha_init: m.alpha_init,
            tau_init: m.tau_init,
            lambda: m.lambda,
            inner_steps: m.inner_steps,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: OptimizerSpec {
                kind: o.kind,
                lr: o.lr,
                weight_decay: o.weight_decay,
                momentum: o.momentum,
                decay_values: o.decay_values,
                decay_alpha: o.decay_alpha,
                lr_drop_epoch: o.lr_drop_epoch,
            },
            patience: self.train.patience,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "classification"
[data]
kind = "spiral"
[model]
entries = 20
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.data.turns, 2.0);
        assert_eq!(c.train.epochs, defaults::epochs());
        assert_eq!(c.model.alpha_init, 0.1);
        assert_eq!(c.optimizer.kind, OptimizerKind::Adamw);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = MINIMAL.replace("entries = 20", "entries = 20\nentires = 3");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("entires"), "{err}");
    }

    #[test]
    fn invalid_fields_are_named() {
        let text = MINIMAL.replace("entries = 20", "gamma = -1.0");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("model.gamma"), "{err}");
        let text = MINIMAL.replace("kind = \"spiral\"", "kind = \"delimited\"");
        assert!(RunConfig::from_toml(&text).unwrap_err().to_string().contains("data.path"));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn spec_wires_extractor_into_head() {
        let text = MINIMAL.replace("entries = 20", "entries = 20\nextractor = [8, 4]");
        let c = RunConfig::from_toml(&text).unwrap();
        let s = c.model_spec(2, 2, true);
        assert_eq!(s.extractor.unwrap().dims, vec![2, 8, 4]);
        assert_eq!(s.head.input_dim, 4);
        assert!(c.model_spec(2, 2, false).dictionary.is_none());
    }
}
