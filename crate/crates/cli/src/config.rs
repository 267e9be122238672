//! Experiment configuration: one TOML document, overridable from the command
//! line.
//!
//! Precedence, highest first: command-line flags, the config file, built-in
//! defaults. Relative data paths are resolved against the config file's
//! directory.

use std::path::{Path, PathBuf};

use rpn_core::codec::FilterPolicy;
use rpn_core::proto::{RpnOptions, Weighting};
use rpn_core::{Architecture, Hyperparams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Rpn,
    Fedavg,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Rpn => "rpn",
            Algorithm::Fedavg => "fedavg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        height: usize,
        width: usize,
        #[serde(default = "one")]
        channels: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    #[serde(default)]
    pub size_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Two 5×5 convolutions (32, 64 channels) and a dense head on 28×28×1.
    #[default]
    Reference,
    ConvStack {
        channels: Vec<usize>,
        kernel: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSection {
    #[serde(default = "yes")]
    pub pooling: bool,
    #[serde(default)]
    pub filter: FilterPolicy,
}

fn yes() -> bool {
    true
}

impl Default for CompressionSection {
    fn default() -> Self {
        CompressionSection { pooling: true, filter: FilterPolicy::All }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    /// Averaging of pooled residuals.
    #[serde(default)]
    pub rpn: Weighting,
    /// Averaging of full models in the baseline.
    #[serde(default = "dataset_size")]
    pub fedavg: Weighting,
}

fn dataset_size() -> Weighting {
    Weighting::DatasetSize
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection { rpn: Weighting::Uniform, fedavg: Weighting::DatasetSize }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSpec,
    pub federation: FederationSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub compression: CompressionSection,
    #[serde(default)]
    pub aggregation: AggregationSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub algorithm: Option<Algorithm>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(e) })
    }

    /// Reads, resolves relative data paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(dir).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.algorithm {
            self.algorithm = a;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSpec::Idx { train_images, train_labels, test_images, test_labels, .. } = &mut self.data {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.training.learning_rate,
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            rounds: self.federation.rounds,
            clients_per_round: self.federation.clients_per_round,
            total_clients: self.federation.clients,
            seed: self.seed,
        }
    }

    pub fn rpn_options(&self) -> RpnOptions {
        RpnOptions {
            pooling: self.compression.pooling,
            filter: self.compression.filter,
            weighting: self.aggregation.rpn,
        }
    }

    pub fn input_dims(&self) -> Option<(usize, usize, usize)> {
        match &self.data {
            DataSpec::Idx { .. } => None,
            DataSpec::Synth { height, width, channels, .. } => Some((*height, *width, *channels)),
        }
    }

    /// The network for inputs of `(h, w, c)` with `classes` outputs.
    pub fn architecture(&self, input: (usize, usize, usize), classes: usize) -> Result<Architecture, ConfigError> {
        match &self.model {
            ModelSpec::Reference => {
                let arch = Architecture::reference();
                if arch.input() != input || arch.num_classes() != classes {
                    return Err(field(
                        "model.kind",
                        format!(
                            "the reference model takes 28×28×1 inputs and 10 classes, the data has {input:?} and {classes} classes"
                        ),
                    ));
                }
                Ok(arch)
            }
            ModelSpec::ConvStack { channels, kernel } => {
                Architecture::conv_stack(input, channels, *kernel, classes).map_err(|e| field("model", e.to_string()))
            }
        }
    }

    /// Field-level checks performed before any data is touched.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.federation;
        if f.clients == 0 {
            return Err(field("federation.clients", "must be at least 1"));
        }
        if f.clients_per_round == 0 || f.clients_per_round > f.clients {
            return Err(field(
                "federation.clients_per_round",
                format!("must be in 1..={} (federation.clients), got {}", f.clients, f.clients_per_round),
            ));
        }
        if !(0.0..1.0).contains(&f.size_jitter) {
            return Err(field("federation.size_jitter", format!("must be in [0, 1), got {}", f.size_jitter)));
        }
        let t = &self.training;
        if !t.learning_rate.is_finite() || t.learning_rate < 0.0 {
            return Err(field(
                "training.learning_rate",
                format!("must be finite and non-negative, got {}", t.learning_rate),
            ));
        }
        if t.batch_size == 0 {
            return Err(field("training.batch_size", "must be at least 1"));
        }
        if let Err(e) = self.compression.filter.validate() {
            return Err(field("compression.filter", e.to_string()));
        }
        match &self.data {
            DataSpec::Synth { classes, train_per_class, test_per_class, height, width, channels } => {
                if *classes < 2 {
                    return Err(field("data.classes", "needs at least 2 classes"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(field("data.train_per_class", "per-class counts must be positive"));
                }
                if *height == 0 || *width == 0 || *channels == 0 {
                    return Err(field("data.height", "image extents must be positive"));
                }
                if classes * train_per_class < f.clients {
                    return Err(field("federation.clients", "more clients than training samples"));
                }
            }
            DataSpec::Idx { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return Err(field("data.train_limit", "limits must be positive"));
                }
            }
        }
        if let ModelSpec::ConvStack { channels, kernel } = &self.model {
            if channels.is_empty() || channels.contains(&0) {
                return Err(field("model.channels", "needs at least one positive channel count"));
            }
            if *kernel == 0 {
                return Err(field("model.kernel", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
        seed = 3
        [data]
        source = "synth"
        classes = 3
        train_per_class = 10
        test_per_class = 4
        height = 6
        width = 6
        [federation]
        clients = 3
        clients_per_round = 2
        rounds = 2
        [training]
        learning_rate = 0.05
        local_epochs = 1
        batch_size = 4
        [model]
        kind = "conv-stack"
        channels = [2]
        kernel = 3
    "#;

    fn parse(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text, Path::new("test.toml")).unwrap()
    }

    #[test]
    fn defaults_and_roundtrip() {
        let cfg = parse(SYNTH);
        assert_eq!(cfg.algorithm, Algorithm::Rpn);
        assert!(cfg.compression.pooling);
        assert_eq!(cfg.compression.filter, FilterPolicy::All);
        assert_eq!(cfg.aggregation.rpn, Weighting::Uniform);
        assert_eq!(cfg.aggregation.fedavg, Weighting::DatasetSize);
        cfg.validate().unwrap();
        assert_eq!(parse(&cfg.to_toml()), cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = parse(SYNTH);
        cfg.apply(&Overrides { algorithm: Some(Algorithm::Fedavg), seed: Some(11), out: Some("x".into()) });
        assert_eq!((cfg.algorithm, cfg.seed, cfg.out.as_deref()), (Algorithm::Fedavg, 11, Some(Path::new("x"))));
    }

    #[test]
    fn field_level_errors() {
        let bad = SYNTH.replace("clients_per_round = 2", "clients_per_round = 5");
        let err = parse(&bad).validate().unwrap_err();
        assert!(err.to_string().contains("federation.clients_per_round"), "{err}");
        let bad = SYNTH.replace("learning_rate = 0.05", "learning_rate = -1.0");
        assert!(parse(&bad).validate().unwrap_err().to_string().contains("training.learning_rate"));
        let bad = SYNTH.replace("batch_size = 4", "batch_size = 0");
        assert!(parse(&bad).validate().unwrap_err().to_string().contains("training.batch_size"));
        let bad = format!("{SYNTH}\n[compression]\nfilter = {{ policy = \"top-fraction\", value = 1.5 }}\n");
        assert!(parse(&bad).validate().unwrap_err().to_string().contains("compression.filter"));
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2", Path::new("t")).is_err());
    }

    #[test]
    fn filter_policy_syntax() {
        let cfg = parse(&format!("{SYNTH}\n[compression]\nfilter = {{ policy = \"threshold\", value = 0.01 }}\n"));
        assert_eq!(cfg.compression.filter, FilterPolicy::Threshold(0.01));
    }

    #[test]
    fn reference_model_checks_input() {
        let cfg = parse(
            &SYNTH.replace("kind = \"conv-stack\"\n        channels = [2]\n        kernel = 3", "kind = \"reference\""),
        );
        let err = cfg.architecture((6, 6, 1), 3).unwrap_err();
        assert!(err.to_string().contains("model.kind"));
        assert!(cfg.architecture((28, 28, 1), 10).is_ok());
    }
}
