//! Experiment configuration files.
//!
//! A config is a TOML document with four optional-to-sparse tables:
//! `[dataset]`, `[model]`, `[method]`, and `[output]`. Only
//! `method.name` is required; every other key has a documented default,
//! and unknown keys are rejected rather than ignored. The resolved
//! [`ExperimentConfig`] serializes back to TOML with every value made
//! explicit, which is what the output summaries embed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitMode, SyntheticParams};
use crate::fedsim::{Aggregation, FederatedConfig};
use crate::metalearn::Method;
use crate::models::{Architecture, InitScheme};
use crate::seed::{mix, SALT_DATA, SALT_PARTITION};
use crate::{Error, Result};

/// Where the client population comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticParams),
    Leaf(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Clients below this record count are dropped before splitting.
    pub min_records: usize,
    /// Train / val / test client fractions.
    pub fractions: (f64, f64, f64),
    /// Generation seed; derived from the master seed when absent.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden width; only meaningful for the one-hidden-layer network.
    pub hidden: Option<usize>,
    pub init: InitScheme,
    /// Fixed feature dimension; inferred from the dataset when absent.
    pub input_dim: Option<usize>,
    /// Fixed class count; inferred from the dataset when absent.
    pub classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// Test accuracy that counts as "reached the target" in summaries.
    pub target_accuracy: f64,
}

/// A fully resolved experiment: data, model, schedule, and outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federated: FederatedConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: FileConfig = toml::from_str(text)?;
        resolve(raw, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses with `method.name` replaced, so one file can drive a
    /// method comparison. Keys the file leaves unset take the
    /// replacement method's own defaults (notably the aggregation rule).
    pub fn parse_for_method(text: &str, method: Method) -> Result<Self> {
        let raw: FileConfig = toml::from_str(text)?;
        resolve(raw, Some(method))
    }

    pub fn load_for_method(path: &Path, method: Method) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_for_method(&text, method)
    }

    /// TOML with every resolved value explicit; reparsing it yields an
    /// equal config.
    pub fn to_toml(&self) -> Result<String> {
        let file = FileConfig::from(self);
        toml::to_string_pretty(&file)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Seed for dataset generation: the explicit `dataset.seed` if set,
    /// otherwise derived from the master seed.
    pub fn data_seed(&self) -> u64 {
        self.dataset
            .seed
            .unwrap_or_else(|| mix(&[self.federated.master_seed, SALT_DATA]))
    }

    /// Seed for the train/val/test client shuffle. Tied to the data
    /// seed, so pinning `dataset.seed` pins the partition too.
    pub fn partition_seed(&self) -> u64 {
        mix(&[self.data_seed(), SALT_PARTITION])
    }
}

// ---------------------------------------------------------------------------
// the on-disk shape

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    dataset: FileDataset,
    model: FileModel,
    method: FileMethod,
    output: FileOutput,
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileDataset {
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    leaf_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes_per_client: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_clients: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_records: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileModel {
    #[serde(skip_serializing_if = "Option::is_none")]
    architecture: Option<Architecture>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<InitScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileMethod {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clients_per_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inner_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outer_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregation: Option<Aggregation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    master_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_mode: Option<SplitMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clamp_alpha_at_eval: Option<bool>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    formats: Option<Vec<OutputFormat>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_accuracy: Option<f64>,
}

fn resolve(raw: FileConfig, method_override: Option<Method>) -> Result<ExperimentConfig> {
    let method = match method_override {
        Some(m) => m,
        None => raw
            .method
            .name
            .as_deref()
            .ok_or_else(|| Error::Config("method.name is required".into()))?
            .parse()?,
    };

    let mut federated = FederatedConfig::new(method);
    let m = &raw.method;
    if let Some(v) = m.rounds {
        federated.rounds = v;
    }
    if let Some(v) = m.clients_per_round {
        federated.clients_per_round = v;
    }
    if let Some(v) = m.inner_lr {
        federated.inner_lr = v;
    }
    if let Some(v) = m.outer_lr {
        federated.outer_lr = v;
    }
    if let Some(v) = m.local_epochs {
        federated.local_epochs = v;
    }
    if let Some(v) = m.local_batch {
        federated.local_batch = v;
    }
    if let Some(v) = m.support_fraction {
        federated.support_fraction = v;
    }
    if let Some(v) = m.aggregation {
        federated.aggregation = v;
    }
    if let Some(v) = m.eval_every {
        federated.eval_every = v;
    }
    if let Some(v) = m.master_seed {
        federated.master_seed = v;
    }
    if let Some(v) = m.split_mode {
        federated.split_mode = v;
    }
    if let Some(v) = m.clamp_alpha_at_eval {
        federated.clamp_alpha_at_eval = v;
    }
    federated.validate()?;

    let dataset = resolve_dataset(&raw.dataset)?;
    let model = resolve_model(&raw.model)?;
    let output = resolve_output(&raw.output)?;

    Ok(ExperimentConfig {
        dataset,
        model,
        federated,
        output,
    })
}

fn resolve_dataset(d: &FileDataset) -> Result<DatasetConfig> {
    let source = match d.source.as_deref().unwrap_or("synthetic") {
        "synthetic" => {
            if d.leaf_path.is_some() {
                return Err(Error::Config(
                    "dataset.leaf_path only applies when dataset.source is \"leaf\"".into(),
                ));
            }
            let defaults = SyntheticParams::default();
            DataSource::Synthetic(SyntheticParams {
                classes: d.classes.unwrap_or(defaults.classes),
                classes_per_client: d.classes_per_client.unwrap_or(defaults.classes_per_client),
                num_clients: d.num_clients.unwrap_or(defaults.num_clients),
                samples_min: d.samples_min.unwrap_or(defaults.samples_min),
                samples_max: d.samples_max.unwrap_or(defaults.samples_max),
                feature_dim: d.feature_dim.unwrap_or(defaults.feature_dim),
                noise_sigma: d.noise_sigma.unwrap_or(defaults.noise_sigma),
            })
        }
        "leaf" => {
            for (key, set) in [
                ("classes", d.classes.is_some()),
                ("classes_per_client", d.classes_per_client.is_some()),
                ("num_clients", d.num_clients.is_some()),
                ("samples_min", d.samples_min.is_some()),
                ("samples_max", d.samples_max.is_some()),
                ("feature_dim", d.feature_dim.is_some()),
                ("noise_sigma", d.noise_sigma.is_some()),
            ] {
                if set {
                    return Err(Error::Config(format!(
                        "dataset.{key} only applies when dataset.source is \"synthetic\""
                    )));
                }
            }
            let path = d.leaf_path.clone().ok_or_else(|| {
                Error::Config("dataset.leaf_path is required when dataset.source is \"leaf\"".into())
            })?;
            DataSource::Leaf(path)
        }
        other => {
            return Err(Error::Config(format!(
                "dataset.source must be \"synthetic\" or \"leaf\", got \"{other}\""
            )))
        }
    };

    let min_records = d.min_records.unwrap_or(2);
    if min_records == 0 {
        return Err(Error::Config("dataset.min_records must be at least 1".into()));
    }
    let fractions = (
        d.train_fraction.unwrap_or(0.8),
        d.val_fraction.unwrap_or(0.1),
        d.test_fraction.unwrap_or(0.1),
    );
    for (key, f) in [
        ("train_fraction", fractions.0),
        ("val_fraction", fractions.1),
        ("test_fraction", fractions.2),
    ] {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::Config(format!(
                "dataset.{key} must be a non-negative number, got {f}"
            )));
        }
    }
    if (fractions.0 + fractions.1 + fractions.2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dataset fractions must sum to 1, got {} + {} + {}",
            fractions.0, fractions.1, fractions.2
        )));
    }

    Ok(DatasetConfig {
        source,
        min_records,
        fractions,
        seed: d.seed,
    })
}

fn resolve_model(m: &FileModel) -> Result<ModelConfig> {
    let architecture = m.architecture.unwrap_or(Architecture::Mlp1);
    let hidden = match architecture {
        Architecture::Mlp1 => Some(m.hidden.unwrap_or(16)),
        Architecture::SoftmaxLr => {
            if m.hidden.is_some() {
                return Err(Error::Config(
                    "model.hidden does not apply to softmax_lr".into(),
                ));
            }
            None
        }
    };
    if hidden == Some(0) {
        return Err(Error::Config("model.hidden must be at least 1".into()));
    }
    for (key, v) in [("input_dim", m.input_dim), ("classes", m.classes)] {
        if v == Some(0) {
            return Err(Error::Config(format!("model.{key} must be at least 1")));
        }
    }
    Ok(ModelConfig {
        architecture,
        hidden,
        init: m.init.unwrap_or_default(),
        input_dim: m.input_dim,
        classes: m.classes,
    })
}

fn resolve_output(o: &FileOutput) -> Result<OutputConfig> {
    let formats = o
        .formats
        .clone()
        .unwrap_or_else(|| vec![OutputFormat::Csv, OutputFormat::Json]);
    let target_accuracy = o.target_accuracy.unwrap_or(0.7);
    if !target_accuracy.is_finite() || target_accuracy <= 0.0 || target_accuracy > 1.0 {
        return Err(Error::Config(format!(
            "output.target_accuracy must be in (0, 1], got {target_accuracy}"
        )));
    }
    Ok(OutputConfig {
        dir: o.dir.clone().unwrap_or_else(|| PathBuf::from("out")),
        formats,
        target_accuracy,
    })
}

impl From<&ExperimentConfig> for FileConfig {
    fn from(cfg: &ExperimentConfig) -> Self {
        let mut dataset = FileDataset {
            min_records: Some(cfg.dataset.min_records),
            train_fraction: Some(cfg.dataset.fractions.0),
            val_fraction: Some(cfg.dataset.fractions.1),
            test_fraction: Some(cfg.dataset.fractions.2),
            seed: cfg.dataset.seed,
            ..FileDataset::default()
        };
        match &cfg.dataset.source {
            DataSource::Synthetic(p) => {
                dataset.source = Some("synthetic".into());
                dataset.classes = Some(p.classes);
                dataset.classes_per_client = Some(p.classes_per_client);
                dataset.num_clients = Some(p.num_clients);
                dataset.samples_min = Some(p.samples_min);
                dataset.samples_max = Some(p.samples_max);
                dataset.feature_dim = Some(p.feature_dim);
                dataset.noise_sigma = Some(p.noise_sigma);
            }
            DataSource::Leaf(path) => {
                dataset.source = Some("leaf".into());
                dataset.leaf_path = Some(path.clone());
            }
        }
        let model = FileModel {
            architecture: Some(cfg.model.architecture),
            hidden: cfg.model.hidden,
            init: Some(cfg.model.init),
            input_dim: cfg.model.input_dim,
            classes: cfg.model.classes,
        };
        let f = &cfg.federated;
        let method = FileMethod {
            name: Some(f.method.name().to_string()),
            rounds: Some(f.rounds),
            clients_per_round: Some(f.clients_per_round),
            inner_lr: Some(f.inner_lr),
            outer_lr: Some(f.outer_lr),
            local_epochs: Some(f.local_epochs),
            local_batch: Some(f.local_batch),
            support_fraction: Some(f.support_fraction),
            aggregation: Some(f.aggregation),
            eval_every: Some(f.eval_every),
            master_seed: Some(f.master_seed),
            split_mode: Some(f.split_mode),
            clamp_alpha_at_eval: Some(f.clamp_alpha_at_eval),
        };
        let output = FileOutput {
            dir: Some(cfg.output.dir.clone()),
            formats: Some(cfg.output.formats.clone()),
            target_accuracy: Some(cfg.output.target_accuracy),
        };
        FileConfig {
            dataset,
            model,
            method,
            output,
        }
    }
}
