//! From config to artifacts: builds the dataset and model, runs the
//! federated loop, and writes the metric stream and summaries to disk.
//!
//! `run` handles one method; `compare` runs several methods against the
//! byte-identical dataset and sampling schedule so their metric streams
//! differ only where the methods do.

use std::path::PathBuf;

use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, OutputFormat};
use crate::data::{
    filter_inactive, generate_synthetic_noniid, load_leaf_json, split_clients, write_leaf_json,
    FederatedDataset, SplitGroup,
};
use crate::fedsim::{run_experiment, ExperimentOutcome, RoundRecord};
use crate::metrics::{fairness_stats, rounds_to_target, FairnessReport, RoundCost, TargetHit};
use crate::models::{Architecture, ModelSpec};
use crate::{Error, Result};

/// Materializes the configured client population: generate or load,
/// drop too-small clients, and partition into train/val/test.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<FederatedDataset> {
    let raw = match &cfg.dataset.source {
        DataSource::Synthetic(params) => generate_synthetic_noniid(params, cfg.data_seed())?,
        DataSource::Leaf(path) => load_leaf_json(path)?,
    };
    let kept = filter_inactive(&raw, cfg.dataset.min_records)?;
    split_clients(&kept, cfg.dataset.fractions, cfg.partition_seed())
}

/// Resolves the model against the dataset: absent dimensions are
/// inferred, explicit ones must match.
pub fn build_model_spec(cfg: &ExperimentConfig, dataset: &FederatedDataset) -> Result<ModelSpec> {
    let input_dim = match cfg.model.input_dim {
        Some(d) if d != dataset.feature_dim() => {
            return Err(Error::Config(format!(
                "model.input_dim {} does not match the dataset feature dim {}",
                d,
                dataset.feature_dim()
            )))
        }
        Some(d) => d,
        None => dataset.feature_dim(),
    };
    let classes = match cfg.model.classes {
        Some(c) if c != dataset.class_count() => {
            return Err(Error::Config(format!(
                "model.classes {} does not match the dataset class count {}",
                c,
                dataset.class_count()
            )))
        }
        Some(c) => c,
        None => dataset.class_count(),
    };
    let spec = match cfg.model.architecture {
        Architecture::SoftmaxLr => ModelSpec::softmax_lr(input_dim, classes),
        Architecture::Mlp1 => {
            ModelSpec::mlp1(input_dim, cfg.model.hidden.unwrap_or(16), classes)
        }
    }
    .with_init(cfg.model.init);
    spec.validate()?;
    Ok(spec)
}

/// Everything one run produces, plus the paths written for it.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub outcome: ExperimentOutcome,
    pub summary: RunSummary,
    pub written: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub rounds: usize,
    pub final_test_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
    pub total_cost: RoundCost,
    pub target_accuracy: f64,
    /// First round whose test accuracy reached the target, with the
    /// cumulative cost paid to get there; absent if never reached.
    pub target_hit: Option<TargetHit>,
    pub fairness: FairnessReport,
    pub excluded_test_clients: Vec<String>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a RunSummary,
    config: &'a ExperimentConfig,
}

/// Runs one experiment in memory; no files are touched.
pub fn execute(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
) -> Result<RunArtifacts> {
    let outcome = run_experiment(&cfg.federated, spec, dataset)?;
    let ratios: Vec<f64> = outcome
        .final_test
        .per_client
        .iter()
        .map(|s| s.ratio())
        .collect();
    let fairness = fairness_stats(&ratios)?;
    let last = outcome.records.last().expect("a run has at least one round");
    let summary = RunSummary {
        method: cfg.federated.method.name().to_string(),
        rounds: cfg.federated.rounds,
        final_test_accuracy: outcome.final_test.accuracy,
        final_val_accuracy: last.val_accuracy,
        total_cost: outcome.ledger.total(),
        target_accuracy: cfg.output.target_accuracy,
        target_hit: rounds_to_target(&outcome.records, cfg.output.target_accuracy),
        fairness,
        excluded_test_clients: outcome.final_test.excluded.clone(),
    };
    Ok(RunArtifacts {
        config: cfg.clone(),
        outcome,
        summary,
        written: Vec::new(),
    })
}

/// Builds, runs, and writes `<method>_metrics.csv` and
/// `<method>_summary.json` under the configured output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let dataset = build_dataset(cfg)?;
    let spec = build_model_spec(cfg, &dataset)?;
    let mut artifacts = execute(cfg, &spec, &dataset)?;
    write_run_outputs(&mut artifacts)?;
    Ok(artifacts)
}

fn write_run_outputs(artifacts: &mut RunArtifacts) -> Result<()> {
    let out = &artifacts.config.output;
    std::fs::create_dir_all(&out.dir)?;
    let name = &artifacts.summary.method;
    if out.formats.contains(&OutputFormat::Csv) {
        let path = out.dir.join(format!("{name}_metrics.csv"));
        std::fs::write(&path, metrics_csv(&artifacts.outcome.records)?)?;
        artifacts.written.push(path);
    }
    if out.formats.contains(&OutputFormat::Json) {
        let path = out.dir.join(format!("{name}_summary.json"));
        let file = SummaryFile {
            summary: &artifacts.summary,
            config: &artifacts.config,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        artifacts.written.push(path);
    }
    Ok(())
}

/// The per-round metric stream as CSV. Accuracy cells are empty on
/// rounds without an evaluation.
pub fn metrics_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "round",
        "method",
        "support_loss",
        "query_loss",
        "test_accuracy",
        "cum_flops",
        "cum_up_bytes",
        "cum_down_bytes",
    ])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.method.name().to_string(),
            r.mean_support_loss.to_string(),
            r.mean_query_loss.to_string(),
            r.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.cum_flops.to_string(),
            r.cum_uplink_bytes.to_string(),
            r.cum_downlink_bytes.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Client population counts for summaries and the data tool.
#[derive(Clone, Debug, Serialize)]
pub struct DatasetStats {
    pub clients: usize,
    pub train_clients: usize,
    pub val_clients: usize,
    pub test_clients: usize,
    pub records: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

pub fn dataset_stats(dataset: &FederatedDataset) -> DatasetStats {
    DatasetStats {
        clients: dataset.len(),
        train_clients: dataset.ids_in(SplitGroup::Train).len(),
        val_clients: dataset.ids_in(SplitGroup::Val).len(),
        test_clients: dataset.ids_in(SplitGroup::Test).len(),
        records: dataset.total_records(),
        feature_dim: dataset.feature_dim(),
        classes: dataset.class_count(),
    }
}

#[derive(Clone, Debug)]
pub struct CompareArtifacts {
    pub runs: Vec<RunArtifacts>,
    pub summary: CompareSummary,
    pub written: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSummary {
    pub methods: Vec<String>,
    pub dataset: DatasetStats,
    /// Whether every method saw the same client sequence each round.
    pub lockstep_sampling: bool,
    pub runs: Vec<RunSummary>,
}

/// Runs each config against one shared dataset and writes the combined
/// `compare_summary.json` next to the per-method files. The configs must
/// agree on everything except the method (and its aggregation rule).
pub fn compare(configs: &[ExperimentConfig]) -> Result<CompareArtifacts> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two methods".into()));
    }
    let mut names: Vec<String> = Vec::new();
    for cfg in configs {
        let name = cfg.federated.method.name().to_string();
        if names.contains(&name) {
            return Err(Error::Config(format!("method {name} listed twice")));
        }
        names.push(name);
    }
    for cfg in &configs[1..] {
        if !comparable(&configs[0], cfg) {
            return Err(Error::Config(
                "compare configs must agree on dataset, model, schedule, and output; \
                 only the method may differ"
                    .into(),
            ));
        }
    }

    let dataset = build_dataset(&configs[0])?;
    let spec = build_model_spec(&configs[0], &dataset)?;
    let mut runs = Vec::new();
    for cfg in configs {
        let mut artifacts = execute(cfg, &spec, &dataset)?;
        write_run_outputs(&mut artifacts)?;
        runs.push(artifacts);
    }

    // Sampling depends only on the seed and the round, so this holds by
    // construction; a failure means the schedule leaked method state.
    let reference: Vec<&[String]> = runs[0]
        .outcome
        .records
        .iter()
        .map(|r| r.sampled_clients.as_slice())
        .collect();
    for run in &runs[1..] {
        let seq: Vec<&[String]> = run
            .outcome
            .records
            .iter()
            .map(|r| r.sampled_clients.as_slice())
            .collect();
        if seq != reference {
            return Err(Error::Protocol(
                "compared methods diverged in client sampling".into(),
            ));
        }
    }

    let summary = CompareSummary {
        methods: names,
        dataset: dataset_stats(&dataset),
        lockstep_sampling: true,
        runs: runs.iter().map(|r| r.summary.clone()).collect(),
    };
    let dir = &configs[0].output.dir;
    std::fs::create_dir_all(dir)?;
    let path = dir.join("compare_summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(&path, text)?;

    Ok(CompareArtifacts {
        runs,
        summary,
        written: vec![path],
    })
}

fn comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut fa = a.federated.clone();
    fa.method = b.federated.method;
    fa.aggregation = b.federated.aggregation;
    fa == b.federated && a.dataset == b.dataset && a.model == b.model && a.output == b.output
}

/// Generates the configured synthetic population and writes it in the
/// per-user JSON format, so a later run can load it as a `leaf` source.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<(PathBuf, DatasetStats)> {
    let params = match &cfg.dataset.source {
        DataSource::Synthetic(p) => p,
        DataSource::Leaf(_) => {
            return Err(Error::Config(
                "gen-data needs dataset.source = \"synthetic\"".into(),
            ))
        }
    };
    let dataset = generate_synthetic_noniid(params, cfg.data_seed())?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join("dataset.json");
    write_leaf_json(&dataset, &path)?;
    Ok((path, dataset_stats(&dataset)))
}
