//! Side-by-side methods on one dataset and sampling schedule, the same
//! thing the `compare` subcommand does, driven through the config layer.
//!
//!     cargo run --example method_comparison

use fedmeta::config::ExperimentConfig;
use fedmeta::metalearn::Method;
use fedmeta::runner;

fn main() {
    let out = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
        [dataset]
        classes = 6
        classes_per_client = 2
        num_clients = 40
        samples_min = 20
        samples_max = 40
        feature_dim = 10

        [model]
        hidden = 12

        [method]
        name = "maml"
        rounds = 100
        clients_per_round = 5
        inner_lr = 0.1
        outer_lr = 0.3
        support_fraction = 0.2
        eval_every = 100
        master_seed = 7

        [output]
        dir = "{}"
        target_accuracy = 0.6
        "#,
        out.path().display()
    );

    let methods = [
        Method::Maml,
        Method::Fomaml,
        Method::MetaSgd,
        Method::FedAvg,
        Method::FedAvgMeta,
    ];
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .map(|&m| ExperimentConfig::parse_for_method(&text, m).unwrap())
        .collect();

    let artifacts = runner::compare(&configs).unwrap();

    println!(
        "{} clients ({} train / {} val / {} test), lockstep sampling: {}",
        artifacts.summary.dataset.clients,
        artifacts.summary.dataset.train_clients,
        artifacts.summary.dataset.val_clients,
        artifacts.summary.dataset.test_clients,
        artifacts.summary.lockstep_sampling
    );
    println!("\nmethod        test_acc   variance   gflops   mb_up   hit_0.6");
    for run in &artifacts.summary.runs {
        let hit = match &run.target_hit {
            Some(h) => format!("round {}", h.round),
            None => "never".to_string(),
        };
        println!(
            "{:<12}  {:>8.4}  {:>9.5}  {:>7.3}  {:>6.2}  {}",
            run.method,
            run.final_test_accuracy,
            run.fairness.variance,
            run.total_cost.flops as f64 / 1e9,
            run.total_cost.uplink_bytes as f64 / 1e6,
            hit
        );
    }
    println!("\nfiles written under {}:", out.path().display());
    for run in &artifacts.runs {
        for path in &run.written {
            println!("  {}", path.file_name().unwrap().to_string_lossy());
        }
    }
    println!("  compare_summary.json");
}
