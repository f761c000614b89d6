//! What a run costs and how evenly it serves clients: the flop/byte
//! ledger, rounds-to-target, and the per-client accuracy distribution.
//!
//!     cargo run --example cost_and_fairness

use fedmeta::data::{generate_synthetic_noniid, split_clients, SyntheticParams};
use fedmeta::fedsim::{run_experiment, FederatedConfig};
use fedmeta::metalearn::Method;
use fedmeta::metrics::{fairness_stats, rounds_to_target};
use fedmeta::models::ModelSpec;

fn main() {
    let params = SyntheticParams {
        classes: 6,
        classes_per_client: 2,
        num_clients: 60,
        samples_min: 20,
        samples_max: 40,
        feature_dim: 10,
        noise_sigma: 0.5,
    };
    let raw = generate_synthetic_noniid(&params, 5).unwrap();
    let dataset = split_clients(&raw, (0.7, 0.1, 0.2), 6).unwrap();

    let spec = ModelSpec::mlp1(10, 12, 6);
    let mut cfg = FederatedConfig::new(Method::MetaSgd);
    cfg.rounds = 150;
    cfg.clients_per_round = 5;
    cfg.inner_lr = 0.1;
    cfg.outer_lr = 0.3;
    cfg.support_fraction = 0.2;
    cfg.eval_every = 10;
    cfg.master_seed = 9;

    let outcome = run_experiment(&cfg, &spec, &dataset).unwrap();

    let total = outcome.ledger.total();
    println!("cost ledger after {} rounds:", cfg.rounds);
    println!("  flops     {:>14}  ({:.3} gflops)", total.flops, total.flops as f64 / 1e9);
    println!(
        "  uplink    {:>14}  (rate vectors double the per-round payload)",
        total.uplink_bytes
    );
    println!("  downlink  {:>14}", total.downlink_bytes);

    match rounds_to_target(&outcome.records, 0.6) {
        Some(hit) => println!(
            "\nreached 0.6 test accuracy at round {} for {:.3} gflops and {} uplink bytes",
            hit.round,
            hit.cum_flops as f64 / 1e9,
            hit.cum_uplink_bytes
        ),
        None => println!("\nnever reached 0.6 test accuracy"),
    }

    let ratios: Vec<f64> = outcome
        .final_test
        .per_client
        .iter()
        .map(|s| s.ratio())
        .collect();
    let fairness = fairness_stats(&ratios).unwrap();
    println!(
        "\nper-client accuracy over {} test clients: mean {:.3}, variance {:.5}",
        ratios.len(),
        fairness.mean,
        fairness.variance
    );
    println!("histogram over [0, 1] in 20 bins:");
    for (i, &count) in fairness.histogram.iter().enumerate() {
        if count > 0 {
            println!(
                "  [{:.2}, {:.2})  {}",
                i as f64 / 20.0,
                (i + 1) as f64 / 20.0,
                "#".repeat(count as usize)
            );
        }
    }
    let peak = fairness
        .kde
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    println!(
        "density peak at accuracy {:.2} (boundary-reflected kernel estimate)",
        peak.0 as f64 / (fairness.kde.len() - 1) as f64
    );
}
