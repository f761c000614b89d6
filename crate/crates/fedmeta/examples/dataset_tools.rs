//! The data pipeline end to end: synthesize a non-IID population, dump
//! it to the per-user JSON format, reload it losslessly, drop small
//! clients, and partition the rest into train/val/test.
//!
//!     cargo run --example dataset_tools

use std::collections::BTreeSet;

use fedmeta::data::{
    filter_inactive, generate_synthetic_noniid, load_leaf_json, split_clients, write_leaf_json,
    SplitGroup, SyntheticParams,
};

fn main() {
    let params = SyntheticParams {
        classes: 5,
        classes_per_client: 2,
        num_clients: 25,
        samples_min: 3,
        samples_max: 30,
        feature_dim: 8,
        noise_sigma: 0.5,
    };
    let dataset = generate_synthetic_noniid(&params, 99).unwrap();
    println!(
        "generated {} clients, {} records, {} classes",
        dataset.len(),
        dataset.total_records(),
        dataset.class_count()
    );
    println!("\nlabel sets are client-specific (that is the non-IID part):");
    for client in dataset.clients().iter().take(5) {
        let classes: BTreeSet<usize> = client.labels().iter().copied().collect();
        println!(
            "  {}: {} records, classes {:?}",
            client.id(),
            client.len(),
            classes
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("population.json");
    write_leaf_json(&dataset, &path).unwrap();
    let loaded = load_leaf_json(&path).unwrap();
    println!(
        "\nwrote {} ({} bytes) and reloaded it: identical = {}",
        path.display(),
        std::fs::metadata(&path).unwrap().len(),
        loaded == dataset
    );

    let kept = filter_inactive(&loaded, 10).unwrap();
    println!(
        "\ndropping clients with fewer than 10 records: {} -> {} clients",
        loaded.len(),
        kept.len()
    );

    let split = split_clients(&kept, (0.6, 0.2, 0.2), 100).unwrap();
    for group in [SplitGroup::Train, SplitGroup::Val, SplitGroup::Test] {
        println!("  {:?}: {:?}", group, split.ids_in(group));
    }
}
