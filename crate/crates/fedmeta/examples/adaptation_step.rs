//! One support/query episode in the small: the closed-form quadratic
//! fixture first, then a real model episode showing how adaptation
//! lowers the query loss and what each method would upload.
//!
//!     cargo run --example adaptation_step

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use fedmeta::diffcore::{Batch, ModelObjective, Objective, ParamVector, QuadraticLoss};
use fedmeta::metalearn::{
    fomaml_meta_gradient, inner_update, maml_meta_gradient, metasgd_meta_gradient, InnerLr,
};
use fedmeta::models::{init_params, ModelSpec};

fn main() {
    // Support 0.5*(t-1)^2 and query 0.5*(t-2)^2 from t = 0 with rate 0.5
    // has pencil-and-paper answers: adapted t = 0.5, exact meta-gradient
    // -0.75, first-order -1.5, rate derivative -1.5.
    let support = QuadraticLoss::new(vec![1.0]);
    let query = QuadraticLoss::new(vec![2.0]);
    let theta = ParamVector::new(vec![0.0]);
    let adapted = inner_update(&theta, &InnerLr::Scalar(0.5), &support).unwrap();
    println!("quadratic fixture:");
    println!("  adapted parameter   = {:?}", adapted.as_slice());
    println!(
        "  exact meta-gradient = {:?}",
        maml_meta_gradient(&theta, 0.5, &support, &query)
            .unwrap()
            .as_slice()
    );
    println!(
        "  first-order variant = {:?}",
        fomaml_meta_gradient(&theta, 0.5, &support, &query)
            .unwrap()
            .as_slice()
    );
    let rates = ParamVector::new(vec![0.5]);
    println!(
        "  joint with rates    = {:?}",
        metasgd_meta_gradient(&theta, &rates, &support, &query)
            .unwrap()
            .as_slice()
    );

    // The same machinery on a real classifier episode.
    let spec = ModelSpec::softmax_lr(6, 3);
    let theta = init_params(&spec, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut batch = |n: usize| {
        let class_shift = |c: usize, j: usize| if j % 3 == c { 1.5 } else { 0.0 };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let features: Vec<f64> = labels
            .iter()
            .flat_map(|&c| {
                (0..6)
                    .map(|j| class_shift(c, j) + rng.random_range(-0.5..0.5))
                    .collect::<Vec<_>>()
            })
            .collect();
        Batch::new(features, 6, labels).unwrap()
    };
    let support = batch(8);
    let query = batch(12);
    let s_obj = ModelObjective::new(&spec, &support);
    let q_obj = ModelObjective::new(&spec, &query);

    let alpha = 0.5;
    let adapted = inner_update(&theta, &InnerLr::Scalar(alpha), &s_obj).unwrap();
    println!("\nclassifier episode (support 8, query 12, rate {alpha}):");
    println!(
        "  query loss before adaptation = {:.4}",
        q_obj.loss(&theta).unwrap()
    );
    println!(
        "  query loss after adaptation  = {:.4}",
        q_obj.loss(&adapted).unwrap()
    );

    let exact = maml_meta_gradient(&theta, alpha, &s_obj, &q_obj).unwrap();
    let first = fomaml_meta_gradient(&theta, alpha, &s_obj, &q_obj).unwrap();
    println!(
        "  exact vs first-order upload: max |diff| = {:.4} over {} components",
        exact.max_abs_diff(&first),
        exact.len()
    );
    println!("  (the difference is the support-curvature correction)");
}
