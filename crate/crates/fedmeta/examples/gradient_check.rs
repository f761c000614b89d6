//! Validates the exact derivatives on a random small network: the
//! analytic gradient against central finite differences, and the
//! Hessian-vector product against differenced analytic gradients.
//!
//!     cargo run --example gradient_check

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use fedmeta::diffcore::{
    fd_gradient_oracle, gradient, hessian_vector_product, loss, Batch, ParamVector,
};
use fedmeta::models::ModelSpec;

fn main() {
    let spec = ModelSpec::mlp1(8, 6, 4);
    let p_len = spec.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let params = ParamVector::new((0..p_len).map(|_| rng.random_range(-0.5..0.5)).collect());
    let n = 6;
    let features: Vec<f64> = (0..n * 8).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let batch = Batch::new(features, 8, labels).unwrap();

    println!(
        "one-hidden-layer network, {} parameters, batch of {}",
        p_len,
        batch.len()
    );
    println!("loss = {:.6}", loss(&spec, &params, &batch).unwrap());

    let g = gradient(&spec, &params, &batch).unwrap();
    let fd = fd_gradient_oracle(&spec, &params, &batch, 1e-6).unwrap();
    let mut worst = 0.0f64;
    for i in 0..p_len {
        worst = worst.max((g[i] - fd[i]).abs());
    }
    println!("gradient vs finite differences: max |diff| = {worst:.3e}");

    let v = ParamVector::new((0..p_len).map(|_| rng.random_range(-1.0..1.0)).collect());
    let hv = hessian_vector_product(&spec, &params, &batch, &v).unwrap();
    let step = 1e-5;
    let mut up = params.clone();
    up.add_scaled(&v, step);
    let mut down = params.clone();
    down.add_scaled(&v, -step);
    let gu = gradient(&spec, &up, &batch).unwrap();
    let gd = gradient(&spec, &down, &batch).unwrap();
    let mut worst_h = 0.0f64;
    for i in 0..p_len {
        worst_h = worst_h.max((hv[i] - (gu[i] - gd[i]) / (2.0 * step)).abs());
    }
    println!("hessian-vector product vs differenced gradients: max |diff| = {worst_h:.3e}");
    println!("(the product is computed by a forward tangent pass; no Hessian is ever formed)");
}
