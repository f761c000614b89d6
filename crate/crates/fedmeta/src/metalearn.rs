//! Client-side learning algorithms: one-step adaptation, meta-gradients
//! for the episode objective, and plain local SGD for the averaging
//! baselines.
//!
//! The episode objective for a client with support set S and query set Q
//! is L_Q(theta - alpha * grad L_S(theta)). Its exact derivative with
//! respect to theta is `(I - alpha * H_S(theta)) * grad L_Q(theta')`,
//! with theta' the adapted parameters, which is evaluated here as one
//! query gradient plus one support Hessian-vector product. The
//! first-order variant drops the Hessian term. Meta-SGD adapts with a
//! per-parameter rate vector and differentiates through it as well.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gradient, Batch, Objective, ParamVector};
use crate::models::ModelSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Weighted parameter averaging of locally trained models.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// FedAvg training with support-set fine-tuning before evaluation.
    #[serde(rename = "fedavg_meta")]
    FedAvgMeta,
    /// Episode training with the exact second-order meta-gradient.
    #[serde(rename = "maml")]
    Maml,
    /// Episode training with the first-order approximation.
    #[serde(rename = "fomaml")]
    Fomaml,
    /// Episode training that also learns a per-parameter inner rate.
    #[serde(rename = "meta_sgd")]
    MetaSgd,
}

pub const ALL_METHODS: [Method; 5] = [
    Method::FedAvg,
    Method::FedAvgMeta,
    Method::Maml,
    Method::Fomaml,
    Method::MetaSgd,
];

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedAvgMeta => "fedavg_meta",
            Method::Maml => "maml",
            Method::Fomaml => "fomaml",
            Method::MetaSgd => "meta_sgd",
        }
    }

    /// True for the methods whose clients run support/query episodes and
    /// upload meta-gradients rather than parameters.
    pub fn is_meta(&self) -> bool {
        matches!(self, Method::Maml | Method::Fomaml | Method::MetaSgd)
    }

    /// True where the client pays for Hessian-vector products.
    pub fn uses_second_order(&self) -> bool {
        matches!(self, Method::Maml | Method::MetaSgd)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        for m in ALL_METHODS {
            if m.name() == s {
                return Ok(m);
            }
        }
        Err(Error::Config(format!(
            "unknown method {s:?}; valid methods are fedavg, fedavg_meta, maml, fomaml, meta_sgd"
        )))
    }
}

/// Inner-loop step size: one scalar, or one rate per parameter for
/// Meta-SGD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InnerLr {
    Scalar(f64),
    PerParam(ParamVector),
}

impl InnerLr {
    /// alpha * g, elementwise for the per-parameter form.
    pub fn apply(&self, g: &ParamVector) -> ParamVector {
        match self {
            InnerLr::Scalar(a) => g.scaled(*a),
            InnerLr::PerParam(a) => a.hadamard(g),
        }
    }

    fn check_len(&self, param_len: usize) -> Result<()> {
        if let InnerLr::PerParam(a) = self {
            if a.len() != param_len {
                return Err(Error::Config(format!(
                    "inner rate vector has length {}, parameters have {}",
                    a.len(),
                    param_len
                )));
            }
        }
        Ok(())
    }
}

/// Everything the server owns between rounds.
#[derive(Clone, Debug)]
pub struct AlgorithmState {
    pub method: Method,
    pub theta: ParamVector,
    pub alpha: InnerLr,
    pub outer_lr: f64,
}

impl AlgorithmState {
    pub fn new(method: Method, theta: ParamVector, alpha: InnerLr, outer_lr: f64) -> Result<Self> {
        if !outer_lr.is_finite() || outer_lr < 0.0 {
            return Err(Error::Config(format!(
                "outer learning rate must be a non-negative number, got {outer_lr}"
            )));
        }
        match (&method, &alpha) {
            (Method::MetaSgd, InnerLr::PerParam(a)) => {
                if a.len() != theta.len() {
                    return Err(Error::Config(format!(
                        "meta_sgd rate vector has length {}, parameters have {}",
                        a.len(),
                        theta.len()
                    )));
                }
            }
            (Method::MetaSgd, InnerLr::Scalar(_)) => {
                return Err(Error::Config(
                    "meta_sgd needs a per-parameter inner rate vector".into(),
                ));
            }
            (_, InnerLr::PerParam(_)) => {
                return Err(Error::Config(format!(
                    "method {method} takes a scalar inner rate"
                )));
            }
            (_, InnerLr::Scalar(_)) => {}
        }
        Ok(AlgorithmState {
            method,
            theta,
            alpha,
            outer_lr,
        })
    }
}

/// What one client sends back to the server after a round. The server
/// never sees raw data, only this.
#[derive(Clone, Debug)]
pub struct ClientResult {
    pub client_id: String,
    /// Meta-gradient (length P, or 2P for Meta-SGD: parameter part then
    /// rate part), or locally trained parameters for the averaging
    /// baselines.
    pub payload: ParamVector,
    pub n_support: usize,
    pub n_query: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub query_correct: usize,
}

/// One adaptation step: theta - alpha * grad L_S(theta).
pub fn inner_update(
    theta: &ParamVector,
    alpha: &InnerLr,
    support: &impl Objective,
) -> Result<ParamVector> {
    check_objective_len("support", support, theta)?;
    alpha.check_len(theta.len())?;
    let g = support.gradient(theta)?;
    let mut adapted = theta.clone();
    adapted.add_scaled(&alpha.apply(&g), -1.0);
    adapted.ensure_finite("adapted parameters")?;
    Ok(adapted)
}

/// Exact gradient of the episode objective:
/// grad L_Q(theta') - alpha * H_S(theta) * grad L_Q(theta').
pub fn maml_meta_gradient(
    theta: &ParamVector,
    alpha: f64,
    support: &impl Objective,
    query: &impl Objective,
) -> Result<ParamVector> {
    check_objective_len("support", support, theta)?;
    check_objective_len("query", query, theta)?;
    let gs = support.gradient(theta)?;
    let mut adapted = theta.clone();
    adapted.add_scaled(&gs, -alpha);
    let gq = query.gradient(&adapted)?;
    let hv = support.hessian_vector_product(theta, &gq)?;
    let mut out = gq;
    out.add_scaled(&hv, -alpha);
    out.ensure_finite("meta-gradient")?;
    Ok(out)
}

/// First-order approximation: the query gradient at the adapted
/// parameters, with the Hessian term dropped.
pub fn fomaml_meta_gradient(
    theta: &ParamVector,
    alpha: f64,
    support: &impl Objective,
    query: &impl Objective,
) -> Result<ParamVector> {
    check_objective_len("support", support, theta)?;
    check_objective_len("query", query, theta)?;
    let gs = support.gradient(theta)?;
    let mut adapted = theta.clone();
    adapted.add_scaled(&gs, -alpha);
    let gq = query.gradient(&adapted)?;
    gq.ensure_finite("meta-gradient")?;
    Ok(gq)
}

/// Meta-SGD gradient in both the parameters and the rate vector,
/// concatenated as [d/d theta, d/d alpha] (length 2P).
///
/// The adaptation is theta' = theta - alpha . grad L_S(theta), so the
/// parameter part is grad L_Q(theta') - H_S(theta) * (alpha . grad
/// L_Q(theta')) and the rate part is -grad L_S(theta) . grad L_Q(theta'),
/// both exact.
pub fn metasgd_meta_gradient(
    theta: &ParamVector,
    alpha: &ParamVector,
    support: &impl Objective,
    query: &impl Objective,
) -> Result<ParamVector> {
    check_objective_len("support", support, theta)?;
    check_objective_len("query", query, theta)?;
    if alpha.len() != theta.len() {
        return Err(Error::Config(format!(
            "inner rate vector has length {}, parameters have {}",
            alpha.len(),
            theta.len()
        )));
    }
    let gs = support.gradient(theta)?;
    let mut adapted = theta.clone();
    adapted.add_scaled(&alpha.hadamard(&gs), -1.0);
    let gq = query.gradient(&adapted)?;

    let hv = support.hessian_vector_product(theta, &alpha.hadamard(&gq))?;
    let mut theta_part = gq.clone();
    theta_part.add_scaled(&hv, -1.0);

    let alpha_part = gs.hadamard(&gq).scaled(-1.0);

    let out = theta_part.concat(&alpha_part);
    out.ensure_finite("meta-gradient")?;
    Ok(out)
}

/// Minibatch SGD on one client's data: `epochs` passes, each over a fresh
/// shuffle of the data in chunks of `batch_size` (the last chunk may be
/// short). Returns the trained parameters; `theta` is untouched.
pub fn local_sgd_train(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Batch,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    if epochs == 0 {
        return Err(Error::Config("local_epochs must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("local_batch must be at least 1".into()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!(
            "local learning rate must be a non-negative number, got {lr}"
        )));
    }
    let mut params = theta.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(batch_size) {
            let minibatch = data.select(chunk);
            let g = gradient(spec, &params, &minibatch)?;
            params.add_scaled(&g, -lr);
        }
    }
    params.ensure_finite("locally trained parameters")?;
    Ok(params)
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

fn check_objective_len(
    role: &str,
    objective: &impl Objective,
    theta: &ParamVector,
) -> Result<()> {
    if objective.param_len() != theta.len() {
        return Err(Error::Config(format!(
            "{role} objective is over {} parameters, state has {}",
            objective.param_len(),
            theta.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{
        fd_gradient, loss, LinearLoss, ModelObjective, QuadraticLoss,
    };
    use crate::models::init_params;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // One-parameter episode used throughout: support loss (theta - 1)^2/2,
    // query loss (theta - 2)^2/2, theta = 0, alpha = 1/2. Adaptation lands
    // on 1/2, the query gradient there is -3/2, and scaling by
    // (1 - alpha * 1) gives the exact meta-gradient -3/4.
    fn fixture() -> (ParamVector, QuadraticLoss, QuadraticLoss) {
        (
            ParamVector::new(vec![0.0]),
            QuadraticLoss::new(vec![1.0]),
            QuadraticLoss::new(vec![2.0]),
        )
    }

    #[test]
    fn inner_update_takes_one_descent_step() {
        let (theta, support, _) = fixture();
        let adapted = inner_update(&theta, &InnerLr::Scalar(0.5), &support).unwrap();
        assert_eq!(adapted.as_slice(), &[0.5]);
    }

    #[test]
    fn inner_update_applies_per_parameter_rates() {
        let theta = ParamVector::new(vec![1.0, 2.0]);
        let support = QuadraticLoss::new(vec![0.0, 0.0]); // gradient = theta
        let alpha = InnerLr::PerParam(ParamVector::new(vec![0.1, 0.2]));
        let adapted = inner_update(&theta, &alpha, &support).unwrap();
        assert_eq!(adapted.as_slice(), &[0.9, 1.6]);
    }

    #[test]
    fn quadratic_fixture_meta_gradients() {
        let (theta, support, query) = fixture();
        let maml = maml_meta_gradient(&theta, 0.5, &support, &query).unwrap();
        assert_eq!(maml.as_slice(), &[-0.75]);

        let fo = fomaml_meta_gradient(&theta, 0.5, &support, &query).unwrap();
        assert_eq!(fo.as_slice(), &[-1.5]);

        let alpha = ParamVector::new(vec![0.5]);
        let ms = metasgd_meta_gradient(&theta, &alpha, &support, &query).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0], -0.75); // parameter part matches MAML at constant rate
        assert_eq!(ms[1], -1.5); // -grad_S * grad_Q = -(-1)(-3/2)
    }

    #[test]
    fn zero_alpha_reduces_to_plain_query_gradient() {
        let spec = ModelSpec::mlp1(4, 3, 3);
        let theta = init_params(&spec, 77).unwrap();
        let (support_b, query_b) = random_batches(&spec, 771);
        let support = ModelObjective::new(&spec, &support_b);
        let query = ModelObjective::new(&spec, &query_b);

        let g_plain = query.gradient(&theta).unwrap();
        let maml = maml_meta_gradient(&theta, 0.0, &support, &query).unwrap();
        let fo = fomaml_meta_gradient(&theta, 0.0, &support, &query).unwrap();
        assert!(maml.max_abs_diff(&g_plain) < 1e-12);
        assert!(fo.max_abs_diff(&g_plain) < 1e-12);

        let ms = metasgd_meta_gradient(
            &theta,
            &ParamVector::zeros(theta.len()),
            &support,
            &query,
        )
        .unwrap();
        let theta_part = ParamVector::new(ms.as_slice()[..theta.len()].to_vec());
        assert!(theta_part.max_abs_diff(&g_plain) < 1e-12);
    }

    #[test]
    fn fomaml_equals_maml_when_support_hessian_vanishes() {
        let support = LinearLoss::new(vec![0.3, -0.7, 1.1]);
        let query = QuadraticLoss::new(vec![1.0, 2.0, 3.0]);
        let theta = ParamVector::new(vec![0.2, 0.4, 0.6]);
        let maml = maml_meta_gradient(&theta, 0.3, &support, &query).unwrap();
        let fo = fomaml_meta_gradient(&theta, 0.3, &support, &query).unwrap();
        assert!(maml.max_abs_diff(&fo) < 1e-12);
    }

    #[test]
    fn constant_rate_metasgd_matches_maml_on_parameters() {
        let spec = ModelSpec::softmax_lr(3, 3);
        let theta = init_params(&spec, 5).unwrap();
        let (support_b, query_b) = random_batches(&spec, 51);
        let support = ModelObjective::new(&spec, &support_b);
        let query = ModelObjective::new(&spec, &query_b);

        let a = 0.07;
        let maml = maml_meta_gradient(&theta, a, &support, &query).unwrap();
        let alpha = ParamVector::new(vec![a; theta.len()]);
        let ms = metasgd_meta_gradient(&theta, &alpha, &support, &query).unwrap();
        let theta_part = ParamVector::new(ms.as_slice()[..theta.len()].to_vec());
        assert!(maml.max_abs_diff(&theta_part) < 1e-12);
    }

    #[test]
    fn maml_meta_gradient_matches_composite_finite_differences() {
        let spec = ModelSpec::softmax_lr(3, 2);
        let theta = init_params(&spec, 13).unwrap();
        let (support_b, query_b) = random_batches(&spec, 131);
        let support = ModelObjective::new(&spec, &support_b);
        let query = ModelObjective::new(&spec, &query_b);
        let alpha = 0.1;

        let analytic = maml_meta_gradient(&theta, alpha, &support, &query).unwrap();

        // finite differences straight through the episode objective
        let step = 1e-5;
        let mut probe = theta.clone();
        for i in 0..theta.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = episode_loss(&probe, alpha, &support, &query);
            probe[i] = orig - step;
            let down = episode_loss(&probe, alpha, &support, &query);
            probe[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let denom = analytic[i].abs().max(fd.abs());
            if denom < 1e-8 {
                continue;
            }
            assert!(
                (analytic[i] - fd).abs() <= 1e-5 * denom.max(1e-4),
                "component {i}: {} vs {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn metasgd_meta_gradient_matches_composite_finite_differences() {
        let spec = ModelSpec::softmax_lr(2, 2);
        let theta = init_params(&spec, 17).unwrap();
        let (support_b, query_b) = random_batches(&spec, 171);
        let support = ModelObjective::new(&spec, &support_b);
        let query = ModelObjective::new(&spec, &query_b);
        let n = theta.len();
        let mut rng = ChaCha8Rng::seed_from_u64(172);
        let alpha = ParamVector::new((0..n).map(|_| rng.random_range(0.01..0.2)).collect());

        let analytic = metasgd_meta_gradient(&theta, &alpha, &support, &query).unwrap();

        let step = 1e-5;
        let episode = |t: &ParamVector, a: &ParamVector| -> f64 {
            let adapted = inner_update(t, &InnerLr::PerParam(a.clone()), &support).unwrap();
            query.loss(&adapted).unwrap()
        };
        let mut check = |idx: usize, fd: f64| {
            let denom = analytic[idx].abs().max(fd.abs());
            if denom < 1e-8 {
                return;
            }
            assert!(
                (analytic[idx] - fd).abs() <= 1e-5 * denom.max(1e-4),
                "component {idx}: {} vs {}",
                analytic[idx],
                fd
            );
        };
        let mut t_probe = theta.clone();
        for i in 0..n {
            let orig = t_probe[i];
            t_probe[i] = orig + step;
            let up = episode(&t_probe, &alpha);
            t_probe[i] = orig - step;
            let down = episode(&t_probe, &alpha);
            t_probe[i] = orig;
            check(i, (up - down) / (2.0 * step));
        }
        let mut a_probe = alpha.clone();
        for i in 0..n {
            let orig = a_probe[i];
            a_probe[i] = orig + step;
            let up = episode(&theta, &a_probe);
            a_probe[i] = orig - step;
            let down = episode(&theta, &a_probe);
            a_probe[i] = orig;
            check(n + i, (up - down) / (2.0 * step));
        }
    }

    #[test]
    fn local_sgd_with_zero_rate_returns_theta() {
        let spec = ModelSpec::softmax_lr(3, 2);
        let theta = init_params(&spec, 3).unwrap();
        let data = batch_for(&spec, 10, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trained = local_sgd_train(&spec, &theta, &data, 3, 4, 0.0, &mut rng).unwrap();
        assert_eq!(trained, theta);
    }

    #[test]
    fn local_sgd_full_batch_is_one_gradient_step_per_epoch() {
        let spec = ModelSpec::softmax_lr(3, 2);
        let theta = init_params(&spec, 4).unwrap();
        let data = batch_for(&spec, 6, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trained =
            local_sgd_train(&spec, &theta, &data, 1, data.len(), 0.5, &mut rng).unwrap();
        let mut expected = theta.clone();
        expected.add_scaled(&gradient(&spec, &theta, &data).unwrap(), -0.5);
        assert!(trained.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn local_sgd_is_deterministic_in_the_rng() {
        let spec = ModelSpec::mlp1(3, 4, 2);
        let theta = init_params(&spec, 5).unwrap();
        let data = batch_for(&spec, 9, 51);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            local_sgd_train(&spec, &theta, &data, 2, 2, 0.1, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn local_sgd_rejects_degenerate_arguments() {
        let spec = ModelSpec::softmax_lr(3, 2);
        let theta = init_params(&spec, 6).unwrap();
        let data = batch_for(&spec, 4, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(local_sgd_train(&spec, &theta, &data, 0, 2, 0.1, &mut rng).is_err());
        assert!(local_sgd_train(&spec, &theta, &data, 1, 0, 0.1, &mut rng).is_err());
        assert!(local_sgd_train(&spec, &theta, &data, 1, 2, -0.1, &mut rng).is_err());
    }

    #[test]
    fn training_lowers_the_loss_on_the_training_data() {
        let spec = ModelSpec::softmax_lr(4, 3);
        let theta = init_params(&spec, 8).unwrap();
        let data = batch_for(&spec, 30, 81);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trained = local_sgd_train(&spec, &theta, &data, 20, 5, 0.2, &mut rng).unwrap();
        let before = loss(&spec, &theta, &data).unwrap();
        let after = loss(&spec, &trained, &data).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn state_constructor_enforces_rate_shape() {
        let theta = ParamVector::zeros(4);
        assert!(AlgorithmState::new(
            Method::Maml,
            theta.clone(),
            InnerLr::Scalar(0.1),
            0.01
        )
        .is_ok());
        assert!(AlgorithmState::new(
            Method::MetaSgd,
            theta.clone(),
            InnerLr::Scalar(0.1),
            0.01
        )
        .is_err());
        assert!(AlgorithmState::new(
            Method::MetaSgd,
            theta.clone(),
            InnerLr::PerParam(ParamVector::zeros(3)),
            0.01
        )
        .is_err());
        assert!(AlgorithmState::new(
            Method::MetaSgd,
            theta.clone(),
            InnerLr::PerParam(ParamVector::zeros(4)),
            0.01
        )
        .is_ok());
        assert!(AlgorithmState::new(
            Method::FedAvg,
            theta.clone(),
            InnerLr::PerParam(ParamVector::zeros(4)),
            0.01
        )
        .is_err());
        assert!(AlgorithmState::new(Method::Maml, theta, InnerLr::Scalar(0.1), -1.0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in ALL_METHODS {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("newton".parse::<Method>().is_err());
    }

    #[test]
    fn meta_gradient_matches_generic_fd_helper_on_quadratics() {
        // fd_gradient drives the same Objective trait the algorithms use,
        // so the surrogate wiring is checked end to end.
        let q = QuadraticLoss::new(vec![1.0, -1.0]);
        let theta = ParamVector::new(vec![0.3, 0.4]);
        let fd = fd_gradient(&q, &theta, 1e-6).unwrap();
        let exact = q.gradient(&theta).unwrap();
        assert!(fd.max_abs_diff(&exact) < 1e-9);
    }

    fn episode_loss(
        theta: &ParamVector,
        alpha: f64,
        support: &ModelObjective,
        query: &ModelObjective,
    ) -> f64 {
        let adapted = inner_update(theta, &InnerLr::Scalar(alpha), support).unwrap();
        query.loss(&adapted).unwrap()
    }

    fn batch_for(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * spec.input_dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
        Batch::new(features, spec.input_dim, labels).unwrap()
    }

    fn random_batches(spec: &ModelSpec, seed: u64) -> (Batch, Batch) {
        (batch_for(spec, 8, seed), batch_for(spec, 6, seed + 1))
    }
}
