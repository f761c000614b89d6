//! Flat-vector autodiff for the model zoo: cross-entropy loss, exact
//! gradients, exact Hessian-vector products, and a finite-difference
//! oracle to check them against.
//!
//! Everything operates on `ParamVector` (a flat `f64` vector in the layout
//! documented on [`crate::models::ModelSpec`]) so that meta-learning
//! updates compose by ordinary vector arithmetic. Hessian-vector products
//! are computed analytically with a forward tangent pass over the
//! gradient (never by materializing the Hessian and never by differencing
//! gradients), which keeps them exact up to rounding.

use serde::{Deserialize, Serialize};

use crate::models::{Architecture, ModelSpec};
use crate::{Error, Result};

/// Mean negative log-likelihood clamps per-sample log-probabilities at
/// this floor so one unrepresentable sample cannot produce an infinite
/// loss. Gradients and Hessian-vector products use the exact softmax.
const LOG_PROB_FLOOR: f64 = -50.0;

// ---------------------------------------------------------------------------
// parameter vectors

/// Flat parameter (or gradient) vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// self += c * other
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| c * v).collect())
    }

    pub fn hadamard(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn concat(&self, other: &ParamVector) -> ParamVector {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        ParamVector(v)
    }

    /// Largest absolute componentwise difference; handy in tests and
    /// convergence checks.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "vector length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "non-finite value at component {i} in {context}"
            ))),
        }
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

// ---------------------------------------------------------------------------
// batches

/// A labeled minibatch with row-major features. Always holds at least one
/// sample; `features.len() == len() * dim()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("batch feature dimension must be >= 1".into()));
        }
        if labels.is_empty() {
            return Err(Error::Config("batch must hold at least one sample".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Config(format!(
                "batch has {} feature values, expected {} ({} samples x dim {})",
                features.len(),
                labels.len() * dim,
                labels.len(),
                dim
            )));
        }
        Ok(Batch {
            features,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one sample
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New batch with the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        assert!(!indices.is_empty(), "cannot select an empty batch");
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            dim: self.dim,
            labels,
        }
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim != other.dim {
            return Err(Error::Config(format!(
                "cannot concatenate batches with dims {} and {}",
                self.dim, other.dim
            )));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Batch {
            features,
            dim: self.dim,
            labels,
        })
    }
}

// ---------------------------------------------------------------------------
// objectives

/// A differentiable scalar objective over a flat parameter vector.
///
/// The federated algorithms only ever need these three queries, so they
/// are written against this trait; model losses and the analytic
/// surrogates used in tests implement it.
pub trait Objective {
    fn param_len(&self) -> usize;
    fn loss(&self, params: &ParamVector) -> Result<f64>;
    fn gradient(&self, params: &ParamVector) -> Result<ParamVector>;
    fn hessian_vector_product(&self, params: &ParamVector, v: &ParamVector)
        -> Result<ParamVector>;
}

/// Mean cross-entropy of a model on a fixed batch.
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Self {
        ModelObjective { spec, batch }
    }
}

impl Objective for ModelObjective<'_> {
    fn param_len(&self) -> usize {
        self.spec.param_count()
    }

    fn loss(&self, params: &ParamVector) -> Result<f64> {
        loss(self.spec, params, self.batch)
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        gradient(self.spec, params, self.batch)
    }

    fn hessian_vector_product(
        &self,
        params: &ParamVector,
        v: &ParamVector,
    ) -> Result<ParamVector> {
        hessian_vector_product(self.spec, params, self.batch, v)
    }
}

/// 1/2 * sum((theta - target)^2). Its Hessian is the identity, which makes
/// meta-gradient fixtures computable by hand.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    target: Vec<f64>,
}

impl QuadraticLoss {
    pub fn new(target: Vec<f64>) -> Self {
        QuadraticLoss { target }
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.target.len() {
            return Err(Error::Config(format!(
                "quadratic objective over {} parameters got {}",
                self.target.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

impl Objective for QuadraticLoss {
    fn param_len(&self) -> usize {
        self.target.len()
    }

    fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.check(params)?;
        Ok(params
            .as_slice()
            .iter()
            .zip(&self.target)
            .map(|(p, t)| 0.5 * (p - t) * (p - t))
            .sum())
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        self.check(params)?;
        Ok(ParamVector::new(
            params
                .as_slice()
                .iter()
                .zip(&self.target)
                .map(|(p, t)| p - t)
                .collect(),
        ))
    }

    fn hessian_vector_product(
        &self,
        params: &ParamVector,
        v: &ParamVector,
    ) -> Result<ParamVector> {
        self.check(params)?;
        self.check(v)?;
        Ok(v.clone())
    }
}

/// sum(slope * theta). Its Hessian is identically zero, so first-order and
/// second-order meta-gradients must coincide on it.
#[derive(Clone, Debug)]
pub struct LinearLoss {
    slope: Vec<f64>,
}

impl LinearLoss {
    pub fn new(slope: Vec<f64>) -> Self {
        LinearLoss { slope }
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.slope.len() {
            return Err(Error::Config(format!(
                "linear objective over {} parameters got {}",
                self.slope.len(),
                params.len()
            )));
        }
        Ok(())
    }
}

impl Objective for LinearLoss {
    fn param_len(&self) -> usize {
        self.slope.len()
    }

    fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.check(params)?;
        Ok(params.as_slice().iter().zip(&self.slope).map(|(p, s)| p * s).sum())
    }

    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        self.check(params)?;
        Ok(ParamVector::new(self.slope.clone()))
    }

    fn hessian_vector_product(
        &self,
        params: &ParamVector,
        v: &ParamVector,
    ) -> Result<ParamVector> {
        self.check(params)?;
        self.check(v)?;
        Ok(ParamVector::zeros(v.len()))
    }
}

// ---------------------------------------------------------------------------
// model loss, gradient, Hessian-vector product

fn check_model_inputs(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has length {}, model needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    if batch.dim() != spec.input_dim {
        return Err(Error::Config(format!(
            "batch feature dim {} does not match model input_dim {}",
            batch.dim(),
            spec.input_dim
        )));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            spec.classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the model on the batch. Per-sample log
/// probabilities are floored at -50 so the loss stays finite even when a
/// sample is assigned vanishing probability.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_model_inputs(spec, params, batch)?;
    let p = params.as_slice();
    let mut sum = 0.0;
    match spec.architecture {
        Architecture::SoftmaxLr => {
            let (d, c) = (spec.input_dim, spec.classes);
            let mut z = vec![0.0; c];
            for i in 0..batch.len() {
                lr_logits(p, batch.row(i), d, c, &mut z);
                sum += sample_nll(&z, batch.label(i), i)?;
            }
        }
        Architecture::Mlp1 => {
            let (d, h, c) = (spec.input_dim, spec.hidden.unwrap(), spec.classes);
            let mut u = vec![0.0; h];
            let mut a = vec![0.0; h];
            let mut z = vec![0.0; c];
            for i in 0..batch.len() {
                mlp_forward(p, batch.row(i), d, h, c, &mut u, &mut a, &mut z);
                sum += sample_nll(&z, batch.label(i), i)?;
            }
        }
    }
    Ok(sum / batch.len() as f64)
}

/// Exact gradient of [`loss`] with respect to the parameters (mean over
/// the batch, unclamped softmax).
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    check_model_inputs(spec, params, batch)?;
    let mut out = ParamVector::zeros(params.len());
    match spec.architecture {
        Architecture::SoftmaxLr => lr_gradient(params.as_slice(), batch, spec, out.as_mut_slice())?,
        Architecture::Mlp1 => mlp_gradient(params.as_slice(), batch, spec, out.as_mut_slice())?,
    }
    out.ensure_finite("gradient")?;
    Ok(out)
}

/// Exact product H(params) * v where H is the Hessian of [`loss`] on the
/// batch, via a forward tangent pass (cost comparable to two gradients;
/// the Hessian itself is never formed).
pub fn hessian_vector_product(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    check_model_inputs(spec, params, batch)?;
    if v.len() != params.len() {
        return Err(Error::Config(format!(
            "direction vector has length {}, model needs {}",
            v.len(),
            params.len()
        )));
    }
    let mut out = ParamVector::zeros(params.len());
    match spec.architecture {
        Architecture::SoftmaxLr => lr_hvp(
            params.as_slice(),
            v.as_slice(),
            batch,
            spec,
            out.as_mut_slice(),
        )?,
        Architecture::Mlp1 => mlp_hvp(
            params.as_slice(),
            v.as_slice(),
            batch,
            spec,
            out.as_mut_slice(),
        )?,
    }
    out.ensure_finite("hessian-vector product")?;
    Ok(out)
}

/// Central finite differences of any objective; the reference the exact
/// derivatives are validated against.
pub fn fd_gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    step: f64,
) -> Result<ParamVector> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be a positive number, got {step}"
        )));
    }
    let mut out = vec![0.0; params.len()];
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = objective.loss(&probe)?;
        probe[i] = orig - step;
        let down = objective.loss(&probe)?;
        probe[i] = orig;
        out[i] = (up - down) / (2.0 * step);
    }
    Ok(ParamVector::new(out))
}

/// [`fd_gradient`] applied to the model loss.
pub fn fd_gradient_oracle(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    step: f64,
) -> Result<ParamVector> {
    fd_gradient(&ModelObjective::new(spec, batch), params, step)
}

// ---------------------------------------------------------------------------
// per-architecture kernels

/// Logits of the model on one feature vector (freshly allocated).
pub(crate) fn forward_logits(spec: &ModelSpec, p: &[f64], x: &[f64]) -> Vec<f64> {
    let (d, c) = (spec.input_dim, spec.classes);
    let mut z = vec![0.0; c];
    match spec.architecture {
        Architecture::SoftmaxLr => lr_logits(p, x, d, c, &mut z),
        Architecture::Mlp1 => {
            let h = spec.hidden.unwrap();
            let mut u = vec![0.0; h];
            let mut a = vec![0.0; h];
            mlp_forward(p, x, d, h, c, &mut u, &mut a, &mut z);
        }
    }
    z
}

/// Replaces logits with softmax probabilities, subtracting the max first.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NAN;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sample_nll(z: &[f64], label: usize, sample: usize) -> Result<f64> {
    let lse = log_sum_exp(z);
    if !lse.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite logits at sample {sample}"
        )));
    }
    Ok(-(z[label] - lse).max(LOG_PROB_FLOOR))
}

fn lr_logits(p: &[f64], x: &[f64], d: usize, c: usize, z: &mut [f64]) {
    let bias = c * d;
    for k in 0..c {
        let row = &p[k * d..(k + 1) * d];
        let mut acc = p[bias + k];
        for j in 0..d {
            acc += row[j] * x[j];
        }
        z[k] = acc;
    }
}

fn mlp_forward(
    p: &[f64],
    x: &[f64],
    d: usize,
    h: usize,
    c: usize,
    u: &mut [f64],
    a: &mut [f64],
    z: &mut [f64],
) {
    let b1 = h * d;
    let w2 = b1 + h;
    let b2 = w2 + c * h;
    for l in 0..h {
        let row = &p[l * d..(l + 1) * d];
        let mut acc = p[b1 + l];
        for j in 0..d {
            acc += row[j] * x[j];
        }
        u[l] = acc;
        a[l] = acc.max(0.0);
    }
    for k in 0..c {
        let row = &p[w2 + k * h..w2 + (k + 1) * h];
        let mut acc = p[b2 + k];
        for l in 0..h {
            acc += row[l] * a[l];
        }
        z[k] = acc;
    }
}

/// Softmax probabilities and the finite check shared by the backward and
/// tangent kernels.
fn sample_probs(z: &[f64], prob: &mut [f64], sample: usize) -> Result<()> {
    let lse = log_sum_exp(z);
    if !lse.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite logits at sample {sample}"
        )));
    }
    for (pk, zk) in prob.iter_mut().zip(z) {
        *pk = (zk - lse).exp();
    }
    Ok(())
}

fn lr_gradient(p: &[f64], batch: &Batch, spec: &ModelSpec, out: &mut [f64]) -> Result<()> {
    let (d, c) = (spec.input_dim, spec.classes);
    let bias = c * d;
    let scale = 1.0 / batch.len() as f64;
    let mut z = vec![0.0; c];
    let mut prob = vec![0.0; c];
    for i in 0..batch.len() {
        let x = batch.row(i);
        lr_logits(p, x, d, c, &mut z);
        sample_probs(&z, &mut prob, i)?;
        for k in 0..c {
            let mut e = prob[k];
            if k == batch.label(i) {
                e -= 1.0;
            }
            e *= scale;
            let row = &mut out[k * d..(k + 1) * d];
            for j in 0..d {
                row[j] += e * x[j];
            }
            out[bias + k] += e;
        }
    }
    Ok(())
}

fn mlp_gradient(p: &[f64], batch: &Batch, spec: &ModelSpec, out: &mut [f64]) -> Result<()> {
    let (d, h, c) = (spec.input_dim, spec.hidden.unwrap(), spec.classes);
    let b1 = h * d;
    let w2 = b1 + h;
    let b2 = w2 + c * h;
    let scale = 1.0 / batch.len() as f64;
    let mut u = vec![0.0; h];
    let mut a = vec![0.0; h];
    let mut z = vec![0.0; c];
    let mut prob = vec![0.0; c];
    let mut du = vec![0.0; h];
    for i in 0..batch.len() {
        let x = batch.row(i);
        mlp_forward(p, x, d, h, c, &mut u, &mut a, &mut z);
        sample_probs(&z, &mut prob, i)?;
        du.fill(0.0);
        for k in 0..c {
            let mut e = prob[k];
            if k == batch.label(i) {
                e -= 1.0;
            }
            e *= scale;
            let row = &mut out[w2 + k * h..w2 + (k + 1) * h];
            let w_row = &p[w2 + k * h..w2 + (k + 1) * h];
            for l in 0..h {
                row[l] += e * a[l];
                du[l] += e * w_row[l];
            }
            out[b2 + k] += e;
        }
        for l in 0..h {
            // ReLU passes the error only where the unit was active;
            // the derivative at exactly zero is taken as zero.
            if u[l] <= 0.0 {
                continue;
            }
            let g = du[l];
            let row = &mut out[l * d..(l + 1) * d];
            for j in 0..d {
                row[j] += g * x[j];
            }
            out[b1 + l] += g;
        }
    }
    Ok(())
}

fn lr_hvp(p: &[f64], v: &[f64], batch: &Batch, spec: &ModelSpec, out: &mut [f64]) -> Result<()> {
    let (d, c) = (spec.input_dim, spec.classes);
    let bias = c * d;
    let scale = 1.0 / batch.len() as f64;
    let mut z = vec![0.0; c];
    let mut prob = vec![0.0; c];
    let mut rz = vec![0.0; c];
    for i in 0..batch.len() {
        let x = batch.row(i);
        lr_logits(p, x, d, c, &mut z);
        sample_probs(&z, &mut prob, i)?;
        // tangent of the logits in direction v
        for k in 0..c {
            let row = &v[k * d..(k + 1) * d];
            let mut acc = v[bias + k];
            for j in 0..d {
                acc += row[j] * x[j];
            }
            rz[k] = acc;
        }
        let pv: f64 = prob.iter().zip(&rz).map(|(pk, rk)| pk * rk).sum();
        for k in 0..c {
            let rp = scale * prob[k] * (rz[k] - pv);
            let row = &mut out[k * d..(k + 1) * d];
            for j in 0..d {
                row[j] += rp * x[j];
            }
            out[bias + k] += rp;
        }
    }
    Ok(())
}

fn mlp_hvp(p: &[f64], v: &[f64], batch: &Batch, spec: &ModelSpec, out: &mut [f64]) -> Result<()> {
    let (d, h, c) = (spec.input_dim, spec.hidden.unwrap(), spec.classes);
    let b1 = h * d;
    let w2 = b1 + h;
    let b2 = w2 + c * h;
    let scale = 1.0 / batch.len() as f64;
    let mut u = vec![0.0; h];
    let mut a = vec![0.0; h];
    let mut z = vec![0.0; c];
    let mut prob = vec![0.0; c];
    let mut e = vec![0.0; c];
    let mut ru = vec![0.0; h];
    let mut ra = vec![0.0; h];
    let mut rz = vec![0.0; c];
    let mut rp = vec![0.0; c];
    let mut rdu = vec![0.0; h];
    for i in 0..batch.len() {
        let x = batch.row(i);
        mlp_forward(p, x, d, h, c, &mut u, &mut a, &mut z);
        sample_probs(&z, &mut prob, i)?;
        for k in 0..c {
            e[k] = prob[k];
            if k == batch.label(i) {
                e[k] -= 1.0;
            }
        }
        // forward tangents
        for l in 0..h {
            let row = &v[l * d..(l + 1) * d];
            let mut acc = v[b1 + l];
            for j in 0..d {
                acc += row[j] * x[j];
            }
            ru[l] = acc;
            ra[l] = if u[l] > 0.0 { acc } else { 0.0 };
        }
        for k in 0..c {
            let vw = &v[w2 + k * h..w2 + (k + 1) * h];
            let pw = &p[w2 + k * h..w2 + (k + 1) * h];
            let mut acc = v[b2 + k];
            for l in 0..h {
                acc += vw[l] * a[l] + pw[l] * ra[l];
            }
            rz[k] = acc;
        }
        let pv: f64 = prob.iter().zip(&rz).map(|(pk, rk)| pk * rk).sum();
        for k in 0..c {
            rp[k] = prob[k] * (rz[k] - pv);
        }
        // tangents of the output-layer gradient
        for k in 0..c {
            let row = &mut out[w2 + k * h..w2 + (k + 1) * h];
            for l in 0..h {
                row[l] += scale * (rp[k] * a[l] + e[k] * ra[l]);
            }
            out[b2 + k] += scale * rp[k];
        }
        // tangents of the hidden-layer gradient
        for l in 0..h {
            if u[l] <= 0.0 {
                rdu[l] = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for k in 0..c {
                acc += v[w2 + k * h + l] * e[k] + p[w2 + k * h + l] * rp[k];
            }
            rdu[l] = acc;
        }
        for l in 0..h {
            if u[l] <= 0.0 {
                continue;
            }
            let g = scale * rdu[l];
            let row = &mut out[l * d..(l + 1) * d];
            for j in 0..d {
                row[j] += g * x[j];
            }
            out[b1 + l] += g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, InitScheme};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, dim, labels).unwrap()
    }

    fn assert_close_rel(actual: &ParamVector, expected: &ParamVector, rel: f64, abs_floor: f64) {
        assert_eq!(actual.len(), expected.len());
        for i in 0..actual.len() {
            let (a, b) = (actual[i], expected[i]);
            if a.abs() < abs_floor && b.abs() < abs_floor {
                continue;
            }
            let denom = a.abs().max(b.abs());
            assert!(
                (a - b).abs() <= rel * denom,
                "component {i}: {a} vs {b} (rel err {})",
                (a - b).abs() / denom
            );
        }
    }

    #[test]
    fn zero_params_give_log_class_count_loss() {
        let spec = ModelSpec::softmax_lr(3, 2).with_init(InitScheme::Zeros);
        let params = init_params(&spec, 0).unwrap();
        let batch = Batch::new(vec![0.5, -1.0, 2.0], 3, vec![1]).unwrap();
        let l = loss(&spec, &params, &batch).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lr_gradient_matches_hand_computation() {
        // zero params, x = [1, 2], y = 0: probabilities are 1/2 each, so
        // the error signal is [-1/2, 1/2] and the gradient is e (x) x.
        let spec = ModelSpec::softmax_lr(2, 2).with_init(InitScheme::Zeros);
        let params = init_params(&spec, 0).unwrap();
        let batch = Batch::new(vec![1.0, 2.0], 2, vec![0]).unwrap();
        let g = gradient(&spec, &params, &batch).unwrap();
        let expected = [-0.5, -1.0, 0.5, 1.0, -0.5, 0.5];
        for (a, b) in g.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_lr() {
        let spec = ModelSpec::softmax_lr(5, 3);
        let params = init_params(&spec, 11).unwrap();
        let batch = random_batch(5, 3, 12, 101);
        let g = gradient(&spec, &params, &batch).unwrap();
        let fd = fd_gradient_oracle(&spec, &params, &batch, 1e-5).unwrap();
        assert_close_rel(&g, &fd, 1e-6, 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences_mlp() {
        let spec = ModelSpec::mlp1(6, 5, 4);
        let params = init_params(&spec, 12).unwrap();
        let batch = random_batch(6, 4, 10, 102);
        let g = gradient(&spec, &params, &batch).unwrap();
        let fd = fd_gradient_oracle(&spec, &params, &batch, 1e-5).unwrap();
        assert_close_rel(&g, &fd, 1e-6, 1e-8);
    }

    #[test]
    fn hvp_matches_differenced_gradients() {
        for (spec, seed) in [
            (ModelSpec::softmax_lr(4, 3), 21u64),
            (ModelSpec::mlp1(5, 4, 3), 22u64),
        ] {
            let params = init_params(&spec, seed).unwrap();
            let batch = random_batch(spec.input_dim, spec.classes, 9, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let v = ParamVector::new(
                (0..spec.param_count())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let hv = hessian_vector_product(&spec, &params, &batch, &v).unwrap();

            // central difference of the gradient along v
            let h = 1e-6;
            let mut up = params.clone();
            up.add_scaled(&v, h);
            let mut down = params.clone();
            down.add_scaled(&v, -h);
            let gu = gradient(&spec, &up, &batch).unwrap();
            let gd = gradient(&spec, &down, &batch).unwrap();
            let mut fd = gu.clone();
            fd.add_scaled(&gd, -1.0);
            let fd = fd.scaled(1.0 / (2.0 * h));
            assert_close_rel(&hv, &fd, 1e-5, 1e-8);
        }
    }

    #[test]
    fn hvp_is_symmetric_and_linear() {
        let spec = ModelSpec::mlp1(4, 3, 3);
        let params = init_params(&spec, 31).unwrap();
        let batch = random_batch(4, 3, 8, 301);
        let n = spec.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(302);
        let mut draw = || -> ParamVector {
            ParamVector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let v = draw();
        let w = draw();

        let hv = hessian_vector_product(&spec, &params, &batch, &v).unwrap();
        let hw = hessian_vector_product(&spec, &params, &batch, &w).unwrap();
        // symmetry: w' H v == v' H w
        assert!((w.dot(&hv) - v.dot(&hw)).abs() < 1e-9);

        // linearity: H(2v - 3w) == 2 Hv - 3 Hw
        let mut combo = v.scaled(2.0);
        combo.add_scaled(&w, -3.0);
        let h_combo = hessian_vector_product(&spec, &params, &batch, &combo).unwrap();
        let mut expected = hv.scaled(2.0);
        expected.add_scaled(&hw, -3.0);
        assert!(h_combo.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let spec = ModelSpec::softmax_lr(3, 3);
        let params = init_params(&spec, 5).unwrap();
        let batch = random_batch(3, 3, 4, 50);
        let hv =
            hessian_vector_product(&spec, &params, &batch, &ParamVector::zeros(params.len()))
                .unwrap();
        assert!(hv.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_of_concatenation_is_weighted_mean() {
        let spec = ModelSpec::mlp1(4, 3, 3);
        let params = init_params(&spec, 7).unwrap();
        let a = random_batch(4, 3, 5, 71);
        let b = random_batch(4, 3, 9, 72);
        let la = loss(&spec, &params, &a).unwrap();
        let lb = loss(&spec, &params, &b).unwrap();
        let lab = loss(&spec, &params, &a.concat(&b).unwrap()).unwrap();
        let expected = (5.0 * la + 9.0 * lb) / 14.0;
        assert!((lab - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_clamps_vanishing_probabilities() {
        // logits [-100, 100] put the true class 200 nats under the winner;
        // the floored log-probability keeps the loss at exactly 50.
        let spec = ModelSpec::softmax_lr(1, 2).with_init(InitScheme::Zeros);
        let params = ParamVector::new(vec![-100.0, 100.0, 0.0, 0.0]);
        let batch = Batch::new(vec![1.0], 1, vec![0]).unwrap();
        assert_eq!(loss(&spec, &params, &batch).unwrap(), 50.0);
    }

    #[test]
    fn dimension_mismatches_are_config_errors() {
        let spec = ModelSpec::softmax_lr(3, 2);
        let params = init_params(&spec, 1).unwrap();
        let short = ParamVector::zeros(spec.param_count() - 1);
        let batch = random_batch(3, 2, 2, 9);
        assert!(matches!(
            loss(&spec, &short, &batch),
            Err(Error::Config(_))
        ));

        let wrong_dim = random_batch(4, 2, 2, 9);
        assert!(matches!(
            loss(&spec, &params, &wrong_dim),
            Err(Error::Config(_))
        ));

        let bad_label = Batch::new(vec![1.0, 0.0, 0.0], 3, vec![2]).unwrap();
        assert!(matches!(
            loss(&spec, &params, &bad_label),
            Err(Error::Config(_))
        ));

        let short_v = ParamVector::zeros(3);
        assert!(matches!(
            hessian_vector_product(&spec, &params, &batch, &short_v),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_features_name_the_sample() {
        let spec = ModelSpec::softmax_lr(2, 2);
        let params = init_params(&spec, 3).unwrap();
        let batch = Batch::new(vec![1.0, 0.0, f64::NAN, 1.0], 2, vec![0, 1]).unwrap();
        match loss(&spec, &params, &batch) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("sample 1"), "{msg}"),
            other => panic!("expected numerical error, got {other:?}"),
        }
        assert!(matches!(
            gradient(&spec, &params, &batch),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn fd_gradient_rejects_bad_step() {
        let spec = ModelSpec::softmax_lr(2, 2);
        let params = init_params(&spec, 3).unwrap();
        let batch = random_batch(2, 2, 2, 4);
        for step in [0.0, -1e-5, f64::NAN] {
            assert!(matches!(
                fd_gradient_oracle(&spec, &params, &batch, step),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn quadratic_surrogate_has_identity_hessian() {
        let q = QuadraticLoss::new(vec![1.0, -2.0]);
        let theta = ParamVector::new(vec![0.0, 0.0]);
        assert!((q.loss(&theta).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(q.gradient(&theta).unwrap().as_slice(), &[-1.0, 2.0]);
        let v = ParamVector::new(vec![3.0, 4.0]);
        assert_eq!(q.hessian_vector_product(&theta, &v).unwrap(), v);
    }

    #[test]
    fn linear_surrogate_has_zero_hessian() {
        let l = LinearLoss::new(vec![2.0, -1.0]);
        let theta = ParamVector::new(vec![5.0, 5.0]);
        assert!((l.loss(&theta).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(l.gradient(&theta).unwrap().as_slice(), &[2.0, -1.0]);
        let v = ParamVector::new(vec![3.0, 4.0]);
        assert_eq!(
            l.hessian_vector_product(&theta, &v).unwrap().as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn batch_select_copies_rows_in_order() {
        let batch = Batch::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, vec![0, 1, 2]).unwrap();
        let picked = batch.select(&[2, 0]);
        assert_eq!(picked.len(), 2);
        assert_eq!(picked.row(0), &[5.0, 6.0]);
        assert_eq!(picked.row(1), &[1.0, 2.0]);
        assert_eq!(picked.labels(), &[2, 0]);
    }

    #[test]
    fn batch_new_validates_shape() {
        assert!(Batch::new(vec![1.0, 2.0], 2, vec![]).is_err());
        assert!(Batch::new(vec![1.0, 2.0, 3.0], 2, vec![0, 1]).is_err());
        assert!(Batch::new(vec![], 0, vec![0]).is_err());
    }

    proptest! {
        // The analytic gradient must track finite differences on random
        // small problems, not just on the fixed seeds above.
        #[test]
        fn prop_gradient_tracks_fd(
            dim in 1usize..4,
            classes in 2usize..4,
            n in 1usize..5,
            seed in 0u64..1_000,
        ) {
            let spec = ModelSpec::softmax_lr(dim, classes);
            let params = init_params(&spec, seed).unwrap();
            let batch = random_batch(dim, classes, n, seed.wrapping_add(7));
            let g = gradient(&spec, &params, &batch).unwrap();
            let fd = fd_gradient_oracle(&spec, &params, &batch, 1e-5).unwrap();
            for i in 0..g.len() {
                let (a, b) = (g[i], fd[i]);
                if a.abs() < 1e-8 && b.abs() < 1e-8 {
                    continue;
                }
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }
}
