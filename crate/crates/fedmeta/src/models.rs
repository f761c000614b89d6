//! Two small softmax classifiers over flat parameter vectors.
//!
//! Parameters live in one contiguous `ParamVector` so that meta-gradient
//! algebra stays plain vector arithmetic. Layout is row-major weights
//! followed by biases, layer by layer:
//!
//! - `SoftmaxLr`:  `[W (C x d), b (C)]`
//! - `Mlp1`:       `[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{forward_logits, softmax_in_place, ParamVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Multinomial logistic regression: logits = W x + b.
    SoftmaxLr,
    /// One ReLU hidden layer: logits = W2 relu(W1 x + b1) + b2.
    Mlp1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Zeros,
    /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    #[default]
    UniformScaled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub classes: usize,
    /// Hidden width; `Mlp1` only.
    pub hidden: Option<usize>,
    pub init: InitScheme,
}

impl ModelSpec {
    pub fn softmax_lr(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::SoftmaxLr,
            input_dim,
            classes,
            hidden: None,
            init: InitScheme::default(),
        }
    }

    pub fn mlp1(input_dim: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp1,
            input_dim,
            classes,
            hidden: Some(hidden),
            init: InitScheme::default(),
        }
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model input_dim must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        match self.architecture {
            Architecture::SoftmaxLr => {
                if self.hidden.is_some() {
                    return Err(Error::Config(
                        "model.hidden only applies to the mlp1 architecture".into(),
                    ));
                }
            }
            Architecture::Mlp1 => {
                if self.hidden.map_or(true, |h| h == 0) {
                    return Err(Error::Config(
                        "mlp1 architecture needs model.hidden >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.input_dim;
        let c = self.classes;
        match self.architecture {
            Architecture::SoftmaxLr => d * c + c,
            Architecture::Mlp1 => {
                let h = self.hidden.unwrap_or(0);
                d * h + h + h * c + c
            }
        }
    }

    /// Multiply-accumulate count of one forward pass on one sample.
    pub(crate) fn macs_per_sample(&self) -> u64 {
        let d = self.input_dim as u64;
        let c = self.classes as u64;
        match self.architecture {
            Architecture::SoftmaxLr => d * c,
            Architecture::Mlp1 => {
                let h = self.hidden.unwrap_or(0) as u64;
                d * h + h * c
            }
        }
    }
}

/// Draws the initial parameter vector for `spec` from its init scheme.
/// The same seed always yields the same vector.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut values = vec![0.0; spec.param_count()];
    if spec.init == InitScheme::UniformScaled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.input_dim;
        let c = spec.classes;
        match spec.architecture {
            Architecture::SoftmaxLr => {
                fill_uniform(&mut values[..d * c], d, c, &mut rng);
            }
            Architecture::Mlp1 => {
                let h = spec.hidden.unwrap_or(0);
                fill_uniform(&mut values[..d * h], d, h, &mut rng);
                let w2 = d * h + h;
                fill_uniform(&mut values[w2..w2 + h * c], h, c, &mut rng);
            }
        }
    }
    Ok(ParamVector::new(values))
}

fn fill_uniform(dst: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in dst.iter_mut() {
        *v = rng.random_range(-limit..=limit);
    }
}

/// Class probabilities for one feature vector. Softmax is computed with
/// max subtraction, so large logits cannot overflow.
pub fn predict(spec: &ModelSpec, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has length {}, model needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    if features.len() != spec.input_dim {
        return Err(Error::Config(format!(
            "feature vector has length {}, model takes {}",
            features.len(),
            spec.input_dim
        )));
    }
    let mut probs = forward_logits(spec, params.as_slice(), features);
    softmax_in_place(&mut probs);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical(
            "non-finite prediction; check feature values".into(),
        ));
    }
    Ok(probs)
}

/// Most probable class; ties resolve to the lowest index.
pub fn classify(spec: &ModelSpec, params: &ParamVector, features: &[f64]) -> Result<usize> {
    let probs = predict(spec, params, features)?;
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = k;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(ModelSpec::softmax_lr(10, 5).param_count(), 55);
        assert_eq!(ModelSpec::mlp1(10, 8, 5).param_count(), 133);
        assert_eq!(ModelSpec::softmax_lr(1, 2).param_count(), 4);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        assert!(ModelSpec::softmax_lr(0, 3).validate().is_err());
        assert!(ModelSpec::softmax_lr(3, 1).validate().is_err());
        assert!(ModelSpec::mlp1(3, 0, 2).validate().is_err());
        let mut stray = ModelSpec::softmax_lr(3, 2);
        stray.hidden = Some(4);
        assert!(stray.validate().is_err());
    }

    #[test]
    fn zeros_init_gives_uniform_prediction() {
        let spec = ModelSpec::mlp1(6, 4, 5).with_init(InitScheme::Zeros);
        let params = init_params(&spec, 0).unwrap();
        assert!(params.as_slice().iter().all(|&v| v == 0.0));
        let probs = predict(&spec, &params, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        for p in probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_init_is_bounded_and_deterministic() {
        let spec = ModelSpec::mlp1(10, 8, 5);
        let a = init_params(&spec, 42).unwrap();
        let b = init_params(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 43).unwrap());

        let h = 8;
        let d = 10;
        let c = 5;
        let w1_limit = (6.0 / (d + h) as f64).sqrt();
        let w2_limit = (6.0 / (h + c) as f64).sqrt();
        let v = a.as_slice();
        assert!(v[..d * h].iter().all(|x| x.abs() <= w1_limit));
        assert!(v[d * h..d * h + h].iter().all(|&x| x == 0.0));
        let w2 = d * h + h;
        assert!(v[w2..w2 + h * c].iter().all(|x| x.abs() <= w2_limit));
        assert!(v[w2 + h * c..].iter().all(|&x| x == 0.0));
        // some weight must be nonzero
        assert!(v.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn predict_probabilities_sum_to_one() {
        let spec = ModelSpec::softmax_lr(4, 3);
        let params = init_params(&spec, 9).unwrap();
        let probs = predict(&spec, &params, &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn classify_breaks_ties_toward_lowest_index() {
        let spec = ModelSpec::softmax_lr(2, 4).with_init(InitScheme::Zeros);
        let params = init_params(&spec, 0).unwrap();
        // zero parameters give identical logits for every class
        assert_eq!(classify(&spec, &params, &[1.0, 1.0]).unwrap(), 0);
    }

    #[test]
    fn predict_rejects_wrong_feature_length() {
        let spec = ModelSpec::softmax_lr(4, 3);
        let params = init_params(&spec, 1).unwrap();
        assert!(matches!(
            predict(&spec, &params, &[1.0, 2.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_rejects_wrong_param_length() {
        let spec = ModelSpec::softmax_lr(4, 3);
        let params = ParamVector::zeros(7);
        assert!(matches!(
            predict(&spec, &params, &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::Config(_))
        ));
    }
}
