//! Hierarchical prediction head: a classifier producing a posterior over
//! discrete age bins, and one residual regressor per bin. The age estimate
//! is the posterior-weighted sum of per-bin local estimates `a_c + r_c`,
//! which for a one-hot posterior reduces to the single local estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Discrete age bin centers, strictly increasing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgeBins {
    values: Vec<f64>,
    bin_size: f64,
}

impl AgeBins {
    pub fn new(values: Vec<f64>, bin_size: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::config("age bins need at least 2 centers".to_string()));
        }
        if bin_size <= 0.0 {
            return Err(Error::config(format!("bin_size must be positive, got {bin_size}")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("age bin centers must be strictly increasing".to_string()));
        }
        Ok(AgeBins { values, bin_size })
    }

    /// Evenly spaced centers `start, start+size, ...` (`count` of them).
    pub fn regular(start: f64, bin_size: f64, count: usize) -> Result<Self> {
        let values = (0..count).map(|i| start + bin_size * i as f64).collect();
        AgeBins::new(values, bin_size)
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    pub fn center(&self, index: usize) -> Result<f64> {
        self.values.get(index).copied().ok_or_else(|| {
            Error::contract(format!(
                "bin index {index} out of range for {} bins",
                self.values.len()
            ))
        })
    }

    /// Index of the center closest to `age`; ties resolve to the lower index.
    pub fn nearest_index(&self, age: f64) -> usize {
        let mut best = 0;
        let mut best_dist = (self.values[0] - age).abs();
        for (i, &c) in self.values.iter().enumerate().skip(1) {
            let dist = (c - age).abs();
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    /// Constant tensor of the centers, for use inside loss graphs.
    pub fn centers_tensor(&self) -> Tensor {
        Tensor::new(self.values.clone(), vec![self.values.len()]).expect("bin centers shape")
    }
}

/// Validated probability vector over age bins.
#[derive(Debug, Clone, PartialEq)]
pub struct AgePosterior {
    probs: Vec<f64>,
}

impl AgePosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract(
                "posterior probabilities must be finite and non-negative".to_string(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "posterior must sum to 1 within 1e-9, got {total}"
            )));
        }
        Ok(AgePosterior { probs })
    }

    /// Stable softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite {
                op: "posterior_from_logits",
                detail: "logits contain a non-finite value".to_string(),
            });
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        AgePosterior::new(exps.into_iter().map(|e| e / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Classifier and regressor ensemble over the same fused embedding. Both
/// branches are single affine maps d → C; depth lives in the encoder.
pub struct HeadParams {
    pub classifier_weight: Tensor, // [d, C]
    pub classifier_bias: Tensor,   // [C]
    pub regressor_weight: Tensor,  // [d, C]
    pub regressor_bias: Tensor,    // [C]
}

impl HeadParams {
    pub fn init(model_dim: usize, num_bins: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (model_dim + num_bins) as f64).sqrt();
        let weight = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let values = (0..model_dim * num_bins)
                .map(|_| rand::Rng::gen_range(rng, -limit..limit))
                .collect();
            Tensor::param(values, vec![model_dim, num_bins])
        };
        Ok(HeadParams {
            classifier_weight: weight(&mut rng)?,
            classifier_bias: Tensor::param(vec![0.0; num_bins], vec![num_bins])?,
            regressor_weight: weight(&mut rng)?,
            regressor_bias: Tensor::param(vec![0.0; num_bins], vec![num_bins])?,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.classifier_bias.len()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("head.classifier_weight".to_string(), self.classifier_weight.clone()),
            ("head.classifier_bias".to_string(), self.classifier_bias.clone()),
            ("head.regressor_weight".to_string(), self.regressor_weight.clone()),
            ("head.regressor_bias".to_string(), self.regressor_bias.clone()),
        ]
    }
}

/// Raw classifier logits for one fused embedding.
pub fn classify(tape: &mut Tape, head: &HeadParams, fused: &Tensor) -> Result<Tensor> {
    let z = tape.matmul(fused, &head.classifier_weight)?;
    tape.add(&z, &head.classifier_bias)
}

/// Classifier logits for a batch of embeddings, `[N,d] -> [N,C]`.
pub fn classify_batch(tape: &mut Tape, head: &HeadParams, fused: &Tensor) -> Result<Tensor> {
    let z = tape.matmul(fused, &head.classifier_weight)?;
    tape.add_row(&z, &head.classifier_bias)
}

/// Residual regressor outputs for one fused embedding: coordinate c is
/// the offset this bin's regressor predicts from its center.
pub fn residuals(tape: &mut Tape, head: &HeadParams, fused: &Tensor) -> Result<Tensor> {
    let r = tape.matmul(fused, &head.regressor_weight)?;
    tape.add(&r, &head.regressor_bias)
}

/// Residuals for a batch of embeddings, `[N,d] -> [N,C]`.
pub fn residuals_batch(tape: &mut Tape, head: &HeadParams, fused: &Tensor) -> Result<Tensor> {
    let r = tape.matmul(fused, &head.regressor_weight)?;
    tape.add_row(&r, &head.regressor_bias)
}

/// Local estimate of bin c: its center plus that bin's residual.
pub fn local_estimate(bin_index: usize, residual: f64, bins: &AgeBins) -> Result<f64> {
    Ok(bins.center(bin_index)? + residual)
}

/// Expectation inference: the posterior-weighted sum of local estimates.
pub fn infer_age(posterior: &AgePosterior, residuals: &[f64], bins: &AgeBins) -> Result<f64> {
    if posterior.len() != bins.count() || residuals.len() != bins.count() {
        return Err(Error::contract(format!(
            "infer_age length mismatch: posterior {}, residuals {}, bins {}",
            posterior.len(),
            residuals.len(),
            bins.count()
        )));
    }
    Ok(posterior
        .probs()
        .iter()
        .zip(residuals)
        .zip(bins.values())
        .map(|((p, r), a)| p * (a + r))
        .sum())
}

/// Differentiable expectation inference over tape tensors; gradients flow
/// through both the posterior and the residuals.
pub fn infer_age_node(
    tape: &mut Tape,
    posterior: &Tensor,
    residuals: &Tensor,
    bins: &AgeBins,
) -> Result<Tensor> {
    if posterior.shape() != vec![bins.count()] || residuals.shape() != vec![bins.count()] {
        return Err(Error::contract(format!(
            "infer_age_node expects length-{} vectors, got {:?} and {:?}",
            bins.count(),
            posterior.shape(),
            residuals.shape()
        )));
    }
    let centers = bins.centers_tensor();
    let locals = tape.add(residuals, &centers)?;
    let weighted = tape.mul(posterior, &locals)?;
    tape.sum(&weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bins_must_increase() {
        assert!(AgeBins::new(vec![1.0, 1.0, 2.0], 1.0).is_err());
        assert!(AgeBins::new(vec![1.0], 1.0).is_err());
        assert!(AgeBins::regular(1.0, 1.0, 75).is_ok());
    }

    #[test]
    fn nearest_index_ties_go_low() {
        let bins = AgeBins::regular(10.0, 10.0, 3).unwrap(); // {10, 20, 30}
        assert_eq!(bins.nearest_index(14.9), 0);
        assert_eq!(bins.nearest_index(15.0), 0);
        assert_eq!(bins.nearest_index(15.1), 1);
        assert_eq!(bins.nearest_index(99.0), 2);
        assert_eq!(bins.nearest_index(-5.0), 0);
    }

    #[test]
    fn posterior_validation() {
        assert!(AgePosterior::new(vec![0.5, 0.5]).is_ok());
        assert!(AgePosterior::new(vec![0.5, 0.6]).is_err());
        assert!(AgePosterior::new(vec![1.5, -0.5]).is_err());
        assert!(AgePosterior::from_logits(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn zero_classifier_gives_uniform_posterior() {
        let mut tape = Tape::inactive();
        let head = HeadParams {
            classifier_weight: Tensor::param(vec![0.0; 12], vec![4, 3]).unwrap(),
            classifier_bias: Tensor::param(vec![0.0; 3], vec![3]).unwrap(),
            regressor_weight: Tensor::param(vec![0.0; 12], vec![4, 3]).unwrap(),
            regressor_bias: Tensor::param(vec![0.0; 3], vec![3]).unwrap(),
        };
        let fused = Tensor::new(vec![1.0, -2.0, 0.5, 3.0], vec![4]).unwrap();
        let logits = classify(&mut tape, &head, &fused).unwrap();
        assert_eq!(logits.to_vec(), vec![0.0; 3]);
        let posterior = AgePosterior::from_logits(&logits.to_vec()).unwrap();
        for p in posterior.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logit_gap_concentrates_posterior() {
        let posterior = AgePosterior::from_logits(&[50.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(posterior.probs()[0] >= 1.0 - 1e-15);
        for p in &posterior.probs()[1..] {
            assert!(*p < 1e-20);
        }
    }

    #[test]
    fn classifier_ce_gradient_matches_fd() {
        let head = HeadParams::init(4, 5, 31).unwrap();
        let fused = {
            let mut r = rng(32);
            Tensor::new((0..4).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![4]).unwrap()
        };
        let params = vec![head.classifier_weight.clone(), head.classifier_bias.clone()];
        let err = grad_check(
            move |tape| {
                let logits = classify(tape, &head, &fused)?;
                let as_row = tape.stack_rows(&[&logits])?;
                tape.cross_entropy_mean(&as_row, &[2])
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn residuals_zero_and_bias_only() {
        let mut tape = Tape::inactive();
        let mut head = HeadParams::init(4, 3, 33).unwrap();
        head.regressor_weight = Tensor::param(vec![0.0; 12], vec![4, 3]).unwrap();
        head.regressor_bias = Tensor::param(vec![0.0; 3], vec![3]).unwrap();
        let fused = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![4]).unwrap();
        assert_eq!(residuals(&mut tape, &head, &fused).unwrap().to_vec(), vec![0.0; 3]);

        head.regressor_bias = Tensor::param(vec![-0.4, 0.2, 1.1], vec![3]).unwrap();
        let r = residuals(&mut tape, &head, &fused).unwrap();
        assert_eq!(r.to_vec(), vec![-0.4, 0.2, 1.1]);
    }

    #[test]
    fn residuals_match_independent_affine_evaluation() {
        let mut tape = Tape::inactive();
        let head = HeadParams::init(4, 3, 34).unwrap();
        let mut r = rng(35);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fused = Tensor::new(x.clone(), vec![4]).unwrap();
        let got = residuals(&mut tape, &head, &fused).unwrap().to_vec();

        let w = head.regressor_weight.to_vec();
        let b = head.regressor_bias.to_vec();
        for c in 0..3 {
            let expected: f64 = (0..4).map(|i| x[i] * w[i * 3 + c]).sum::<f64>() + b[c];
            assert!((got[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn local_estimate_arithmetic() {
        let bins = AgeBins::regular(1.0, 1.0, 75).unwrap();
        assert_eq!(local_estimate(29, 0.0, &bins).unwrap(), 30.0);
        assert_eq!(local_estimate(29, -0.4, &bins).unwrap(), 29.6);
        assert!(local_estimate(80, 0.0, &bins).is_err());
    }

    #[test]
    fn local_estimate_brute_force_table() {
        let bins = AgeBins::regular(16.0, 1.0, 60).unwrap();
        let mut r = rng(36);
        let res: Vec<f64> = (0..60).map(|_| r.gen_range(-3.0..3.0)).collect();
        for (c, &rc) in res.iter().enumerate() {
            let expected = bins.values()[c] + rc;
            assert_eq!(local_estimate(c, rc, &bins).unwrap(), expected);
        }
    }

    #[test]
    fn one_hot_posterior_reduces_to_local_estimate() {
        let bins = AgeBins::regular(1.0, 1.0, 5).unwrap();
        let mut r = rng(37);
        let res: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        for c in 0..5 {
            let mut p = vec![0.0; 5];
            p[c] = 1.0;
            let posterior = AgePosterior::new(p).unwrap();
            let age = infer_age(&posterior, &res, &bins).unwrap();
            assert_eq!(age, bins.values()[c] + res[c]);
        }
    }

    #[test]
    fn uniform_posterior_over_paper_bins_is_38() {
        let bins = AgeBins::regular(1.0, 1.0, 75).unwrap();
        let posterior = AgePosterior::new(vec![1.0 / 75.0; 75]).unwrap();
        let age = infer_age(&posterior, &vec![0.0; 75], &bins).unwrap();
        assert!((age - 38.0).abs() < 1e-12);
    }

    #[test]
    fn infer_age_matches_brute_force() {
        let bins = AgeBins::regular(10.0, 2.5, 5).unwrap();
        let mut r = rng(38);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
            let posterior = AgePosterior::from_logits(&logits).unwrap();
            let res: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
            let got = infer_age(&posterior, &res, &bins).unwrap();
            let mut expected = 0.0;
            for c in 0..5 {
                expected += posterior.probs()[c] * (bins.values()[c] + res[c]);
            }
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_age_is_shift_invariant_in_logits() {
        let bins = AgeBins::regular(1.0, 1.0, 6).unwrap();
        let mut r = rng(39);
        let logits: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let res: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let base = infer_age(&AgePosterior::from_logits(&logits).unwrap(), &res, &bins).unwrap();
        for shift in [-100.0, -1.0, 0.3, 57.0] {
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let got = infer_age(&AgePosterior::from_logits(&shifted).unwrap(), &res, &bins).unwrap();
            assert!((got - base).abs() < 1e-12, "shift {shift}: {got} vs {base}");
        }
    }

    #[test]
    fn infer_age_stays_within_local_estimate_envelope() {
        let bins = AgeBins::regular(16.0, 1.0, 8).unwrap();
        let mut r = rng(40);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..8).map(|_| r.gen_range(-4.0..4.0)).collect();
            let posterior = AgePosterior::from_logits(&logits).unwrap();
            let res: Vec<f64> = (0..8).map(|_| r.gen_range(-5.0..5.0)).collect();
            let locals: Vec<f64> = bins.values().iter().zip(&res).map(|(a, r)| a + r).collect();
            let lo = locals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = locals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let age = infer_age(&posterior, &res, &bins).unwrap();
            assert!(age >= lo - 1e-12 && age <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_residuals_give_posterior_expectation() {
        let bins = AgeBins::regular(1.0, 1.0, 5).unwrap();
        let posterior = AgePosterior::new(vec![0.1, 0.2, 0.3, 0.25, 0.15]).unwrap();
        let age = infer_age(&posterior, &vec![0.0; 5], &bins).unwrap();
        let expected: f64 = posterior
            .probs()
            .iter()
            .zip(bins.values())
            .map(|(p, a)| p * a)
            .sum();
        assert!((age - expected).abs() < 1e-15);
    }

    #[test]
    fn gradients_reach_both_branches_from_inferred_age() {
        let bins = AgeBins::regular(1.0, 1.0, 5).unwrap();
        let head = HeadParams::init(4, 5, 41).unwrap();
        let mut r = rng(42);
        let fused = Tensor::new((0..4).map(|_| r.gen_range(-1.0..1.0)).collect(), vec![4]).unwrap();

        let mut tape = Tape::new();
        let logits = classify(&mut tape, &head, &fused).unwrap();
        let posterior = tape.softmax(&logits).unwrap();
        let res = residuals(&mut tape, &head, &fused).unwrap();
        let age = infer_age_node(&mut tape, &posterior, &res, &bins).unwrap();
        let target = Tensor::scalar(30.0);
        let loss = tape.squared_error(&age, &target).unwrap();
        tape.backward(&loss).unwrap();

        let norm = |t: &Tensor| t.grad_or_zeros().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm(&head.classifier_weight) > 0.0);
        assert!(norm(&head.regressor_weight) > 0.0);
    }
}
