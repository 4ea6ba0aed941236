//! Training losses: cross-entropy on the bin classifier, the mean and
//! variance penalties on the posterior's age expectation, the per-bin
//! ensemble L2 on the local estimates, and their weighted total.
//!
//! Conventions kept throughout: the mean term carries its 1/(2N) factor
//! verbatim; bin center values (not indices) enter every expectation, which
//! coincides with index arithmetic for unit bins starting at 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::AgeBins;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub cross_entropy: f64,
    pub mean: f64,
    pub variance: f64,
    pub ensemble: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cross_entropy: 0.2,
            mean: 0.05,
            variance: 1.0,
            ensemble: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cross_entropy, self.mean, self.variance, self.ensemble];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// How samples are assigned to per-bin regressors in the ensemble loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Assignment {
    /// Posterior-weighted: every bin's squared error counts, weighted by
    /// that bin's probability. Aligns training with expectation inference.
    Soft,
    /// Only the true bin's regressor sees each sample, unweighted.
    Hard,
}

impl Default for L2Assignment {
    fn default() -> Self {
        L2Assignment::Soft
    }
}

/// Ground truth for one batch: real ages and their nearest bin indices.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub ages: Vec<f64>,
    pub bin_indices: Vec<usize>,
}

impl BatchLabels {
    pub fn from_ages(ages: &[f64], bins: &AgeBins) -> Self {
        BatchLabels {
            ages: ages.to_vec(),
            bin_indices: ages.iter().map(|&a| bins.nearest_index(a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    fn ages_column(&self) -> Tensor {
        Tensor::new(self.ages.clone(), vec![self.ages.len(), 1]).expect("ages column shape")
    }
}

/// Mean cross-entropy of `[N,C]` logits against the true bin indices.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, bin_indices: &[usize]) -> Result<Tensor> {
    tape.cross_entropy_mean(logits, bin_indices)
}

/// Squared error of the posterior's expected age against the true age,
/// `(1/2N)·Σᵢ (Σ_c p_ic·a_c − aᵢ⁰)²`.
pub fn mean_loss(
    tape: &mut Tape,
    posteriors: &Tensor,
    bins: &AgeBins,
    labels: &BatchLabels,
) -> Result<Tensor> {
    let n = check_batch("mean_loss", posteriors, bins, labels)?;
    let centers_col = Tensor::new(bins.values().to_vec(), vec![bins.count(), 1])?;
    let expectation = tape.matmul(posteriors, &centers_col)?; // [N,1]
    let diff = tape.sub(&expectation, &labels.ages_column())?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq)?;
    tape.scale(&total, 1.0 / (2.0 * n as f64))
}

/// Mean posterior variance of the age estimate,
/// `(1/N)·Σᵢ Σ_c p_ic·(a_c − Σⱼ aⱼ·p_ij)²`.
pub fn variance_loss(tape: &mut Tape, posteriors: &Tensor, bins: &AgeBins) -> Result<Tensor> {
    let shape = posteriors.shape();
    if shape.len() != 2 || shape[1] != bins.count() {
        return Err(Error::Shape {
            op: "variance_loss",
            left: shape,
            right: vec![bins.count()],
        });
    }
    let n = shape[0];
    let centers_col = Tensor::new(bins.values().to_vec(), vec![bins.count(), 1])?;
    let mean = tape.matmul(posteriors, &centers_col)?; // [N,1]
    let deviations = tape.row_minus_col(&bins.centers_tensor(), &mean)?; // [N,C]
    let dev_sq = tape.mul(&deviations, &deviations)?;
    let weighted = tape.mul(posteriors, &dev_sq)?;
    let total = tape.sum(&weighted)?;
    tape.scale(&total, 1.0 / n as f64)
}

/// Ensemble loss over the per-bin local estimates `a_c + r_ic`.
///
/// Soft assignment: `(1/N)·Σᵢ Σ_c p_ic·(a_c + r_ic − aᵢ⁰)²` — the expected
/// squared error of expectation inference. Hard assignment: only the true
/// bin contributes, unweighted.
pub fn ensemble_l2(
    tape: &mut Tape,
    posteriors: &Tensor,
    residuals: &Tensor,
    bins: &AgeBins,
    labels: &BatchLabels,
    assignment: L2Assignment,
) -> Result<Tensor> {
    let n = check_batch("ensemble_l2", posteriors, bins, labels)?;
    if residuals.shape() != posteriors.shape() {
        return Err(Error::Shape {
            op: "ensemble_l2",
            left: residuals.shape(),
            right: posteriors.shape(),
        });
    }
    // offsets[i][c] = a_c − aᵢ⁰, so local-estimate error = r_ic + offsets.
    let offsets = tape.row_minus_col(&bins.centers_tensor(), &labels.ages_column())?;
    let errors = tape.add(residuals, &offsets)?;
    match assignment {
        L2Assignment::Soft => {
            let sq = tape.mul(&errors, &errors)?;
            let weighted = tape.mul(posteriors, &sq)?;
            let total = tape.sum(&weighted)?;
            tape.scale(&total, 1.0 / n as f64)
        }
        L2Assignment::Hard => {
            let picked = tape.gather_cols(&errors, &labels.bin_indices)?;
            let sq = tape.mul(&picked, &picked)?;
            let total = tape.sum(&sq)?;
            tape.scale(&total, 1.0 / n as f64)
        }
    }
}

/// Weighted sum of the four scalar terms.
pub fn total_loss(
    tape: &mut Tape,
    ce: &Tensor,
    lm: &Tensor,
    lv: &Tensor,
    l2: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    for (name, term) in [("ce", ce), ("lm", lm), ("lv", lv), ("l2", l2)] {
        let v = term.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "total_loss",
                detail: format!("term {name} is {v}"),
            });
        }
    }
    let a = tape.scale(ce, weights.cross_entropy)?;
    let b = tape.scale(lm, weights.mean)?;
    let c = tape.scale(lv, weights.variance)?;
    let d = tape.scale(l2, weights.ensemble)?;
    let ab = tape.add(&a, &b)?;
    let cd = tape.add(&c, &d)?;
    tape.add(&ab, &cd)
}

fn check_batch(
    op: &'static str,
    posteriors: &Tensor,
    bins: &AgeBins,
    labels: &BatchLabels,
) -> Result<usize> {
    let shape = posteriors.shape();
    if shape.len() != 2 || shape[1] != bins.count() {
        return Err(Error::Shape {
            op,
            left: shape,
            right: vec![bins.count()],
        });
    }
    if shape[0] != labels.len() {
        return Err(Error::Shape {
            op,
            left: shape,
            right: vec![labels.len()],
        });
    }
    if labels.bin_indices.iter().any(|&i| i >= bins.count()) {
        return Err(Error::contract(format!("{op}: bin index out of range")));
    }
    Ok(shape[0])
}
