//! Analysis formulas: per-token score, rank correlation between judges, and
//! the label-noise correction used to reason about self-generated relevance
//! labels.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Overall score (percent) earned per generated token.
pub fn per_token_score<T: Scalar>(overall_pct: T, avg_tokens: T) -> Result<T> {
    if avg_tokens <= T::zero() {
        return Err(CoreError::invalid(format!(
            "average tokens per turn must be positive, got {avg_tokens}"
        )));
    }
    Ok(overall_pct / avg_tokens)
}

/// Ranks `1..=n` over a fixed list of models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct RankVector(Vec<u32>);

impl RankVector {
    pub fn new(ranks: Vec<u32>) -> Result<Self> {
        let n = ranks.len();
        let mut seen = vec![false; n];
        for &r in &ranks {
            let idx = (r as usize).checked_sub(1).filter(|&i| i < n);
            match idx {
                Some(i) if !seen[i] => seen[i] = true,
                _ => {
                    return Err(CoreError::invalid(format!(
                        "{ranks:?} is not a permutation of 1..={n}"
                    )))
                }
            }
        }
        Ok(RankVector(ranks))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ranks(&self) -> &[u32] {
        &self.0
    }

    pub fn reversed(&self) -> RankVector {
        let n = self.0.len() as u32;
        RankVector(self.0.iter().map(|r| n + 1 - r).collect())
    }
}

impl TryFrom<Vec<u32>> for RankVector {
    type Error = CoreError;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        RankVector::new(v)
    }
}

impl From<RankVector> for Vec<u32> {
    fn from(r: RankVector) -> Self {
        r.0
    }
}

/// Spearman rank correlation for tie-free rankings.
pub fn spearman<T: Scalar>(a: &RankVector, b: &RankVector) -> Result<T> {
    if a.len() != b.len() {
        return Err(CoreError::invalid(format!(
            "rank vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as i64;
    if n < 2 {
        return Err(CoreError::invalid("spearman needs at least two ranks"));
    }
    let d2: i64 = a
        .ranks()
        .iter()
        .zip(b.ranks())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            d * d
        })
        .sum();
    Ok(T::one() - T::from_ratio(6 * d2, n * (n * n - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Irrelevant,
    Relevant,
}

impl Label {
    pub fn flipped(self) -> Label {
        match self {
            Label::Irrelevant => Label::Relevant,
            Label::Relevant => Label::Irrelevant,
        }
    }
}

/// Class-conditional flip rates of an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel<T> {
    /// Probability of labeling Relevant when the truth is Irrelevant.
    pub rho_minus: T,
    /// Probability of labeling Irrelevant when the truth is Relevant.
    pub rho_plus: T,
}

impl<T: Scalar> NoiseModel<T> {
    pub fn new(rho_minus: T, rho_plus: T) -> Result<Self> {
        if rho_minus < T::zero() || rho_plus < T::zero() {
            return Err(CoreError::invalid("noise rates must be nonnegative"));
        }
        if rho_minus + rho_plus >= T::one() {
            return Err(CoreError::invalid(format!(
                "rho_minus + rho_plus = {} must be below 1",
                rho_minus + rho_plus
            )));
        }
        Ok(NoiseModel {
            rho_minus,
            rho_plus,
        })
    }

    /// Probability that a sample whose true label is `truth` is observed
    /// with the other label.
    pub fn flip_rate(&self, truth: Label) -> T {
        match truth {
            Label::Relevant => self.rho_plus,
            Label::Irrelevant => self.rho_minus,
        }
    }
}

/// Noise-corrected loss for an observed label.
///
/// `loss_as_labeled` is the loss against the observed label and
/// `loss_as_flipped` the loss against the opposite one. Its expectation over
/// the label noise equals the clean loss.
pub fn corrected_loss<T: Scalar>(
    loss_as_labeled: T,
    loss_as_flipped: T,
    observed: Label,
    noise: &NoiseModel<T>,
) -> Result<T> {
    let noise = NoiseModel::new(noise.rho_minus, noise.rho_plus)?;
    let keep = T::one() - noise.flip_rate(observed.flipped());
    let cross = noise.flip_rate(observed);
    Ok((keep * loss_as_labeled - cross * loss_as_flipped)
        / (T::one() - noise.rho_minus - noise.rho_plus))
}

fn check_eps_v<T: Scalar>(eps_v: T) -> Result<()> {
    if eps_v < T::zero() || eps_v >= T::from_ratio(1, 2) {
        return Err(CoreError::invalid(format!(
            "annotator error rate {eps_v} must lie in [0, 0.5)"
        )));
    }
    Ok(())
}

fn clean_fraction<T: Scalar>(eps_v: T) -> T {
    let f = T::one() - T::from_u64(2) * eps_v;
    f * f
}

/// Number of clean labels that `n` labels with error rate `eps_v` are worth.
pub fn effective_samples<T: Scalar>(n: u64, eps_v: T) -> Result<T> {
    check_eps_v(eps_v)?;
    Ok(clean_fraction(eps_v) * T::from_u64(n))
}

/// Order-of-magnitude sample budget `c * log_cov / ((1 - 2 eps_v)^2 eps^2)`.
/// Constants and log factors hidden by the bound are folded into `constant`.
pub fn sample_budget<T: Scalar>(log_covering: T, eps_v: T, eps: T, constant: T) -> Result<T> {
    check_eps_v(eps_v)?;
    if log_covering <= T::zero() {
        return Err(CoreError::invalid("log covering number must be positive"));
    }
    if eps <= T::zero() {
        return Err(CoreError::invalid("target excess risk must be positive"));
    }
    if constant <= T::zero() {
        return Err(CoreError::invalid("constant must be positive"));
    }
    Ok(constant * log_covering / (clean_fraction(eps_v) * eps * eps))
}
