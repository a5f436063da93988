//! Covariate-driven initial mastery and attribute transitions.
//!
//! Each attribute has three logistic models sharing one covariate vector per
//! learner: initial mastery (`beta`), acquisition 0→1 (`gamma01`) and loss
//! 1→0 (`gamma10`). Coefficient rows are `[intercept, slope_1, .., slope_C]`.
//! Profile-level distributions factorize over attributes.

use crate::error::{Error, Result};
use crate::model::{n_profiles, ProfileIndex};
use crate::scalar::{inv_logit, Scalar};

/// Time-invariant covariates, one row of `C` values per learner.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix<T: Scalar> {
    n_learners: usize,
    n_covariates: usize,
    z: Vec<T>,
}

impl<T: Scalar> CovariateMatrix<T> {
    pub fn new(n_learners: usize, n_covariates: usize, z: Vec<T>) -> Result<Self> {
        if z.len() != n_learners * n_covariates {
            return Err(Error::dim(format!(
                "{} covariate values for {n_learners} learners x {n_covariates} covariates",
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("covariates must be finite"));
        }
        Ok(Self {
            n_learners,
            n_covariates,
            z,
        })
    }

    pub fn empty(n_learners: usize) -> Self {
        Self {
            n_learners,
            n_covariates: 0,
            z: Vec::new(),
        }
    }

    pub fn n_learners(&self) -> usize {
        self.n_learners
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    #[inline]
    pub fn row(&self, learner: usize) -> &[T] {
        &self.z[learner * self.n_covariates..(learner + 1) * self.n_covariates]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = T> + '_ {
        self.z.iter().skip(c).step_by(self.n_covariates.max(1)).copied()
    }

    pub fn raw(&self) -> &[T] {
        &self.z
    }
}

/// Logistic coefficients for initial mastery, acquisition and loss.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralParams<T: Scalar> {
    /// `K x (1 + C)` initial-mastery coefficients.
    pub beta: Vec<Vec<T>>,
    /// `K x (1 + C)` acquisition coefficients.
    pub gamma01: Vec<Vec<T>>,
    /// `K x (1 + C)` loss coefficients; ignored when `monotone` is set.
    pub gamma10: Vec<Vec<T>>,
    /// Mastery is absorbing: the loss probability is pinned to zero.
    pub monotone: bool,
}

impl<T: Scalar> StructuralParams<T> {
    pub fn zeros(n_attributes: usize, n_covariates: usize, monotone: bool) -> Self {
        let block = vec![vec![T::zero(); 1 + n_covariates]; n_attributes];
        Self {
            beta: block.clone(),
            gamma01: block.clone(),
            gamma10: block,
            monotone,
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.beta.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.first().map_or(0, |r| r.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.beta.len();
        let width = self.n_covariates() + 1;
        if k == 0 {
            return Err(Error::config("structural parameters need at least one attribute"));
        }
        for (name, block) in [
            ("beta", &self.beta),
            ("gamma01", &self.gamma01),
            ("gamma10", &self.gamma10),
        ] {
            if block.len() != k || block.iter().any(|r| r.len() != width) {
                return Err(Error::dim(format!(
                    "{name} must be {k} x {width} to match beta"
                )));
            }
            if block.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    fn check_covariates(&self, z: &[T]) -> Result<()> {
        self.validate()?;
        if z.len() != self.n_covariates() {
            return Err(Error::dim(format!(
                "{} covariates supplied, coefficients expect {}",
                z.len(),
                self.n_covariates()
            )));
        }
        Ok(())
    }

    /// Free coefficients in a fixed order: all of `beta`, then `gamma01`, then
    /// `gamma10` unless monotone.
    pub fn to_vector(&self) -> Vec<T> {
        let mut v: Vec<T> = self.beta.iter().flatten().copied().collect();
        v.extend(self.gamma01.iter().flatten().copied());
        if !self.monotone {
            v.extend(self.gamma10.iter().flatten().copied());
        }
        v
    }

    /// Inverse of [`to_vector`](Self::to_vector); `gamma10` is kept from
    /// `self` when monotone.
    pub fn with_vector(&self, theta: &[T]) -> Result<Self> {
        let width = self.n_covariates() + 1;
        let k = self.n_attributes();
        let blocks = if self.monotone { 2 } else { 3 };
        if theta.len() != blocks * k * width {
            return Err(Error::dim(format!(
                "coefficient vector has {} entries, expected {}",
                theta.len(),
                blocks * k * width
            )));
        }
        let unpack = |b: usize| -> Vec<Vec<T>> {
            (0..k)
                .map(|a| theta[(b * k + a) * width..(b * k + a + 1) * width].to_vec())
                .collect()
        };
        Ok(Self {
            beta: unpack(0),
            gamma01: unpack(1),
            gamma10: if self.monotone {
                self.gamma10.clone()
            } else {
                unpack(2)
            },
            monotone: self.monotone,
        })
    }
}

/// Linear predictor `coef[0] + sum_c coef[c+1] * z[c]`.
pub fn linear_predictor<T: Scalar>(coef: &[T], z: &[T]) -> Result<T> {
    if coef.len() != z.len() + 1 {
        return Err(Error::dim(format!(
            "{} coefficients for {} covariates",
            coef.len(),
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite covariate"));
    }
    Ok(z
        .iter()
        .zip(&coef[1..])
        .fold(coef[0], |acc, (&zc, &b)| acc + b * zc))
}

pub fn initial_mastery_prob<T: Scalar>(beta_k: &[T], z: &[T]) -> Result<T> {
    linear_predictor(beta_k, z).map(inv_logit)
}

pub fn acquisition_prob<T: Scalar>(gamma01_k: &[T], z: &[T]) -> Result<T> {
    linear_predictor(gamma01_k, z).map(inv_logit)
}

/// Probability of losing a mastered attribute; exactly zero when monotone.
pub fn loss_prob<T: Scalar>(gamma10_k: &[T], z: &[T], monotone: bool) -> Result<T> {
    if monotone {
        return Ok(T::zero());
    }
    linear_predictor(gamma10_k, z).map(inv_logit)
}

/// Joint profile probabilities from independent per-attribute mastery
/// probabilities, in canonical order.
pub fn profile_dist_from_marginals<T: Scalar>(mastery: &[T]) -> Vec<T> {
    (0..n_profiles(mastery.len()) as u32)
        .map(|c| {
            mastery
                .iter()
                .enumerate()
                .fold(T::one(), |acc, (a, &p)| {
                    acc * if ProfileIndex(c).masters(a) {
                        p
                    } else {
                        T::one() - p
                    }
                })
        })
        .collect()
}

/// Distribution of the wave-1 profile for a learner with covariates `z`.
pub fn initial_profile_dist<T: Scalar>(params: &StructuralParams<T>, z: &[T]) -> Result<Vec<T>> {
    params.check_covariates(z)?;
    let marginals = params
        .beta
        .iter()
        .map(|b| initial_mastery_prob(b, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(profile_dist_from_marginals(&marginals))
}

/// Row-stochastic `2^K x 2^K` matrix, rows = source profile.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix<T: Scalar> {
    n_profiles: usize,
    p: Vec<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    /// Builds the matrix from per-attribute acquisition and loss probabilities.
    pub fn from_attribute_probs(acquire: &[T], lose: &[T]) -> Self {
        let k = acquire.len();
        let np = n_profiles(k);
        let mut p = Vec::with_capacity(np * np);
        for r in 0..np as u32 {
            for c in 0..np as u32 {
                let mut mass = T::one();
                for a in 0..k {
                    let was = ProfileIndex(r).masters(a);
                    let now = ProfileIndex(c).masters(a);
                    mass = mass
                        * match (was, now) {
                            (false, true) => acquire[a],
                            (false, false) => T::one() - acquire[a],
                            (true, false) => lose[a],
                            (true, true) => T::one() - lose[a],
                        };
                }
                p.push(mass);
            }
        }
        Self { n_profiles: np, p }
    }

    pub fn n_profiles(&self) -> usize {
        self.n_profiles
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> T {
        self.p[from * self.n_profiles + to]
    }

    pub fn row(&self, from: usize) -> &[T] {
        &self.p[from * self.n_profiles..(from + 1) * self.n_profiles]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> T {
        (0..self.n_profiles)
            .map(|r| (self.row(r).iter().copied().sum::<T>() - T::one()).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_row_stochastic(&self, tol: T) -> bool {
        self.p.iter().all(|&v| v >= T::zero()) && self.max_row_error() <= tol
    }
}

/// Per-learner transition matrix from the acquisition and loss models.
pub fn transition_matrix<T: Scalar>(
    params: &StructuralParams<T>,
    z: &[T],
) -> Result<TransitionMatrix<T>> {
    params.check_covariates(z)?;
    let acquire = params
        .gamma01
        .iter()
        .map(|g| acquisition_prob(g, z))
        .collect::<Result<Vec<_>>>()?;
    let lose = params
        .gamma10
        .iter()
        .map(|g| loss_prob(g, z, params.monotone))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionMatrix::from_attribute_probs(&acquire, &lose))
}
