//! Recovery metrics (MAE, RMSE, attribute agreement) and MCMC diagnostics.

use crate::error::{Error, Result};
use crate::model::ProfilePanel;
use crate::scalar::Scalar;

fn check_nonempty<T>(values: &[T], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::input(format!("{what} needs at least one value")));
    }
    Ok(())
}

/// Sum of `values` in ascending order, so the result does not depend on the
/// order the values were produced in.
pub fn ordered_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let mut v: Vec<T> = values.into_iter().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Mean absolute error of replicate estimates against a true value.
pub fn mae<T: Scalar>(estimates: &[T], truth: T) -> Result<T> {
    check_nonempty(estimates, "MAE")?;
    let n = T::from_usize(estimates.len()).unwrap();
    Ok(ordered_sum(estimates.iter().map(|&e| (e - truth).abs())) / n)
}

/// Root mean squared error of replicate estimates against a true value.
pub fn rmse<T: Scalar>(estimates: &[T], truth: T) -> Result<T> {
    check_nonempty(estimates, "RMSE")?;
    let n = T::from_usize(estimates.len()).unwrap();
    Ok((ordered_sum(estimates.iter().map(|&e| (e - truth).powi(2))) / n).sqrt())
}

/// MAE of already-computed signed errors.
pub fn mae_of_errors<T: Scalar>(errors: &[T]) -> Result<T> {
    mae(errors, T::zero())
}

pub fn rmse_of_errors<T: Scalar>(errors: &[T]) -> Result<T> {
    rmse(errors, T::zero())
}

/// Attribute agreement rates per (wave, attribute), averaged over replications
/// and learners. Output is indexed `[wave][attribute]`.
pub fn aar(estimated: &[ProfilePanel], truth: &[ProfilePanel]) -> Result<Vec<Vec<f64>>> {
    if estimated.len() != truth.len() || estimated.is_empty() {
        return Err(Error::dim(format!(
            "{} estimated vs {} true profile panels",
            estimated.len(),
            truth.len()
        )));
    }
    let (t, k) = (truth[0].n_waves(), truth[0].n_attributes());
    let mut hits = vec![vec![0usize; k]; t];
    let mut total = 0usize;
    for (est, tru) in estimated.iter().zip(truth) {
        if est.n_learners() != tru.n_learners()
            || est.n_waves() != t
            || tru.n_waves() != t
            || est.n_attributes() != k
            || tru.n_attributes() != k
        {
            return Err(Error::dim("profile panel shapes differ"));
        }
        for i in 0..tru.n_learners() {
            for (w, row) in hits.iter_mut().enumerate() {
                let diff = est.get(i, w).0 ^ tru.get(i, w).0;
                for (a, h) in row.iter_mut().enumerate() {
                    *h += ((diff >> a) & 1 == 0) as usize;
                }
            }
        }
        total += tru.n_learners();
    }
    if total == 0 {
        return Err(Error::input("no learners to compare"));
    }
    Ok(hits
        .into_iter()
        .map(|row| row.into_iter().map(|h| h as f64 / total as f64).collect())
        .collect())
}

/// Classic Gelman-Rubin potential scale reduction factor (no chain
/// splitting):
///
/// `W` = mean within-chain variance, `B/n` = variance of chain means,
/// `R = sqrt(((n-1)/n W + B/n) / W)`.
///
/// Chains are trimmed to the shortest length. Summations run over sorted
/// values, so permuting chains leaves the result bit-identical.
pub fn psrf<T: Scalar>(chains: &[Vec<T>]) -> Result<T> {
    if chains.len() < 2 {
        return Err(Error::input("PSRF needs at least two chains"));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 10 {
        return Err(Error::input("PSRF needs at least 10 draws per chain"));
    }
    let nf = T::from_usize(n).unwrap();
    let m = T::from_usize(chains.len()).unwrap();
    let mut means = Vec::with_capacity(chains.len());
    let mut vars = Vec::with_capacity(chains.len());
    for c in chains {
        let c = &c[..n];
        let mean = ordered_sum(c.iter().copied()) / nf;
        let var = ordered_sum(c.iter().map(|&x| (x - mean).powi(2))) / (nf - T::one());
        means.push(mean);
        vars.push(var);
    }
    let grand = ordered_sum(means.iter().copied()) / m;
    let between_over_n = ordered_sum(means.iter().map(|&x| (x - grand).powi(2))) / (m - T::one());
    let within = ordered_sum(vars.iter().copied()) / m;
    if within <= T::zero() {
        return Ok(if between_over_n <= T::zero() {
            T::one()
        } else {
            T::infinity()
        });
    }
    let pooled = (nf - T::one()) / nf * within + between_over_n;
    Ok((pooled / within).sqrt())
}

/// Monte Carlo standard error of a replication mean, `sd / sqrt(R)` with the
/// population (`1/R`) variance, which for 0/1 values equals
/// `sqrt(p (1 - p) / R)`.
pub fn mc_error<T: Scalar>(values: &[T]) -> Result<T> {
    if values.len() < 2 {
        return Err(Error::input("Monte Carlo error needs at least two replications"));
    }
    let r = T::from_usize(values.len()).unwrap();
    let mean = ordered_sum(values.iter().copied()) / r;
    let var = ordered_sum(values.iter().map(|&v| (v - mean).powi(2))) / r;
    Ok((var / r).sqrt())
}

/// Monte Carlo standard error of a proportion estimated from `r` replications.
pub fn mc_error_proportion<T: Scalar>(p: T, replications: usize) -> T {
    (p * (T::one() - p) / T::from_usize(replications).unwrap()).sqrt()
}
