//! Bias-corrected three-step estimator.
//!
//! 1. Fit a DINA model to each wave separately by marginal maximum likelihood
//!    (EM over item parameters and `2^K` class weights).
//! 2. Assign each learner-wave to its posterior mode and estimate the
//!    classification-error matrix `M_t(r, s) = P(assigned r | true s)`.
//! 3. Maximize the misclassification-corrected latent transition likelihood
//!    over the structural coefficients.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    normalize_log_masses, ItemLogTable, ItemParams, ProfileIndex, ProfilePanel,
    ProfilePosterior, QMatrix,
};
use crate::optim::{maximize, BfgsConfig, OptimStatus};
use crate::rng::{self, stage};
use crate::scalar::{clamp_prob, log_sum_exp, Scalar};
use crate::simulate::DataView;
use crate::structural::{
    initial_profile_dist, transition_matrix, CovariateMatrix, StructuralParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    /// Stop when the log-likelihood gain of one iteration is below `tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

/// Largest log-likelihood decrease tolerated between EM iterations before the
/// fit is reported as broken.
const EM_DECREASE_TOL: f64 = 1e-8;

/// Single-wave DINA fit.
#[derive(Clone, Debug)]
pub struct WaveFit {
    pub item_params: ItemParams<f64>,
    pub class_weights: Vec<f64>,
    pub posteriors: Vec<ProfilePosterior<f64>>,
    pub loglik: f64,
    pub iterations: usize,
    /// Log-likelihood at every E-step, in order.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Items whose `eta = 0` or `eta = 1` stratum had no posterior mass in
    /// some M-step; the affected parameter kept its previous value.
    pub empty_strata: Vec<usize>,
}

/// E-step: posteriors under `weights` and the marginal log-likelihood.
fn e_step(
    wave_responses: &[u8],
    n_items: usize,
    table: &ItemLogTable<f64>,
    weights: &[f64],
) -> Result<(Vec<ProfilePosterior<f64>>, f64)> {
    let np = weights.len();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut log_mass = vec![0.0; np];
    let mut total = 0.0;
    let posteriors = wave_responses
        .chunks(n_items)
        .map(|y| {
            table.loglik_all(y, &mut log_mass);
            log_mass.iter_mut().zip(&log_w).for_each(|(l, w)| *l += w);
            let mut probs = vec![0.0; np];
            total += normalize_log_masses(&log_mass, &mut probs)?;
            Ok(ProfilePosterior { probs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((posteriors, total))
}

/// Marginal maximum-likelihood DINA fit of one wave (`N x J` responses,
/// row-major) by EM.
pub fn fit_dina_em(wave_responses: &[u8], q: &QMatrix, cfg: &EmConfig) -> Result<WaveFit> {
    let j = q.n_items();
    if j == 0 || wave_responses.len() % j != 0 || wave_responses.is_empty() {
        return Err(Error::dim(format!(
            "{} responses is not a multiple of {j} items",
            wave_responses.len()
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::config("EM tolerance must be positive"));
    }
    let n = wave_responses.len() / j;
    let np = q.n_profiles();
    let mut params = ItemParams::constant(j, 0.2, 0.2);
    let mut weights = vec![1.0 / np as f64; np];
    let mut trace = Vec::new();
    let mut empty = Vec::new();
    let mut converged = false;

    let mut iteration = 0;
    let (posteriors, loglik) = loop {
        let table = ItemLogTable::new(&params, q)?;
        let (posteriors, ll) = e_step(wave_responses, j, &table, &weights)?;
        if let Some(&prev) = trace.last() {
            if ll < prev - EM_DECREASE_TOL {
                return Err(Error::Invariant(format!(
                    "EM log-likelihood decreased from {prev} to {ll} at iteration {iteration}"
                )));
            }
        }
        trace.push(ll);
        let gain = trace.len() >= 2 && ll - trace[trace.len() - 2] < cfg.tol;
        if gain {
            converged = true;
            break (posteriors, ll);
        }
        if iteration >= cfg.max_iter {
            break (posteriors, ll);
        }
        iteration += 1;

        // M-step.
        for (c, w) in weights.iter_mut().enumerate() {
            *w = posteriors.iter().map(|p| p.probs[c]).sum::<f64>() / n as f64;
        }
        for it in 0..j {
            let mask = q.mask(it);
            let (mut mass0, mut correct0, mut mass1, mut wrong1) = (0.0, 0.0, 0.0, 0.0);
            for (i, post) in posteriors.iter().enumerate() {
                let y = wave_responses[i * j + it];
                let m1: f64 = post
                    .probs
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| (*c as u32) & mask == mask)
                    .map(|(_, p)| p)
                    .sum();
                let m0 = 1.0 - m1;
                mass0 += m0;
                mass1 += m1;
                if y == 1 {
                    correct0 += m0;
                } else {
                    wrong1 += m1;
                }
            }
            let mut flagged = false;
            if mass0 > 1e-12 {
                params.guess[it] = clamp_prob(correct0 / mass0);
            } else {
                flagged = true;
            }
            if mass1 > 1e-12 {
                params.slip[it] = clamp_prob(wrong1 / mass1);
            } else {
                flagged = true;
            }
            if flagged && !empty.contains(&it) {
                empty.push(it);
            }
        }
    };

    Ok(WaveFit {
        item_params: params,
        class_weights: weights,
        posteriors,
        loglik,
        iterations: iteration,
        loglik_trace: trace,
        converged,
        empty_strata: empty,
    })
}

/// Posterior-mode profile per learner; ties go to the lowest index.
pub fn map_assign<T: Scalar>(posteriors: &[ProfilePosterior<T>]) -> Vec<ProfileIndex> {
    posteriors.iter().map(ProfilePosterior::map_index).collect()
}

/// Classification-error matrix, entry `(r, s) = P(assigned r | true s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CepMatrix<T: Scalar> {
    n_profiles: usize,
    m: Vec<T>,
    /// Columns with no posterior mass, replaced by a point mass at `r = s`.
    pub degenerate_columns: Vec<usize>,
}

impl<T: Scalar> CepMatrix<T> {
    pub fn identity(n_profiles: usize) -> Self {
        let mut m = vec![T::zero(); n_profiles * n_profiles];
        (0..n_profiles).for_each(|r| m[r * n_profiles + r] = T::one());
        Self {
            n_profiles,
            m,
            degenerate_columns: Vec::new(),
        }
    }

    /// Builds from row-major entries; columns must sum to one.
    pub fn from_rows(n_profiles: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != n_profiles * n_profiles {
            return Err(Error::dim("CEP matrix must be square"));
        }
        let cep = Self {
            n_profiles,
            m: entries,
            degenerate_columns: Vec::new(),
        };
        if cep.max_column_error() > T::lit(1e-10) || cep.m.iter().any(|&v| v < T::zero()) {
            return Err(Error::input("CEP columns must be distributions"));
        }
        Ok(cep)
    }

    pub fn n_profiles(&self) -> usize {
        self.n_profiles
    }

    #[inline]
    pub fn get(&self, assigned: usize, truth: usize) -> T {
        self.m[assigned * self.n_profiles + truth]
    }

    pub fn max_column_error(&self) -> T {
        (0..self.n_profiles)
            .map(|s| {
                let sum: T = (0..self.n_profiles).map(|r| self.get(r, s)).sum();
                (sum - T::one()).abs()
            })
            .fold(T::zero(), T::max)
    }
}

/// Posterior-weighted classification-error matrix of MAP assignments.
pub fn estimate_cep<T: Scalar>(
    posteriors: &[ProfilePosterior<T>],
    assignments: &[ProfileIndex],
) -> Result<CepMatrix<T>> {
    if posteriors.is_empty() || posteriors.len() != assignments.len() {
        return Err(Error::dim(format!(
            "{} posteriors for {} assignments",
            posteriors.len(),
            assignments.len()
        )));
    }
    let np = posteriors[0].probs.len();
    let mut num = vec![T::zero(); np * np];
    let mut den = vec![T::zero(); np];
    for (post, &w) in posteriors.iter().zip(assignments) {
        if post.probs.len() != np || w.get() >= np {
            return Err(Error::dim("posterior length or assignment out of range"));
        }
        for (s, &p) in post.probs.iter().enumerate() {
            num[w.get() * np + s] = num[w.get() * np + s] + p;
            den[s] = den[s] + p;
        }
    }
    let mut degenerate = Vec::new();
    let mut m = vec![T::zero(); np * np];
    for s in 0..np {
        if den[s] < T::lit(1e-12) {
            degenerate.push(s);
            m[s * np + s] = T::one();
            continue;
        }
        for r in 0..np {
            m[r * np + s] = num[r * np + s] / den[s];
        }
    }
    Ok(CepMatrix {
        n_profiles: np,
        m,
        degenerate_columns: degenerate,
    })
}

fn check_step3_inputs<T: Scalar>(
    params: &StructuralParams<T>,
    assignments: &ProfilePanel,
    ceps: &[CepMatrix<T>],
    covariates: &CovariateMatrix<T>,
) -> Result<()> {
    params.validate()?;
    let np = 1usize << params.n_attributes();
    if ceps.len() != assignments.n_waves() {
        return Err(Error::dim(format!(
            "{} CEP matrices for {} waves",
            ceps.len(),
            assignments.n_waves()
        )));
    }
    if ceps.iter().any(|m| m.n_profiles() != np) || assignments.n_attributes() != params.n_attributes() {
        return Err(Error::dim("CEP size does not match attribute count"));
    }
    if covariates.n_learners() != assignments.n_learners()
        || covariates.n_covariates() != params.n_covariates()
    {
        return Err(Error::dim("covariates do not match assignments or coefficients"));
    }
    Ok(())
}

/// Per-learner corrected log-likelihood contributions (may contain `-inf`).
pub fn step3_loglik_terms<T: Scalar>(
    params: &StructuralParams<T>,
    assignments: &ProfilePanel,
    ceps: &[CepMatrix<T>],
    covariates: &CovariateMatrix<T>,
) -> Result<Vec<T>> {
    check_step3_inputs(params, assignments, ceps, covariates)?;
    let np = ceps[0].n_profiles();
    let n_waves = assignments.n_waves();
    let mut forward = vec![T::zero(); np];
    let mut next = vec![T::zero(); np];
    (0..assignments.n_learners())
        .map(|i| {
            let z = covariates.row(i);
            let init = initial_profile_dist(params, z)?;
            let w0 = assignments.get(i, 0).get();
            for s in 0..np {
                forward[s] = init[s] * ceps[0].get(w0, s);
            }
            let mut ll = T::zero();
            let mut scale: T = forward.iter().copied().sum();
            if n_waves > 1 {
                let trans = transition_matrix(params, z)?;
                for t in 1..n_waves {
                    if scale <= T::zero() {
                        break;
                    }
                    ll = ll + scale.ln();
                    forward.iter_mut().for_each(|f| *f = *f / scale);
                    let wt = assignments.get(i, t).get();
                    for s in 0..np {
                        let inflow: T = (0..np).map(|r| forward[r] * trans.get(r, s)).sum();
                        next[s] = inflow * ceps[t].get(wt, s);
                    }
                    std::mem::swap(&mut forward, &mut next);
                    scale = forward.iter().copied().sum();
                }
            }
            Ok(if scale > T::zero() {
                ll + scale.ln()
            } else {
                T::neg_infinity()
            })
        })
        .collect()
}

/// Misclassification-corrected log-likelihood of the assignment sequences,
/// summed over learners by the forward recursion over `2^K` latent states.
pub fn step3_loglik<T: Scalar>(
    params: &StructuralParams<T>,
    assignments: &ProfilePanel,
    ceps: &[CepMatrix<T>],
    covariates: &CovariateMatrix<T>,
) -> Result<T> {
    let terms = step3_loglik_terms(params, assignments, ceps, covariates)?;
    Ok(terms.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Learners whose corrected likelihood is zero.
pub fn zero_likelihood_learners<T: Scalar>(terms: &[T]) -> Vec<usize> {
    terms
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step3Config {
    pub bfgs: BfgsConfig,
    /// Number of starts: the zero vector plus `starts - 1` standard-normal draws.
    pub starts: usize,
}

impl Default for Step3Config {
    fn default() -> Self {
        Self {
            bfgs: BfgsConfig::default(),
            starts: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Step3Fit {
    pub params: StructuralParams<f64>,
    pub loglik: f64,
    pub status: OptimStatus,
    /// `(status, loglik)` of every start in order.
    pub starts: Vec<(OptimStatus, f64)>,
}

impl Step3Fit {
    /// True when every start failed its line search.
    pub fn failed(&self) -> bool {
        self.starts
            .iter()
            .all(|(s, _)| *s == OptimStatus::LineSearchFailed)
    }
}

/// Maximizes the corrected likelihood over `beta` and `gamma01` (plus
/// `gamma10` when not monotone) from several starts, keeping the best.
pub fn fit_structural_corrected<R: Rng + ?Sized>(
    assignments: &ProfilePanel,
    ceps: &[CepMatrix<f64>],
    covariates: &CovariateMatrix<f64>,
    monotone: bool,
    cfg: &Step3Config,
    rng: &mut R,
) -> Result<Step3Fit> {
    let template =
        StructuralParams::<f64>::zeros(assignments.n_attributes(), covariates.n_covariates(), monotone);
    check_step3_inputs(&template, assignments, ceps, covariates)?;
    let dim = template.to_vector().len();
    let objective = |theta: &[f64]| -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        template
            .with_vector(theta)
            .and_then(|p| step3_loglik(&p, assignments, ceps, covariates))
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut best: Option<(Vec<f64>, f64, OptimStatus)> = None;
    let mut starts = Vec::with_capacity(cfg.starts.max(1));
    for start in 0..cfg.starts.max(1) {
        let x0: Vec<f64> = if start == 0 {
            vec![0.0; dim]
        } else {
            (0..dim).map(|_| rng.sample(StandardNormal)).collect()
        };
        let res = maximize(objective, &x0, &cfg.bfgs);
        starts.push((res.status, res.value));
        let better = match &best {
            None => true,
            Some((_, v, _)) => res.value.is_finite() && (res.value > *v || !v.is_finite()),
        };
        if better {
            best = Some((res.x, res.value, res.status));
        }
    }
    let (x, loglik, mut status) = best.expect("at least one start");
    if starts.iter().all(|(s, _)| *s == OptimStatus::LineSearchFailed) {
        status = OptimStatus::LineSearchFailed;
    }
    Ok(Step3Fit {
        params: template.with_vector(&x)?,
        loglik,
        status,
        starts,
    })
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepwiseConfig {
    pub em: EmConfig,
    pub step3: Step3Config,
    pub monotone: bool,
    pub seed: u64,
}

impl StepwiseConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            monotone: true,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepwiseResult {
    pub waves: Vec<WaveFit>,
    pub assignments: ProfilePanel,
    pub ceps: Vec<CepMatrix<f64>>,
    pub structural: StructuralParams<f64>,
    pub step3_loglik: f64,
    pub step3: Step3Fit,
}

impl StepwiseResult {
    pub fn degenerate_cep_columns(&self) -> usize {
        self.ceps.iter().map(|m| m.degenerate_columns.len()).sum()
    }

    /// Writes per-wave posteriors, assignments and CEP matrices as CSV.
    pub fn write_audit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let np = self.ceps.first().map_or(0, CepMatrix::n_profiles);
        let mut s = String::from("wave,learner");
        (0..np).for_each(|c| {
            let _ = write!(s, ",p{c}");
        });
        s.push('\n');
        for (t, w) in self.waves.iter().enumerate() {
            for (i, p) in w.posteriors.iter().enumerate() {
                let _ = write!(s, "{t},{i}");
                p.probs.iter().for_each(|v| {
                    let _ = write!(s, ",{v}");
                });
                s.push('\n');
            }
        }
        fs::write(dir.join("posteriors.csv"), s)?;

        let mut s = String::from("learner,wave,profile\n");
        for i in 0..self.assignments.n_learners() {
            for t in 0..self.assignments.n_waves() {
                let _ = writeln!(s, "{i},{t},{}", self.assignments.get(i, t).0);
            }
        }
        fs::write(dir.join("assignments.csv"), s)?;

        let mut s = String::from("wave,assigned,true,value\n");
        for (t, m) in self.ceps.iter().enumerate() {
            for r in 0..np {
                for c in 0..np {
                    let _ = writeln!(s, "{t},{r},{c},{}", m.get(r, c));
                }
            }
        }
        fs::write(dir.join("cep.csv"), s)?;
        Ok(())
    }
}

/// Runs all three steps on one dataset.
pub fn fit_stepwise(data: DataView<'_>, cfg: &StepwiseConfig) -> Result<StepwiseResult> {
    data.validate()?;
    let (n, t) = (data.responses.n_learners(), data.responses.n_waves());
    let k = data.qmatrix.n_attributes();
    let mut waves = Vec::with_capacity(t);
    let mut ceps = Vec::with_capacity(t);
    let mut assignments = ProfilePanel::new(n, t, k);
    for w in 0..t {
        let fit = fit_dina_em(data.responses.wave(w), data.qmatrix, &cfg.em)
            .map_err(|e| e.in_step(format!("step 1 (wave {})", w + 1)))?;
        let assigned = map_assign(&fit.posteriors);
        for (i, a) in assigned.iter().enumerate() {
            assignments.set(i, w, *a);
        }
        let cep = estimate_cep(&fit.posteriors, &assigned)
            .map_err(|e| e.in_step(format!("step 2 (wave {})", w + 1)))?;
        waves.push(fit);
        ceps.push(cep);
    }
    let mut rng = rng::stream(cfg.seed, &[stage::STEPWISE]);
    let step3 = fit_structural_corrected(
        &assignments,
        &ceps,
        data.covariates,
        cfg.monotone,
        &cfg.step3,
        &mut rng,
    )
    .map_err(|e| e.in_step("step 3"))?;
    if step3.failed() {
        return Err(
            Error::Optimizer("every start failed its line search".into()).in_step("step 3"),
        );
    }
    Ok(StepwiseResult {
        waves,
        assignments,
        ceps,
        structural: step3.params.clone(),
        step3_loglik: step3.loglik,
        step3,
    })
}

/// Log-likelihood of a wave under given item parameters and class weights
/// (used to check EM optima).
pub fn marginal_loglik(
    wave_responses: &[u8],
    q: &QMatrix,
    params: &ItemParams<f64>,
    weights: &[f64],
) -> Result<f64> {
    let table = ItemLogTable::new(params, q)?;
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; weights.len()];
    Ok(wave_responses
        .chunks(q.n_items())
        .map(|y| {
            table.loglik_all(y, &mut buf);
            buf.iter_mut().zip(&log_w).for_each(|(l, w)| *l += w);
            log_sum_exp(&buf)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::simulate::{builtin_qmatrix, gen_covariates, gen_profiles, gen_responses};
    use crate::structural::profile_dist_from_marginals;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn noiseless_em_recovers_items_and_weights() {
        let q = builtin_qmatrix(6).unwrap();
        let n = 2000;
        let mut prof = ProfilePanel::new(n, 1, 2);
        let mut r = rng(1);
        for i in 0..n {
            prof.set(i, 0, ProfileIndex(r.random_range(0..4u32)));
        }
        let y = gen_responses(&prof, &q, &ItemParams::constant(6, 0.0, 0.0), &mut r).unwrap();
        let fit = fit_dina_em(y.wave(0), &q, &EmConfig::default()).unwrap();
        assert!(fit.item_params.guess.iter().all(|&g| g <= 0.01));
        assert!(fit.item_params.slip.iter().all(|&s| s <= 0.01));
        for c in 0..4 {
            let freq = (0..n).filter(|&i| prof.get(i, 0).get() == c).count() as f64 / n as f64;
            assert!((fit.class_weights[c] - freq).abs() < 0.01);
        }
    }

    #[test]
    fn em_loglik_never_decreases() {
        let q = builtin_qmatrix(6).unwrap();
        for seed in 0..30 {
            let mut r = rng(seed);
            let n = r.random_range(5..80);
            let y: Vec<u8> = (0..n * 6).map(|_| r.random_range(0..2u8)).collect();
            let fit = fit_dina_em(&y, &q, &EmConfig::default()).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - EM_DECREASE_TOL);
            }
            let sum: f64 = fit.class_weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn em_reports_final_loglik_consistently() {
        let q = builtin_qmatrix(6).unwrap();
        let mut r = rng(3);
        let y: Vec<u8> = (0..300 * 6).map(|_| r.random_range(0..2u8)).collect();
        let fit = fit_dina_em(&y, &q, &EmConfig::default()).unwrap();
        let ll = marginal_loglik(&y, &q, &fit.item_params, &fit.class_weights).unwrap();
        // The recorded value is the E-step likelihood before the last M-step.
        assert!(ll >= fit.loglik - 1e-9);
    }

    #[test]
    fn em_input_errors() {
        let q = builtin_qmatrix(6).unwrap();
        assert!(fit_dina_em(&[0, 1, 0], &q, &EmConfig::default()).is_err());
        let cfg = EmConfig { tol: 0.0, ..EmConfig::default() };
        assert!(fit_dina_em(&[0; 12], &q, &cfg).is_err());
    }

    #[test]
    fn map_assign_examples() {
        let posts = vec![
            ProfilePosterior { probs: vec![0.1, 0.2, 0.3, 0.4] },
            ProfilePosterior { probs: vec![0.4, 0.4, 0.1, 0.1] },
            ProfilePosterior { probs: vec![0.0, 0.0, 1.0, 0.0] },
        ];
        assert_eq!(
            map_assign(&posts),
            vec![ProfileIndex(3), ProfileIndex(0), ProfileIndex(2)]
        );
    }

    #[test]
    fn cep_examples() {
        let point = |c: usize| {
            let mut probs = vec![0.0; 4];
            probs[c] = 1.0;
            ProfilePosterior { probs }
        };
        let posts: Vec<_> = (0..4).map(point).collect();
        let m = estimate_cep(&posts, &map_assign(&posts)).unwrap();
        assert_eq!(m, CepMatrix::identity(4));

        let uniform = vec![ProfilePosterior { probs: vec![0.25; 4] }; 5];
        let assigned = map_assign(&uniform);
        assert!(assigned.iter().all(|a| a.0 == 0));
        let m = estimate_cep(&uniform, &assigned).unwrap();
        for s in 0..4 {
            assert_eq!((0..4).map(|r| m.get(r, s)).collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn cep_matches_hand_ratios() {
        let posts = vec![
            ProfilePosterior { probs: vec![0.6, 0.2, 0.1, 0.1] },
            ProfilePosterior { probs: vec![0.1, 0.5, 0.3, 0.1] },
            ProfilePosterior { probs: vec![0.2, 0.1, 0.3, 0.4] },
        ];
        let assigned = map_assign(&posts);
        assert_eq!(assigned, vec![ProfileIndex(0), ProfileIndex(1), ProfileIndex(3)]);
        let m = estimate_cep(&posts, &assigned).unwrap();
        // Column s: learner weights P(L=s|Y_i) routed to row W_i.
        let den: [f64; 4] = [0.9, 0.8, 0.7, 0.6];
        let expected = [
            [0.6 / den[0], 0.2 / den[1], 0.1 / den[2], 0.1 / den[3]],
            [0.1 / den[0], 0.5 / den[1], 0.3 / den[2], 0.1 / den[3]],
            [0.0, 0.0, 0.0, 0.0],
            [0.2 / den[0], 0.1 / den[1], 0.3 / den[2], 0.4 / den[3]],
        ];
        for r in 0..4 {
            for s in 0..4 {
                assert!((m.get(r, s) - expected[r][s]).abs() < 1e-12);
            }
        }
        assert!(m.max_column_error() < 1e-10);
    }

    #[test]
    fn cep_degenerate_column_becomes_point_mass() {
        let posts = vec![ProfilePosterior { probs: vec![0.5, 0.5, 0.0, 0.0] }; 3];
        let m = estimate_cep(&posts, &map_assign(&posts)).unwrap();
        assert_eq!(m.degenerate_columns, vec![2, 3]);
        assert_eq!(m.get(2, 2), 1.0);
        assert_eq!(m.get(3, 3), 1.0);
        assert!(m.max_column_error() < 1e-10);
    }

    #[test]
    fn cep_invariant_to_learner_order() {
        let mut r = rng(8);
        let posts: Vec<ProfilePosterior<f64>> = (0..40)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| r.random::<f64>() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                ProfilePosterior { probs: raw.iter().map(|v| v / s).collect() }
            })
            .collect();
        let a = estimate_cep(&posts, &map_assign(&posts)).unwrap();
        let rev: Vec<_> = posts.iter().rev().cloned().collect();
        let b = estimate_cep(&rev, &map_assign(&rev)).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                assert!((a.get(x, y) - b.get(x, y)).abs() < 1e-12);
            }
        }
    }

    fn random_params(r: &mut StreamRng, c: usize, monotone: bool) -> StructuralParams<f64> {
        let mut block = || -> Vec<Vec<f64>> {
            (0..2)
                .map(|_| (0..=c).map(|_| r.random_range(-1.5..1.5)).collect())
                .collect()
        };
        StructuralParams {
            beta: block(),
            gamma01: block(),
            gamma10: block(),
            monotone,
        }
    }

    fn random_cep(r: &mut StreamRng) -> CepMatrix<f64> {
        let mut m = vec![0.0; 16];
        for s in 0..4 {
            let raw: Vec<f64> = (0..4).map(|_| r.random::<f64>() + 0.05).collect();
            let tot: f64 = raw.iter().sum();
            for rr in 0..4 {
                m[rr * 4 + s] = raw[rr] / tot;
            }
        }
        CepMatrix::from_rows(4, m).unwrap()
    }

    /// Sum over every latent sequence of the joint probability.
    fn brute_force_loglik(
        params: &StructuralParams<f64>,
        w: &ProfilePanel,
        ceps: &[CepMatrix<f64>],
        z: &CovariateMatrix<f64>,
    ) -> f64 {
        let t = w.n_waves();
        let mut total = 0.0;
        for i in 0..w.n_learners() {
            let init = initial_profile_dist(params, z.row(i)).unwrap();
            let trans = transition_matrix(params, z.row(i)).unwrap();
            let mut lik = 0.0;
            for seq in 0..4usize.pow(t as u32) {
                let states: Vec<usize> = (0..t).map(|k| (seq / 4usize.pow(k as u32)) % 4).collect();
                let mut p = init[states[0]];
                for k in 1..t {
                    p *= trans.get(states[k - 1], states[k]);
                }
                for k in 0..t {
                    p *= ceps[k].get(w.get(i, k).get(), states[k]);
                }
                lik += p;
            }
            total += lik.ln();
        }
        total
    }

    fn random_instance(seed: u64, n: usize, t: usize, monotone: bool)
        -> (StructuralParams<f64>, ProfilePanel, Vec<CepMatrix<f64>>, CovariateMatrix<f64>) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 2, monotone);
        let z = gen_covariates(n, 2, 0.3, &mut r).unwrap();
        let idx: Vec<u32> = (0..n * t).map(|_| r.random_range(0..4u32)).collect();
        let w = ProfilePanel::from_indices(n, t, 2, idx).unwrap();
        let ceps = (0..t).map(|_| random_cep(&mut r)).collect();
        (params, w, ceps, z)
    }

    #[test]
    fn forward_recursion_matches_sequence_enumeration() {
        for (seed, t, monotone) in [(1, 2, true), (2, 2, false), (3, 3, true), (4, 3, false), (5, 1, true)] {
            let (params, w, ceps, z) = random_instance(seed, 7, t, monotone);
            let fast = step3_loglik(&params, &w, &ceps, &z).unwrap();
            let slow = brute_force_loglik(&params, &w, &ceps, &z);
            assert!((fast - slow).abs() < 1e-10, "T={t}: {fast} vs {slow}");
        }
    }

    #[test]
    fn identity_ceps_give_complete_data_loglik() {
        let (params, w, _, z) = random_instance(6, 10, 2, false);
        let ceps = vec![CepMatrix::identity(4); 2];
        let ll = step3_loglik(&params, &w, &ceps, &z).unwrap();
        let mut direct = 0.0;
        for i in 0..10 {
            let init = initial_profile_dist(&params, z.row(i)).unwrap();
            let trans = transition_matrix(&params, z.row(i)).unwrap();
            direct += init[w.get(i, 0).get()].ln() + trans.get(w.get(i, 0).get(), w.get(i, 1).get()).ln();
        }
        assert!((ll - direct).abs() < 1e-10);
    }

    #[test]
    fn single_wave_reduces_to_initial_mixture() {
        let (params, w, ceps, z) = random_instance(7, 5, 1, true);
        let ll = step3_loglik(&params, &w, &ceps, &z).unwrap();
        let direct: f64 = (0..5)
            .map(|i| {
                let init = initial_profile_dist(&params, z.row(i)).unwrap();
                (0..4).map(|s| init[s] * ceps[0].get(w.get(i, 0).get(), s)).sum::<f64>().ln()
            })
            .sum();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_likelihood_learner_is_reported() {
        let (params, _, _, z) = random_instance(8, 2, 2, true);
        // Learner 0 loses attribute 1 under identity CEPs: impossible when monotone.
        let w = ProfilePanel::from_indices(2, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let ceps = vec![CepMatrix::identity(4); 2];
        let terms = step3_loglik_terms(&params, &w, &ceps, &z).unwrap();
        assert_eq!(zero_likelihood_learners(&terms), vec![0]);
        assert_eq!(step3_loglik(&params, &w, &ceps, &z).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn step3_rejects_non_finite_theta() {
        let (mut params, w, ceps, z) = random_instance(9, 3, 2, true);
        params.beta[0][1] = f64::NAN;
        assert!(step3_loglik(&params, &w, &ceps, &z).is_err());
    }

    #[test]
    fn loglik_invariant_to_attribute_relabeling() {
        let swap = |c: usize| ((c & 1) << 1) | ((c >> 1) & 1);
        for seed in 10..15 {
            let (params, w, ceps, z) = random_instance(seed, 6, 2, seed % 2 == 0);
            let swapped_params = StructuralParams {
                beta: vec![params.beta[1].clone(), params.beta[0].clone()],
                gamma01: vec![params.gamma01[1].clone(), params.gamma01[0].clone()],
                gamma10: vec![params.gamma10[1].clone(), params.gamma10[0].clone()],
                monotone: params.monotone,
            };
            let w2 = ProfilePanel::from_indices(
                6,
                2,
                2,
                w.indices().iter().map(|&c| swap(c as usize) as u32).collect(),
            )
            .unwrap();
            let ceps2: Vec<_> = ceps
                .iter()
                .map(|m| {
                    let mut e = vec![0.0; 16];
                    for r in 0..4 {
                        for s in 0..4 {
                            e[swap(r) * 4 + swap(s)] = m.get(r, s);
                        }
                    }
                    CepMatrix::from_rows(4, e).unwrap()
                })
                .collect();
            let a = step3_loglik(&params, &w, &ceps, &z).unwrap();
            let b = step3_loglik(&swapped_params, &w2, &ceps2, &z).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Newton-Raphson logistic regression with intercept, independent of the
    /// BFGS path.
    fn irls(x: &[&[f64]], y: &[bool]) -> Vec<f64> {
        let p = x[0].len() + 1;
        let mut b = nalgebra::DVector::<f64>::zeros(p);
        for _ in 0..50 {
            let mut h = nalgebra::DMatrix::<f64>::zeros(p, p);
            let mut g = nalgebra::DVector::<f64>::zeros(p);
            for (row, &yi) in x.iter().zip(y) {
                let v = nalgebra::DVector::from_iterator(p, std::iter::once(1.0).chain(row.iter().copied()));
                let mu = crate::scalar::inv_logit(b.dot(&v));
                g += &v * ((yi as u8 as f64) - mu);
                h += &v * v.transpose() * (mu * (1.0 - mu));
            }
            let step = h.cholesky().unwrap().solve(&g);
            b += &step;
            if step.amax() < 1e-12 {
                break;
            }
        }
        b.iter().copied().collect()
    }

    #[test]
    fn identity_cep_fit_matches_separate_logistic_regressions() {
        let n = 3000;
        let mut r = rng(21);
        let z = gen_covariates(n, 3, 0.4, &mut r).unwrap();
        let truth = crate::simulate::default_true_params(2, 3);
        let w = gen_profiles(&z, &truth, 2, &mut r).unwrap();
        let ceps = vec![CepMatrix::identity(4); 2];
        let fit = fit_structural_corrected(&w, &ceps, &z, true, &Step3Config::default(), &mut r).unwrap();
        assert!(fit.status.converged(), "{:?}", fit.status);
        for a in 0..2 {
            let rows: Vec<&[f64]> = (0..n).map(|i| z.row(i)).collect();
            let y0: Vec<bool> = (0..n).map(|i| w.get(i, 0).masters(a)).collect();
            let beta = irls(&rows, &y0);
            let eligible: Vec<usize> = (0..n).filter(|&i| !y0[i]).collect();
            let rows1: Vec<&[f64]> = eligible.iter().map(|&i| z.row(i)).collect();
            let y1: Vec<bool> = eligible.iter().map(|&i| w.get(i, 1).masters(a)).collect();
            let gamma = irls(&rows1, &y1);
            for (est, oracle) in fit.params.beta[a].iter().zip(&beta) {
                assert!((est - oracle).abs() < 1e-4, "beta {est} vs {oracle}");
            }
            for (est, oracle) in fit.params.gamma01[a].iter().zip(&gamma) {
                assert!((est - oracle).abs() < 1e-4, "gamma01 {est} vs {oracle}");
            }
        }
        let at_truth = step3_loglik(&truth, &w, &ceps, &z).unwrap();
        assert!(fit.loglik >= at_truth);
    }

    #[test]
    fn acquisition_matches_empirical_frequency_without_covariates() {
        let n = 50_000;
        let mut r = rng(22);
        let z = CovariateMatrix::empty(n);
        let mut truth = StructuralParams::<f64>::zeros(2, 0, true);
        truth.beta = vec![vec![-0.3], vec![0.4]];
        truth.gamma01 = vec![vec![-1.0], vec![0.2]];
        let w = gen_profiles(&z, &truth, 2, &mut r).unwrap();
        let ceps = vec![CepMatrix::identity(4); 2];
        let fit = fit_structural_corrected(&w, &ceps, &z, true, &Step3Config::default(), &mut r).unwrap();
        for a in 0..2 {
            let eligible: Vec<usize> = (0..n).filter(|&i| !w.get(i, 0).masters(a)).collect();
            let m = eligible.len() as f64;
            let freq = eligible.iter().filter(|&&i| w.get(i, 1).masters(a)).count() as f64 / m;
            let fitted = crate::scalar::inv_logit(fit.params.gamma01[a][0]);
            let se = (freq * (1.0 - freq) / m).sqrt();
            assert!((fitted - freq).abs() < 3.0 * se, "{fitted} vs {freq}");
        }
    }

    #[test]
    fn initial_dist_helper_consistent() {
        let d = profile_dist_from_marginals(&[0.5f64, 0.5]);
        assert_eq!(d, vec![0.25; 4]);
    }
}
