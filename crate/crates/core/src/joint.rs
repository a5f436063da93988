//! Joint Bayesian estimator: Metropolis-within-Gibbs over latent profiles,
//! item parameters and structural coefficients.
//!
//! One sweep draws every learner-wave profile from its exact categorical full
//! conditional (systematic scan), then all guessing and slipping parameters
//! from their conjugate Beta conditionals, then each coefficient block (one
//! attribute's `beta`, `gamma01` and, when loss is allowed, `gamma10`) with an
//! adaptive random-walk Metropolis step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};
use crate::metrics::{ordered_sum, psrf};
use crate::model::{
    normalize_log_masses, ItemLogTable, ItemParams, ProfileIndex, ProfilePanel,
    QMatrix, ResponsePanel,
};
use crate::rng::{self, stage};
use crate::scalar::log_inv_logit;
use crate::simulate::DataView;
use crate::structural::{
    initial_profile_dist, transition_matrix, CovariateMatrix, StructuralParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    /// Beta(a, b) prior shared by every guessing and slipping parameter.
    pub item_a: f64,
    pub item_b: f64,
    pub coeff_mean: f64,
    pub coeff_sd: f64,
    /// Prior on loss intercepts; only used when loss is allowed.
    pub gamma10_intercept_mean: f64,
    pub gamma10_intercept_sd: f64,
    /// Pin the loss probability to zero and skip `gamma10` entirely.
    pub monotone: bool,
    /// Restrict every item to `g < 1 - s`, so a master is more likely to
    /// answer correctly than a non-master. Without it the posterior has a
    /// mirror mode with an attribute's mastery labels flipped.
    pub ordered_items: bool,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            item_a: 1.0,
            item_b: 1.0,
            coeff_mean: 0.0,
            coeff_sd: 1.0,
            gamma10_intercept_mean: -2.0,
            gamma10_intercept_sd: 1.0,
            monotone: true,
            ordered_items: true,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("item prior a", self.item_a),
            ("item prior b", self.item_b),
            ("coefficient prior sd", self.coeff_sd),
            ("gamma10 intercept prior sd", self.gamma10_intercept_sd),
        ];
        for (what, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{what} must be positive, got {v}")));
            }
        }
        if !self.coeff_mean.is_finite() || !self.gamma10_intercept_mean.is_finite() {
            return Err(Error::config("prior means must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    pub burn_in: usize,
    /// Draws kept per chain after thinning.
    pub kept: usize,
    pub thin: usize,
    /// Starting random-walk standard deviation for every coefficient block.
    pub proposal_sd: f64,
    /// Burn-in iterations between proposal-scale adjustments.
    pub adapt_window: usize,
    pub psrf_threshold: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            burn_in: 1000,
            kept: 2000,
            thin: 1,
            proposal_sd: 0.2,
            adapt_window: 50,
            psrf_threshold: 1.2,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.kept == 0 || self.thin == 0 || self.adapt_window == 0 {
            return Err(Error::config(
                "chains, kept draws, thinning and adaptation window must be positive",
            ));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::config("proposal sd must be positive"));
        }
        if !(self.psrf_threshold > 1.0) {
            return Err(Error::config("PSRF threshold must exceed 1"));
        }
        Ok(())
    }
}

/// Current values of everything the sampler updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub items: ItemParams<f64>,
    pub structural: StructuralParams<f64>,
    pub profiles: ProfilePanel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Initial,
    Acquisition,
    Loss,
}

/// One attribute's coefficient vector for one of the three logistic models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoeffBlock {
    pub kind: BlockKind,
    pub attribute: usize,
}

impl CoeffBlock {
    /// Blocks in sampling order: every `beta`, every `gamma01`, then every
    /// `gamma10` unless monotone.
    pub fn all(n_attributes: usize, monotone: bool) -> Vec<CoeffBlock> {
        let mut kinds = vec![BlockKind::Initial, BlockKind::Acquisition];
        if !monotone {
            kinds.push(BlockKind::Loss);
        }
        kinds
            .into_iter()
            .flat_map(|kind| (0..n_attributes).map(move |attribute| CoeffBlock { kind, attribute }))
            .collect()
    }

    pub fn name(&self) -> String {
        let group = match self.kind {
            BlockKind::Initial => "beta",
            BlockKind::Acquisition => "gamma01",
            BlockKind::Loss => "gamma10",
        };
        format!("{group}.{}", self.attribute + 1)
    }

    pub fn get<'a>(&self, p: &'a StructuralParams<f64>) -> &'a [f64] {
        match self.kind {
            BlockKind::Initial => &p.beta[self.attribute],
            BlockKind::Acquisition => &p.gamma01[self.attribute],
            BlockKind::Loss => &p.gamma10[self.attribute],
        }
    }

    fn get_mut<'a>(&self, p: &'a mut StructuralParams<f64>) -> &'a mut Vec<f64> {
        match self.kind {
            BlockKind::Initial => &mut p.beta[self.attribute],
            BlockKind::Acquisition => &mut p.gamma01[self.attribute],
            BlockKind::Loss => &mut p.gamma10[self.attribute],
        }
    }
}

#[inline]
fn predictor(coef: &[f64], z: &[f64]) -> f64 {
    z.iter().zip(&coef[1..]).fold(coef[0], |acc, (z, b)| acc + b * z)
}

#[inline]
fn log_bernoulli(event: bool, x: f64) -> f64 {
    if event {
        log_inv_logit(x)
    } else {
        log_inv_logit(-x)
    }
}

/// Log-likelihood of the Bernoulli events a coefficient block governs:
/// wave-1 mastery for `beta`, acquisition among non-masters for `gamma01`,
/// loss among masters for `gamma10`.
pub fn block_loglik(
    block: CoeffBlock,
    coef: &[f64],
    profiles: &ProfilePanel,
    covariates: &CovariateMatrix<f64>,
) -> f64 {
    let a = block.attribute;
    let mut ll = 0.0;
    for i in 0..profiles.n_learners() {
        let z = covariates.row(i);
        match block.kind {
            BlockKind::Initial => ll += log_bernoulli(profiles.get(i, 0).masters(a), predictor(coef, z)),
            BlockKind::Acquisition | BlockKind::Loss => {
                let from_master = block.kind == BlockKind::Loss;
                let mut x = None;
                for t in 1..profiles.n_waves() {
                    let (prev, cur) = (profiles.get(i, t - 1).masters(a), profiles.get(i, t).masters(a));
                    if prev == from_master {
                        let x = *x.get_or_insert_with(|| predictor(coef, z));
                        ll += log_bernoulli(cur != prev, x);
                    }
                }
            }
        }
    }
    ll
}

fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn coeff_log_prior(block: CoeffBlock, coef: &[f64], prior: &PriorSpec) -> f64 {
    coef.iter()
        .enumerate()
        .map(|(c, &v)| {
            if block.kind == BlockKind::Loss && c == 0 {
                normal_ln_pdf(v, prior.gamma10_intercept_mean, prior.gamma10_intercept_sd)
            } else {
                normal_ln_pdf(v, prior.coeff_mean, prior.coeff_sd)
            }
        })
        .sum()
}

/// Unnormalized log full conditional of a coefficient block.
pub fn block_log_target(
    block: CoeffBlock,
    coef: &[f64],
    profiles: &ProfilePanel,
    covariates: &CovariateMatrix<f64>,
    prior: &PriorSpec,
) -> f64 {
    block_loglik(block, coef, profiles, covariates) + coeff_log_prior(block, coef, prior)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhStep {
    pub value: Vec<f64>,
    pub log_target: f64,
    pub accepted: bool,
}

/// One Gaussian random-walk Metropolis step. Proposals with a non-finite
/// target are rejected.
pub fn mh_step<R: Rng + ?Sized, F: Fn(&[f64]) -> f64>(
    current: &[f64],
    current_log_target: f64,
    sd: f64,
    log_target: F,
    rng: &mut R,
) -> Result<MhStep> {
    if !current_log_target.is_finite() {
        return Err(Error::Invariant(format!(
            "log target at the current state is {current_log_target}"
        )));
    }
    let proposal: Vec<f64> = current
        .iter()
        .map(|&v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = log_target(&proposal);
    let u: f64 = rng.random();
    if lp.is_finite() && u.ln() < lp - current_log_target {
        Ok(MhStep {
            value: proposal,
            log_target: lp,
            accepted: true,
        })
    } else {
        Ok(MhStep {
            value: current.to_vec(),
            log_target: current_log_target,
            accepted: false,
        })
    }
}

/// Updates one coefficient block of `state` in place; returns whether the
/// proposal was accepted.
pub fn sample_coeff_block<R: Rng + ?Sized>(
    block: CoeffBlock,
    state: &mut ChainState,
    covariates: &CovariateMatrix<f64>,
    prior: &PriorSpec,
    sd: f64,
    rng: &mut R,
) -> Result<bool> {
    let profiles = &state.profiles;
    let target = |c: &[f64]| block_log_target(block, c, profiles, covariates, prior);
    let current = block.get(&state.structural);
    let step = mh_step(current, target(current), sd, target, rng)?;
    *block.get_mut(&mut state.structural) = step.value;
    Ok(step.accepted)
}

/// Tallies per item: `n01`/`n00` are correct/incorrect responses among
/// learner-waves with `eta = 0`, `n11`/`n10` the same among `eta = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EtaCounts {
    pub n00: Vec<u64>,
    pub n01: Vec<u64>,
    pub n10: Vec<u64>,
    pub n11: Vec<u64>,
}

pub fn eta_counts(responses: &ResponsePanel, q: &QMatrix, profiles: &ProfilePanel) -> EtaCounts {
    let j = q.n_items();
    let mut c = EtaCounts {
        n00: vec![0; j],
        n01: vec![0; j],
        n10: vec![0; j],
        n11: vec![0; j],
    };
    for t in 0..responses.n_waves() {
        for i in 0..responses.n_learners() {
            let prof = profiles.get(i, t);
            for (item, &y) in responses.learner_wave(i, t).iter().enumerate() {
                let slot = match (q.eta(item, prof), y == 1) {
                    (false, false) => &mut c.n00,
                    (false, true) => &mut c.n01,
                    (true, false) => &mut c.n10,
                    (true, true) => &mut c.n11,
                };
                slot[item] += 1;
            }
        }
    }
    c
}

/// Beta(a, b) draw restricted to `(0, upper)`: rejection first, then the
/// inverse CDF when the restriction removes most of the mass.
fn truncated_beta<R: Rng + ?Sized>(a: f64, b: f64, upper: f64, rng: &mut R) -> Result<f64> {
    let d = Beta::new(a, b).map_err(|e| Error::config(format!("Beta prior: {e}")))?;
    if upper >= 1.0 {
        return Ok(d.sample(rng));
    }
    for _ in 0..32 {
        let x = d.sample(rng);
        if x < upper {
            return Ok(x);
        }
    }
    // Bisection on the regularized incomplete beta function.
    let target = rng.random::<f64>() * beta_reg(a, b, upper);
    let (mut lo, mut hi) = (0.0, upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Conjugate draws `g ~ Beta(a + n01, b + n00)`, `s ~ Beta(a + n10, b + n11)`.
/// With [`PriorSpec::ordered_items`] the guess is drawn below `1 - s` given
/// the current slip, then the slip below `1 - g` given the new guess.
pub fn sample_item_params<R: Rng + ?Sized>(
    counts: &EtaCounts,
    prior: &PriorSpec,
    current: &ItemParams<f64>,
    rng: &mut R,
) -> Result<ItemParams<f64>> {
    let j = counts.n00.len();
    if current.n_items() != j {
        return Err(Error::dim("item count mismatch"));
    }
    let (a, b) = (prior.item_a, prior.item_b);
    let mut guess = Vec::with_capacity(j);
    let mut slip = Vec::with_capacity(j);
    for item in 0..j {
        let bound = |other: f64| if prior.ordered_items { 1.0 - other } else { 1.0 };
        let g = truncated_beta(
            a + counts.n01[item] as f64,
            b + counts.n00[item] as f64,
            bound(current.slip[item]),
            rng,
        )?;
        let s = truncated_beta(a + counts.n10[item] as f64, b + counts.n11[item] as f64, bound(g), rng)?;
        guess.push(g);
        slip.push(s);
    }
    ItemParams::new(guess, slip)
}

/// Per-learner structural terms on the log scale: initial distribution and
/// row-major transition matrix.
struct LearnerLogStructure {
    init: Vec<f64>,
    trans: Vec<f64>,
}

fn learner_log_structure(params: &StructuralParams<f64>, z: &[f64], n_waves: usize) -> Result<LearnerLogStructure> {
    let init = initial_profile_dist(params, z)?.into_iter().map(f64::ln).collect();
    let trans = if n_waves > 1 {
        let m = transition_matrix(params, z)?;
        let np = m.n_profiles();
        (0..np * np).map(|x| m.get(x / np, x % np).ln()).collect()
    } else {
        Vec::new()
    };
    Ok(LearnerLogStructure { init, trans })
}

fn conditional_probs(
    table: &ItemLogTable<f64>,
    y: &[u8],
    s: &LearnerLogStructure,
    prev: Option<usize>,
    next: Option<usize>,
    log_mass: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    let np = log_mass.len();
    for (c, lm) in log_mass.iter_mut().enumerate() {
        let entry = match prev {
            None => s.init[c],
            Some(r) => s.trans[r * np + c],
        };
        let exit = next.map_or(0.0, |n| s.trans[c * np + n]);
        *lm = table.loglik(c, y) + entry + exit;
    }
    normalize_log_masses(log_mass, out)?;
    Ok(())
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = c;
            if u < acc {
                return c;
            }
        }
    }
    last
}

/// Exact full conditional of one learner-wave profile given everything else.
pub fn profile_conditional(
    data: &DataView<'_>,
    state: &ChainState,
    learner: usize,
    wave: usize,
) -> Result<Vec<f64>> {
    let n_waves = state.profiles.n_waves();
    if learner >= state.profiles.n_learners() || wave >= n_waves {
        return Err(Error::dim("learner or wave out of range"));
    }
    let table = ItemLogTable::new(&state.items, data.qmatrix)?;
    let s = learner_log_structure(&state.structural, data.covariates.row(learner), n_waves)?;
    let np = data.qmatrix.n_profiles();
    let prev = (wave > 0).then(|| state.profiles.get(learner, wave - 1).get());
    let next = (wave + 1 < n_waves).then(|| state.profiles.get(learner, wave + 1).get());
    let mut log_mass = vec![0.0; np];
    let mut out = vec![0.0; np];
    conditional_probs(
        &table,
        data.responses.learner_wave(learner, wave),
        &s,
        prev,
        next,
        &mut log_mass,
        &mut out,
    )?;
    Ok(out)
}

pub fn sample_profile_conditional<R: Rng + ?Sized>(
    data: &DataView<'_>,
    state: &ChainState,
    learner: usize,
    wave: usize,
    rng: &mut R,
) -> Result<ProfileIndex> {
    let probs = profile_conditional(data, state, learner, wave)?;
    Ok(ProfileIndex(draw_categorical(&probs, rng) as u32))
}

/// Systematic scan over every learner and wave.
fn sweep_profiles<R: Rng + ?Sized>(data: &DataView<'_>, state: &mut ChainState, rng: &mut R) -> Result<()> {
    let table = ItemLogTable::new(&state.items, data.qmatrix)?;
    let np = data.qmatrix.n_profiles();
    let n_waves = state.profiles.n_waves();
    let mut log_mass = vec![0.0; np];
    let mut probs = vec![0.0; np];
    for i in 0..state.profiles.n_learners() {
        let s = learner_log_structure(&state.structural, data.covariates.row(i), n_waves)?;
        for t in 0..n_waves {
            let prev = (t > 0).then(|| state.profiles.get(i, t - 1).get());
            let next = (t + 1 < n_waves).then(|| state.profiles.get(i, t + 1).get());
            conditional_probs(
                &table,
                data.responses.learner_wave(i, t),
                &s,
                prev,
                next,
                &mut log_mass,
                &mut probs,
            )
            .map_err(|e| Error::Invariant(format!("learner {i}, wave {}: {e}", t + 1)))?;
            state.profiles.set(i, t, ProfileIndex(draw_categorical(&probs, rng) as u32));
        }
    }
    Ok(())
}

/// Log joint posterior split into its three factor groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogJoint {
    /// DINA response likelihood over every learner-wave.
    pub measurement: f64,
    /// Initial-profile and transition probabilities of the profile paths.
    pub structural: f64,
    /// Item Beta priors plus coefficient normal priors.
    pub prior: f64,
}

impl LogJoint {
    pub fn total(&self) -> f64 {
        self.measurement + self.structural + self.prior
    }
}

fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    let term = |shape: f64, v: f64| if shape == 1.0 { 0.0 } else { (shape - 1.0) * v.ln() };
    term(a, x) + term(b, 1.0 - x) - ln_beta(a, b)
}

pub fn log_joint_posterior(data: &DataView<'_>, state: &ChainState, prior: &PriorSpec) -> Result<LogJoint> {
    data.validate()?;
    let table = ItemLogTable::new(&state.items, data.qmatrix)?;
    let p = &state.profiles;
    let mut measurement = 0.0;
    let mut structural = 0.0;
    for i in 0..p.n_learners() {
        for t in 0..p.n_waves() {
            measurement += table.loglik(p.get(i, t).get(), data.responses.learner_wave(i, t));
        }
        let z = data.covariates.row(i);
        structural += initial_profile_dist(&state.structural, z)?[p.get(i, 0).get()].ln();
        if p.n_waves() > 1 {
            let m = transition_matrix(&state.structural, z)?;
            for t in 1..p.n_waves() {
                structural += m.get(p.get(i, t - 1).get(), p.get(i, t).get()).ln();
            }
        }
    }
    let mut log_prior: f64 = state
        .items
        .guess
        .iter()
        .chain(&state.items.slip)
        .map(|&v| beta_ln_pdf(v, prior.item_a, prior.item_b))
        .sum();
    if prior.ordered_items && state.items.guess.iter().zip(&state.items.slip).any(|(g, s)| g + s >= 1.0) {
        log_prior = f64::NEG_INFINITY;
    }
    for block in CoeffBlock::all(state.structural.n_attributes(), prior.monotone) {
        log_prior += coeff_log_prior(block, block.get(&state.structural), prior);
    }
    Ok(LogJoint {
        measurement,
        structural,
        prior: log_prior,
    })
}

/// Random starting state: profiles drawn from each wave's posterior under
/// neutral items (`g = s = 0.25`, uniform class weights) and made monotone by
/// carrying mastery forward; coefficients drawn from their priors; items at 0.2.
pub fn initial_state<R: Rng + ?Sized>(
    data: &DataView<'_>,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<ChainState> {
    let (n, t) = (data.responses.n_learners(), data.responses.n_waves());
    let (j, k) = (data.qmatrix.n_items(), data.qmatrix.n_attributes());
    let np = data.qmatrix.n_profiles();
    let neutral = ItemLogTable::new(&ItemParams::constant(j, 0.25, 0.25), data.qmatrix)?;
    let mut profiles = ProfilePanel::new(n, t, k);
    let mut log_mass = vec![0.0; np];
    let mut probs = vec![0.0; np];
    for i in 0..n {
        let mut carried = 0u32;
        for w in 0..t {
            neutral.loglik_all(data.responses.learner_wave(i, w), &mut log_mass);
            normalize_log_masses(&log_mass, &mut probs)?;
            let mut c = draw_categorical(&probs, rng) as u32;
            if prior.monotone {
                c |= carried;
                carried = c;
            }
            profiles.set(i, w, ProfileIndex(c));
        }
    }
    let mut structural = StructuralParams::zeros(k, data.covariates.n_covariates(), prior.monotone);
    for block in CoeffBlock::all(k, prior.monotone) {
        let coef: Vec<f64> = (0..=data.covariates.n_covariates())
            .map(|c| {
                let (m, sd) = if block.kind == BlockKind::Loss && c == 0 {
                    (prior.gamma10_intercept_mean, prior.gamma10_intercept_sd)
                } else {
                    (prior.coeff_mean, prior.coeff_sd)
                };
                m + sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        *block.get_mut(&mut structural) = coef;
    }
    Ok(ChainState {
        items: ItemParams::constant(j, 0.2, 0.2),
        structural,
        profiles,
    })
}

/// Names of the sampled continuous parameters in draw order: `g.j`, `s.j`,
/// then `beta.k.c`, `gamma01.k.c` and (non-monotone) `gamma10.k.c`, with
/// 1-based item and attribute numbers and `c = 0` for the intercept.
pub fn parameter_names(n_items: usize, n_attributes: usize, n_covariates: usize, monotone: bool) -> Vec<String> {
    let mut names: Vec<String> = (1..=n_items).map(|j| format!("g.{j}")).collect();
    names.extend((1..=n_items).map(|j| format!("s.{j}")));
    for block in CoeffBlock::all(n_attributes, monotone) {
        names.extend((0..=n_covariates).map(|c| format!("{}.{c}", block.name())));
    }
    names
}

fn is_monitored(name: &str) -> bool {
    !name.starts_with("gamma10")
}

/// Raw output of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    /// Kept draws, indexed `[parameter][draw]`.
    pub draws: Vec<Vec<f64>>,
    /// Visit counts indexed `(learner * T + wave) * 2^K + profile`.
    pub profile_counts: Vec<u32>,
    /// Post-burn-in acceptance rate per coefficient block.
    pub acceptance: Vec<f64>,
    /// Proposal sd per block after adaptation.
    pub proposal_sd: Vec<f64>,
}

/// Runs chain `chain` from a random start. Its random stream depends only on
/// `cfg.seed` and the chain index.
pub fn run_chain(data: &DataView<'_>, prior: &PriorSpec, cfg: &McmcConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = rng::stream(cfg.seed, &[stage::JOINT, stage::CHAIN, chain as u64]);
    let mut state = initial_state(data, prior, &mut rng)?;
    let k = data.qmatrix.n_attributes();
    let blocks = CoeffBlock::all(k, prior.monotone);
    let np = data.qmatrix.n_profiles();
    let n_params = parameter_names(data.qmatrix.n_items(), k, data.covariates.n_covariates(), prior.monotone).len();

    let mut sds = vec![cfg.proposal_sd; blocks.len()];
    let mut window = vec![0usize; blocks.len()];
    let mut accepted = vec![0usize; blocks.len()];
    let mut draws = vec![Vec::with_capacity(cfg.kept); n_params];
    let mut counts = vec![0u32; state.profiles.indices().len() * np];
    let total = cfg.burn_in + cfg.kept * cfg.thin;

    for iter in 0..total {
        sweep_profiles(data, &mut state, &mut rng)?;
        let tally = eta_counts(data.responses, data.qmatrix, &state.profiles);
        state.items = sample_item_params(&tally, prior, &state.items, &mut rng)?;
        for (b, block) in blocks.iter().enumerate() {
            let acc = sample_coeff_block(*block, &mut state, data.covariates, prior, sds[b], &mut rng)?;
            if iter < cfg.burn_in {
                window[b] += acc as usize;
            } else {
                accepted[b] += acc as usize;
            }
        }
        if iter < cfg.burn_in && (iter + 1) % cfg.adapt_window == 0 {
            for (sd, w) in sds.iter_mut().zip(window.iter_mut()) {
                let rate = *w as f64 / cfg.adapt_window as f64;
                if rate < 0.2 {
                    *sd *= 0.75;
                } else if rate > 0.4 {
                    *sd *= 1.3;
                }
                *w = 0;
            }
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            let values = state
                .items
                .guess
                .iter()
                .chain(&state.items.slip)
                .copied()
                .chain(state.structural.to_vector());
            for (d, v) in draws.iter_mut().zip(values) {
                d.push(v);
            }
            for (cell, &c) in state.profiles.indices().iter().enumerate() {
                counts[cell * np + c as usize] += 1;
            }
        }
    }
    let post = (cfg.kept * cfg.thin) as f64;
    Ok(ChainOutput {
        draws,
        profile_counts: counts,
        acceptance: accepted.iter().map(|&a| a as f64 / post).collect(),
        proposal_sd: sds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Central 95% interval from pooled draws.
    pub lower: f64,
    pub upper: f64,
    /// `NaN` with fewer than two chains or ten draws.
    pub psrf: f64,
    /// Whether this parameter counts toward the convergence check.
    pub monitored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub params: Vec<ParamSummary>,
    /// Marginal posterior mode per learner-wave (ties go to the lower index).
    pub map_profiles: ProfilePanel,
    /// Pooled visit frequencies, indexed like [`ChainOutput::profile_counts`].
    pub profile_probs: Vec<f64>,
    /// `(block name, mean acceptance rate over chains)`.
    pub acceptance: Vec<(String, f64)>,
    pub max_psrf: f64,
    pub converged: bool,
    pub n_items: usize,
    pub n_covariates: usize,
    pub monotone: bool,
}

impl PosteriorSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Posterior-mean item parameters.
    pub fn item_params(&self) -> ItemParams<f64> {
        let j = self.n_items;
        ItemParams {
            guess: self.params[..j].iter().map(|p| p.mean).collect(),
            slip: self.params[j..2 * j].iter().map(|p| p.mean).collect(),
        }
    }

    /// Posterior-mean structural coefficients.
    pub fn structural(&self) -> StructuralParams<f64> {
        let k = self.map_profiles.n_attributes();
        let template = StructuralParams::zeros(k, self.n_covariates, self.monotone);
        let theta: Vec<f64> = self.params[2 * self.n_items..].iter().map(|p| p.mean).collect();
        template
            .with_vector(&theta)
            .expect("summary layout matches structural layout")
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pools chains into a summary. Every reduction is order-free, so permuting
/// `chains` gives an identical result.
pub fn summarize(
    chains: &[ChainOutput],
    names: &[String],
    n_learners: usize,
    n_waves: usize,
    n_attributes: usize,
    monotone: bool,
    psrf_threshold: f64,
) -> Result<PosteriorSummary> {
    if chains.is_empty() {
        return Err(Error::input("no chains to summarize"));
    }
    if chains.iter().any(|c| c.draws.len() != names.len()) {
        return Err(Error::dim("chain draws do not match parameter names"));
    }
    let n_items = names.iter().filter(|n| n.starts_with("g.")).count();
    let width = names.len() - 2 * n_items;
    let blocks = if monotone { 2 } else { 3 };
    let n_covariates = width / (blocks * n_attributes) - 1;

    let params = names
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let mut pooled: Vec<f64> = chains.iter().flat_map(|c| c.draws[p].iter().copied()).collect();
            pooled.sort_by(|a, b| a.total_cmp(b));
            let n = pooled.len() as f64;
            let mean = ordered_sum(pooled.iter().copied()) / n;
            let var = ordered_sum(pooled.iter().map(|v| (v - mean).powi(2))) / (n - 1.0).max(1.0);
            let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.draws[p].clone()).collect();
            let r = psrf(&per_chain).unwrap_or(f64::NAN);
            ParamSummary {
                name: name.clone(),
                mean,
                sd: var.sqrt(),
                lower: quantile(&pooled, 0.025),
                upper: quantile(&pooled, 0.975),
                psrf: r,
                monitored: is_monitored(name),
            }
        })
        .collect::<Vec<_>>();

    let np = 1usize << n_attributes;
    let cells = n_learners * n_waves;
    let mut totals = vec![0u64; cells * np];
    for c in chains {
        if c.profile_counts.len() != totals.len() {
            return Err(Error::dim("profile count length mismatch"));
        }
        for (t, &v) in totals.iter_mut().zip(&c.profile_counts) {
            *t += v as u64;
        }
    }
    let mut map_profiles = ProfilePanel::new(n_learners, n_waves, n_attributes);
    let mut profile_probs = vec![0.0; totals.len()];
    for cell in 0..cells {
        let row = &totals[cell * np..(cell + 1) * np];
        let sum: u64 = row.iter().sum();
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            profile_probs[cell * np + c] = v as f64 / sum.max(1) as f64;
            if v > row[best] {
                best = c;
            }
        }
        map_profiles.set(cell / n_waves, cell % n_waves, ProfileIndex(best as u32));
    }

    let acceptance = CoeffBlock::all(n_attributes, monotone)
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let rate = ordered_sum(chains.iter().map(|c| c.acceptance[b])) / chains.len() as f64;
            (block.name(), rate)
        })
        .collect();

    let max_psrf = params
        .iter()
        .filter(|p| p.monitored)
        .map(|p| p.psrf)
        .fold(f64::NEG_INFINITY, |m, r| if r.is_nan() || m.is_nan() { f64::NAN } else { m.max(r) });
    Ok(PosteriorSummary {
        params,
        map_profiles,
        profile_probs,
        acceptance,
        max_psrf,
        converged: max_psrf < psrf_threshold,
        n_items,
        n_covariates,
        monotone,
    })
}

#[derive(Clone, Debug)]
pub struct JointFit {
    pub summary: PosteriorSummary,
    pub chains: Vec<ChainOutput>,
    pub names: Vec<String>,
}

impl JointFit {
    /// Writes every kept draw as `chain,iteration,parameter,value`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("chain,iteration,parameter,value\n");
        for (c, chain) in self.chains.iter().enumerate() {
            for (p, name) in self.names.iter().enumerate() {
                for (it, v) in chain.draws[p].iter().enumerate() {
                    let _ = writeln!(s, "{c},{it},{name},{v}");
                }
            }
        }
        fs::write(path, s)?;
        Ok(())
    }
}

/// Runs the configured chains (concurrently) and pools them.
pub fn fit_joint(data: DataView<'_>, prior: &PriorSpec, cfg: &McmcConfig) -> Result<JointFit> {
    data.validate()?;
    prior.validate()?;
    cfg.validate()?;
    let (n, t) = (data.responses.n_learners(), data.responses.n_waves());
    let k = data.qmatrix.n_attributes();
    let names = parameter_names(data.qmatrix.n_items(), k, data.covariates.n_covariates(), prior.monotone);
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(&data, prior, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&chains, &names, n, t, k, prior.monotone, cfg.psrf_threshold)?;
    Ok(JointFit { summary, chains, names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::simulate::{builtin_qmatrix, gen_covariates, gen_profiles, gen_responses, GenConfig, gen_dataset};
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    struct Fixture {
        responses: ResponsePanel,
        covariates: CovariateMatrix<f64>,
        q: QMatrix,
        state: ChainState,
    }

    impl Fixture {
        fn view(&self) -> DataView<'_> {
            DataView {
                responses: &self.responses,
                covariates: &self.covariates,
                qmatrix: &self.q,
            }
        }
    }

    fn fixture(seed: u64, n: usize, t: usize, monotone: bool) -> Fixture {
        let mut r = rng(seed);
        let q = builtin_qmatrix(6).unwrap();
        let covariates = gen_covariates(n, 2, 0.3, &mut r).unwrap();
        let mut structural = crate::simulate::default_true_params(2, 2);
        structural.monotone = monotone;
        let profiles = gen_profiles(&covariates, &structural, t, &mut r).unwrap();
        let items = ItemParams::new(
            (0..6).map(|_| r.random_range(0.1..0.3)).collect(),
            (0..6).map(|_| r.random_range(0.1..0.3)).collect(),
        )
        .unwrap();
        let responses = gen_responses(&profiles, &q, &items, &mut r).unwrap();
        Fixture {
            responses,
            covariates,
            q,
            state: ChainState { items, structural, profiles },
        }
    }

    #[test]
    fn uninformative_items_give_uniform_conditional() {
        let mut f = fixture(1, 1, 1, true);
        f.state.items = ItemParams::constant(6, 0.5, 0.5);
        f.state.structural = StructuralParams::zeros(2, 2, true);
        let probs = profile_conditional(&f.view(), &f.state, 0, 0).unwrap();
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
        let mut r = rng(2);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[sample_profile_conditional(&f.view(), &f.state, 0, 0, &mut r).unwrap().get()] += 1;
        }
        let se = (0.25f64 * 0.75 / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 3.0 * se);
        }
    }

    #[test]
    fn monotone_conditional_respects_absorbing_mastery() {
        let mut f = fixture(3, 4, 2, true);
        f.state.profiles.set(0, 1, ProfileIndex(0));
        let probs = profile_conditional(&f.view(), &f.state, 0, 0).unwrap();
        assert_eq!(&probs[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(probs[0], 1.0);
    }

    #[test]
    fn item_draws_without_eta0_data_follow_the_prior() {
        let counts = EtaCounts { n00: vec![0], n01: vec![0], n10: vec![20], n11: vec![80] };
        let mut r = rng(4);
        let draws = 40_000;
        let (mut g, mut s) = (Vec::new(), Vec::new());
        let prior = PriorSpec { ordered_items: false, ..PriorSpec::default() };
        let current = ItemParams::constant(1, 0.2, 0.2);
        for _ in 0..draws {
            let p = sample_item_params(&counts, &prior, &current, &mut r).unwrap();
            g.push(p.guess[0]);
            s.push(p.slip[0]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // Beta(1, 1): mean 1/2, variance 1/12.
        assert!((mean(&g) - 0.5).abs() < 3.0 * (1.0 / 12.0 / draws as f64).sqrt());
        // Beta(21, 81): mean 21/102.
        let var = 21.0 * 81.0 / (102.0f64.powi(2) * 103.0);
        assert!((mean(&s) - 21.0 / 102.0).abs() < 3.0 * (var / draws as f64).sqrt());
        assert!((21.0f64 / 102.0 - 0.206).abs() < 1e-3);
    }

    #[test]
    fn ordered_items_draw_from_the_truncated_conditional() {
        // g | s = 0.3 ~ Beta(3, 2) on (0, 0.7): compare the mean with quadrature.
        let counts = EtaCounts { n00: vec![1], n01: vec![2], n10: vec![0], n11: vec![0] };
        let current = ItemParams::constant(1, 0.2, 0.3);
        let prior = PriorSpec { item_a: 1.0, item_b: 1.0, ..PriorSpec::default() };
        let (mut num, mut den) = (0.0, 0.0);
        for step in 0..70_000 {
            let x = (step as f64 + 0.5) / 100_000.0;
            let w = x * x * (1.0 - x);
            num += x * w;
            den += w;
        }
        let mut r = rng(12);
        let draws = 40_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let p = sample_item_params(&counts, &prior, &current, &mut r).unwrap();
            assert!(p.guess[0] < 0.7);
            assert!(p.guess[0] + p.slip[0] < 1.0);
            sum += p.guess[0];
        }
        assert!((sum / draws as f64 - num / den).abs() < 0.005);
        // Mass almost entirely above the bound takes the inverse-CDF path.
        let x = truncated_beta(200.0, 2.0, 0.5, &mut r).unwrap();
        assert!(x > 0.0 && x < 0.5);
    }

    #[test]
    fn eta_counts_match_hand_tally() {
        // Two items: item 1 needs attribute 1, item 2 needs both.
        let q = QMatrix::new(vec![vec![1, 0], vec![1, 1]]).unwrap();
        let profiles = ProfilePanel::from_indices(5, 1, 2, vec![0, 1, 2, 3, 3]).unwrap();
        let y = vec![1, 0, 0, 1, 1, 1, 1, 0, 0, 1];
        let responses = ResponsePanel::new(5, 2, 1, y).unwrap();
        let c = eta_counts(&responses, &q, &profiles);
        // Item 1 eta: 0,1,0,1,1 with y 1,0,1,1,0.
        // Item 2 eta: 0,0,0,1,1 with y 0,1,1,0,1.
        assert_eq!(c.n01, vec![2, 2]);
        assert_eq!(c.n00, vec![0, 1]);
        assert_eq!(c.n11, vec![1, 1]);
        assert_eq!(c.n10, vec![2, 1]);
    }

    #[test]
    fn mh_with_flat_target_always_accepts() {
        let mut r = rng(5);
        let mut x = vec![0.3, -0.2];
        for _ in 0..1000 {
            let step = mh_step(&x, 1.5, 0.7, |_| 1.5, &mut r).unwrap();
            assert!(step.accepted);
            x = step.value;
        }
        assert!(mh_step(&x, f64::NAN, 0.7, |_| 0.0, &mut r).is_err());
    }

    #[test]
    fn empty_data_block_samples_its_prior() {
        let profiles = ProfilePanel::new(0, 2, 1);
        let cov = CovariateMatrix::empty(0);
        let prior = PriorSpec::default();
        let block = CoeffBlock { kind: BlockKind::Initial, attribute: 0 };
        let mut state = ChainState {
            items: ItemParams::constant(1, 0.2, 0.2),
            structural: StructuralParams::zeros(1, 0, true),
            profiles,
        };
        let mut r = rng(6);
        let (mut sum, draws) = (0.0, 50_000);
        for _ in 0..draws {
            sample_coeff_block(block, &mut state, &cov, &prior, 2.4, &mut r).unwrap();
            sum += state.structural.beta[0][0];
        }
        assert!((sum / draws as f64).abs() < 0.05);
    }

    #[test]
    fn log_joint_groups_agree_with_block_factorization() {
        for (seed, monotone) in [(7, true), (8, false)] {
            let mut f = fixture(seed, 25, 3, monotone);
            f.state.structural.gamma10 = vec![vec![-1.5, 0.2, -0.3], vec![-2.5, 0.1, 0.4]];
            let prior = PriorSpec { monotone, item_a: 2.0, item_b: 3.0, ..PriorSpec::default() };
            let lj = log_joint_posterior(&f.view(), &f.state, &prior).unwrap();
            let blocks = CoeffBlock::all(2, monotone);
            let structural: f64 = blocks
                .iter()
                .map(|b| block_loglik(*b, b.get(&f.state.structural), &f.state.profiles, &f.covariates))
                .sum();
            assert!((lj.structural - structural).abs() < 1e-10, "{} vs {}", lj.structural, structural);
            let mut measurement = 0.0;
            for i in 0..25 {
                for t in 0..3 {
                    let prof = crate::model::AttributeProfile::from_index(f.state.profiles.get(i, t), 2);
                    measurement += crate::model::wave_loglik(
                        f.responses.learner_wave(i, t),
                        &prof,
                        &f.state.items,
                        &f.q,
                    )
                    .unwrap();
                }
            }
            assert!((lj.measurement - measurement).abs() < 1e-10);
        }
    }

    fn toy_chain(seed: f64) -> ChainOutput {
        ChainOutput {
            draws: (0..10)
                .map(|p| (0..20).map(|i| seed + (i as f64 * 0.37 + p as f64).sin()).collect())
                .collect(),
            profile_counts: (0..4).map(|c| (c as f64 * seed * 3.0) as u32 % 7).collect(),
            acceptance: vec![0.2 * seed, 0.3, 0.25],
            proposal_sd: vec![0.1; 3],
        }
    }

    #[test]
    fn summary_is_invariant_to_chain_order() {
        let names = parameter_names(2, 1, 1, false);
        assert_eq!(names.len(), 10);
        let (a, b) = (toy_chain(1.0), toy_chain(1.7));
        let ab = summarize(&[a.clone(), b.clone()], &names, 1, 2, 1, false, 1.2).unwrap();
        let ba = summarize(&[b, a], &names, 1, 2, 1, false, 1.2).unwrap();
        assert_eq!(ab, ba);
        for p in &ab.params {
            assert!(p.lower <= p.mean && p.mean <= p.upper);
        }
        assert!(!ab.param("gamma10.1.0").unwrap().monitored);
    }

    #[test]
    fn noiseless_data_recovers_profiles() {
        let mut r = rng(9);
        let q = builtin_qmatrix(30).unwrap();
        let truth = crate::simulate::default_true_params(2, 3);
        let covariates = gen_covariates(600, 3, 0.4, &mut r).unwrap();
        let profiles = gen_profiles(&covariates, &truth, 2, &mut r).unwrap();
        let responses = gen_responses(&profiles, &q, &ItemParams::constant(30, 0.0, 0.0), &mut r).unwrap();
        let data = DataView { responses: &responses, covariates: &covariates, qmatrix: &q };
        let cfg = McmcConfig { burn_in: 100, kept: 200, seed: 3, ..McmcConfig::default() };
        let fit = fit_joint(data, &PriorSpec::default(), &cfg).unwrap();
        let agree = fit
            .summary
            .map_profiles
            .indices()
            .iter()
            .zip(profiles.indices())
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree as f64 >= 0.99 * 1200.0, "{agree} of 1200");
    }

    #[test]
    fn fit_is_deterministic_and_reports_everything() {
        let mut gen = GenConfig::condition(60, 6, 0.4, 11);
        gen.n_covariates = 1;
        gen.true_params = crate::simulate::default_true_params(2, 1);
        let ds = gen_dataset(&gen).unwrap();
        let cfg = McmcConfig { burn_in: 60, kept: 50, seed: 4, ..McmcConfig::default() };
        let a = fit_joint(ds.view(), &PriorSpec::default(), &cfg).unwrap();
        let b = fit_joint(ds.view(), &PriorSpec::default(), &cfg).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.summary.params.len(), 12 + 8);
        assert!(a.summary.params.iter().all(|p| p.psrf.is_finite()));
        assert_eq!(a.summary.acceptance.len(), 4);
        let s = a.summary.structural();
        assert_eq!(s.beta[1][1], a.summary.param("beta.2.1").unwrap().mean);
        let dir = tempfile::tempdir().unwrap();
        a.write_trace_csv(&dir.path().join("trace.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 20 * 50);
    }

    #[test]
    fn config_validation() {
        assert!(McmcConfig { chains: 0, ..McmcConfig::default() }.validate().is_err());
        assert!(McmcConfig { thin: 0, ..McmcConfig::default() }.validate().is_err());
        assert!(PriorSpec { item_a: 0.0, ..PriorSpec::default() }.validate().is_err());
        assert!(PriorSpec { coeff_sd: -1.0, ..PriorSpec::default() }.validate().is_err());
    }
}
