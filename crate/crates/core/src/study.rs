//! Monte Carlo study runner: condition x replication grids with both
//! estimators fitted to the same simulated datasets, per-replication records,
//! aggregated metric tables and convergence summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::joint::{fit_joint, McmcConfig, PriorSpec};
use crate::metrics::{aar, mae_of_errors, mc_error, ordered_sum, rmse_of_errors};
use crate::model::ProfilePanel;
use crate::optim::BfgsConfig;
use crate::rng::{derive_seed, stage};
use crate::simulate::{gen_dataset, read_qmatrix, Dataset, GenConfig};
use crate::stepwise::{fit_stepwise, EmConfig, Step3Config, StepwiseConfig};
use crate::structural::StructuralParams;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LTCDM_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    Joint,
    Stepwise,
}

impl Estimator {
    pub const ALL: [Estimator; 2] = [Estimator::Joint, Estimator::Stepwise];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Joint => "joint",
            Estimator::Stepwise => "stepwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(Estimator::Joint),
            "stepwise" => Ok(Estimator::Stepwise),
            other => Err(Error::config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    /// `(N, J)` cells.
    pub conditions: Vec<(usize, usize)>,
    pub rhos: Vec<f64>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    /// Template for every dataset; `N`, `J`, `rho` and the seed are set per cell.
    pub gen: GenConfig,
    pub prior: PriorSpec,
    pub mcmc: McmcConfig,
    pub em: EmConfig,
    pub step3: Step3Config,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub qmatrix_file: Option<PathBuf>,
}

pub const PAPER_CONDITIONS: [(usize, usize); 3] = [(200, 6), (400, 18), (600, 30)];
pub const SENSITIVITY_RHOS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ltcdm-out"))
}

impl Default for StudyConfig {
    /// Desk scale: 20 replications, two chains of 500 burn-in plus 1,000 kept.
    fn default() -> Self {
        Self {
            conditions: PAPER_CONDITIONS.to_vec(),
            rhos: vec![0.4],
            replications: 20,
            estimators: Estimator::ALL.to_vec(),
            gen: GenConfig::default(),
            prior: PriorSpec::default(),
            mcmc: McmcConfig {
                burn_in: 500,
                kept: 1000,
                ..McmcConfig::default()
            },
            em: EmConfig::default(),
            step3: Step3Config::default(),
            seed: 1,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            out_dir: default_out_dir(),
            qmatrix_file: None,
        }
    }
}

pub fn parse_condition(s: &str) -> Result<(usize, usize)> {
    let (n, j) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::config(format!("condition {s:?} is not NxJ")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("condition {s:?} is not NxJ")))
    };
    Ok((parse(n)?, parse(j)?))
}

fn format_conditions(c: &[(usize, usize)]) -> String {
    c.iter().map(|(n, j)| format!("{n}x{j}")).collect::<Vec<_>>().join(",")
}

const STUDY_KEYS: &[&str] = &[
    "study.conditions",
    "study.rho",
    "study.reps",
    "study.estimators",
    "study.seed",
    "study.workers",
    "study.out",
    "study.qmatrix",
];
const MCMC_KEYS: &[&str] = &[
    "mcmc.chains",
    "mcmc.burn_in",
    "mcmc.kept",
    "mcmc.thin",
    "mcmc.proposal_sd",
    "mcmc.adapt_window",
    "mcmc.psrf_threshold",
    "mcmc.item_a",
    "mcmc.item_b",
    "mcmc.coeff_mean",
    "mcmc.coeff_sd",
    "mcmc.gamma10_intercept_mean",
    "mcmc.gamma10_intercept_sd",
    "mcmc.ordered_items",
];
const EM_KEYS: &[&str] = &["em.tol", "em.max_iter"];
const OPT_KEYS: &[&str] = &[
    "opt.starts",
    "opt.fd_step",
    "opt.grad_tol",
    "opt.rel_tol",
    "opt.max_iter",
    "opt.max_step",
];
const GEN_KEYS: &[&str] = &[
    "gen.n", "gen.j", "gen.k", "gen.t", "gen.c", "gen.rho", "gen.item_low", "gen.item_high",
    "gen.monotone", "gen.seed",
];

fn known_key(key: &str) -> bool {
    if [STUDY_KEYS, MCMC_KEYS, EM_KEYS, OPT_KEYS, GEN_KEYS]
        .iter()
        .any(|set| set.contains(&key))
    {
        return true;
    }
    let Some(rest) = key.strip_prefix("gen.") else {
        return false;
    };
    ["beta", "gamma01", "gamma10"].iter().any(|b| {
        rest.strip_prefix(b).is_some_and(|tail| {
            tail == "_intercept"
                || tail == "_slope"
                || tail.strip_prefix('.').is_some_and(|a| a.parse::<usize>().is_ok())
        })
    })
}

impl StudyConfig {
    /// Paper scale: 100 replications, 1,000 burn-in plus 2,000 kept draws.
    pub fn full(mut self) -> Self {
        self.replications = 100;
        self.mcmc.burn_in = 1000;
        self.mcmc.kept = 2000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() || self.rhos.is_empty() || self.estimators.is_empty() {
            return Err(Error::config("need at least one condition, rho and estimator"));
        }
        if self.replications == 0 || self.workers == 0 {
            return Err(Error::config("replications and workers must be at least 1"));
        }
        for &(n, j) in &self.conditions {
            for &rho in &self.rhos {
                self.cell_gen(n, j, rho, 0)?.validate()?;
            }
        }
        self.prior.validate()?;
        self.mcmc.validate()?;
        if self.step3.starts == 0 {
            return Err(Error::config("opt.starts must be at least 1"));
        }
        if self.qmatrix_file.is_none() && self.gen.n_attributes == 2 {
            for &(_, j) in &self.conditions {
                if crate::simulate::builtin_qmatrix(j).is_err() {
                    return Err(Error::config(format!(
                        "no built-in Q-matrix for J = {j}; use 6, 18 or 30 or give study.qmatrix"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Generator settings for one replication.
    pub fn cell_gen(&self, n: usize, j: usize, rho: f64, rep: usize) -> Result<GenConfig> {
        let mut g = self.gen.clone();
        g.n_learners = n;
        g.n_items = j;
        g.rho = rho;
        g.seed = derive_seed(self.seed, &[stage::DATASET, n as u64, j as u64, rho.to_bits(), rep as u64]);
        if let Some(path) = &self.qmatrix_file {
            g.qmatrix = Some(read_qmatrix(path)?);
        }
        Ok(g)
    }

    /// Applies `study.`, `gen.`, `mcmc.`, `em.` and `opt.` keys. Unknown keys
    /// are rejected.
    pub fn apply_keys(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(bad) = kv.keys().find(|k| !known_key(k)) {
            return Err(Error::config(format!("unknown config key {bad:?}")));
        }
        if let Some(c) = kv.get("study.conditions") {
            self.conditions = c.split(',').map(parse_condition).collect::<Result<_>>()?;
        }
        if let Some(r) = kv.list::<f64>("study.rho")? {
            self.rhos = r;
        }
        kv.apply("study.reps", &mut self.replications)?;
        if let Some(e) = kv.get("study.estimators") {
            self.estimators = e.split(',').map(Estimator::parse).collect::<Result<_>>()?;
            self.estimators.sort();
            self.estimators.dedup();
        }
        kv.apply("study.seed", &mut self.seed)?;
        kv.apply("study.workers", &mut self.workers)?;
        if let Some(o) = kv.get("study.out") {
            self.out_dir = PathBuf::from(o);
        }
        if let Some(q) = kv.get("study.qmatrix") {
            self.qmatrix_file = (!q.is_empty()).then(|| PathBuf::from(q));
        }
        self.gen.apply_keys(kv)?;
        self.prior.monotone = self.gen.true_params.monotone;

        let m = &mut self.mcmc;
        kv.apply("mcmc.chains", &mut m.chains)?;
        kv.apply("mcmc.burn_in", &mut m.burn_in)?;
        kv.apply("mcmc.kept", &mut m.kept)?;
        kv.apply("mcmc.thin", &mut m.thin)?;
        kv.apply("mcmc.proposal_sd", &mut m.proposal_sd)?;
        kv.apply("mcmc.adapt_window", &mut m.adapt_window)?;
        kv.apply("mcmc.psrf_threshold", &mut m.psrf_threshold)?;
        let p = &mut self.prior;
        kv.apply("mcmc.item_a", &mut p.item_a)?;
        kv.apply("mcmc.item_b", &mut p.item_b)?;
        kv.apply("mcmc.coeff_mean", &mut p.coeff_mean)?;
        kv.apply("mcmc.coeff_sd", &mut p.coeff_sd)?;
        kv.apply("mcmc.gamma10_intercept_mean", &mut p.gamma10_intercept_mean)?;
        kv.apply("mcmc.gamma10_intercept_sd", &mut p.gamma10_intercept_sd)?;
        kv.apply("mcmc.ordered_items", &mut p.ordered_items)?;
        kv.apply("em.tol", &mut self.em.tol)?;
        kv.apply("em.max_iter", &mut self.em.max_iter)?;
        let o = &mut self.step3;
        kv.apply("opt.starts", &mut o.starts)?;
        kv.apply("opt.fd_step", &mut o.bfgs.fd_step)?;
        kv.apply("opt.grad_tol", &mut o.bfgs.grad_tol)?;
        kv.apply("opt.rel_tol", &mut o.bfgs.rel_tol)?;
        kv.apply("opt.max_iter", &mut o.bfgs.max_iter)?;
        kv.apply("opt.max_step", &mut o.bfgs.max_step)?;
        Ok(())
    }

    /// Every setting as keys; [`apply_keys`](Self::apply_keys) on a default
    /// config restores `self`.
    pub fn to_keys(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.insert("study.conditions", format_conditions(&self.conditions));
        kv.insert("study.rho", join_list(&self.rhos));
        kv.insert("study.reps", self.replications);
        kv.insert(
            "study.estimators",
            self.estimators.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(","),
        );
        kv.insert("study.seed", self.seed);
        kv.insert("study.workers", self.workers);
        kv.insert("study.out", self.out_dir.display());
        if let Some(q) = &self.qmatrix_file {
            kv.insert("study.qmatrix", q.display());
        }
        self.gen.write_keys(&mut kv);
        let (m, p) = (&self.mcmc, &self.prior);
        kv.insert("mcmc.chains", m.chains);
        kv.insert("mcmc.burn_in", m.burn_in);
        kv.insert("mcmc.kept", m.kept);
        kv.insert("mcmc.thin", m.thin);
        kv.insert("mcmc.proposal_sd", m.proposal_sd);
        kv.insert("mcmc.adapt_window", m.adapt_window);
        kv.insert("mcmc.psrf_threshold", m.psrf_threshold);
        kv.insert("mcmc.item_a", p.item_a);
        kv.insert("mcmc.item_b", p.item_b);
        kv.insert("mcmc.coeff_mean", p.coeff_mean);
        kv.insert("mcmc.coeff_sd", p.coeff_sd);
        kv.insert("mcmc.gamma10_intercept_mean", p.gamma10_intercept_mean);
        kv.insert("mcmc.gamma10_intercept_sd", p.gamma10_intercept_sd);
        kv.insert("mcmc.ordered_items", p.ordered_items);
        kv.insert("em.tol", self.em.tol);
        kv.insert("em.max_iter", self.em.max_iter);
        let b: &BfgsConfig = &self.step3.bfgs;
        kv.insert("opt.starts", self.step3.starts);
        kv.insert("opt.fd_step", b.fd_step);
        kv.insert("opt.grad_tol", b.grad_tol);
        kv.insert("opt.rel_tol", b.rel_tol);
        kv.insert("opt.max_iter", b.max_iter);
        kv.insert("opt.max_step", b.max_step);
        kv
    }
}

/// Errors of one estimator on one dataset. Signed errors are estimate minus
/// truth; vectors follow item order or the `[attribute][coefficient]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorRecord {
    /// Agreement rate over learners, indexed `wave * K + attribute`.
    pub aar: Vec<f64>,
    pub guess_err: Vec<f64>,
    pub slip_err: Vec<f64>,
    pub beta_err: Vec<f64>,
    pub gamma01_err: Vec<f64>,
    /// Empty when monotone.
    pub gamma10_err: Vec<f64>,
    /// Joint only.
    pub max_psrf: Option<f64>,
    /// Joint: `converged` or `psrf_high`. Stepwise: optimizer status.
    pub status: String,
    /// Stepwise only: CEP columns replaced by point masses.
    pub degenerate_cep: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    NotRun,
    Failed(String),
    Done(EstimatorRecord),
}

impl Outcome {
    pub fn record(&self) -> Option<&EstimatorRecord> {
        match self {
            Outcome::Done(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub rho: f64,
    pub n: usize,
    pub j: usize,
    pub rep: usize,
    pub dataset_hash: u64,
    pub joint: Outcome,
    pub stepwise: Outcome,
}

impl Record {
    pub fn outcome(&self, e: Estimator) -> &Outcome {
        match e {
            Estimator::Joint => &self.joint,
            Estimator::Stepwise => &self.stepwise,
        }
    }

    fn key(&self) -> (u64, usize, usize, usize) {
        (self.rho.to_bits(), self.n, self.j, self.rep)
    }
}

fn flat_err(est: &StructuralParams<f64>, truth: &StructuralParams<f64>, pick: fn(&StructuralParams<f64>) -> &Vec<Vec<f64>>) -> Vec<f64> {
    pick(est)
        .iter()
        .flatten()
        .zip(pick(truth).iter().flatten())
        .map(|(e, t)| e - t)
        .collect()
}

fn estimator_record(
    ds: &Dataset,
    profiles: &ProfilePanel,
    guess: &[f64],
    slip: &[f64],
    structural: &StructuralParams<f64>,
) -> Result<EstimatorRecord> {
    let rates = aar(std::slice::from_ref(profiles), std::slice::from_ref(&ds.true_profiles))?;
    let truth = &ds.config.true_params;
    Ok(EstimatorRecord {
        aar: rates.into_iter().flatten().collect(),
        guess_err: guess.iter().zip(&ds.true_items.guess).map(|(e, t)| e - t).collect(),
        slip_err: slip.iter().zip(&ds.true_items.slip).map(|(e, t)| e - t).collect(),
        beta_err: flat_err(structural, truth, |p| &p.beta),
        gamma01_err: flat_err(structural, truth, |p| &p.gamma01),
        gamma10_err: if truth.monotone {
            Vec::new()
        } else {
            flat_err(structural, truth, |p| &p.gamma10)
        },
        max_psrf: None,
        status: String::new(),
        degenerate_cep: None,
    })
}

fn run_joint(ds: &Dataset, cfg: &StudyConfig, seed: u64) -> Result<EstimatorRecord> {
    let mcmc = McmcConfig { seed, ..cfg.mcmc.clone() };
    let fit = fit_joint(ds.view(), &cfg.prior, &mcmc)?;
    let s = &fit.summary;
    let items = s.item_params();
    let mut rec = estimator_record(ds, &s.map_profiles, &items.guess, &items.slip, &s.structural())?;
    rec.max_psrf = Some(s.max_psrf);
    rec.status = if s.converged { "converged" } else { "psrf_high" }.to_string();
    Ok(rec)
}

fn run_stepwise(ds: &Dataset, cfg: &StudyConfig, seed: u64) -> Result<EstimatorRecord> {
    let sc = StepwiseConfig {
        em: cfg.em.clone(),
        step3: cfg.step3.clone(),
        monotone: cfg.prior.monotone,
        seed,
    };
    let fit = fit_stepwise(ds.view(), &sc)?;
    // Items are time-invariant, so the per-wave estimates are averaged.
    let j = ds.qmatrix.n_items();
    let t = fit.waves.len() as f64;
    let avg = |pick: fn(&crate::stepwise::WaveFit, usize) -> f64| -> Vec<f64> {
        (0..j)
            .map(|it| fit.waves.iter().map(|w| pick(w, it)).sum::<f64>() / t)
            .collect()
    };
    let guess = avg(|w, it| w.item_params.guess[it]);
    let slip = avg(|w, it| w.item_params.slip[it]);
    let mut rec = estimator_record(ds, &fit.assignments, &guess, &slip, &fit.structural)?;
    rec.status = fit.step3.status.as_str().to_string();
    rec.degenerate_cep = Some(fit.degenerate_cep_columns());
    Ok(rec)
}

/// Wall-clock seconds per estimator; kept out of the records so they stay
/// reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub rho: f64,
    pub n: usize,
    pub j: usize,
    pub rep: usize,
    pub estimator: Estimator,
    pub seconds: f64,
}

/// Simulates one dataset and fits every enabled estimator to it. Estimator
/// failures are recorded, not propagated.
pub fn run_replication(cfg: &StudyConfig, rho: f64, n: usize, j: usize, rep: usize) -> Result<(Record, Vec<Timing>)> {
    let gen = cfg.cell_gen(n, j, rho, rep)?;
    let ds = gen_dataset(&gen)?;
    let hash = ds.content_hash();
    let mut timings = Vec::new();
    let mut record = Record {
        rho,
        n,
        j,
        rep,
        dataset_hash: hash,
        joint: Outcome::NotRun,
        stepwise: Outcome::NotRun,
    };
    for &e in &cfg.estimators {
        let seed = derive_seed(gen.seed, &[match e {
            Estimator::Joint => stage::JOINT,
            Estimator::Stepwise => stage::STEPWISE,
        }]);
        let start = Instant::now();
        let result = match e {
            Estimator::Joint => run_joint(&ds, cfg, seed),
            Estimator::Stepwise => run_stepwise(&ds, cfg, seed),
        };
        timings.push(Timing { rho, n, j, rep, estimator: e, seconds: start.elapsed().as_secs_f64() });
        if ds.content_hash() != hash {
            return Err(Error::Invariant("dataset changed between estimators".into()));
        }
        let outcome = match result {
            Ok(r) => Outcome::Done(r),
            Err(err) => Outcome::Failed(err.to_string()),
        };
        match e {
            Estimator::Joint => record.joint = outcome,
            Estimator::Stepwise => record.stepwise = outcome,
        }
    }
    Ok((record, timings))
}

/// One aggregated value.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub rho: f64,
    pub n: usize,
    pub j: usize,
    pub estimator: Estimator,
    pub group: String,
    pub parameter: String,
    pub metric: String,
    pub value: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    #[allow(clippy::too_many_arguments)]
    pub fn value(&self, rho: f64, n: usize, j: usize, estimator: Estimator, group: &str, parameter: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.rho == rho
                    && (r.n, r.j) == (n, j)
                    && r.estimator == estimator
                    && r.group == group
                    && r.parameter == parameter
                    && r.metric == metric
            })
            .map(|r| r.value)
    }

    pub fn values(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter()
    }

    fn push(&mut self, cell: &Cell, group: &str, parameter: impl Into<String>, metric: &str, value: f64, reps: usize) {
        self.rows.push(MetricRow {
            rho: cell.rho,
            n: cell.n,
            j: cell.j,
            estimator: cell.estimator,
            group: group.to_string(),
            parameter: parameter.into(),
            metric: metric.to_string(),
            value,
            reps,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,n,j,estimator,group,parameter,metric,value,reps\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.rho,
                r.n,
                r.j,
                r.estimator.as_str(),
                r.group,
                r.parameter,
                r.metric,
                r.value,
                r.reps
            );
        }
        s
    }
}

/// Per-cell convergence and failure bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub rho: f64,
    pub n: usize,
    pub j: usize,
    pub estimator: Estimator,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub records: Vec<Record>,
    pub aar: MetricTable,
    pub items: MetricTable,
    pub beta: MetricTable,
    pub gamma: MetricTable,
    pub convergence: Vec<ConvergenceRow>,
    /// Cells where an enabled estimator produced no successful replication.
    pub failed_cells: Vec<String>,
    pub timings: Vec<Timing>,
}

impl StudyReport {
    pub fn failed_records(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| [&r.joint, &r.stepwise])
            .filter(|o| matches!(o, Outcome::Failed(_)))
            .count()
    }

    pub fn convergence_value(&self, rho: f64, n: usize, j: usize, e: Estimator, metric: &str) -> Option<f64> {
        self.convergence
            .iter()
            .find(|c| c.rho == rho && (c.n, c.j) == (n, j) && c.estimator == e && c.metric == metric)
            .map(|c| c.value)
    }
}

struct Cell {
    rho: f64,
    n: usize,
    j: usize,
    estimator: Estimator,
}

fn mean(v: &[f64]) -> f64 {
    ordered_sum(v.iter().copied()) / v.len() as f64
}

fn push_error_metrics(table: &mut MetricTable, cell: &Cell, group: &str, parameter: String, errors: &[f64], reps: usize) -> Result<()> {
    table.push(cell, group, parameter.clone(), "mae", mae_of_errors(errors)?, reps);
    table.push(cell, group, parameter, "rmse", rmse_of_errors(errors)?, reps);
    Ok(())
}

/// Coefficient-table rows for one block: intercept, all slopes pooled, and
/// each slope separately, per attribute.
fn push_coeff_metrics(
    table: &mut MetricTable,
    cell: &Cell,
    group: &str,
    recs: &[&EstimatorRecord],
    pick: fn(&EstimatorRecord) -> &Vec<f64>,
    k: usize,
) -> Result<()> {
    let width = pick(recs[0]).len() / k;
    let reps = recs.len();
    for a in 0..k {
        let at = |c: usize| -> Vec<f64> { recs.iter().map(|r| pick(r)[a * width + c]).collect() };
        push_error_metrics(table, cell, group, format!("a{}.intercept", a + 1), &at(0), reps)?;
        if width > 1 {
            let slopes: Vec<f64> = (1..width).flat_map(at).collect();
            push_error_metrics(table, cell, group, format!("a{}.slope", a + 1), &slopes, reps)?;
            for c in 1..width {
                push_error_metrics(table, cell, group, format!("a{}.slope{c}", a + 1), &at(c), reps)?;
            }
        }
    }
    Ok(())
}

/// Aggregates records (sorted internally) into metric tables. Depends only on
/// the records, so re-aggregating persisted records reproduces the report.
pub fn aggregate(records: &[Record], n_attributes: usize) -> Result<StudyReport> {
    let mut records = records.to_vec();
    records.sort_by_key(Record::key);
    let mut cells: BTreeMap<(u64, usize, usize), Vec<&Record>> = BTreeMap::new();
    for r in &records {
        cells.entry((r.rho.to_bits(), r.n, r.j)).or_default().push(r);
    }
    let mut rep = StudyReport {
        records: Vec::new(),
        aar: MetricTable::default(),
        items: MetricTable::default(),
        beta: MetricTable::default(),
        gamma: MetricTable::default(),
        convergence: Vec::new(),
        failed_cells: Vec::new(),
        timings: Vec::new(),
    };
    let k = n_attributes;
    for ((rho_bits, n, j), rs) in &cells {
        let rho = f64::from_bits(*rho_bits);
        for e in Estimator::ALL {
            let outcomes: Vec<&Outcome> = rs.iter().map(|r| r.outcome(e)).collect();
            if outcomes.iter().all(|o| matches!(o, Outcome::NotRun)) {
                continue;
            }
            let cell = Cell { rho, n: *n, j: *j, estimator: e };
            let recs: Vec<&EstimatorRecord> = outcomes.iter().filter_map(|o| o.record()).collect();
            let failures = outcomes.iter().filter(|o| matches!(o, Outcome::Failed(_))).count();
            let conv = |metric: &str, value: f64| ConvergenceRow {
                rho,
                n: *n,
                j: *j,
                estimator: e,
                metric: metric.to_string(),
                value,
            };
            rep.convergence.push(conv("failures", failures as f64));
            if recs.is_empty() {
                rep.failed_cells.push(format!("rho={rho} N={n} J={j} {}", e.as_str()));
                continue;
            }
            let reps = recs.len();

            let width = recs[0].aar.len();
            for idx in 0..width {
                let vals: Vec<f64> = recs.iter().map(|r| r.aar[idx]).collect();
                let name = format!("a{}.t{}", idx % k + 1, idx / k + 1);
                rep.aar.push(&cell, "aar", name.clone(), "aar", mean(&vals), reps);
                if reps >= 2 {
                    rep.aar.push(&cell, "aar", name, "mc_error", mc_error(&vals)?, reps);
                }
            }
            let per_rep: Vec<f64> = recs.iter().map(|r| mean(&r.aar)).collect();
            rep.aar.push(&cell, "aar", "mean", "aar", mean(&per_rep), reps);
            if reps >= 2 {
                rep.aar.push(&cell, "aar", "mean", "mc_error", mc_error(&per_rep)?, reps);
            }

            let pooled = |pick: fn(&EstimatorRecord) -> &Vec<f64>| -> Vec<f64> {
                recs.iter().flat_map(|r| pick(r).iter().copied()).collect()
            };
            push_error_metrics(&mut rep.items, &cell, "guess", "all".into(), &pooled(|r| &r.guess_err), reps)?;
            push_error_metrics(&mut rep.items, &cell, "slip", "all".into(), &pooled(|r| &r.slip_err), reps)?;
            push_coeff_metrics(&mut rep.beta, &cell, "beta", &recs, |r| &r.beta_err, k)?;
            push_coeff_metrics(&mut rep.gamma, &cell, "gamma01", &recs, |r| &r.gamma01_err, k)?;
            if !recs[0].gamma10_err.is_empty() {
                push_coeff_metrics(&mut rep.gamma, &cell, "gamma10", &recs, |r| &r.gamma10_err, k)?;
            }

            match e {
                Estimator::Joint => {
                    let psrfs: Vec<f64> = recs.iter().filter_map(|r| r.max_psrf).collect();
                    let pass = recs.iter().filter(|r| r.status == "converged").count();
                    rep.convergence.push(conv("psrf_pass_rate", pass as f64 / reps as f64));
                    if !psrfs.is_empty() {
                        let finite: Vec<f64> = psrfs.iter().copied().filter(|v| v.is_finite()).collect();
                        rep.convergence.push(conv(
                            "max_psrf_median",
                            if finite.len() == psrfs.len() { median(&finite) } else { f64::NAN },
                        ));
                    }
                }
                Estimator::Stepwise => {
                    let mut statuses: BTreeMap<&str, usize> = BTreeMap::new();
                    for r in &recs {
                        *statuses.entry(r.status.as_str()).or_default() += 1;
                    }
                    for (s, c) in statuses {
                        rep.convergence.push(conv(&format!("optimizer_{s}"), c as f64));
                    }
                    let degenerate: usize = recs.iter().filter_map(|r| r.degenerate_cep).sum();
                    rep.convergence.push(conv("degenerate_cep_columns", degenerate as f64));
                }
            }
        }
    }
    rep.records = records;
    Ok(rep)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Runs every replication on a pool of `cfg.workers` threads and aggregates.
/// Records do not depend on the worker count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &rho in &cfg.rhos {
        for &(n, j) in &cfg.conditions {
            for rep in 0..cfg.replications {
                jobs.push((rho, n, j, rep));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        jobs.par_iter()
            .map(|&(rho, n, j, rep)| run_replication(cfg, rho, n, j, rep))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut timings = Vec::new();
    let records: Vec<Record> = results
        .into_iter()
        .map(|(r, t)| {
            timings.extend(t);
            r
        })
        .collect();
    let mut report = aggregate(&records, cfg.gen.n_attributes)?;
    report.timings = timings;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Persistence

const RECORD_FIELDS: [&str; 9] = ["status", "aar", "guess", "slip", "beta", "gamma01", "gamma10", "max_psrf", "degenerate"];

pub fn records_header() -> String {
    let mut cols = vec!["rho".to_string(), "n".into(), "j".into(), "rep".into(), "dataset_hash".into()];
    for e in Estimator::ALL {
        cols.extend(RECORD_FIELDS.iter().map(|f| format!("{}_{f}", e.as_str())));
    }
    cols.join(",")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn outcome_fields(o: &Outcome) -> Vec<String> {
    match o {
        Outcome::NotRun => vec![String::new(); RECORD_FIELDS.len()],
        Outcome::Failed(msg) => {
            let mut v = vec![String::new(); RECORD_FIELDS.len()];
            v[0] = format!("failed: {}", msg.replace([',', '\n', '\r'], " "));
            v
        }
        Outcome::Done(r) => vec![
            r.status.clone(),
            join_f64(&r.aar),
            join_f64(&r.guess_err),
            join_f64(&r.slip_err),
            join_f64(&r.beta_err),
            join_f64(&r.gamma01_err),
            join_f64(&r.gamma10_err),
            r.max_psrf.map(|v| v.to_string()).unwrap_or_default(),
            r.degenerate_cep.map(|v| v.to_string()).unwrap_or_default(),
        ],
    }
}

pub fn record_line(r: &Record) -> String {
    let mut cols = vec![r.rho.to_string(), r.n.to_string(), r.j.to_string(), r.rep.to_string(), r.dataset_hash.to_string()];
    cols.extend(outcome_fields(&r.joint));
    cols.extend(outcome_fields(&r.stepwise));
    cols.join(",")
}

fn parse_f64s(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| v.parse().map_err(|_| Error::parse(format!("bad number {v:?} in records"))))
        .collect()
}

fn parse_outcome(f: &[&str]) -> Result<Outcome> {
    if f[0].is_empty() {
        return Ok(Outcome::NotRun);
    }
    if let Some(msg) = f[0].strip_prefix("failed: ") {
        return Ok(Outcome::Failed(msg.to_string()));
    }
    let opt_f64 = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::parse(format!("bad number {s:?} in records")))
        }
    };
    Ok(Outcome::Done(EstimatorRecord {
        status: f[0].to_string(),
        aar: parse_f64s(f[1])?,
        guess_err: parse_f64s(f[2])?,
        slip_err: parse_f64s(f[3])?,
        beta_err: parse_f64s(f[4])?,
        gamma01_err: parse_f64s(f[5])?,
        gamma10_err: parse_f64s(f[6])?,
        max_psrf: opt_f64(f[7])?,
        degenerate_cep: opt_f64(f[8])?.map(|v| v as usize),
    }))
}

pub fn parse_record_line(line: &str) -> Result<Record> {
    let f: Vec<&str> = line.split(',').collect();
    let nf = RECORD_FIELDS.len();
    if f.len() != 5 + 2 * nf {
        return Err(Error::parse(format!("record has {} fields, expected {}", f.len(), 5 + 2 * nf)));
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::parse(format!("bad integer {s:?} in records"))) };
    Ok(Record {
        rho: f[0].parse().map_err(|_| Error::parse(format!("bad rho {:?}", f[0])))?,
        n: num(f[1])?,
        j: num(f[2])?,
        rep: num(f[3])?,
        dataset_hash: f[4].parse().map_err(|_| Error::parse(format!("bad hash {:?}", f[4])))?,
        joint: parse_outcome(&f[5..5 + nf])?,
        stepwise: parse_outcome(&f[5 + nf..])?,
    })
}

/// Records sorted by `(rho, N, J, replication)`, one line each.
pub fn records_csv(records: &[Record]) -> String {
    let mut sorted: Vec<&Record> = records.iter().collect();
    sorted.sort_by_key(|r| r.key());
    let mut s = records_header();
    s.push('\n');
    for r in sorted {
        s.push_str(&record_line(r));
        s.push('\n');
    }
    s
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == records_header() => {}
        _ => return Err(Error::parse(format!("{} is not a records file", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(parse_record_line).collect()
}

/// Writes to a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub const TABLE_FILES: [&str; 4] = ["table_aar.csv", "table_items.csv", "table_beta.csv", "table_gamma.csv"];

fn filter_rho(t: &MetricTable, rho: f64) -> MetricTable {
    MetricTable { rows: t.rows.iter().filter(|r| r.rho == rho).cloned().collect() }
}

fn rho_dir(rho: f64) -> String {
    format!("rho_{rho}")
}

fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = String::from("rho,n,j,estimator,metric,value\n");
    for c in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", c.rho, c.n, c.j, c.estimator.as_str(), c.metric, c.value);
    }
    s
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Markdown tables with Joint and Stepwise side by side.
pub fn summary_markdown(report: &StudyReport) -> String {
    let mut s = String::from("# Simulation summary\n");
    let mut rhos: Vec<f64> = report.records.iter().map(|r| r.rho).collect();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    let mut conds: Vec<(usize, usize)> = report.records.iter().map(|r| (r.n, r.j)).collect();
    conds.sort();
    conds.dedup();
    let params = |t: &MetricTable, group: &str| -> Vec<String> {
        let mut v: Vec<String> = t.rows.iter().filter(|r| r.group == group).map(|r| r.parameter.clone()).collect();
        v.dedup();
        let mut seen = Vec::new();
        v.retain(|p| if seen.contains(p) { false } else { seen.push(p.clone()); true });
        v
    };
    for &rho in &rhos {
        let _ = writeln!(s, "\n## rho = {rho}\n");
        let sections: [(&str, &MetricTable, &[&str], &[&str]); 4] = [
            ("Attribute agreement (AAR)", &report.aar, &["aar"], &["aar"]),
            ("Item parameters", &report.items, &["guess", "slip"], &["mae", "rmse"]),
            ("Initial mastery coefficients", &report.beta, &["beta"], &["mae", "rmse"]),
            ("Transition coefficients", &report.gamma, &["gamma01", "gamma10"], &["mae", "rmse"]),
        ];
        for (title, table, groups, metrics) in sections {
            let _ = writeln!(s, "### {title}\n");
            let mut header = String::from("| N | J | parameter |");
            let mut rule = String::from("|---|---|---|");
            for e in Estimator::ALL {
                for m in metrics {
                    let _ = write!(header, " {} {m} |", e.as_str());
                    rule.push_str("---|");
                }
            }
            let _ = writeln!(s, "{header}\n{rule}");
            for &(n, j) in &conds {
                for g in groups.iter() {
                    for p in params(table, g) {
                        let label = if groups.len() > 1 { format!("{g} {p}") } else { p.clone() };
                        let mut line = format!("| {n} | {j} | {label} |");
                        for e in Estimator::ALL {
                            for m in metrics {
                                let _ = write!(line, " {} |", fmt3(table.value(rho, n, j, e, g, &p, m)));
                            }
                        }
                        let _ = writeln!(s, "{line}");
                    }
                }
            }
            s.push('\n');
        }
    }
    if !report.failed_cells.is_empty() {
        s.push_str("## Failed cells\n\n");
        for c in &report.failed_cells {
            let _ = writeln!(s, "- {c}");
        }
    }
    s
}

/// Writes tables (per-rho subdirectories when several rho values are
/// present), convergence summary, Markdown summary and, if given, records,
/// timings and the config manifest.
pub fn write_report(report: &StudyReport, cfg: Option<&StudyConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
    let mut rhos: Vec<f64> = report.records.iter().map(|r| r.rho).collect();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    let tables = [&report.aar, &report.items, &report.beta, &report.gamma];
    for (name, t) in TABLE_FILES.iter().zip(tables) {
        write_atomic(&dir.join(name), &t.to_csv())?;
    }
    if rhos.len() > 1 {
        for &rho in &rhos {
            let sub = dir.join(rho_dir(rho));
            fs::create_dir_all(&sub)?;
            for (name, t) in TABLE_FILES.iter().zip(tables) {
                write_atomic(&sub.join(name), &filter_rho(t, rho).to_csv())?;
            }
        }
    }
    write_atomic(&dir.join("convergence.csv"), &convergence_csv(&report.convergence))?;
    write_atomic(&dir.join("summary.md"), &summary_markdown(report))?;
    if let Some(cfg) = cfg {
        let mut manifest = format!("# ltcdm {} study manifest\n", env!("CARGO_PKG_VERSION"));
        manifest.push_str(&cfg.to_keys().render());
        write_atomic(&dir.join("manifest.txt"), &manifest)?;
        write_atomic(&dir.join("records.csv"), &records_csv(&report.records))?;
    }
    if !report.timings.is_empty() {
        let mut s = String::from("rho,n,j,rep,estimator,seconds\n");
        for t in &report.timings {
            let _ = writeln!(s, "{},{},{},{},{},{:.3}", t.rho, t.n, t.j, t.rep, t.estimator.as_str(), t.seconds);
        }
        write_atomic(&dir.join("runtime.csv"), &s)?;
    }
    Ok(())
}

/// Checks that `dir` can be created and written before any compute starts.
pub fn check_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".ltcdm-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::config(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

/// Re-aggregates `records.csv` in `dir` (using the manifest for `K`) and
/// rewrites the tables.
pub fn report_from_dir(dir: &Path) -> Result<StudyReport> {
    let records = read_records(&dir.join("records.csv"))?;
    let manifest = dir.join("manifest.txt");
    let k = if manifest.exists() {
        KeyValues::read(&manifest)?.parsed::<usize>("gen.k")?.unwrap_or(2)
    } else {
        2
    };
    let report = aggregate(&records, k)?;
    write_report(&report, None, dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> StudyConfig {
        let mut cfg = StudyConfig {
            conditions: vec![(40, 6), (50, 6)],
            replications: 3,
            out_dir: out.to_path_buf(),
            workers: 2,
            seed: 5,
            ..StudyConfig::default()
        };
        cfg.mcmc.burn_in = 40;
        cfg.mcmc.kept = 30;
        cfg.step3.starts = 2;
        cfg
    }

    #[test]
    fn condition_parsing() {
        assert_eq!(parse_condition("200x6").unwrap(), (200, 6));
        assert_eq!(parse_condition(" 600X30 ").unwrap(), (600, 30));
        assert!(parse_condition("200").is_err());
        assert!(parse_condition("ax6").is_err());
    }

    #[test]
    fn keys_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.rhos = vec![0.0, 0.8];
        cfg.gen.true_params.gamma01[1][2] = -0.25;
        let mut back = StudyConfig::default();
        back.apply_keys(&cfg.to_keys()).unwrap();
        assert_eq!(back, cfg);
        let bad = KeyValues::parse("mcmc.burnin = 3").unwrap();
        assert!(StudyConfig::default().apply_keys(&bad).unwrap_err().is_config());
    }

    #[test]
    fn bookkeeping_and_sparse_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.estimators = vec![Estimator::Joint];
        let report = run_study(&cfg).unwrap();
        assert_eq!(report.records.len(), 6);
        assert!(report.records.iter().all(|r| r.stepwise == Outcome::NotRun));
        let mean_rows = report.aar.values().filter(|r| r.parameter == "mean" && r.metric == "aar").count();
        assert_eq!(mean_rows, 2);
        let line = record_line(&report.records[0]);
        assert!(line.ends_with(",,,,,,,,,"), "{line}");
        assert_eq!(parse_record_line(&line).unwrap(), report.records[0]);
    }

    #[test]
    fn records_round_trip_and_reaggregate_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = run_study(&cfg).unwrap();
        write_report(&report, Some(&cfg), dir.path()).unwrap();
        for f in TABLE_FILES.iter().chain(&["records.csv", "manifest.txt", "summary.md", "convergence.csv"]) {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let again = report_from_dir(dir.path()).unwrap();
        assert_eq!(again.records, report.records);
        assert_eq!(again.aar, report.aar);
        assert_eq!(again.items, report.items);
        assert_eq!(again.beta, report.beta);
        assert_eq!(again.gamma, report.gamma);
        // Manifest reproduces the run.
        let mut from_manifest = StudyConfig::default();
        from_manifest.apply_keys(&KeyValues::read(&dir.path().join("manifest.txt")).unwrap()).unwrap();
        assert_eq!(from_manifest, cfg);
    }

    #[test]
    fn rmse_dominates_mae_in_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_study(&tiny(dir.path())).unwrap();
        for t in [&report.items, &report.beta, &report.gamma] {
            for r in t.values().filter(|r| r.metric == "mae") {
                let rmse = t.value(r.rho, r.n, r.j, r.estimator, &r.group, &r.parameter, "rmse").unwrap();
                assert!(rmse >= r.value);
            }
        }
    }

    #[test]
    fn invalid_configs_fail_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.conditions = vec![(40, 7)];
        assert!(run_study(&cfg).unwrap_err().is_config());
        let mut cfg = tiny(dir.path());
        cfg.replications = 0;
        assert!(run_study(&cfg).unwrap_err().is_config());
        let mut cfg = tiny(dir.path());
        cfg.rhos = vec![1.0];
        assert!(run_study(&cfg).unwrap_err().is_config());
    }
}
