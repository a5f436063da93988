use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltcdm::config::KeyValues;
use ltcdm::joint::fit_joint;
use ltcdm::simulate::{gen_dataset, Dataset};
use ltcdm::stepwise::{fit_stepwise, StepwiseConfig};
use ltcdm::study::{
    check_output_dir, parse_condition, report_from_dir, run_study, write_report, Estimator,
    StudyConfig, SENSITIVITY_RHOS,
};
use ltcdm::{AttributeProfile, Error};

/// Longitudinal DINA models: simulate data, fit the joint and stepwise
/// estimators, and run Monte Carlo studies.
#[derive(Parser, Debug)]
#[command(name = "ltcdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key = value config file (gen., mcmc., em., opt., study. keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress and result printing.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one dataset into a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Sample size and test length, e.g. 200x6.
        #[arg(long)]
        condition: Option<String>,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Fit the joint MCMC estimator to a dataset directory.
    FitJoint {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Write every kept draw to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit the three-step estimator to a dataset directory.
    FitStepwise {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Write posteriors, assignments and CEP matrices to this directory.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run a replication study and write tables.
    Study {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: $LTCDM_OUT or ./ltcdm-out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Covariate correlation(s), comma-separated.
        #[arg(long, value_delimiter = ',')]
        rho: Option<Vec<f64>>,
        /// NxJ cells; repeat or comma-separate.
        #[arg(long, value_delimiter = ',')]
        condition: Option<Vec<String>>,
        /// joint, stepwise or both (comma-separated).
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        /// Paper scale: 100 replications, 1,000 + 2,000 MCMC iterations.
        #[arg(long)]
        full: bool,
        /// Covariate-correlation sweep rho = 0, 0.2, 0.4, 0.6, 0.8.
        #[arg(long)]
        sensitivity: bool,
    },
    /// Re-aggregate the records.csv of a finished study directory.
    Report { dir: PathBuf },
}

fn load_config(common: &Common) -> ltcdm::Result<StudyConfig> {
    let mut cfg = StudyConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_keys(&KeyValues::read(path)?)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_dataset(dir: &Path) -> ltcdm::Result<Dataset> {
    if !dir.join("manifest.txt").exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} has no manifest.txt", dir.display()),
        )));
    }
    Dataset::read_dir(dir)
}

fn profile_string(p: ltcdm::ProfileIndex, k: usize) -> String {
    AttributeProfile::from_index(p, k).bits().iter().map(|b| b.to_string()).collect()
}

fn simulate(common: Common, out: PathBuf, condition: Option<String>, rho: Option<f64>) -> ltcdm::Result<()> {
    let cfg = load_config(&common)?;
    let mut gen = cfg.gen.clone();
    if let Some(c) = condition {
        (gen.n_learners, gen.n_items) = parse_condition(&c)?;
    }
    if let Some(r) = rho {
        gen.rho = r;
    }
    if let Some(s) = common.seed {
        gen.seed = s;
    }
    if let Some(q) = &cfg.qmatrix_file {
        gen.qmatrix = Some(ltcdm::simulate::read_qmatrix(q)?);
    }
    gen.validate()?;
    check_output_dir(&out)?;
    let ds = gen_dataset(&gen)?;
    ds.write_dir(&out)?;
    if !common.quiet {
        println!(
            "wrote N={} J={} T={} dataset to {} (hash {:016x})",
            gen.n_learners,
            gen.n_items,
            gen.n_waves,
            out.display(),
            ds.content_hash()
        );
    }
    Ok(())
}

fn fit_joint_cmd(dataset: PathBuf, common: Common, trace: Option<PathBuf>) -> ltcdm::Result<()> {
    let cfg = load_config(&common)?;
    let ds = read_dataset(&dataset)?;
    let mut prior = cfg.prior.clone();
    prior.monotone = ds.config.true_params.monotone;
    let mcmc = ltcdm::joint::McmcConfig { seed: cfg.seed, ..cfg.mcmc.clone() };
    let fit = fit_joint(ds.view(), &prior, &mcmc).map_err(|e| e.in_step("joint fit"))?;
    if let Some(path) = trace {
        fit.write_trace_csv(&path)?;
    }
    if common.quiet {
        return Ok(());
    }
    let s = &fit.summary;
    println!("parameter,mean,sd,lower,upper,psrf");
    for p in &s.params {
        println!("{},{:.4},{:.4},{:.4},{:.4},{:.4}", p.name, p.mean, p.sd, p.lower, p.upper, p.psrf);
    }
    println!("max PSRF {:.4} ({})", s.max_psrf, if s.converged { "converged" } else { "not converged" });
    for (block, rate) in &s.acceptance {
        println!("acceptance {block} {rate:.3}");
    }
    let k = s.map_profiles.n_attributes();
    println!("learner,wave,map_profile");
    for i in 0..s.map_profiles.n_learners() {
        for t in 0..s.map_profiles.n_waves() {
            println!("{},{},{}", i + 1, t + 1, profile_string(s.map_profiles.get(i, t), k));
        }
    }
    Ok(())
}

fn fit_stepwise_cmd(dataset: PathBuf, common: Common, audit: Option<PathBuf>) -> ltcdm::Result<()> {
    let cfg = load_config(&common)?;
    let ds = read_dataset(&dataset)?;
    let sc = StepwiseConfig {
        em: cfg.em.clone(),
        step3: cfg.step3.clone(),
        monotone: ds.config.true_params.monotone,
        seed: cfg.seed,
    };
    let fit = fit_stepwise(ds.view(), &sc)?;
    if let Some(dir) = audit {
        fit.write_audit(&dir)?;
    }
    if common.quiet {
        return Ok(());
    }
    println!("wave,item,g,s");
    for (t, w) in fit.waves.iter().enumerate() {
        for j in 0..w.item_params.n_items() {
            println!("{},{},{:.4},{:.4}", t + 1, j + 1, w.item_params.guess[j], w.item_params.slip[j]);
        }
    }
    let names = ltcdm::joint::parameter_names(0, fit.structural.n_attributes(), fit.structural.n_covariates(), fit.structural.monotone);
    println!("parameter,estimate");
    for (name, v) in names.iter().zip(fit.structural.to_vector()) {
        println!("{name},{v:.4}");
    }
    println!(
        "step 3 log-likelihood {:.4} ({}), degenerate CEP columns {}",
        fit.step3_loglik,
        fit.step3.status.as_str(),
        fit.degenerate_cep_columns()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn study_cmd(
    common: Common,
    out: Option<PathBuf>,
    workers: Option<usize>,
    reps: Option<usize>,
    rho: Option<Vec<f64>>,
    condition: Option<Vec<String>>,
    estimators: Option<Vec<String>>,
    full: bool,
    sensitivity: bool,
) -> ltcdm::Result<bool> {
    let mut cfg = load_config(&common)?;
    if full {
        cfg = cfg.full();
    }
    if sensitivity {
        cfg.rhos = SENSITIVITY_RHOS.to_vec();
    }
    if let Some(r) = rho {
        cfg.rhos = r;
    }
    if let Some(c) = condition {
        cfg.conditions = c.iter().map(|s| parse_condition(s)).collect::<ltcdm::Result<_>>()?;
    }
    if let Some(e) = estimators {
        cfg.estimators = e.iter().map(|s| Estimator::parse(s)).collect::<ltcdm::Result<_>>()?;
        cfg.estimators.sort();
        cfg.estimators.dedup();
    }
    if let Some(r) = reps {
        cfg.replications = r;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    check_output_dir(&cfg.out_dir)?;
    if !common.quiet {
        eprintln!(
            "running {} replications x {} conditions x {} rho values on {} workers",
            cfg.replications,
            cfg.conditions.len(),
            cfg.rhos.len(),
            cfg.workers
        );
    }
    let report = run_study(&cfg)?;
    write_report(&report, Some(&cfg), &cfg.out_dir)?;
    if !common.quiet {
        print!("{}", ltcdm::study::summary_markdown(&report));
        eprintln!("wrote {}", cfg.out_dir.display());
    }
    let failed = report.failed_records();
    if failed > 0 {
        eprintln!("{failed} estimator fits failed; see records.csv");
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate { common, out, condition, rho } => simulate(common, out, condition, rho).map(|_| true),
        Command::FitJoint { dataset, common, trace } => fit_joint_cmd(dataset, common, trace).map(|_| true),
        Command::FitStepwise { dataset, common, audit } => fit_stepwise_cmd(dataset, common, audit).map(|_| true),
        Command::Study { common, out, workers, reps, rho, condition, estimators, full, sensitivity } => {
            study_cmd(common, out, workers, reps, rho, condition, estimators, full, sensitivity)
        }
        Command::Report { dir } => report_from_dir(&dir).map(|r| {
            print!("{}", ltcdm::study::summary_markdown(&r));
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
