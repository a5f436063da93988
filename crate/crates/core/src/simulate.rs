//! Synthetic longitudinal data: equicorrelated normal covariates, covariate-driven
//! profiles, and DINA responses, plus the built-in `K = 2` Q-matrices and a
//! plain-text dataset directory format.
//!
//! Dataset directory layout (all indices 0-based, one header line each):
//!
//! | file             | columns                         |
//! |------------------|---------------------------------|
//! | `responses.csv`  | `learner,item,wave,y`           |
//! | `covariates.csv` | `learner,z1,..,zC`              |
//! | `truth.csv`      | `learner,wave,a1,..,aK`         |
//! | `items.csv`      | `item,g,s`                      |
//! | `qmatrix.csv`    | `item,a1,..,aK`                 |
//! | `manifest.txt`   | `key = value` generator echo    |

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{join_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::model::{ItemParams, ProfileIndex, ProfilePanel, QMatrix, ResponsePanel};
use crate::rng::{self, stage};
use crate::structural::{
    acquisition_prob, initial_mastery_prob, loss_prob, CovariateMatrix, StructuralParams,
};

/// Borrowed view of the observed part of a dataset, as consumed by estimators.
#[derive(Clone, Copy, Debug)]
pub struct DataView<'a> {
    pub responses: &'a ResponsePanel,
    pub covariates: &'a CovariateMatrix<f64>,
    pub qmatrix: &'a QMatrix,
}

impl DataView<'_> {
    pub fn validate(&self) -> Result<()> {
        let r = self.responses;
        if r.n_items() != self.qmatrix.n_items() {
            return Err(Error::dim(format!(
                "{} items in responses, {} in Q-matrix",
                r.n_items(),
                self.qmatrix.n_items()
            )));
        }
        if r.n_learners() != self.covariates.n_learners() {
            return Err(Error::dim(format!(
                "{} learners in responses, {} in covariates",
                r.n_learners(),
                self.covariates.n_learners()
            )));
        }
        if r.n_waves() == 0 {
            return Err(Error::input("dataset has no waves"));
        }
        Ok(())
    }
}

/// Default generating coefficients: `beta = (0, 0.5, ..)`, `gamma01 = (-1, 0.5, ..)`
/// for every attribute, monotone.
pub fn default_true_params(n_attributes: usize, n_covariates: usize) -> StructuralParams<f64> {
    let row = |intercept: f64| {
        let mut r = vec![0.5; 1 + n_covariates];
        r[0] = intercept;
        r
    };
    StructuralParams {
        beta: vec![row(0.0); n_attributes],
        gamma01: vec![row(-1.0); n_attributes],
        gamma10: vec![row(-2.0); n_attributes],
        monotone: true,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_learners: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    pub n_waves: usize,
    pub n_covariates: usize,
    pub rho: f64,
    /// Uniform bounds for guessing and slipping.
    pub item_range: (f64, f64),
    pub true_params: StructuralParams<f64>,
    /// Custom Q-matrix; `None` uses [`builtin_qmatrix`].
    pub qmatrix: Option<QMatrix>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::condition(200, 6, 0.4, 1)
    }
}

impl GenConfig {
    /// One simulation design cell with default generating parameters.
    pub fn condition(n_learners: usize, n_items: usize, rho: f64, seed: u64) -> Self {
        Self {
            n_learners,
            n_items,
            n_attributes: 2,
            n_waves: 2,
            n_covariates: 3,
            rho,
            item_range: (0.15, 0.25),
            true_params: default_true_params(2, 3),
            qmatrix: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 || self.n_items == 0 || self.n_waves == 0 {
            return Err(Error::config("N, J and T must be at least 1"));
        }
        check_rho(self.n_covariates, self.rho)?;
        let (lo, hi) = self.item_range;
        if !(lo >= 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::config(format!(
                "item range ({lo}, {hi}) must satisfy 0 <= low <= high < 0.5"
            )));
        }
        self.true_params.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.true_params.n_attributes() != self.n_attributes
            || self.true_params.n_covariates() != self.n_covariates
        {
            return Err(Error::config(format!(
                "true parameters are {}x{} but K={}, C={}",
                self.true_params.n_attributes(),
                self.true_params.n_covariates() + 1,
                self.n_attributes,
                self.n_covariates
            )));
        }
        if let Some(q) = &self.qmatrix {
            if q.n_items() != self.n_items || q.n_attributes() != self.n_attributes {
                return Err(Error::config("custom Q-matrix does not match J and K"));
            }
        }
        Ok(())
    }

    pub fn resolve_qmatrix(&self) -> Result<QMatrix> {
        match &self.qmatrix {
            Some(q) => Ok(q.clone()),
            None if self.n_attributes == 2 => builtin_qmatrix(self.n_items),
            None => Err(Error::config(
                "built-in Q-matrices exist only for K = 2; supply a Q-matrix",
            )),
        }
    }

    /// Writes every field under the `gen.` prefix.
    pub fn write_keys(&self, kv: &mut KeyValues) {
        kv.insert("gen.n", self.n_learners);
        kv.insert("gen.j", self.n_items);
        kv.insert("gen.k", self.n_attributes);
        kv.insert("gen.t", self.n_waves);
        kv.insert("gen.c", self.n_covariates);
        kv.insert("gen.rho", self.rho);
        kv.insert("gen.item_low", self.item_range.0);
        kv.insert("gen.item_high", self.item_range.1);
        kv.insert("gen.monotone", self.true_params.monotone);
        kv.insert("gen.seed", self.seed);
        for (name, block) in [
            ("beta", &self.true_params.beta),
            ("gamma01", &self.true_params.gamma01),
            ("gamma10", &self.true_params.gamma10),
        ] {
            for (k, row) in block.iter().enumerate() {
                kv.insert(format!("gen.{name}.{}", k + 1), join_list(row));
            }
        }
    }

    /// Applies `gen.` keys on top of `self`. Scalar keys
    /// (`gen.beta_intercept`, `gen.beta_slope`, ...) set every attribute;
    /// per-attribute rows (`gen.beta.1 = b0,b1,..`) override them.
    pub fn apply_keys(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("gen.n", &mut self.n_learners)?;
        kv.apply("gen.j", &mut self.n_items)?;
        let (old_k, old_c) = (self.n_attributes, self.n_covariates);
        kv.apply("gen.k", &mut self.n_attributes)?;
        kv.apply("gen.t", &mut self.n_waves)?;
        kv.apply("gen.c", &mut self.n_covariates)?;
        kv.apply("gen.rho", &mut self.rho)?;
        kv.apply("gen.item_low", &mut self.item_range.0)?;
        kv.apply("gen.item_high", &mut self.item_range.1)?;
        kv.apply("gen.seed", &mut self.seed)?;
        if (old_k, old_c) != (self.n_attributes, self.n_covariates) {
            let monotone = self.true_params.monotone;
            self.true_params = default_true_params(self.n_attributes, self.n_covariates);
            self.true_params.monotone = monotone;
        }
        kv.apply("gen.monotone", &mut self.true_params.monotone)?;
        let width = self.n_covariates + 1;
        let k = self.n_attributes;
        let params = &mut self.true_params;
        for (name, block) in [
            ("beta", &mut params.beta),
            ("gamma01", &mut params.gamma01),
            ("gamma10", &mut params.gamma10),
        ] {
            if let Some(v) = kv.parsed::<f64>(&format!("gen.{name}_intercept"))? {
                block.iter_mut().for_each(|r| r[0] = v);
            }
            if let Some(v) = kv.parsed::<f64>(&format!("gen.{name}_slope"))? {
                block.iter_mut().for_each(|r| r[1..].fill(v));
            }
            for (a, row) in block.iter_mut().enumerate().take(k) {
                if let Some(vals) = kv.list::<f64>(&format!("gen.{name}.{}", a + 1))? {
                    if vals.len() != width {
                        return Err(Error::config(format!(
                            "gen.{name}.{} needs {width} values",
                            a + 1
                        )));
                    }
                    *row = vals;
                }
            }
        }
        Ok(())
    }
}

fn check_rho(n_covariates: usize, rho: f64) -> Result<()> {
    if n_covariates >= 2 {
        let lower = -1.0 / (n_covariates as f64 - 1.0);
        if !(rho > lower && rho < 1.0) {
            return Err(Error::config(format!(
                "rho = {rho} makes the {n_covariates}x{n_covariates} equicorrelation matrix non-positive-definite"
            )));
        }
    } else if !rho.is_finite() {
        return Err(Error::config("rho must be finite"));
    }
    Ok(())
}

/// Simulated data bundled with its generating truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub responses: ResponsePanel,
    pub covariates: CovariateMatrix<f64>,
    pub true_profiles: ProfilePanel,
    pub true_items: ItemParams<f64>,
    pub qmatrix: QMatrix,
    pub config: GenConfig,
}

impl Dataset {
    pub fn view(&self) -> DataView<'_> {
        DataView {
            responses: &self.responses,
            covariates: &self.covariates,
            qmatrix: &self.qmatrix,
        }
    }

    /// Content hash over responses, covariates and truth.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.responses.hash(&mut h);
        self.true_profiles.hash(&mut h);
        self.qmatrix.rows().for_each(|r| r.hash(&mut h));
        for v in self
            .covariates
            .raw()
            .iter()
            .chain(&self.true_items.guess)
            .chain(&self.true_items.slip)
        {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (n, j, t) = (
            self.responses.n_learners(),
            self.responses.n_items(),
            self.responses.n_waves(),
        );
        let k = self.qmatrix.n_attributes();
        let c = self.covariates.n_covariates();

        let mut s = String::from("learner,item,wave,y\n");
        for w in 0..t {
            for i in 0..n {
                for it in 0..j {
                    let _ = writeln!(s, "{i},{it},{w},{}", self.responses.get(i, it, w));
                }
            }
        }
        fs::write(dir.join("responses.csv"), s)?;

        let mut s = header("learner", "z", c);
        for i in 0..n {
            let _ = writeln!(s, "{i}{}", tail(self.covariates.row(i)));
        }
        fs::write(dir.join("covariates.csv"), s)?;

        let mut s = String::from("learner,wave");
        (1..=k).for_each(|a| {
            let _ = write!(s, ",a{a}");
        });
        s.push('\n');
        for i in 0..n {
            for w in 0..t {
                let bits: Vec<u8> = (0..k).map(|a| self.true_profiles.attribute(i, w, a)).collect();
                let _ = writeln!(s, "{i},{w}{}", tail(&bits));
            }
        }
        fs::write(dir.join("truth.csv"), s)?;

        let mut s = String::from("item,g,s\n");
        for it in 0..j {
            let _ = writeln!(s, "{it},{},{}", self.true_items.guess[it], self.true_items.slip[it]);
        }
        fs::write(dir.join("items.csv"), s)?;

        fs::write(dir.join("qmatrix.csv"), qmatrix_csv(&self.qmatrix))?;

        let mut kv = KeyValues::new();
        self.config.write_keys(&mut kv);
        kv.insert("data.n", n);
        kv.insert("data.j", j);
        kv.insert("data.t", t);
        kv.insert("data.k", k);
        kv.insert("data.c", c);
        fs::write(dir.join("manifest.txt"), kv.render())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("manifest.txt"))?;
        let need = |key: &str| -> Result<usize> {
            kv.parsed(key)?
                .ok_or_else(|| Error::parse(format!("manifest lacks {key}")))
        };
        let (n, j, t, k, c) = (
            need("data.n")?,
            need("data.j")?,
            need("data.t")?,
            need("data.k")?,
            need("data.c")?,
        );
        let mut config = GenConfig::condition(n, j, 0.0, 0);
        config.apply_keys(&kv)?;

        let qmatrix = read_qmatrix(&dir.join("qmatrix.csv"))?;
        if qmatrix.n_items() != j || qmatrix.n_attributes() != k {
            return Err(Error::parse("qmatrix.csv does not match manifest"));
        }

        let mut responses = ResponsePanel::zeros(n, j, t);
        let mut seen = vec![false; n * j * t];
        for row in read_rows(&dir.join("responses.csv"), 4)? {
            let (i, it, w, y) = (row[0] as usize, row[1] as usize, row[2] as usize, row[3]);
            if i >= n || it >= j || w >= t || !(y == 0.0 || y == 1.0) {
                return Err(Error::parse(format!("responses.csv row out of range: {row:?}")));
            }
            responses.set(i, it, w, y as u8);
            seen[(w * n + i) * j + it] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::parse("responses.csv is incomplete"));
        }

        let mut z = vec![0.0; n * c];
        let cov_rows = read_rows(&dir.join("covariates.csv"), 1 + c)?;
        if cov_rows.len() != n {
            return Err(Error::parse("covariates.csv row count does not match N"));
        }
        for row in cov_rows {
            let i = row[0] as usize;
            if i >= n {
                return Err(Error::parse("covariates.csv learner out of range"));
            }
            z[i * c..(i + 1) * c].copy_from_slice(&row[1..]);
        }
        let covariates = CovariateMatrix::new(n, c, z)?;

        let mut true_profiles = ProfilePanel::new(n, t, k);
        for row in read_rows(&dir.join("truth.csv"), 2 + k)? {
            let (i, w) = (row[0] as usize, row[1] as usize);
            if i >= n || w >= t {
                return Err(Error::parse("truth.csv row out of range"));
            }
            let idx = row[2..]
                .iter()
                .enumerate()
                .fold(0u32, |acc, (a, &b)| acc | (((b == 1.0) as u32) << a));
            true_profiles.set(i, w, ProfileIndex(idx));
        }

        let mut guess = vec![0.0; j];
        let mut slip = vec![0.0; j];
        for row in read_rows(&dir.join("items.csv"), 3)? {
            let it = row[0] as usize;
            if it >= j {
                return Err(Error::parse("items.csv item out of range"));
            }
            guess[it] = row[1];
            slip[it] = row[2];
        }
        let true_items = ItemParams::new(guess, slip)?;
        config.qmatrix = Some(qmatrix.clone());

        Ok(Self {
            responses,
            covariates,
            true_profiles,
            true_items,
            qmatrix,
            config,
        })
    }
}

fn header(first: &str, prefix: &str, count: usize) -> String {
    let mut s = first.to_string();
    for c in 1..=count {
        let _ = write!(s, ",{prefix}{c}");
    }
    s.push('\n');
    s
}

fn tail<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| format!(",{}", v.to_string())).collect()
}

pub fn qmatrix_csv(q: &QMatrix) -> String {
    let mut s = header("item", "a", q.n_attributes());
    for (j, row) in q.rows().enumerate() {
        let _ = writeln!(s, "{j}{}", tail(row));
    }
    s
}

/// Reads a Q-matrix in the `qmatrix.csv` layout.
pub fn read_qmatrix(path: &Path) -> Result<QMatrix> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines
        .next()
        .ok_or_else(|| Error::parse(format!("{} is empty", path.display())))?;
    let k = head.split(',').count().saturating_sub(1);
    let mut rows = Vec::new();
    for line in lines {
        let vals: Vec<u8> = parse_list(line)
            .map_err(|_| Error::parse(format!("bad Q-matrix line {line:?}")))?;
        if vals.len() != k + 1 {
            return Err(Error::parse(format!("bad Q-matrix line {line:?}")));
        }
        rows.push(vals[1..].to_vec());
    }
    QMatrix::new(rows)
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let vals: Vec<f64> = parse_list(line)
                .map_err(|_| Error::parse(format!("{}: bad line {line:?}", path.display())))?;
            if vals.len() != width {
                return Err(Error::parse(format!(
                    "{}: expected {width} fields in {line:?}",
                    path.display()
                )));
            }
            Ok(vals)
        })
        .collect()
}

/// Q-matrices of the three study designs (`K = 2`).
///
/// `J = 6`: items 1..5 alternate single-attribute loadings, item 6 needs both.
/// `J = 18` / `J = 30`: alternating single-attribute items followed by 4 / 6
/// items that need both attributes.
pub fn builtin_qmatrix(n_items: usize) -> Result<QMatrix> {
    let both = match n_items {
        6 => 1,
        18 => 4,
        30 => 6,
        _ => {
            return Err(Error::config(format!(
                "no built-in Q-matrix for J = {n_items} (supported: 6, 18, 30)"
            )))
        }
    };
    let rows = (0..n_items)
        .map(|j| {
            if j >= n_items - both {
                vec![1, 1]
            } else if j % 2 == 0 {
                vec![1, 0]
            } else {
                vec![0, 1]
            }
        })
        .collect();
    QMatrix::new(rows)
}

/// `N` draws from `MVN(0, S)` with `S` the `C x C` equicorrelation matrix,
/// then standardized column-wise to sample mean 0 and sample variance 1.
pub fn gen_covariates<R: Rng + ?Sized>(
    n_learners: usize,
    n_covariates: usize,
    rho: f64,
    rng: &mut R,
) -> Result<CovariateMatrix<f64>> {
    check_rho(n_covariates, rho)?;
    if n_covariates == 0 {
        return Ok(CovariateMatrix::empty(n_learners));
    }
    let sigma = DMatrix::from_fn(n_covariates, n_covariates, |r, c| {
        if r == c {
            1.0
        } else {
            rho
        }
    });
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::config(format!("equicorrelation matrix with rho={rho} is not PD")))?;
    let l = chol.l();
    let mut z = Vec::with_capacity(n_learners * n_covariates);
    for _ in 0..n_learners {
        let e = DVector::from_fn(n_covariates, |_, _| rng.sample::<f64, _>(StandardNormal));
        z.extend((&l * e).iter());
    }
    standardize_columns(&mut z, n_covariates);
    CovariateMatrix::new(n_learners, n_covariates, z)
}

/// Centers each column and scales it to unit sample variance (`n - 1`
/// denominator). Constant columns are only centered.
pub fn standardize_columns(z: &mut [f64], n_cols: usize) {
    let n = z.len() / n_cols.max(1);
    if n == 0 {
        return;
    }
    for c in 0..n_cols {
        let mean = (0..n).map(|i| z[i * n_cols + c]).sum::<f64>() / n as f64;
        let ss: f64 = (0..n).map(|i| (z[i * n_cols + c] - mean).powi(2)).sum();
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        for i in 0..n {
            let v = &mut z[i * n_cols + c];
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
}

/// Guessing and slipping drawn i.i.d. uniform on `range`, shared by all waves.
pub fn gen_item_params<R: Rng + ?Sized>(
    n_items: usize,
    range: (f64, f64),
    rng: &mut R,
) -> Result<ItemParams<f64>> {
    let (lo, hi) = range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::config(format!("invalid item range ({lo}, {hi})")));
    }
    let draw = |rng: &mut R| -> Vec<f64> {
        (0..n_items).map(|_| rng.random_range(lo..=hi)).collect()
    };
    let guess = draw(rng);
    let slip = draw(rng);
    ItemParams::new(guess, slip)
}

/// Profiles for every learner and wave: wave 1 from the initial-mastery model,
/// later waves attribute by attribute from the acquisition and loss models.
pub fn gen_profiles<R: Rng + ?Sized>(
    covariates: &CovariateMatrix<f64>,
    params: &StructuralParams<f64>,
    n_waves: usize,
    rng: &mut R,
) -> Result<ProfilePanel> {
    params.validate()?;
    let k = params.n_attributes();
    let n = covariates.n_learners();
    let mut panel = ProfilePanel::new(n, n_waves, k);
    for i in 0..n {
        let z = covariates.row(i);
        let mut cur = 0u32;
        for (a, b) in params.beta.iter().enumerate() {
            if rng.random::<f64>() < initial_mastery_prob(b, z)? {
                cur |= 1 << a;
            }
        }
        if n_waves > 0 {
            panel.set(i, 0, ProfileIndex(cur));
        }
        for t in 1..n_waves {
            let mut next = 0u32;
            for a in 0..k {
                let mastered = (cur >> a) & 1 == 1;
                let keep = if mastered {
                    rng.random::<f64>() >= loss_prob(&params.gamma10[a], z, params.monotone)?
                } else {
                    rng.random::<f64>() < acquisition_prob(&params.gamma01[a], z)?
                };
                if keep {
                    next |= 1 << a;
                }
            }
            panel.set(i, t, ProfileIndex(next));
            cur = next;
        }
    }
    Ok(panel)
}

/// Independent DINA responses given profiles.
pub fn gen_responses<R: Rng + ?Sized>(
    profiles: &ProfilePanel,
    qmatrix: &QMatrix,
    items: &ItemParams<f64>,
    rng: &mut R,
) -> Result<ResponsePanel> {
    if items.n_items() != qmatrix.n_items() || profiles.n_attributes() != qmatrix.n_attributes()
    {
        return Err(Error::dim("profiles, Q-matrix and item parameters disagree"));
    }
    let (n, t, j) = (profiles.n_learners(), profiles.n_waves(), qmatrix.n_items());
    let mut y = ResponsePanel::zeros(n, j, t);
    for w in 0..t {
        for i in 0..n {
            let prof = profiles.get(i, w);
            for it in 0..j {
                let p = if qmatrix.eta(it, prof) {
                    1.0 - items.slip[it]
                } else {
                    items.guess[it]
                };
                y.set(i, it, w, (rng.random::<f64>() < p) as u8);
            }
        }
    }
    Ok(y)
}

/// Complete dataset for one configuration; deterministic in `config.seed`.
pub fn gen_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let qmatrix = config.resolve_qmatrix()?;
    let seed = config.seed;
    let covariates = gen_covariates(
        config.n_learners,
        config.n_covariates,
        config.rho,
        &mut rng::stream(seed, &[stage::DATASET, stage::COVARIATES]),
    )?;
    let true_items = gen_item_params(
        config.n_items,
        config.item_range,
        &mut rng::stream(seed, &[stage::DATASET, stage::ITEMS]),
    )?;
    let true_profiles = gen_profiles(
        &covariates,
        &config.true_params,
        config.n_waves,
        &mut rng::stream(seed, &[stage::DATASET, stage::PROFILES]),
    )?;
    let responses = gen_responses(
        &true_profiles,
        &qmatrix,
        &true_items,
        &mut rng::stream(seed, &[stage::DATASET, stage::RESPONSES]),
    )?;
    Ok(Dataset {
        responses,
        covariates,
        true_profiles,
        true_items,
        qmatrix,
        config: config.clone(),
    })
}
