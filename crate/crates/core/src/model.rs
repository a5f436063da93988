//! DINA measurement model: Q-matrix, profile space, item parameters and the
//! per-wave likelihood and posterior computations shared by both estimators.
//!
//! Profiles are indexed by the integer value of their mastery bit vector with
//! attribute 1 as the least significant bit, so for `K = 2` the canonical order
//! is `(0,0), (1,0), (0,1), (1,1)`. Every profile-indexed vector or matrix in
//! the crate (posteriors, CEP and transition matrices) uses this order.

use crate::error::{Error, Result};
use crate::scalar::{clamp_prob, log_sum_exp, Scalar};

pub const MAX_ATTRIBUTES: usize = 16;

#[inline]
pub fn n_profiles(k: usize) -> usize {
    1usize << k
}

/// Position of a profile in the canonical `2^K` ordering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProfileIndex(pub u32);

impl ProfileIndex {
    #[inline]
    pub fn get(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn masters(self, attribute: usize) -> bool {
        (self.0 >> attribute) & 1 == 1
    }
}

/// Mastery indicators for the `K` attributes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeProfile {
    bits: Vec<u8>,
}

impl AttributeProfile {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.len() > MAX_ATTRIBUTES {
            return Err(Error::config(format!(
                "profile length {} outside 1..={MAX_ATTRIBUTES}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::input("profile entries must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    pub fn from_index(index: ProfileIndex, k: usize) -> Self {
        let bits = (0..k).map(|a| index.masters(a) as u8).collect();
        Self { bits }
    }

    pub fn index(&self) -> ProfileIndex {
        ProfileIndex(
            self.bits
                .iter()
                .enumerate()
                .fold(0u32, |acc, (a, &b)| acc | ((b as u32) << a)),
        )
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn n_attributes(&self) -> usize {
        self.bits.len()
    }
}

/// All `2^K` profiles in canonical order.
pub fn enumerate_profiles(k: usize) -> Result<Vec<AttributeProfile>> {
    if !(1..=MAX_ATTRIBUTES).contains(&k) {
        return Err(Error::config(format!(
            "attribute count {k} outside 1..={MAX_ATTRIBUTES}"
        )));
    }
    Ok((0..n_profiles(k) as u32)
        .map(|i| AttributeProfile::from_index(ProfileIndex(i), k))
        .collect())
}

/// Conjunctive indicator: 1 iff every attribute the item requires is mastered.
pub fn eta(profile: &AttributeProfile, q_row: &[u8]) -> Result<u8> {
    if profile.bits.len() != q_row.len() {
        return Err(Error::dim(format!(
            "profile has {} attributes, q row has {}",
            profile.bits.len(),
            q_row.len()
        )));
    }
    Ok(profile
        .bits
        .iter()
        .zip(q_row)
        .all(|(&a, &q)| a >= q) as u8)
}

/// Bitmask form of [`eta`].
#[inline]
pub fn eta_mask(profile: ProfileIndex, requirement_mask: u32) -> bool {
    profile.0 & requirement_mask == requirement_mask
}

/// Item-by-attribute loading matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QMatrix {
    n_items: usize,
    n_attributes: usize,
    entries: Vec<u8>,
    masks: Vec<u32>,
}

impl QMatrix {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n_items = rows.len();
        let n_attributes = rows.first().map_or(0, Vec::len);
        if !(1..=MAX_ATTRIBUTES).contains(&n_attributes) {
            return Err(Error::config(format!(
                "Q-matrix attribute count {n_attributes} outside 1..={MAX_ATTRIBUTES}"
            )));
        }
        if n_items < n_attributes {
            return Err(Error::config(format!(
                "Q-matrix needs at least as many items as attributes ({n_items} < {n_attributes})"
            )));
        }
        let mut entries = Vec::with_capacity(n_items * n_attributes);
        let mut masks = Vec::with_capacity(n_items);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != n_attributes {
                return Err(Error::dim(format!(
                    "Q-matrix row {j} has {} entries, expected {n_attributes}",
                    row.len()
                )));
            }
            if row.iter().any(|&q| q > 1) {
                return Err(Error::config(format!("Q-matrix row {j} is not binary")));
            }
            if row.iter().all(|&q| q == 0) {
                return Err(Error::config(format!(
                    "Q-matrix row {j} requires no attribute"
                )));
            }
            entries.extend_from_slice(row);
            masks.push(
                row.iter()
                    .enumerate()
                    .fold(0u32, |m, (a, &q)| m | ((q as u32) << a)),
            );
        }
        Ok(Self {
            n_items,
            n_attributes,
            entries,
            masks,
        })
    }

    #[inline]
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    #[inline]
    pub fn n_profiles(&self) -> usize {
        n_profiles(self.n_attributes)
    }

    pub fn row(&self, item: usize) -> &[u8] {
        &self.entries[item * self.n_attributes..(item + 1) * self.n_attributes]
    }

    #[inline]
    pub fn mask(&self, item: usize) -> u32 {
        self.masks[item]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.chunks(self.n_attributes)
    }

    /// Whether every attribute is measured by at least one item that requires
    /// only that attribute.
    pub fn has_single_attribute_items(&self) -> bool {
        (0..self.n_attributes).all(|a| self.masks.iter().any(|&m| m == 1 << a))
    }

    #[inline]
    pub fn eta(&self, item: usize, profile: ProfileIndex) -> bool {
        eta_mask(profile, self.masks[item])
    }
}

/// Per-item guessing and slipping probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemParams<T: Scalar> {
    pub guess: Vec<T>,
    pub slip: Vec<T>,
}

impl<T: Scalar> ItemParams<T> {
    /// Entries must lie in `[0, 1]`; likelihood evaluation clamps them into the
    /// open interval.
    pub fn new(guess: Vec<T>, slip: Vec<T>) -> Result<Self> {
        if guess.len() != slip.len() {
            return Err(Error::dim(format!(
                "{} guessing vs {} slipping parameters",
                guess.len(),
                slip.len()
            )));
        }
        let bad = guess
            .iter()
            .chain(&slip)
            .any(|&p| !(p >= T::zero() && p <= T::one()));
        if bad {
            return Err(Error::input("item parameters must lie in [0, 1]"));
        }
        Ok(Self { guess, slip })
    }

    pub fn constant(n_items: usize, guess: T, slip: T) -> Self {
        Self {
            guess: vec![guess; n_items],
            slip: vec![slip; n_items],
        }
    }

    pub fn n_items(&self) -> usize {
        self.guess.len()
    }

    /// Every item satisfies `g_j < 1 - s_j`.
    pub fn discriminating(&self) -> bool {
        self.guess
            .iter()
            .zip(&self.slip)
            .all(|(&g, &s)| g < T::one() - s)
    }
}

/// DINA probability of a correct response: `1 - s` when `eta` holds, `g`
/// otherwise.
pub fn response_prob<T: Scalar>(eta: bool, guess: T, slip: T) -> Result<T> {
    let unit = |p: T| p >= T::zero() && p <= T::one();
    if !unit(guess) || !unit(slip) {
        return Err(Error::input(format!(
            "item parameters out of [0,1]: g={guess}, s={slip}"
        )));
    }
    Ok(if eta { T::one() - slip } else { guess })
}

/// Binary responses `Y[i, j, t]`, stored wave-major so that one wave is a
/// contiguous `N x J` block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResponsePanel {
    n_learners: usize,
    n_items: usize,
    n_waves: usize,
    y: Vec<u8>,
}

impl ResponsePanel {
    /// `y` is laid out as `[wave][learner][item]`.
    pub fn new(n_learners: usize, n_items: usize, n_waves: usize, y: Vec<u8>) -> Result<Self> {
        if y.len() != n_learners * n_items * n_waves {
            return Err(Error::dim(format!(
                "response buffer has {} entries, expected {n_learners}x{n_items}x{n_waves}",
                y.len()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::input("responses must be 0 or 1"));
        }
        Ok(Self {
            n_learners,
            n_items,
            n_waves,
            y,
        })
    }

    pub fn zeros(n_learners: usize, n_items: usize, n_waves: usize) -> Self {
        Self {
            n_learners,
            n_items,
            n_waves,
            y: vec![0; n_learners * n_items * n_waves],
        }
    }

    pub fn n_learners(&self) -> usize {
        self.n_learners
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_waves(&self) -> usize {
        self.n_waves
    }

    #[inline]
    fn offset(&self, learner: usize, item: usize, wave: usize) -> usize {
        (wave * self.n_learners + learner) * self.n_items + item
    }

    #[inline]
    pub fn get(&self, learner: usize, item: usize, wave: usize) -> u8 {
        self.y[self.offset(learner, item, wave)]
    }

    #[inline]
    pub fn set(&mut self, learner: usize, item: usize, wave: usize, value: u8) {
        let o = self.offset(learner, item, wave);
        self.y[o] = value.min(1);
    }

    /// Responses of every learner at one wave, `N x J` row-major.
    pub fn wave(&self, wave: usize) -> &[u8] {
        let len = self.n_learners * self.n_items;
        &self.y[wave * len..(wave + 1) * len]
    }

    pub fn learner_wave(&self, learner: usize, wave: usize) -> &[u8] {
        let o = self.offset(learner, 0, wave);
        &self.y[o..o + self.n_items]
    }

    pub fn raw(&self) -> &[u8] {
        &self.y
    }
}

/// Profile assignments for `N` learners over `T` waves (true, sampled or
/// estimated).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProfilePanel {
    n_learners: usize,
    n_waves: usize,
    n_attributes: usize,
    idx: Vec<u32>,
}

impl ProfilePanel {
    pub fn new(n_learners: usize, n_waves: usize, n_attributes: usize) -> Self {
        Self {
            n_learners,
            n_waves,
            n_attributes,
            idx: vec![0; n_learners * n_waves],
        }
    }

    /// `indices` is laid out learner-major (`i * T + t`).
    pub fn from_indices(
        n_learners: usize,
        n_waves: usize,
        n_attributes: usize,
        indices: Vec<u32>,
    ) -> Result<Self> {
        if indices.len() != n_learners * n_waves {
            return Err(Error::dim(format!(
                "{} profile indices for {n_learners} learners x {n_waves} waves",
                indices.len()
            )));
        }
        let p = n_profiles(n_attributes) as u32;
        if indices.iter().any(|&v| v >= p) {
            return Err(Error::input(format!("profile index out of range 0..{p}")));
        }
        Ok(Self {
            n_learners,
            n_waves,
            n_attributes,
            idx: indices,
        })
    }

    pub fn n_learners(&self) -> usize {
        self.n_learners
    }

    pub fn n_waves(&self) -> usize {
        self.n_waves
    }

    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    #[inline]
    pub fn get(&self, learner: usize, wave: usize) -> ProfileIndex {
        ProfileIndex(self.idx[learner * self.n_waves + wave])
    }

    #[inline]
    pub fn set(&mut self, learner: usize, wave: usize, profile: ProfileIndex) {
        self.idx[learner * self.n_waves + wave] = profile.0;
    }

    #[inline]
    pub fn attribute(&self, learner: usize, wave: usize, attribute: usize) -> u8 {
        self.get(learner, wave).masters(attribute) as u8
    }

    pub fn indices(&self) -> &[u32] {
        &self.idx
    }

    /// Number of (learner, wave, attribute) events where a mastered attribute
    /// is lost between consecutive waves.
    pub fn loss_count(&self) -> usize {
        let mut losses = 0;
        for i in 0..self.n_learners {
            for t in 1..self.n_waves {
                let prev = self.get(i, t - 1).0;
                let cur = self.get(i, t).0;
                losses += (prev & !cur).count_ones() as usize;
            }
        }
        losses
    }
}

/// Distribution over the `2^K` profiles for one learner at one wave.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfilePosterior<T: Scalar> {
    pub probs: Vec<T>,
}

impl<T: Scalar> ProfilePosterior<T> {
    /// Most probable profile; ties go to the lowest index.
    pub fn map_index(&self) -> ProfileIndex {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = c;
            }
        }
        ProfileIndex(best as u32)
    }
}

fn check_dims<T: Scalar>(responses: &[u8], params: &ItemParams<T>, q: &QMatrix) -> Result<()> {
    if responses.len() != q.n_items() || params.n_items() != q.n_items() {
        return Err(Error::dim(format!(
            "{} responses, {} item parameters, {} Q-matrix rows",
            responses.len(),
            params.n_items(),
            q.n_items()
        )));
    }
    Ok(())
}

/// Log-likelihood of one learner's responses at one wave given a profile, with
/// item parameters clamped into `[1e-6, 1 - 1e-6]`.
pub fn wave_loglik<T: Scalar>(
    responses: &[u8],
    profile: &AttributeProfile,
    params: &ItemParams<T>,
    q: &QMatrix,
) -> Result<T> {
    wave_loglik_impl(responses, profile, params, q, true)
}

/// As [`wave_loglik`] but without clamping: a response that contradicts a
/// boundary parameter (e.g. a wrong answer with `s = 0` and `eta = 1`) yields
/// `-inf`, which callers detect with `is_finite`.
pub fn wave_loglik_unclamped<T: Scalar>(
    responses: &[u8],
    profile: &AttributeProfile,
    params: &ItemParams<T>,
    q: &QMatrix,
) -> Result<T> {
    wave_loglik_impl(responses, profile, params, q, false)
}

fn wave_loglik_impl<T: Scalar>(
    responses: &[u8],
    profile: &AttributeProfile,
    params: &ItemParams<T>,
    q: &QMatrix,
    clamp: bool,
) -> Result<T> {
    check_dims(responses, params, q)?;
    if profile.n_attributes() != q.n_attributes() {
        return Err(Error::dim(format!(
            "profile has {} attributes, Q-matrix has {}",
            profile.n_attributes(),
            q.n_attributes()
        )));
    }
    let idx = profile.index();
    let mut ll = T::zero();
    for (j, &y) in responses.iter().enumerate() {
        let (mut g, mut s) = (params.guess[j], params.slip[j]);
        if clamp {
            g = clamp_prob(g);
            s = clamp_prob(s);
        }
        let p = response_prob(q.eta(j, idx), g, s)?;
        ll = ll + if y == 1 { p.ln() } else { (T::one() - p).ln() };
    }
    Ok(ll)
}

/// Clamped log response probabilities for every (profile, item) pair, used to
/// evaluate all `2^K` profile likelihoods of a response vector in `O(2^K J)`.
#[derive(Clone, Debug)]
pub struct ItemLogTable<T: Scalar> {
    n_items: usize,
    n_profiles: usize,
    log_correct: Vec<T>,
    log_wrong: Vec<T>,
}

impl<T: Scalar> ItemLogTable<T> {
    pub fn new(params: &ItemParams<T>, q: &QMatrix) -> Result<Self> {
        if params.n_items() != q.n_items() {
            return Err(Error::dim(format!(
                "{} item parameters for {} Q-matrix rows",
                params.n_items(),
                q.n_items()
            )));
        }
        let n_items = q.n_items();
        let n_profiles = q.n_profiles();
        let mut log_correct = Vec::with_capacity(n_profiles * n_items);
        let mut log_wrong = Vec::with_capacity(n_profiles * n_items);
        for c in 0..n_profiles as u32 {
            for j in 0..n_items {
                let g = clamp_prob(params.guess[j]);
                let s = clamp_prob(params.slip[j]);
                let p = if q.eta(j, ProfileIndex(c)) { T::one() - s } else { g };
                log_correct.push(p.ln());
                log_wrong.push((T::one() - p).ln());
            }
        }
        Ok(Self {
            n_items,
            n_profiles,
            log_correct,
            log_wrong,
        })
    }

    pub fn n_profiles(&self) -> usize {
        self.n_profiles
    }

    #[inline]
    pub fn loglik(&self, profile: usize, responses: &[u8]) -> T {
        let base = profile * self.n_items;
        let mut ll = T::zero();
        for (j, &y) in responses.iter().enumerate() {
            ll = ll
                + if y == 1 {
                    self.log_correct[base + j]
                } else {
                    self.log_wrong[base + j]
                };
        }
        ll
    }

    /// Fills `out[c]` with the log-likelihood of `responses` under profile `c`.
    pub fn loglik_all(&self, responses: &[u8], out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate().take(self.n_profiles) {
            *o = self.loglik(c, responses);
        }
    }

    /// `N x 2^K` log-likelihood matrix for a whole wave (`N x J` responses).
    pub fn wave_matrix(&self, wave_responses: &[u8]) -> Vec<T> {
        let n = wave_responses.len() / self.n_items.max(1);
        let mut out = vec![T::zero(); n * self.n_profiles];
        for (i, row) in out.chunks_mut(self.n_profiles).enumerate() {
            self.loglik_all(
                &wave_responses[i * self.n_items..(i + 1) * self.n_items],
                row,
            );
        }
        out
    }
}

/// Normalizes unnormalized log masses into probabilities in place; returns the
/// log normalizer.
pub fn normalize_log_masses<T: Scalar>(log_mass: &[T], out: &mut [T]) -> Result<T> {
    let norm = log_sum_exp(log_mass);
    if !norm.is_finite() {
        return Err(Error::DegenerateLikelihood(
            "all profiles have zero mass".into(),
        ));
    }
    for (o, &l) in out.iter_mut().zip(log_mass) {
        *o = (l - norm).exp();
    }
    Ok(norm)
}

/// Posterior over profiles of one response vector under a prior.
pub fn posterior_over_profiles<T: Scalar>(
    responses: &[u8],
    params: &ItemParams<T>,
    q: &QMatrix,
    prior: &[T],
) -> Result<ProfilePosterior<T>> {
    check_dims(responses, params, q)?;
    if prior.len() != q.n_profiles() {
        return Err(Error::dim(format!(
            "prior has {} entries, expected {}",
            prior.len(),
            q.n_profiles()
        )));
    }
    if prior.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
        return Err(Error::input("prior weights must be finite and nonnegative"));
    }
    let table = ItemLogTable::new(params, q)?;
    let mut log_mass = vec![T::zero(); prior.len()];
    table.loglik_all(responses, &mut log_mass);
    for (l, &w) in log_mass.iter_mut().zip(prior) {
        *l = *l + w.ln();
    }
    let mut probs = vec![T::zero(); prior.len()];
    normalize_log_masses(&log_mass, &mut probs)?;
    Ok(ProfilePosterior { probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q6() -> QMatrix {
        QMatrix::new(vec![
            vec![1, 0],
            vec![0, 1],
            vec![1, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1],
        ])
        .unwrap()
    }

    fn bits(p: &AttributeProfile) -> Vec<u8> {
        p.bits().to_vec()
    }

    #[test]
    fn enumerates_in_lsb_first_order() {
        let ps = enumerate_profiles(2).unwrap();
        let got: Vec<_> = ps.iter().map(bits).collect();
        assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
        assert_eq!(ps.len(), 4);
        let one: Vec<_> = enumerate_profiles(1).unwrap().iter().map(bits).collect();
        assert_eq!(one, vec![vec![0], vec![1]]);
        for (i, p) in ps.iter().enumerate() {
            assert_eq!(p.index(), ProfileIndex(i as u32));
        }
    }

    #[test]
    fn enumerate_rejects_out_of_range() {
        assert!(matches!(enumerate_profiles(0), Err(Error::Config(_))));
        assert!(matches!(enumerate_profiles(17), Err(Error::Config(_))));
    }

    #[test]
    fn eta_examples() {
        let p = |b: &[u8]| AttributeProfile::new(b.to_vec()).unwrap();
        assert_eq!(eta(&p(&[1, 1]), &[1, 0]).unwrap(), 1);
        assert_eq!(eta(&p(&[0, 1]), &[1, 1]).unwrap(), 0);
        assert_eq!(eta(&p(&[0, 0]), &[0, 0]).unwrap(), 1);
        assert!(matches!(eta(&p(&[0, 0]), &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn response_prob_examples() {
        assert!((response_prob(true, 0.1, 0.2).unwrap() - 0.8f64).abs() < 1e-15);
        assert_eq!(response_prob(false, 0.15, 0.3).unwrap(), 0.15f64);
        assert_eq!(response_prob(true, 0.15, 0.0).unwrap(), 1.0f64);
        assert!(response_prob(true, 0.1, 1.5f64).is_err());
    }

    #[test]
    fn qmatrix_validation() {
        assert!(QMatrix::new(vec![vec![1, 0], vec![0, 0]]).is_err());
        assert!(QMatrix::new(vec![vec![1, 0]]).is_err());
        assert!(QMatrix::new(vec![vec![1, 0], vec![0, 2]]).is_err());
        assert!(q6().has_single_attribute_items());
        let no_id = QMatrix::new(vec![vec![1, 1], vec![1, 0]]).unwrap();
        assert!(!no_id.has_single_attribute_items());
    }

    #[test]
    fn wave_loglik_examples() {
        let q = QMatrix::new(vec![vec![1]]).unwrap();
        let params = ItemParams::new(vec![0.1], vec![0.2]).unwrap();
        let master = AttributeProfile::new(vec![1]).unwrap();
        let ll = wave_loglik(&[1], &master, &params, &q).unwrap();
        assert!((ll - 0.8f64.ln()).abs() < 1e-15);

        let q2 = QMatrix::new(vec![vec![1, 0], vec![0, 1]]).unwrap();
        let p2 = ItemParams::new(vec![0.1, 0.3], vec![0.2, 0.25]).unwrap();
        let prof = AttributeProfile::new(vec![1, 0]).unwrap();
        let ll = wave_loglik(&[1, 0], &prof, &p2, &q2).unwrap();
        assert!((ll - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn wave_loglik_matches_per_item_product() {
        let q = q6();
        let params = ItemParams::new(
            vec![0.15, 0.22, 0.18, 0.2, 0.24, 0.16],
            vec![0.21, 0.17, 0.25, 0.19, 0.15, 0.23],
        )
        .unwrap();
        let y = [1u8, 0, 1, 1, 0, 1];
        for prof in enumerate_profiles(2).unwrap() {
            let mut product = 1.0f64;
            for j in 0..6 {
                let e = eta(&prof, q.row(j)).unwrap() == 1;
                let p = response_prob(e, params.guess[j], params.slip[j]).unwrap();
                product *= if y[j] == 1 { p } else { 1.0 - p };
            }
            let ll = wave_loglik(&y, &prof, &params, &q).unwrap();
            assert!((ll - product.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn unclamped_loglik_flags_contradiction() {
        let q = QMatrix::new(vec![vec![1]]).unwrap();
        let params = ItemParams::new(vec![0.0], vec![0.0]).unwrap();
        let master = AttributeProfile::new(vec![1]).unwrap();
        let ll = wave_loglik_unclamped(&[0], &master, &params, &q).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
        let clamped = wave_loglik(&[0], &master, &params, &q).unwrap();
        assert!(clamped.is_finite());
    }

    #[test]
    fn posterior_uninformative_items_returns_prior() {
        let q = q6();
        let params = ItemParams::constant(6, 0.5, 0.5);
        let prior = [0.25f64; 4];
        let post = posterior_over_profiles(&[1, 0, 1, 1, 0, 0], &params, &q, &prior).unwrap();
        for p in &post.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_point_mass_prior_is_preserved() {
        let q = q6();
        let params = ItemParams::constant(6, 0.2, 0.2);
        let post =
            posterior_over_profiles(&[1, 1, 1, 1, 1, 1], &params, &q, &[0.0, 0.0, 1.0, 0.0])
                .unwrap();
        assert_eq!(post.probs, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn posterior_matches_hand_enumeration() {
        let q = q6();
        let g = [0.15, 0.22, 0.18, 0.2, 0.24, 0.16];
        let s = [0.21, 0.17, 0.25, 0.19, 0.15, 0.23];
        let params = ItemParams::new(g.to_vec(), s.to_vec()).unwrap();
        let y = [1u8, 0, 1, 0, 1, 0];
        let prior = [0.1, 0.2, 0.3, 0.4];
        // Enumerate the four weighted likelihoods directly from the Q rows.
        let profiles = [[0u8, 0], [1, 0], [0, 1], [1, 1]];
        let mut w = [0.0f64; 4];
        for (c, a) in profiles.iter().enumerate() {
            let mut lik = prior[c];
            for j in 0..6 {
                let row = q.row(j);
                let mastered = (row[0] <= a[0]) && (row[1] <= a[1]);
                let p = if mastered { 1.0 - s[j] } else { g[j] };
                lik *= if y[j] == 1 { p } else { 1.0 - p };
            }
            w[c] = lik;
        }
        let total: f64 = w.iter().sum();
        let post = posterior_over_profiles(&y, &params, &q, &prior).unwrap();
        for c in 0..4 {
            assert!((post.probs[c] - w[c] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rejects_bad_prior() {
        let q = q6();
        let params = ItemParams::constant(6, 0.2, 0.2);
        let y = [0u8; 6];
        assert!(posterior_over_profiles(&y, &params, &q, &[0.5, 0.5]).is_err());
        assert!(posterior_over_profiles(&y, &params, &q, &[0.5, -0.5, 0.5, 0.5]).is_err());
        assert!(matches!(
            posterior_over_profiles(&y, &params, &q, &[0.0; 4]),
            Err(Error::DegenerateLikelihood(_))
        ));
    }

    #[test]
    fn map_index_breaks_ties_low() {
        let p = ProfilePosterior {
            probs: vec![0.4, 0.4, 0.1, 0.1],
        };
        assert_eq!(p.map_index(), ProfileIndex(0));
        let p = ProfilePosterior {
            probs: vec![0.1, 0.2, 0.3, 0.4],
        };
        assert_eq!(p.map_index(), ProfileIndex(3));
    }

    #[test]
    fn generic_over_f32() {
        let q = q6();
        let params = ItemParams::<f32>::constant(6, 0.2, 0.2);
        let post = posterior_over_profiles(&[1, 0, 1, 0, 1, 0], &params, &q, &[0.25f32; 4])
            .unwrap();
        let sum: f32 = post.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn profile_panel_counts_losses() {
        let mut panel = ProfilePanel::new(2, 2, 2);
        panel.set(0, 0, ProfileIndex(3));
        panel.set(0, 1, ProfileIndex(1));
        panel.set(1, 0, ProfileIndex(1));
        panel.set(1, 1, ProfileIndex(3));
        assert_eq!(panel.loss_count(), 1);
        assert_eq!(panel.attribute(1, 1, 1), 1);
    }

    fn random_params(j: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<u8>)> {
        (
            prop::collection::vec(0.01f64..0.99, j),
            prop::collection::vec(0.01f64..0.99, j),
            prop::collection::vec(0u8..=1, j),
        )
    }

    proptest! {
        #[test]
        fn posterior_sums_to_one((g, s, y) in random_params(6),
                                 raw_prior in prop::collection::vec(0.01f64..1.0, 4)) {
            let q = q6();
            let params = ItemParams::new(g, s).unwrap();
            let total: f64 = raw_prior.iter().sum();
            let prior: Vec<f64> = raw_prior.iter().map(|w| w / total).collect();
            let post = posterior_over_profiles(&y, &params, &q, &prior).unwrap();
            let sum: f64 = post.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(post.probs.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn eta_is_monotone_in_mastery(a in 0u32..16, extra in 0u32..16, q in 1u32..16) {
            let more = a | extra;
            if eta_mask(ProfileIndex(a), q) {
                prop_assert!(eta_mask(ProfileIndex(more), q));
            }
            let pa = AttributeProfile::from_index(ProfileIndex(a), 4);
            let qa = AttributeProfile::from_index(ProfileIndex(q), 4);
            prop_assert_eq!(eta(&pa, qa.bits()).unwrap() == 1, eta_mask(ProfileIndex(a), q));
        }

        #[test]
        fn loglik_invariant_to_item_order((g, s, y) in random_params(6),
                                          perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
                                          c in 0u32..4) {
            let q = q6();
            let params = ItemParams::new(g.clone(), s.clone()).unwrap();
            let q_perm = QMatrix::new(perm.iter().map(|&j| q.row(j).to_vec()).collect()).unwrap();
            let p_perm = ItemParams::new(
                perm.iter().map(|&j| g[j]).collect(),
                perm.iter().map(|&j| s[j]).collect(),
            ).unwrap();
            let y_perm: Vec<u8> = perm.iter().map(|&j| y[j]).collect();
            let prof = AttributeProfile::from_index(ProfileIndex(c), 2);
            let a = wave_loglik(&y, &prof, &params, &q).unwrap();
            let b = wave_loglik(&y_perm, &prof, &p_perm, &q_perm).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn complementary_items_leave_prior_unchanged(g in prop::collection::vec(0.01f64..0.99, 6),
                                                     y in prop::collection::vec(0u8..=1, 6)) {
            let q = q6();
            let s: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
            let params = ItemParams::new(g, s).unwrap();
            let prior = [0.1, 0.2, 0.3, 0.4];
            let post = posterior_over_profiles(&y, &params, &q, &prior).unwrap();
            for c in 0..4 {
                prop_assert!((post.probs[c] - prior[c]).abs() < 1e-12);
            }
        }
    }
}
