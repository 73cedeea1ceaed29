//! The subset condition `W_down[:, S] W_up[S, :] = T` and everything built on it.
//!
//! With `T = -I_d` this is the exact criterion for rewriting
//! `x + W_down act(W_up x)` as a skipless block of the same width (ReLU for
//! `d >= 2`, GELU for `d >= 1`, under the usual non-degeneracy hypotheses).
//! A general invertible skip `M` reduces to the identity case by
//! left-multiplying with `M^{-1}`; a perturbed skip `Z -> Z'` corresponds to
//! the target `T = Z' - Z`.
//!
//! Subset indices are 0-based throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::block::{Block, BlockKind, Skip};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative Frobenius tolerance for the subset condition.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Largest hidden width the exhaustive search accepts by default.
pub const DEFAULT_MAX_HIDDEN_WIDTH: usize = 24;

/// Two rows are collinear when `|cos angle| > 1 - COLLINEARITY_SLACK`.
pub const COLLINEARITY_SLACK: f64 = 1e-9;

/// Planted row blocks must have smallest singular value above this.
const PLANT_MIN_SINGULAR_VALUE: f64 = 1e-6;
const PLANT_MAX_ATTEMPTS: usize = 100;

/// Subsets evaluated per parallel batch during the search.
const SEARCH_BATCH: usize = 2048;

/// Right-hand side of the subset condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `-I_d`: the identity-skip absorption condition.
    NegIdentity,
    /// An arbitrary `d x d` target, e.g. `Z' - Z`.
    General(Matrix),
}

impl Target {
    pub fn matrix(&self, d: usize) -> Result<Matrix> {
        match self {
            Target::NegIdentity => Ok(Matrix::identity(d).scale(-1.0)),
            Target::General(t) if t.shape() == (d, d) => Ok(t.clone()),
            Target::General(t) => Err(Error::DimensionMismatch(format!(
                "target is {}x{}, expected {d}x{d}",
                t.rows(),
                t.cols()
            ))),
        }
    }
}

/// An index set together with the measured residual of the subset condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCertificate {
    /// Strictly increasing 0-based hidden-unit indices.
    pub subset: Vec<usize>,
    /// `||W_down[:, S] W_up[S, :] - T||_F`
    pub residual: f64,
    /// `tol * (1 + ||W_down[:, S]||_F ||W_up[S, :]||_F)`
    pub threshold: f64,
    pub passed: bool,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLimits {
    pub max_hidden_width: usize,
    /// Smallest subset size tried; `None` means `d`.
    pub min_size: Option<usize>,
    /// Largest subset size tried; `None` means `N`.
    pub max_size: Option<usize>,
    pub tolerance: f64,
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self {
            max_hidden_width: DEFAULT_MAX_HIDDEN_WIDTH,
            min_size: None,
            max_size: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl SearchLimits {
    /// Resolved `(min, max)` subset sizes for a block with input `d` and width `n`.
    fn size_range(&self, d: usize, n: usize) -> Result<(usize, usize)> {
        if n > self.max_hidden_width {
            return Err(Error::WidthLimitExceeded {
                width: n,
                limit: self.max_hidden_width,
            });
        }
        let lo = self.min_size.unwrap_or(d).max(d).max(1);
        let hi = self.max_size.unwrap_or(n);
        if self.min_size.unwrap_or(d) > hi || hi > n {
            return Err(Error::InvalidConfig(format!(
                "subset sizes must satisfy min <= max <= {n}, got min {:?} max {hi}",
                self.min_size
            )));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "negative tolerance {}",
                self.tolerance
            )));
        }
        Ok((lo, hi))
    }
}

/// What the subset condition tells us for a given activation and input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Characterization {
    /// Necessary and sufficient (under the non-degeneracy hypotheses).
    Exact,
    /// The construction works, but necessity is not established.
    SufficientOnly,
    /// Parity split exists, yet neither direction is proven.
    Unproven,
    /// The subset condition is not the relevant criterion.
    NotApplicable,
}

pub fn characterization(act: ActivationKind, d: usize) -> Characterization {
    match act {
        ActivationKind::Relu if d >= 2 => Characterization::Exact,
        ActivationKind::Relu => Characterization::SufficientOnly,
        ActivationKind::Gelu => Characterization::Exact,
        ActivationKind::Silu => Characterization::Unproven,
        _ => Characterization::NotApplicable,
    }
}

fn check_pair(w_up: &Matrix, w_down: &Matrix) -> Result<(usize, usize)> {
    let (n, d) = w_up.shape();
    if w_down.shape() != (d, n) {
        return Err(Error::DimensionMismatch(format!(
            "w_down is {}x{}, expected {d}x{n} to match w_up",
            w_down.rows(),
            w_down.cols()
        )));
    }
    Ok((n, d))
}

/// Sorts `s`, rejecting empty sets, duplicates and indices `>= width`.
pub fn normalize_subset(s: &[usize], width: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut sorted = s.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::DuplicateIndex(pair[0]));
        }
    }
    if let Some(&index) = sorted.last().filter(|&&i| i >= width) {
        return Err(Error::IndexOutOfRange { index, width });
    }
    Ok(sorted)
}

fn certify(
    w_up: &Matrix,
    w_down: &Matrix,
    subset: Vec<usize>,
    target: &Target,
    t: &Matrix,
    tolerance: f64,
) -> SubsetCertificate {
    let down_s = w_down.select_cols(&subset);
    let up_s = w_up.select_rows(&subset);
    let residual = down_s
        .matmul(&up_s)
        .and_then(|p| p.sub(t))
        .expect("shapes checked by caller")
        .frobenius_norm();
    let threshold = tolerance * (1.0 + down_s.frobenius_norm() * up_s.frobenius_norm());
    SubsetCertificate {
        subset,
        residual,
        threshold,
        passed: residual <= threshold,
        target: target.clone(),
    }
}

/// Measures `||W_down[:, S] W_up[S, :] - T||_F` and compares it with the
/// relative threshold `tol * (1 + ||W_down[:, S]||_F ||W_up[S, :]||_F)`.
pub fn check_subset_product(
    w_up: &Matrix,
    w_down: &Matrix,
    subset: &[usize],
    target: &Target,
    tolerance: f64,
) -> Result<SubsetCertificate> {
    let (n, d) = check_pair(w_up, w_down)?;
    let subset = normalize_subset(subset, n)?;
    let t = target.matrix(d)?;
    Ok(certify(w_up, w_down, subset, target, &t, tolerance))
}

/// `k`-subsets of `0..n` in lexicographic order.
#[derive(Debug, Clone)]
pub struct Combinations {
    n: usize,
    next: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            next: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let k = current.len();
        let mut succ = current.clone();
        if let Some(i) = (0..k).rev().find(|&i| succ[i] < self.n - k + i) {
            succ[i] += 1;
            for j in i + 1..k {
                succ[j] = succ[j - 1] + 1;
            }
            self.next = Some(succ);
        }
        Some(current)
    }
}

/// Exhaustive search for a subset satisfying the condition.
///
/// Sizes are tried in increasing order, lexicographically within a size.
/// Subsets whose rows `W_up[S, :]` have rank below `d` are skipped, since the
/// product would then have rank below `d` as well. The returned certificate is
/// the first passing subset in that order, even though batches are checked in
/// parallel.
pub fn find_absorbing_subset(
    w_up: &Matrix,
    w_down: &Matrix,
    target: &Target,
    limits: &SearchLimits,
) -> Result<Option<SubsetCertificate>> {
    let (n, d) = check_pair(w_up, w_down)?;
    let (lo, hi) = limits.size_range(d, n)?;
    let t = target.matrix(d)?;
    let try_subset = |s: &Vec<usize>| -> Option<SubsetCertificate> {
        if w_up.select_rows(s).rank() < d {
            return None;
        }
        let cert = certify(w_up, w_down, s.clone(), target, &t, limits.tolerance);
        cert.passed.then_some(cert)
    };
    for k in lo..=hi {
        let mut combos = Combinations::new(n, k);
        loop {
            let batch: Vec<Vec<usize>> = combos.by_ref().take(SEARCH_BATCH).collect();
            if batch.is_empty() {
                break;
            }
            if let Some(cert) = batch.par_iter().find_map_first(try_subset) {
                return Ok(Some(cert));
            }
        }
    }
    Ok(None)
}

/// The subset with the smallest residual over all sizes in the limits,
/// without rank pruning. Ties go to the earlier subset in search order.
pub fn best_subset(
    w_up: &Matrix,
    w_down: &Matrix,
    target: &Target,
    limits: &SearchLimits,
) -> Result<Option<SubsetCertificate>> {
    let (n, d) = check_pair(w_up, w_down)?;
    let (lo, hi) = limits.size_range(d, n)?;
    let t = target.matrix(d)?;
    let mut best: Option<SubsetCertificate> = None;
    for k in lo..=hi {
        for s in Combinations::new(n, k) {
            let cert = certify(w_up, w_down, s, target, &t, limits.tolerance);
            if best.as_ref().is_none_or(|b| cert.residual < b.residual) {
                best = Some(cert);
            }
        }
    }
    Ok(best)
}

fn ungated_parts(b: &Block) -> Result<(&Matrix, &Matrix, ActivationKind)> {
    match b.kind() {
        BlockKind::Ungated { w_up, w_down, act } => Ok((w_up, w_down, *act)),
        BlockKind::Gated { .. } => Err(Error::InvalidBlock("expected an ungated block".into())),
    }
}

/// Builds the skipless block `V_down act(V_up x)` equal to `x + W_down act(W_up x)`.
///
/// `V_up` is `W_up` with the rows in `subset` negated and `V_down = W_down`.
/// Requires an ungated ReLU or GELU block with identity skip whose subset
/// passes the condition against `-I_d`.
pub fn construct_absorbed(b: &Block, subset: &[usize]) -> Result<Block> {
    let (w_up, w_down, act) = ungated_parts(b)?;
    if *b.skip() != Skip::Identity {
        return Err(Error::InvalidBlock(
            "construction needs an identity skip".into(),
        ));
    }
    if !matches!(act, ActivationKind::Relu | ActivationKind::Gelu) {
        return Err(Error::UnsupportedActivation {
            activation: act,
            context: "absorption",
        });
    }
    let cert = check_subset_product(
        w_up,
        w_down,
        subset,
        &Target::NegIdentity,
        DEFAULT_TOLERANCE,
    )?;
    if !cert.passed {
        return Err(Error::ConditionViolated {
            residual: cert.residual,
            threshold: cert.threshold,
        });
    }
    let mut flip = vec![false; b.width()];
    for &i in &cert.subset {
        flip[i] = true;
    }
    let v_up = Matrix::from_fn(w_up.rows(), w_up.cols(), |i, j| {
        if flip[i] {
            -w_up.get(i, j)
        } else {
            w_up.get(i, j)
        }
    });
    Block::ungated(v_up, w_down.clone(), act, Skip::None)
}

/// No zero rows and no two rows collinear (`|cos| > 1 - COLLINEARITY_SLACK`).
pub fn rows_pairwise_noncollinear(m: &Matrix) -> bool {
    let norms: Vec<f64> = (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.contains(&0.0) {
        return false;
    }
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            if (dot / (norms[i] * norms[j])).abs() > 1.0 - COLLINEARITY_SLACK {
                return false;
            }
        }
    }
    true
}

pub fn cols_nonzero(m: &Matrix) -> bool {
    (0..m.cols()).all(|j| (0..m.rows()).any(|i| m.get(i, j) != 0.0))
}

/// The non-degeneracy hypotheses under which the subset condition is exact.
pub fn satisfies_hypotheses(w_up: &Matrix, w_down: &Matrix) -> bool {
    rows_pairwise_noncollinear(w_up) && cols_nonzero(w_down)
}

/// Parameters for [`plant_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub d: usize,
    pub n: usize,
    /// Size of the planted subset, which is always `0..m`.
    pub m: usize,
    pub target: Target,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl PlantConfig {
    pub fn new(d: usize, n: usize, m: usize, activation: ActivationKind, seed: u64) -> Self {
        Self {
            d,
            n,
            m,
            target: Target::NegIdentity,
            activation,
            seed,
        }
    }
}

/// Draws an identity-skip block satisfying the subset condition on `0..m`.
///
/// `W_up[S, :]` is standard normal with full column rank and
/// `W_down[:, S] = T * pinv(W_up[S, :])`, so the product equals `T` up to
/// rounding. Everything else is standard normal. Draws are repeated until the
/// non-degeneracy hypotheses hold, at most 100 times.
pub fn plant_instance(cfg: &PlantConfig) -> Result<(Block, SubsetCertificate)> {
    let PlantConfig { d, n, m, .. } = *cfg;
    if !(1 <= d && d <= m && m <= n) {
        return Err(Error::InvalidConfig(format!(
            "planting needs 1 <= d <= m <= n, got d={d} m={m} n={n}"
        )));
    }
    if d == 1 && n >= 2 {
        return Err(Error::InvalidConfig(
            "with d = 1 any two rows of W_up are collinear, so planting needs n = 1".into(),
        ));
    }
    let t = cfg.target.matrix(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..PLANT_MAX_ATTEMPTS {
        let up_s = Matrix::random_normal(m, d, &mut rng);
        let smin = *up_s.singular_values().last().expect("nonempty");
        if smin <= PLANT_MIN_SINGULAR_VALUE {
            continue;
        }
        let down_s = t.matmul(&up_s.pseudo_inverse()?)?;
        let (up_rest, down_rest) = if n > m {
            (
                Some(Matrix::random_normal(n - m, d, &mut rng)),
                Some(Matrix::random_normal(d, n - m, &mut rng)),
            )
        } else {
            (None, None)
        };
        let w_up = Matrix::from_fn(n, d, |i, j| match (&up_rest, i < m) {
            (_, true) => up_s.get(i, j),
            (Some(rest), false) => rest.get(i - m, j),
            (None, false) => unreachable!(),
        });
        let w_down = Matrix::from_fn(d, n, |i, j| match (&down_rest, j < m) {
            (_, true) => down_s.get(i, j),
            (Some(rest), false) => rest.get(i, j - m),
            (None, false) => unreachable!(),
        });
        if !satisfies_hypotheses(&w_up, &w_down) {
            continue;
        }
        let subset: Vec<usize> = (0..m).collect();
        let cert = certify(&w_up, &w_down, subset, &cfg.target, &t, DEFAULT_TOLERANCE);
        let block = Block::ungated(w_up, w_down, cfg.activation, Skip::Identity)?;
        return Ok((block, cert));
    }
    Err(Error::Internal(format!(
        "no admissible planted instance after {PLANT_MAX_ATTEMPTS} draws"
    )))
}

/// Turns `M x + W_down act(W_up x)` into `x + (M^{-1} W_down) act(W_up x)`.
///
/// Identity-skip blocks are returned unchanged. Singular, ill-conditioned
/// (condition number at least `1e12`) and rank-deficient skips are rejected,
/// as are blocks without a skip.
pub fn reduce_invertible_skip(b: &Block) -> Result<Block> {
    match b.skip() {
        Skip::Identity => Ok(b.clone()),
        Skip::None => Err(Error::InvalidBlock(
            "block has no skip branch to reduce".into(),
        )),
        Skip::General(m) => {
            let m_inv = m.inverse("skip matrix")?;
            let reduced_down = m_inv.matmul(b.w_down())?;
            b.with_w_down(reduced_down)?.with_skip(Skip::Identity)
        }
    }
}

/// Maps a skipless solution of the reduced problem back to the original
/// general-skip problem by left-multiplying its down projection with `M`.
pub fn lift_reduced_solution(v: &Block, m: &Matrix) -> Result<Block> {
    if m.shape() != (v.dim(), v.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "skip matrix is {}x{}, expected {d}x{d}",
            m.rows(),
            m.cols(),
            d = v.dim()
        )));
    }
    v.with_w_down(m.matmul(v.w_down())?)
}

/// Searches for `S` with `W_down[:, S] W_up[S, :] = Z' - Z`.
///
/// A hit means `W_down act(W_up x) + Z x` can be rewritten with skip `Z'`;
/// `None` is the generic outcome. `Z - Z'` must be invertible.
pub fn perturbation_condition(
    w_up: &Matrix,
    w_down: &Matrix,
    z: &Matrix,
    z_prime: &Matrix,
    limits: &SearchLimits,
) -> Result<Option<SubsetCertificate>> {
    let diff = z.sub(z_prime)?;
    let condition = diff.condition_number();
    if condition.is_nan() || condition >= crate::matrix::MAX_CONDITION {
        return Err(Error::IllConditioned {
            what: "skip difference Z - Z'",
            condition,
        });
    }
    let target = Target::General(diff.scale(-1.0));
    find_absorbing_subset(w_up, w_down, &target, limits)
}
