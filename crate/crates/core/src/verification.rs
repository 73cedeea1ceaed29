//! Numerical and algebraic oracles for absorption claims.
//!
//! Sampling can refute a `for all x` identity but never prove it, so the
//! sampled checks are paired with [`algebraic_absorption_check`], which tests
//! the necessary identities (row alignment, coefficient matching and
//! `V_down V_up = W_down W_up + 2 I`) directly on the weights.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorption::{
    best_subset, check_subset_product, find_absorbing_subset, plant_instance, PlantConfig,
    SearchLimits, Target, COLLINEARITY_SLACK,
};
use crate::activation::ActivationKind;
use crate::block::{jacobian_fd, Block, BlockKind, Skip, Stack, VectorMap};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampling::{draw_scalars, draw_vectors, SamplerConfig};

/// Scalings used by [`homogeneity_check`].
pub const HOMOGENEITY_SCALES: [f64; 3] = [0.5, 2.0, 10.0];

/// Default tolerance for [`algebraic_absorption_check`].
pub const ALGEBRAIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub max_residual: f64,
    /// Input achieving `max_residual`; empty when the check is not pointwise.
    pub witness: Vec<f64>,
    pub samples_used: usize,
    pub tolerance: f64,
    /// `max_residual <= tolerance`
    pub passed: bool,
    pub detail: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn new(
        max_residual: f64,
        witness: Vec<f64>,
        samples_used: usize,
        tolerance: f64,
        detail: BTreeMap<String, f64>,
    ) -> Self {
        Self {
            max_residual,
            witness,
            samples_used,
            tolerance,
            passed: max_residual <= tolerance,
            detail,
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index and value of the first maximum. NaN counts as larger than anything.
fn first_max(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 || (v.is_nan() && !best.1.is_nan()) {
            best = (i, v);
        }
    }
    best
}

/// Samples `max ||f(x) - g(x)|| / (1 + ||x||)`.
///
/// Near-kink sampling uses the first-layer hyperplanes of both maps.
pub fn functional_equality<F, G>(f: &F, g: &G, cfg: &SamplerConfig) -> Result<VerificationReport>
where
    F: VectorMap + ?Sized,
    G: VectorMap + ?Sized,
{
    let d = f.input_dim();
    if g.input_dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "maps have input dimensions {d} and {}",
            g.input_dim()
        )));
    }
    let mut normals = f.kink_normals();
    normals.extend(g.kink_normals());
    let points = draw_vectors(cfg, d, &normals)?;
    let residuals = points
        .par_iter()
        .map(|x| Ok(l2_diff(&f.apply(x)?, &g.apply(x)?) / (1.0 + l2(x))))
        .collect::<Result<Vec<f64>>>()?;
    let (at, max) = first_max(&residuals);
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let detail = BTreeMap::from([("mean_residual".to_string(), mean)]);
    Ok(VerificationReport::new(
        max,
        points[at].clone(),
        points.len(),
        cfg.tolerance,
        detail,
    ))
}

/// Checks `sigma(z) - sigma(-z) = z`, evenness of `E`, and `sigma = E + z/2`,
/// each relative to `1 + |z|`.
pub fn parity_check(kind: ActivationKind, cfg: &SamplerConfig) -> Result<VerificationReport> {
    kind.even_part(0.0)?;
    let zs = draw_scalars(cfg)?;
    let mut odd = Vec::with_capacity(zs.len());
    let mut even = Vec::with_capacity(zs.len());
    let mut recon = Vec::with_capacity(zs.len());
    for &z in &zs {
        let scale = 1.0 + z.abs();
        let e = kind.even_part(z)?;
        odd.push((kind.value(z) - kind.value(-z) - z).abs() / scale);
        even.push((e - kind.even_part(-z)?).abs() / scale);
        recon.push((kind.value(z) - (e + 0.5 * z)).abs() / scale);
    }
    let combined: Vec<f64> = (0..zs.len())
        .map(|i| odd[i].max(even[i]).max(recon[i]))
        .collect();
    let (at, max) = first_max(&combined);
    let detail = BTreeMap::from([
        ("odd_residual".to_string(), first_max(&odd).1),
        ("even_residual".to_string(), first_max(&even).1),
        ("reconstruction_residual".to_string(), first_max(&recon).1),
    ]);
    Ok(VerificationReport::new(
        max,
        vec![zs[at]],
        zs.len(),
        cfg.tolerance,
        detail,
    ))
}

fn ungated(b: &Block, which: &str) -> Result<(Matrix, Matrix, ActivationKind)> {
    match b.kind() {
        BlockKind::Ungated { w_up, w_down, act } => Ok((w_up.clone(), w_down.clone(), *act)),
        BlockKind::Gated { .. } => Err(Error::InvalidBlock(format!("{which} must be ungated"))),
    }
}

/// Greedy bijective matching of `v` rows onto `w` rows by `|cos|`, highest
/// first, ties by `(w index, v index)`. Returns `match_of_v[j] = i`.
fn match_rows(w: &Matrix, v: &Matrix) -> Option<Vec<usize>> {
    let n = w.rows();
    let norms_w: Vec<f64> = (0..n).map(|i| l2(w.row(i))).collect();
    let norms_v: Vec<f64> = (0..n).map(|j| l2(v.row(j))).collect();
    let mut candidates = Vec::new();
    for (i, &nw) in norms_w.iter().enumerate() {
        for (j, &nv) in norms_v.iter().enumerate() {
            if nw == 0.0 || nv == 0.0 {
                continue;
            }
            let dot: f64 = w.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            let cos = (dot / (nw * nv)).abs();
            if cos > 1.0 - COLLINEARITY_SLACK {
                candidates.push((cos, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut w_taken = vec![false; n];
    let mut v_match = vec![None; n];
    for (_, i, j) in candidates {
        if !w_taken[i] && v_match[j].is_none() {
            w_taken[i] = true;
            v_match[j] = Some(i);
        }
    }
    v_match.into_iter().collect()
}

/// Algebraic test that the skipless `v_block` reproduces `x + w_block(x)`.
///
/// Steps: match each row of `V_up` to a collinear row of `W_up` (bijectively),
/// recover the scalars `c_i` with `v = c_i w_i`, require `V_down = W_down |C|^{-1}`
/// after relabeling (and `|c_i| = 1` for GELU), and check
/// `V_down V_up = W_down W_up + 2 I`. Residuals are relative; a missing
/// matching counts as a unit alignment residual. The report's `detail` lists
/// each residual plus `r1_raw`, the unnormalized Frobenius residual.
pub fn algebraic_absorption_check(
    w_block: &Block,
    v_block: &Block,
    tolerance: f64,
) -> Result<VerificationReport> {
    let (w_up, w_down, act) = ungated(w_block, "w_block")?;
    let (v_up, v_down, v_act) = ungated(v_block, "v_block")?;
    if w_up.shape() != v_up.shape() {
        return Err(Error::DimensionMismatch(format!(
            "blocks have shapes {:?} and {:?}",
            w_up.shape(),
            v_up.shape()
        )));
    }
    if act != v_act {
        return Err(Error::InvalidBlock(format!(
            "activations differ: {act} vs {v_act}"
        )));
    }
    if !matches!(act, ActivationKind::Relu | ActivationKind::Gelu) {
        return Err(Error::UnsupportedActivation {
            activation: act,
            context: "the algebraic absorption check",
        });
    }
    let (n, d) = w_up.shape();
    let mut detail = BTreeMap::new();

    let r1 = v_down
        .matmul(&v_up)?
        .sub(&w_down.matmul(&w_up)?)?
        .sub(&Matrix::identity(d).scale(2.0))?
        .frobenius_norm();
    let r1_rel = r1 / (1.0 + w_down.frobenius_norm() * w_up.frobenius_norm());
    detail.insert("r1_raw".to_string(), r1);
    detail.insert("r1_residual".to_string(), r1_rel);

    let mut residuals = vec![r1_rel];
    match match_rows(&w_up, &v_up) {
        None => {
            detail.insert("matched".to_string(), 0.0);
            detail.insert("alignment_residual".to_string(), 1.0);
            residuals.push(1.0);
        }
        Some(v_to_w) => {
            detail.insert("matched".to_string(), 1.0);
            let mut alignment: f64 = 0.0;
            let mut scale: f64 = 0.0;
            let mut down_sq = 0.0;
            let mut flipped = Vec::new();
            for (j, &i) in v_to_w.iter().enumerate() {
                let (wi, vj) = (w_up.row(i), v_up.row(j));
                let ww: f64 = wi.iter().map(|a| a * a).sum();
                let c = wi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() / ww;
                let cos = (c * ww.sqrt() / l2(vj)).abs();
                alignment = alignment.max(1.0 - cos);
                scale = scale.max((c.abs() - 1.0).abs());
                if c < 0.0 {
                    flipped.push(i);
                }
                for row in 0..d {
                    let diff = v_down.get(row, j) - w_down.get(row, i) / c.abs();
                    down_sq += diff * diff;
                }
            }
            let down_rel = down_sq.sqrt() / (1.0 + w_down.frobenius_norm());
            detail.insert("alignment_residual".to_string(), alignment);
            detail.insert("down_residual".to_string(), down_rel);
            detail.insert("flipped_units".to_string(), flipped.len() as f64);
            residuals.extend([alignment, down_rel]);
            if act == ActivationKind::Gelu {
                detail.insert("scale_residual".to_string(), scale);
                residuals.push(scale);
            }
            if !flipped.is_empty() {
                let cert = check_subset_product(
                    &w_up,
                    &w_down,
                    &flipped,
                    &Target::NegIdentity,
                    tolerance,
                )?;
                detail.insert("recovered_subset_residual".to_string(), cert.residual);
            }
        }
    }
    let max = residuals.iter().copied().fold(0.0, f64::max);
    detail.insert("hidden_width".to_string(), n as f64);
    Ok(VerificationReport::new(
        max,
        Vec::new(),
        0,
        tolerance,
        detail,
    ))
}

/// Samples `||b(lambda x) - lambda^k b(x)|| / (lambda^k (1 + ||b(x)||))` over
/// `lambda` in {0.5, 2, 10}.
pub fn homogeneity_check(b: &Block, k: f64, cfg: &SamplerConfig) -> Result<VerificationReport> {
    if !b.skip().is_none() {
        return Err(Error::InvalidBlock(
            "homogeneity is checked on skipless blocks".into(),
        ));
    }
    let declared = b.branch_degree().ok_or(Error::UnsupportedActivation {
        activation: b.activation(),
        context: "homogeneity (no declared degree)",
    })?;
    let points = draw_vectors(cfg, b.dim(), &b.kink_normals())?;
    let residuals: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| {
            let base = b.eval_unchecked(x);
            let base_norm = l2(&base);
            HOMOGENEITY_SCALES
                .iter()
                .map(|&lambda| {
                    let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
                    let lk = lambda.powf(k);
                    let out = b.eval_unchecked(&scaled);
                    let err = out
                        .iter()
                        .zip(&base)
                        .map(|(o, y)| (o - lk * y).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    (err / (lk * (1.0 + base_norm)), lambda)
                })
                .fold((0.0, 0.0), |acc, r| if r.0 > acc.0 { r } else { acc })
        })
        .collect();
    let values: Vec<f64> = residuals.iter().map(|r| r.0).collect();
    let (at, max) = first_max(&values);
    let detail = BTreeMap::from([
        ("declared_degree".to_string(), f64::from(declared)),
        ("tested_degree".to_string(), k),
        ("worst_lambda".to_string(), residuals[at].1),
    ]);
    Ok(VerificationReport::new(
        max,
        points[at].clone(),
        points.len(),
        cfg.tolerance,
        detail,
    ))
}

/// Jacobian at the origin of a stack of quadratic-at-the-origin blocks.
///
/// Every block must be gated (with a gate vanishing at 0) or an ungated
/// `relu_squared` block, and the skips must be all identity or all absent.
/// The central-difference Jacobian is compared with `I` (identity skips, and
/// the empty stack) or `0` (skipless) in Frobenius norm against the threshold
/// `10 h s^2`, where `s` is the largest weight Frobenius norm in the stack
/// (at least 1).
pub fn origin_jacobian_report(s: &Stack, h: f64) -> Result<VerificationReport> {
    let mut with_skip = 0;
    for (i, b) in s.blocks().iter().enumerate() {
        let quadratic = match b.kind() {
            BlockKind::Gated { gate, .. } => gate.value(0.0) == 0.0,
            BlockKind::Ungated { act, .. } => *act == ActivationKind::ReluSquared,
        };
        if !quadratic {
            return Err(Error::InvalidBlock(format!(
                "block {i} ({}) is not quadratic at the origin",
                b.activation()
            )));
        }
        match b.skip() {
            Skip::Identity => with_skip += 1,
            Skip::None => {}
            Skip::General(_) => {
                return Err(Error::InvalidBlock(format!("block {i} has a general skip")));
            }
        }
    }
    let depth = s.depth();
    if with_skip != 0 && with_skip != depth {
        return Err(Error::InvalidBlock(format!(
            "mixed skips: {with_skip} of {depth} blocks have an identity skip"
        )));
    }
    let residual_form = with_skip == depth;
    let d = s.dim();
    let origin = Matrix::column(&vec![0.0; d])?;
    let jac = jacobian_fd(|x| s.eval(x), &origin, h)?;
    let reference = if residual_form {
        Matrix::identity(d)
    } else {
        Matrix::zeros(d, d)
    };
    let residual = jac.sub(&reference)?.frobenius_norm();
    let scale = s
        .blocks()
        .iter()
        .map(Block::weight_scale)
        .fold(1.0, f64::max);
    let threshold = 10.0 * h * scale * scale;
    let detail = BTreeMap::from([
        ("depth".to_string(), depth as f64),
        (
            "reference_is_identity".to_string(),
            if residual_form { 1.0 } else { 0.0 },
        ),
        ("weight_scale".to_string(), scale),
        ("step".to_string(), h),
    ]);
    Ok(VerificationReport::new(
        residual,
        vec![0.0; d],
        2 * d,
        threshold,
        detail,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Gaussian,
    Planted,
}

/// Outcome of running the exact search on many independent instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub source: ProbeSource,
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    /// Trials where the subset condition was found to hold.
    pub hits: usize,
    /// Per trial, the smallest `||W_down[:, S] W_up[S, :] + I||_F` over all `|S| >= d`.
    pub best_residuals: Vec<f64>,
    pub min_best_residual: Option<f64>,
    pub median_best_residual: Option<f64>,
    pub max_best_residual: Option<f64>,
}

fn probe_instances(
    source: ProbeSource,
    d: usize,
    n: usize,
    instances: Vec<(Matrix, Matrix)>,
    limits: &SearchLimits,
) -> Result<ProbeStats> {
    let outcomes = instances
        .par_iter()
        .map(|(w_up, w_down)| {
            let hit = find_absorbing_subset(w_up, w_down, &Target::NegIdentity, limits)?.is_some();
            let best = best_subset(w_up, w_down, &Target::NegIdentity, limits)?
                .map_or(f64::INFINITY, |c| c.residual);
            Ok((hit, best))
        })
        .collect::<Result<Vec<(bool, f64)>>>()?;
    let hits = outcomes.iter().filter(|o| o.0).count();
    let best_residuals: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    let mut sorted = best_residuals.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ProbeStats {
        source,
        d,
        n,
        trials: instances.len(),
        hits,
        min_best_residual: sorted.first().copied(),
        median_best_residual: (!sorted.is_empty()).then(|| sorted[sorted.len() / 2]),
        max_best_residual: sorted.last().copied(),
        best_residuals,
    })
}

/// Runs the exact search on `trials` i.i.d. standard normal `(W_up, W_down)`.
/// Hits are expected to be zero: the condition is a measure-zero event.
pub fn generic_probe(
    d: usize,
    n: usize,
    trials: usize,
    limits: &SearchLimits,
    seed: u64,
) -> Result<ProbeStats> {
    if d == 0 || n < d {
        return Err(Error::InvalidConfig(format!(
            "probe needs 1 <= d <= n, got d={d} n={n}"
        )));
    }
    if n > limits.max_hidden_width {
        return Err(Error::WidthLimitExceeded {
            width: n,
            limit: limits.max_hidden_width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..trials)
        .map(|_| {
            let w_up = Matrix::random_normal(n, d, &mut rng);
            let w_down = Matrix::random_normal(d, n, &mut rng);
            (w_up, w_down)
        })
        .collect();
    probe_instances(ProbeSource::Gaussian, d, n, instances, limits)
}

/// Control group for [`generic_probe`]: planted instances with subset size
/// `m`, seeded `seed, seed + 1, ...`. Every trial should hit.
pub fn planted_control_probe(
    d: usize,
    n: usize,
    m: usize,
    trials: usize,
    limits: &SearchLimits,
    seed: u64,
) -> Result<ProbeStats> {
    let instances = (0..trials as u64)
        .map(|t| {
            let cfg = PlantConfig::new(d, n, m, ActivationKind::Relu, seed.wrapping_add(t));
            let (block, _) = plant_instance(&cfg)?;
            match block.into_parts().0 {
                BlockKind::Ungated { w_up, w_down, .. } => Ok((w_up, w_down)),
                BlockKind::Gated { .. } => unreachable!("planting yields ungated blocks"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    probe_instances(ProbeSource::Planted, d, n, instances, limits)
}
