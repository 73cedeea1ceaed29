//! Approximate absorption: fit a skipless block of the same width to
//! `x + W_down act(W_up x)` by empirical mean squared error.
//!
//! `V_down` enters linearly, so it is solved in closed form; `V_up` gets plain
//! gradient steps in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorption::{best_subset, normalize_subset, SearchLimits, Target};
use crate::activation::ActivationKind;
use crate::block::{Block, BlockKind, Skip};
use crate::error::{Error, Result};
use crate::matrix::{lstsq_min_norm, Matrix};
use crate::sampling::standard_normal_vectors;

/// Step used by the central-difference gradient check.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxInit {
    /// `V_up = W_up`
    FromWeights,
    /// `W_up` with the listed rows negated.
    SignFlips(Vec<usize>),
    /// Sign flips on the lowest-residual subset of a bounded search; falls
    /// back to `FromWeights` when the width exceeds the search limit.
    BestSubset,
    /// Standard normal `V_up` from the given seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub sample_count: usize,
    /// Seed of the fixed training sample.
    pub seed: u64,
    pub max_iters: usize,
    pub step_size: f64,
    pub init: ApproxInit,
    /// Iterations `i` with `i % alternate_every == 0` are closed-form `V_down` solves.
    pub alternate_every: usize,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            sample_count: 4096,
            seed: 0,
            max_iters: 2000,
            step_size: 1e-2,
            init: ApproxInit::FromWeights,
            alternate_every: 10,
        }
    }
}

impl ApproxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig(
                "sample_count must be at least 1".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.alternate_every == 0 {
            return Err(Error::InvalidConfig(
                "alternate_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxResult {
    pub v_up: Matrix,
    pub v_down: Matrix,
    /// `objective_trace[0]` follows the initial solve, `objective_trace[i]` iteration `i`.
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
    /// Largest gradient-check error over the probed iterates.
    pub grad_check: f64,
    pub grad_check_iterations: Vec<usize>,
    pub grad_check_errors: Vec<f64>,
    /// Iterations that were closed-form `V_down` solves (0 is the initial solve).
    pub solve_iterations: Vec<usize>,
}

impl ApproxResult {
    /// The fitted block, without skip.
    pub fn block(&self, act: ActivationKind) -> Result<Block> {
        Block::ungated(self.v_up.clone(), self.v_down.clone(), act, Skip::None)
    }
}

/// Fixed sample set with the skip block's outputs precomputed.
struct Problem {
    act: ActivationKind,
    samples: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn target_parts(w_block: &Block) -> Result<(&Matrix, &Matrix, ActivationKind)> {
    let BlockKind::Ungated { w_up, w_down, act } = w_block.kind() else {
        return Err(Error::InvalidBlock(
            "approximate absorption needs an ungated block".into(),
        ));
    };
    if *w_block.skip() != Skip::Identity {
        return Err(Error::InvalidBlock(
            "approximate absorption needs an identity skip".into(),
        ));
    }
    if !matches!(act, ActivationKind::Relu | ActivationKind::Gelu) {
        return Err(Error::UnsupportedActivation {
            activation: *act,
            context: "approximate absorption",
        });
    }
    Ok((w_up, w_down, *act))
}

impl Problem {
    fn new(w_block: &Block, samples: &[Vec<f64>]) -> Result<Self> {
        let (_, _, act) = target_parts(w_block)?;
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let d = w_block.dim();
        if let Some(bad) = samples.iter().position(|x| x.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "sample {bad} has length {}, expected {d}",
                samples[bad].len()
            )));
        }
        let targets = samples
            .par_iter()
            .map(|x| w_block.eval_unchecked(x))
            .collect();
        Ok(Self {
            act,
            samples: samples.to_vec(),
            targets,
        })
    }

    fn check_shapes(&self, w_block: &Block, v_up: &Matrix, v_down: &Matrix) -> Result<()> {
        let (d, n) = (w_block.dim(), w_block.width());
        if v_up.shape() != (n, d) || v_down.shape() != (d, n) {
            return Err(Error::DimensionMismatch(format!(
                "expected V_up {n}x{d} and V_down {d}x{n}, got {:?} and {:?}",
                v_up.shape(),
                v_down.shape()
            )));
        }
        Ok(())
    }

    fn n(&self) -> f64 {
        self.samples.len() as f64
    }

    /// Hidden pre-activations, activations and residual for one sample.
    fn forward(&self, v_up: &Matrix, v_down: &Matrix, j: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre = v_up.matvec_unchecked(&self.samples[j]);
        let hidden: Vec<f64> = pre.iter().map(|&z| self.act.value(z)).collect();
        let mut r = v_down.matvec_unchecked(&hidden);
        r.iter_mut()
            .zip(&self.targets[j])
            .for_each(|(ri, ti)| *ri -= ti);
        (pre, hidden, r)
    }

    fn objective(&self, v_up: &Matrix, v_down: &Matrix) -> f64 {
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let partial: Vec<f64> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&j| {
                        self.forward(v_up, v_down, j)
                            .2
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        partial.iter().sum::<f64>() / self.n()
    }

    fn gradient(&self, v_up: &Matrix, v_down: &Matrix) -> (Matrix, Matrix) {
        let (n, d) = v_up.shape();
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let partial: Vec<(Vec<f64>, Vec<f64>)> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g_up = vec![0.0; n * d];
                let mut g_down = vec![0.0; d * n];
                for &j in chunk {
                    let (pre, hidden, r) = self.forward(v_up, v_down, j);
                    let x = &self.samples[j];
                    for a in 0..d {
                        for (k, h) in hidden.iter().enumerate() {
                            g_down[a * n + k] += r[a] * h;
                        }
                    }
                    for k in 0..n {
                        let back: f64 = (0..d).map(|a| v_down.get(a, k) * r[a]).sum::<f64>()
                            * self.act.derivative(pre[k]);
                        for (c, xc) in x.iter().enumerate() {
                            g_up[k * d + c] += back * xc;
                        }
                    }
                }
                (g_up, g_down)
            })
            .collect();
        let mut g_up = vec![0.0; n * d];
        let mut g_down = vec![0.0; d * n];
        for (pu, pd) in &partial {
            g_up.iter_mut().zip(pu).for_each(|(g, p)| *g += p);
            g_down.iter_mut().zip(pd).for_each(|(g, p)| *g += p);
        }
        let s = 2.0 / self.n();
        let to_matrix =
            |rows, cols, v: Vec<f64>| Matrix::from_fn(rows, cols, |i, j| s * v[i * cols + j]);
        (to_matrix(n, d, g_up), to_matrix(d, n, g_down))
    }

    fn solve_down(&self, v_up: &Matrix) -> Result<Matrix> {
        let n = v_up.rows();
        let features: Vec<f64> = self
            .samples
            .par_iter()
            .flat_map_iter(|x| {
                v_up.matvec_unchecked(x)
                    .into_iter()
                    .map(|z| self.act.value(z))
            })
            .collect();
        let f = Matrix::new(self.samples.len(), n, features)?;
        let y = Matrix::from_rows(&self.targets)?;
        Ok(lstsq_min_norm(&f, &y)?.transpose())
    }

    /// `max_k |analytic_k - numeric_k| / max(1, max|analytic|, max|numeric|)`
    /// over every entry of both gradients.
    fn gradient_check(&self, v_up: &Matrix, v_down: &Matrix) -> Result<f64> {
        let (g_up, g_down) = self.gradient(v_up, v_down);
        let h = GRAD_CHECK_STEP;
        let numeric = |m: &Matrix, eval: &dyn Fn(&Matrix) -> f64| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(m.rows() * m.cols());
            let mut data = m.as_slice().to_vec();
            for k in 0..data.len() {
                let orig = data[k];
                data[k] = orig + h;
                let plus = eval(&Matrix::new(m.rows(), m.cols(), data.clone())?);
                data[k] = orig - h;
                let minus = eval(&Matrix::new(m.rows(), m.cols(), data.clone())?);
                data[k] = orig;
                out.push((plus - minus) / (2.0 * h));
            }
            Ok(out)
        };
        let n_up = numeric(v_up, &|m| self.objective(m, v_down))?;
        let n_down = numeric(v_down, &|m| self.objective(v_up, m))?;
        let analytic: Vec<f64> = g_up
            .as_slice()
            .iter()
            .chain(g_down.as_slice())
            .copied()
            .collect();
        let fd: Vec<f64> = n_up.into_iter().chain(n_down).collect();
        let scale = analytic
            .iter()
            .chain(&fd)
            .fold(1.0_f64, |acc, v| acc.max(v.abs()));
        let worst = analytic
            .iter()
            .zip(&fd)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        Ok(worst / scale)
    }
}

/// Mean over samples of `||V_down act(V_up x) - x - W_down act(W_up x)||^2`.
pub fn discrepancy_objective(
    v_up: &Matrix,
    v_down: &Matrix,
    w_block: &Block,
    samples: &[Vec<f64>],
) -> Result<f64> {
    let p = Problem::new(w_block, samples)?;
    p.check_shapes(w_block, v_up, v_down)?;
    Ok(p.objective(v_up, v_down))
}

/// Analytic `(d/dV_up, d/dV_down)` of [`discrepancy_objective`]. ReLU uses
/// derivative 0 at the kink.
pub fn discrepancy_gradient(
    v_up: &Matrix,
    v_down: &Matrix,
    w_block: &Block,
    samples: &[Vec<f64>],
) -> Result<(Matrix, Matrix)> {
    let p = Problem::new(w_block, samples)?;
    p.check_shapes(w_block, v_up, v_down)?;
    Ok(p.gradient(v_up, v_down))
}

/// Minimum-norm least-squares `V_down` for fixed `V_up`.
pub fn solve_down_least_squares(
    v_up: &Matrix,
    w_block: &Block,
    samples: &[Vec<f64>],
) -> Result<Matrix> {
    let p = Problem::new(w_block, samples)?;
    p.check_shapes(
        w_block,
        v_up,
        &Matrix::zeros(w_block.dim(), w_block.width()),
    )?;
    p.solve_down(v_up)
}

/// Central-difference check of [`discrepancy_gradient`] with step
/// [`GRAD_CHECK_STEP`]. The error is the largest entrywise difference divided
/// by `max(1, largest gradient entry)`.
pub fn gradient_check(
    v_up: &Matrix,
    v_down: &Matrix,
    w_block: &Block,
    samples: &[Vec<f64>],
) -> Result<f64> {
    let p = Problem::new(w_block, samples)?;
    p.check_shapes(w_block, v_up, v_down)?;
    p.gradient_check(v_up, v_down)
}

fn initial_up(w_up: &Matrix, w_down: &Matrix, init: &ApproxInit) -> Result<Matrix> {
    let flipped = |subset: &[usize]| -> Result<Matrix> {
        let s = normalize_subset(subset, w_up.rows())?;
        Ok(Matrix::from_fn(w_up.rows(), w_up.cols(), |i, j| {
            if s.binary_search(&i).is_ok() {
                -w_up.get(i, j)
            } else {
                w_up.get(i, j)
            }
        }))
    };
    match init {
        ApproxInit::FromWeights => Ok(w_up.clone()),
        ApproxInit::SignFlips(s) => flipped(s),
        ApproxInit::BestSubset => {
            let limits = SearchLimits::default();
            if w_up.rows() > limits.max_hidden_width {
                return Ok(w_up.clone());
            }
            match best_subset(w_up, w_down, &Target::NegIdentity, &limits)? {
                Some(cert) => flipped(&cert.subset),
                None => Ok(w_up.clone()),
            }
        }
        ApproxInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(Matrix::random_normal(w_up.rows(), w_up.cols(), &mut rng))
        }
    }
}

/// Alternating fit of a skipless block to the skip block `w_block`.
///
/// After initializing `V_up` and solving for `V_down`, iteration
/// `i = 1..=max_iters` is a `V_down` solve when `i % alternate_every == 0` and
/// a gradient step on `V_up` otherwise. The gradient check runs after
/// iterations 0, `max_iters / 2` and `max_iters`.
pub fn fit_approximate(w_block: &Block, cfg: &ApproxConfig) -> Result<ApproxResult> {
    cfg.validate()?;
    let (w_up, w_down, _) = target_parts(w_block)?;
    let samples = standard_normal_vectors(cfg.sample_count, w_block.dim(), cfg.seed);
    let p = Problem::new(w_block, &samples)?;

    let mut checkpoints = vec![0, cfg.max_iters / 2, cfg.max_iters];
    checkpoints.dedup();
    let mut grad_check_errors = Vec::with_capacity(checkpoints.len());

    let mut v_up = initial_up(w_up, w_down, &cfg.init)?;
    let mut v_down = p.solve_down(&v_up)?;
    let mut trace = vec![p.objective(&v_up, &v_down)];
    let mut solve_iterations = vec![0];
    if checkpoints[0] == 0 {
        grad_check_errors.push(p.gradient_check(&v_up, &v_down)?);
    }

    for iter in 1..=cfg.max_iters {
        if iter % cfg.alternate_every == 0 {
            v_down = p.solve_down(&v_up)?;
            solve_iterations.push(iter);
        } else {
            let (g_up, _) = p.gradient(&v_up, &v_down);
            let stepped: Vec<f64> = v_up
                .as_slice()
                .iter()
                .zip(g_up.as_slice())
                .map(|(v, g)| v - cfg.step_size * g)
                .collect();
            if stepped.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { iteration: iter });
            }
            v_up = Matrix::new(v_up.rows(), v_up.cols(), stepped)?;
        }
        let obj = p.objective(&v_up, &v_down);
        if !obj.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        trace.push(obj);
        if checkpoints[1..].contains(&iter) {
            grad_check_errors.push(p.gradient_check(&v_up, &v_down)?);
        }
    }

    Ok(ApproxResult {
        final_objective: *trace.last().expect("trace is never empty"),
        grad_check: grad_check_errors.iter().copied().fold(0.0, f64::max),
        grad_check_iterations: checkpoints,
        grad_check_errors,
        objective_trace: trace,
        solve_iterations,
        v_up,
        v_down,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absorption::{construct_absorbed, plant_instance, PlantConfig};

    fn planted(act: ActivationKind, seed: u64) -> (Block, Vec<usize>) {
        let (b, cert) = plant_instance(&PlantConfig::new(2, 4, 2, act, seed)).unwrap();
        (b, cert.subset)
    }

    fn norm_sq(b: &Block) -> f64 {
        let BlockKind::Ungated { w_up, w_down, .. } = b.kind() else {
            unreachable!()
        };
        w_up.frobenius_norm().powi(2) + w_down.frobenius_norm().powi(2)
    }

    #[test]
    fn objective_trivial_cases() {
        let (w, _) = planted(ActivationKind::Relu, 1);
        let BlockKind::Ungated { w_up, .. } = w.kind() else {
            unreachable!()
        };
        let zero_down = Matrix::zeros(2, 4);
        let samples = standard_normal_vectors(50, 2, 3);
        let expected = samples
            .iter()
            .map(|x| w.eval_slice(x).unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 50.0;
        let got = discrepancy_objective(w_up, &zero_down, &w, &samples).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
        let origin = vec![vec![0.0, 0.0]];
        assert_eq!(
            discrepancy_objective(w_up, &zero_down, &w, &origin).unwrap(),
            0.0
        );
        assert!(matches!(
            discrepancy_objective(w_up, &zero_down, &w, &[]),
            Err(Error::EmptySamples)
        ));
        assert!(discrepancy_objective(w_up, &Matrix::zeros(2, 3), &w, &origin).is_err());
    }

    #[test]
    fn constructed_pair_has_zero_objective_and_gradient() {
        for act in [ActivationKind::Relu, ActivationKind::Gelu] {
            let (w, s) = planted(act, 4);
            let v = construct_absorbed(&w, &s).unwrap();
            let BlockKind::Ungated {
                w_up: vu,
                w_down: vd,
                ..
            } = v.kind()
            else {
                unreachable!()
            };
            let samples = standard_normal_vectors(512, 2, 9);
            let scale = 1.0 + norm_sq(&w);
            assert!(discrepancy_objective(vu, vd, &w, &samples).unwrap() <= 1e-16 * scale * scale);
            let (gu, gd) = discrepancy_gradient(vu, vd, &w, &samples).unwrap();
            assert!(gu.frobenius_norm() + gd.frobenius_norm() <= 1e-10 * scale);
            let solved = solve_down_least_squares(vu, &w, &samples).unwrap();
            assert!(solved.sub(vd).unwrap().max_abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn solve_on_zero_samples_is_zero() {
        let (w, _) = planted(ActivationKind::Gelu, 2);
        let BlockKind::Ungated { w_up, .. } = w.kind() else {
            unreachable!()
        };
        let zeros = vec![vec![0.0; 2]; 10];
        assert_eq!(
            solve_down_least_squares(w_up, &w, &zeros).unwrap(),
            Matrix::zeros(2, 4)
        );
    }

    #[test]
    fn gelu_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Block::ungated(
            Matrix::random_normal(4, 2, &mut rng),
            Matrix::random_normal(2, 4, &mut rng),
            ActivationKind::Gelu,
            Skip::Identity,
        )
        .unwrap();
        let samples = standard_normal_vectors(256, 2, 1);
        let vu = Matrix::random_normal(4, 2, &mut rng);
        let vd = Matrix::zeros(2, 4);
        assert!(gradient_check(&vu, &vd, &w, &samples).unwrap() <= 1e-5);
        let vd = Matrix::random_normal(2, 4, &mut rng);
        assert!(gradient_check(&vu, &vd, &w, &samples).unwrap() <= 1e-5);
    }

    #[test]
    fn zero_iterations_is_one_solve() {
        let (w, _) = planted(ActivationKind::Gelu, 5);
        let cfg = ApproxConfig {
            max_iters: 0,
            sample_count: 256,
            ..ApproxConfig::default()
        };
        let r = fit_approximate(&w, &cfg).unwrap();
        assert_eq!(r.objective_trace.len(), 1);
        assert_eq!(r.grad_check_iterations, vec![0]);
        assert_eq!(r.solve_iterations, vec![0]);
        let BlockKind::Ungated { w_up, .. } = w.kind() else {
            unreachable!()
        };
        assert_eq!(&r.v_up, w_up);
    }

    #[test]
    fn sign_flip_init_is_already_optimal() {
        for act in [ActivationKind::Relu, ActivationKind::Gelu] {
            let (w, s) = planted(act, 6);
            let scale = 1.0 + norm_sq(&w);
            for init in [ApproxInit::SignFlips(s.clone()), ApproxInit::BestSubset] {
                let cfg = ApproxConfig {
                    max_iters: 30,
                    sample_count: 512,
                    init,
                    ..ApproxConfig::default()
                };
                let r = fit_approximate(&w, &cfg).unwrap();
                assert!(r.objective_trace[0] <= 1e-14 * scale);
                assert!(r.final_objective <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn generic_gelu_fit_improves_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let w = Block::ungated(
            Matrix::random_normal(4, 2, &mut rng),
            Matrix::random_normal(2, 4, &mut rng),
            ActivationKind::Gelu,
            Skip::Identity,
        )
        .unwrap();
        let cfg = ApproxConfig {
            max_iters: 60,
            sample_count: 512,
            seed: 2,
            ..ApproxConfig::default()
        };
        let r = fit_approximate(&w, &cfg).unwrap();
        assert!(r.final_objective > 0.0);
        assert!(r.final_objective <= r.objective_trace[0]);
        assert!(r.grad_check <= 1e-5, "{}", r.grad_check);
        assert_eq!(r.grad_check_iterations, vec![0, 30, 60]);
        let scale = 1.0 + norm_sq(&w);
        for &i in &r.solve_iterations[1..] {
            assert!(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-12 * scale);
        }
        assert_eq!(r, fit_approximate(&w, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (w, _) = planted(ActivationKind::Relu, 1);
        let bad = ApproxConfig {
            alternate_every: 0,
            ..ApproxConfig::default()
        };
        assert!(fit_approximate(&w, &bad).is_err());
        let skipless = w.with_skip(Skip::None).unwrap();
        assert!(fit_approximate(&skipless, &ApproxConfig::default()).is_err());
        let cfg = ApproxConfig {
            init: ApproxInit::SignFlips(vec![9]),
            ..ApproxConfig::default()
        };
        assert!(matches!(
            fit_approximate(&w, &cfg),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
