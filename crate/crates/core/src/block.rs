//! Single-hidden-layer MLP blocks, optional skip branches, and stacks.

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `w_down * act(w_up * x)`
    Ungated {
        w_up: Matrix,
        w_down: Matrix,
        act: ActivationKind,
    },
    /// `w_down * (gate(w_gate * x) ⊙ (w_val * x))`
    Gated {
        w_gate: Matrix,
        w_val: Matrix,
        w_down: Matrix,
        gate: ActivationKind,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skip {
    None,
    Identity,
    General(Matrix),
}

impl Skip {
    pub fn is_none(&self) -> bool {
        matches!(self, Skip::None)
    }
}

/// An MLP branch plus a skip term: `skip(x) + mlp(x)`, mapping `R^d -> R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBlock")]
pub struct Block {
    kind: BlockKind,
    skip: Skip,
}

#[derive(Deserialize)]
struct RawBlock {
    kind: BlockKind,
    skip: Skip,
}

impl TryFrom<RawBlock> for Block {
    type Error = Error;

    fn try_from(raw: RawBlock) -> Result<Self> {
        Block::new(raw.kind, raw.skip)
    }
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::InvalidBlock(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

impl Block {
    /// Validates widths (`n >= d >= 1`) and shapes.
    pub fn new(kind: BlockKind, skip: Skip) -> Result<Self> {
        let (n, d) = match &kind {
            BlockKind::Ungated { w_up, w_down, .. } => {
                let (n, d) = w_up.shape();
                check_shape(w_down, d, n, "w_down")?;
                (n, d)
            }
            BlockKind::Gated {
                w_gate,
                w_val,
                w_down,
                gate,
            } => {
                if !gate.is_gate_eligible() {
                    return Err(Error::UnsupportedActivation {
                        activation: *gate,
                        context: "gating",
                    });
                }
                let (n, d) = w_gate.shape();
                check_shape(w_val, n, d, "w_val")?;
                check_shape(w_down, d, n, "w_down")?;
                (n, d)
            }
        };
        if n < d {
            return Err(Error::InvalidBlock(format!(
                "hidden width {n} is smaller than input dimension {d}"
            )));
        }
        if let Skip::General(m) = &skip {
            check_shape(m, d, d, "skip matrix")?;
        }
        Ok(Self { kind, skip })
    }

    pub fn ungated(w_up: Matrix, w_down: Matrix, act: ActivationKind, skip: Skip) -> Result<Self> {
        Self::new(BlockKind::Ungated { w_up, w_down, act }, skip)
    }

    pub fn gated(
        w_gate: Matrix,
        w_val: Matrix,
        w_down: Matrix,
        gate: ActivationKind,
        skip: Skip,
    ) -> Result<Self> {
        Self::new(
            BlockKind::Gated {
                w_gate,
                w_val,
                w_down,
                gate,
            },
            skip,
        )
    }

    pub fn kind(&self) -> &BlockKind {
        &self.kind
    }

    pub fn skip(&self) -> &Skip {
        &self.skip
    }

    pub fn into_parts(self) -> (BlockKind, Skip) {
        (self.kind, self.skip)
    }

    pub fn with_skip(&self, skip: Skip) -> Result<Self> {
        Self::new(self.kind.clone(), skip)
    }

    /// Input (and output) dimension `d`.
    pub fn dim(&self) -> usize {
        self.w_down().rows()
    }

    /// Hidden width `N`.
    pub fn width(&self) -> usize {
        self.w_down().cols()
    }

    pub fn w_down(&self) -> &Matrix {
        match &self.kind {
            BlockKind::Ungated { w_down, .. } | BlockKind::Gated { w_down, .. } => w_down,
        }
    }

    /// The ungated activation or the gate activation.
    pub fn activation(&self) -> ActivationKind {
        match self.kind {
            BlockKind::Ungated { act, .. } => act,
            BlockKind::Gated { gate, .. } => gate,
        }
    }

    pub fn is_gated(&self) -> bool {
        matches!(self.kind, BlockKind::Gated { .. })
    }

    /// Homogeneity degree of the MLP branch, if the activation declares one.
    /// A gated neuron multiplies a degree-`k` gate by a linear value, giving `k + 1`.
    pub fn branch_degree(&self) -> Option<u32> {
        match self.kind {
            BlockKind::Ungated { act, .. } => act.degree(),
            BlockKind::Gated { gate, .. } => gate.degree().map(|k| k + 1),
        }
    }

    /// Returns a copy with the down projection replaced.
    pub fn with_w_down(&self, new_down: Matrix) -> Result<Self> {
        let kind = match &self.kind {
            BlockKind::Ungated { w_up, act, .. } => BlockKind::Ungated {
                w_up: w_up.clone(),
                w_down: new_down,
                act: *act,
            },
            BlockKind::Gated {
                w_gate,
                w_val,
                gate,
                ..
            } => BlockKind::Gated {
                w_gate: w_gate.clone(),
                w_val: w_val.clone(),
                w_down: new_down,
                gate: *gate,
            },
        };
        Self::new(kind, self.skip.clone())
    }

    /// Largest Frobenius norm among the block's matrices (skip included).
    pub fn weight_scale(&self) -> f64 {
        let branch = match &self.kind {
            BlockKind::Ungated { w_up, w_down, .. } => {
                w_up.frobenius_norm().max(w_down.frobenius_norm())
            }
            BlockKind::Gated {
                w_gate,
                w_val,
                w_down,
                ..
            } => w_gate
                .frobenius_norm()
                .max(w_val.frobenius_norm())
                .max(w_down.frobenius_norm()),
        };
        match &self.skip {
            Skip::General(m) => branch.max(m.frobenius_norm()),
            _ => branch,
        }
    }

    /// Evaluates the block on a `d x 1` column vector.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "input must be a column vector, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let y = self.eval_slice(x.as_slice())?;
        Matrix::column(&y)
    }

    /// Evaluates the block on a slice of length `d`.
    pub fn eval_slice(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "block expects input of dimension {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = match &self.kind {
            BlockKind::Ungated { w_up, act, .. } => w_up
                .matvec_unchecked(x)
                .into_iter()
                .map(|z| act.value(z))
                .collect(),
            BlockKind::Gated {
                w_gate,
                w_val,
                gate,
                ..
            } => w_gate
                .matvec_unchecked(x)
                .into_iter()
                .zip(w_val.matvec_unchecked(x))
                .map(|(g, v)| gate.value(g) * v)
                .collect(),
        };
        let mut out = self.w_down().matvec_unchecked(&hidden);
        match &self.skip {
            Skip::None => {}
            Skip::Identity => out.iter_mut().zip(x).for_each(|(o, xi)| *o += xi),
            Skip::General(m) => out
                .iter_mut()
                .zip(m.matvec_unchecked(x))
                .for_each(|(o, mx)| *o += mx),
        }
        out
    }
}

/// Left-to-right composition of blocks sharing one dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    dim: usize,
    blocks: Vec<Block>,
}

impl Stack {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let dim = blocks.first().map(Block::dim).ok_or_else(|| {
            Error::InvalidBlock("use Stack::empty for a stack without blocks".into())
        })?;
        if let Some((i, b)) = blocks.iter().enumerate().find(|(_, b)| b.dim() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "block {i} has dimension {}, expected {dim}",
                b.dim()
            )));
        }
        Ok(Self { dim, blocks })
    }

    /// The identity map on `R^dim`.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            blocks: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != 1 {
            return Err(Error::DimensionMismatch(
                "input must be a column vector".into(),
            ));
        }
        Matrix::column(&self.eval_slice(x.as_slice())?)
    }

    pub fn eval_slice(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "stack expects input of dimension {}, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(self
            .blocks
            .iter()
            .fold(x.to_vec(), |acc, b| b.eval_unchecked(&acc)))
    }
}

/// Anything that maps `R^d -> R^d` and can be probed by the verification oracles.
pub trait VectorMap: Sync {
    fn input_dim(&self) -> usize;

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Normals of the hyperplanes where the first layer switches regime.
    fn kink_normals(&self) -> Vec<Vec<f64>>;
}

impl VectorMap for Block {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_slice(x)
    }

    fn kink_normals(&self) -> Vec<Vec<f64>> {
        let first = match &self.kind {
            BlockKind::Ungated { w_up, .. } => w_up,
            BlockKind::Gated { w_gate, .. } => w_gate,
        };
        first.to_rows()
    }
}

impl VectorMap for Stack {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_slice(x)
    }

    // Deeper layers kink along curved surfaces; only the first layer is flat.
    fn kink_normals(&self) -> Vec<Vec<f64>> {
        self.blocks
            .first()
            .map(Block::kink_normals)
            .unwrap_or_default()
    }
}

/// Central-difference Jacobian of `f` at `x`; column `j` is
/// `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn jacobian_fd<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if x.cols() != 1 {
        return Err(Error::DimensionMismatch(
            "Jacobian point must be a column vector".into(),
        ));
    }
    let d = x.rows();
    let mut columns = Vec::with_capacity(d);
    let mut probe = x.as_slice().to_vec();
    let mut out_dim = None;
    for j in 0..d {
        probe[j] = x.get(j, 0) + h;
        let plus = f(&Matrix::column(&probe)?)?;
        probe[j] = x.get(j, 0) - h;
        let minus = f(&Matrix::column(&probe)?)?;
        probe[j] = x.get(j, 0);
        if *out_dim.get_or_insert(plus.rows()) != plus.rows() || plus.rows() != minus.rows() {
            return Err(Error::DimensionMismatch(
                "map output dimension changed between probes".into(),
            ));
        }
        columns.push(plus.sub(&minus)?.scale(0.5 / h));
    }
    let rows = out_dim.unwrap_or(0);
    Ok(Matrix::from_fn(rows, d, |i, j| columns[j].get(i, 0)))
}
