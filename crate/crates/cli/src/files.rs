//! Weight and report file formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use skipabsorb_core::{ActivationKind, Block, BlockKind, Matrix, Skip};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindTag {
    Ungated,
    Gated,
}

/// `"none"`, `"identity"` or `{"matrix": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSpec {
    None,
    Identity,
    Matrix(Matrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub schema_version: u32,
    pub d: usize,
    pub n: usize,
    pub kind: KindTag,
    pub activation: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_up: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_gate: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_val: Option<Matrix>,
    pub w_down: Matrix,
    pub skip: SkipSpec,
}

impl WeightFile {
    pub fn from_block(b: &Block) -> Self {
        let skip = match b.skip() {
            Skip::None => SkipSpec::None,
            Skip::Identity => SkipSpec::Identity,
            Skip::General(m) => SkipSpec::Matrix(m.clone()),
        };
        let (kind, w_up, w_gate, w_val, w_down) = match b.kind() {
            BlockKind::Ungated { w_up, w_down, .. } => (
                KindTag::Ungated,
                Some(w_up.clone()),
                None,
                None,
                w_down.clone(),
            ),
            BlockKind::Gated {
                w_gate,
                w_val,
                w_down,
                ..
            } => (
                KindTag::Gated,
                None,
                Some(w_gate.clone()),
                Some(w_val.clone()),
                w_down.clone(),
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            d: b.dim(),
            n: b.width(),
            kind,
            activation: b.activation(),
            w_up,
            w_gate,
            w_val,
            w_down,
            skip,
        }
    }

    pub fn into_block(self) -> Result<Block> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let (d, n) = (self.d, self.n);
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            ensure!(
                m.shape() == (rows, cols),
                "{name} is {}x{}, expected {rows}x{cols} from d={d}, n={n}",
                m.rows(),
                m.cols()
            );
            Ok(())
        };
        check("w_down", &self.w_down, d, n)?;
        let skip = match self.skip {
            SkipSpec::None => Skip::None,
            SkipSpec::Identity => Skip::Identity,
            SkipSpec::Matrix(m) => {
                check("skip matrix", &m, d, d)?;
                Skip::General(m)
            }
        };
        let block = match (self.kind, self.w_up, self.w_gate, self.w_val) {
            (KindTag::Ungated, Some(up), None, None) => {
                check("w_up", &up, n, d)?;
                Block::ungated(up, self.w_down, self.activation, skip)?
            }
            (KindTag::Gated, None, Some(gate), Some(val)) => {
                check("w_gate", &gate, n, d)?;
                check("w_val", &val, n, d)?;
                Block::gated(gate, val, self.w_down, self.activation, skip)?
            }
            (KindTag::Ungated, ..) => bail!("ungated weight files need w_up and no w_gate/w_val"),
            (KindTag::Gated, ..) => bail!("gated weight files need w_gate and w_val and no w_up"),
        };
        Ok(block)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).with_context(|| format!("cannot write {}", path.display()))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn read_weights(path: &Path) -> Result<Block> {
    let file: WeightFile = serde_json::from_str(&read_text(path)?)
        .with_context(|| format!("malformed weight file {}", path.display()))?;
    file.into_block()
        .with_context(|| format!("invalid weight file {}", path.display()))
}

pub fn write_weights(path: &Path, b: &Block) -> Result<()> {
    write_json(path, &WeightFile::from_block(b))
}

/// A `d x d` matrix stored as a nested row-major array.
pub fn read_target(path: &Path) -> Result<Matrix> {
    let m: Matrix = serde_json::from_str(&read_text(path)?)
        .with_context(|| format!("malformed target file {}", path.display()))?;
    ensure!(
        m.rows() == m.cols(),
        "target must be square, got {}x{}",
        m.rows(),
        m.cols()
    );
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema_version: u32,
    pub command: String,
    /// Arguments after the subcommand name, verbatim.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub tolerances: BTreeMap<String, f64>,
    pub passed: bool,
    /// Serialized library result.
    pub result: serde_json::Value,
}

impl ReportFile {
    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?)
            .with_context(|| format!("malformed report {}", path.display()))
    }
}
