//! Subcommand definitions. Each one calls a single library operation and
//! serializes its result unchanged.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skipabsorb_core::absorption::{DEFAULT_MAX_HIDDEN_WIDTH, DEFAULT_TOLERANCE};
use skipabsorb_core::approx::ApproxInit;
use skipabsorb_core::block::DEFAULT_FD_STEP;
use skipabsorb_core::sampling::{SamplerConfig, Sampling};
use skipabsorb_core::verification::{homogeneity_check, ProbeStats, ALGEBRAIC_TOLERANCE};
use skipabsorb_core::*;

use crate::files::{read_target, read_weights, write_weights};

/// Gradient-check gate applied to GELU fits.
pub const GELU_GRAD_CHECK_LIMIT: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "skipabsorb",
    version,
    about = "Decide, construct and verify absorption of skip connections into MLP blocks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an identity-skip block that satisfies the subset condition on 0..m.
    Plant(PlantArgs),
    /// Search for a subset S with W_down[:, S] W_up[S, :] equal to the target.
    Find(FindArgs),
    /// Build the skipless block for a given subset.
    Construct(ConstructArgs),
    /// Compare two blocks on sampled inputs.
    Verify(VerifyArgs),
    /// Check the algebraic conditions for V to be an absorbed form of W.
    Algebraic(AlgebraicArgs),
    /// Run the exact search on random Gaussian weights.
    Probe(ProbeArgs),
    /// Jacobian at the origin of a random gated stack.
    Depth(DepthArgs),
    /// Fit a skipless block to a skip block.
    Approx(ApproxArgs),
    /// Check the odd/even split of an activation.
    Parity(ParityArgs),
    /// Check positive homogeneity of a skipless block.
    Homogeneity(HomogeneityArgs),
}

#[derive(Debug, Args)]
pub struct PlantArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "relu")]
    pub activation: ActivationKind,
    /// d x d target T (default -I)
    #[arg(long)]
    pub target_file: Option<PathBuf>,
    /// Weight file to write.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FindArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target_file: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_HIDDEN_WIDTH)]
    pub max_width: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated 0-based hidden-unit indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub subset: Vec<usize>,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub lhs: PathBuf,
    #[arg(long)]
    pub rhs: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Also sample near every kink hyperplane.
    #[arg(long)]
    pub near_kinks: bool,
    /// Points per kink hyperplane.
    #[arg(long, default_value_t = 1_000)]
    pub kink_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlgebraicArgs {
    /// Block with skip.
    #[arg(long)]
    pub w: PathBuf,
    /// Candidate skipless block.
    #[arg(long)]
    pub v: PathBuf,
    #[arg(long, default_value_t = ALGEBRAIC_TOLERANCE)]
    pub tol: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    /// Also run planted instances with this subset size as a control group.
    #[arg(long)]
    pub control: Option<usize>,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    /// Gate activation (silu: SwiGLU, gelu: GeGLU, relu: ReGLU) or relu_squared for ungated blocks.
    #[arg(long)]
    pub activation: ActivationKind,
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub d: usize,
    /// Hidden width (default 2d).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, conflicts_with = "skipless")]
    pub residual: bool,
    #[arg(long)]
    pub skipless: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the random weights.
    #[arg(long, default_value_t = 0.5)]
    pub weight_std: f64,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub h: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApproxArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub alternate_every: usize,
    /// from_weights, best_subset, sign_flips:I,J,... or random:SEED
    #[arg(long, default_value = "from_weights", value_parser = parse_init)]
    pub init: ApproxInit,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParityArgs {
    #[arg(long)]
    pub activation: ActivationKind,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 50.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HomogeneityArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub degree: f64,
    #[arg(long, default_value_t = 1_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(short = 'o', long = "report")]
    pub report: Option<PathBuf>,
}

fn parse_init(s: &str) -> std::result::Result<ApproxInit, String> {
    match s.split_once(':') {
        None if s == "from_weights" => Ok(ApproxInit::FromWeights),
        None if s == "best_subset" => Ok(ApproxInit::BestSubset),
        Some(("sign_flips", list)) => list
            .split(',')
            .map(|i| i.trim().parse::<usize>().map_err(|e| format!("bad index `{i}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(ApproxInit::SignFlips),
        Some(("random", seed)) => seed
            .parse()
            .map(ApproxInit::Random)
            .map_err(|e| format!("bad seed `{seed}`: {e}")),
        _ => Err(format!(
            "unknown init `{s}` (expected from_weights, best_subset, sign_flips:I,J,... or random:SEED)"
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindResult {
    pub characterization: Characterization,
    /// The block had a general skip M and was reduced to M^{-1} W_down first.
    pub reduced_skip: bool,
    pub certificate: Option<SubsetCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructResult {
    pub reduced_skip: bool,
    pub certificate: SubsetCertificate,
    pub written: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub standard_normal: VerificationReport,
    pub near_kinks: Option<VerificationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub generic: ProbeStats,
    pub control: Option<ProbeStats>,
}

/// What a subcommand produced, before serialization.
pub struct Outcome {
    pub seed: Option<u64>,
    pub tolerances: BTreeMap<String, f64>,
    pub passed: bool,
    pub result: serde_json::Value,
    pub report_path: Option<PathBuf>,
}

fn outcome<T: Serialize>(
    result: &T,
    passed: bool,
    seed: Option<u64>,
    tolerances: &[(&str, f64)],
    report_path: Option<PathBuf>,
) -> Result<Outcome> {
    Ok(Outcome {
        seed,
        tolerances: tolerances
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        passed,
        result: serde_json::to_value(result)?,
        report_path,
    })
}

fn ungated_parts(b: &Block) -> Result<(&Matrix, &Matrix)> {
    match b.kind() {
        BlockKind::Ungated { w_up, w_down, .. } => Ok((w_up, w_down)),
        BlockKind::Gated { .. } => bail!("expected an ungated block, got a gated one"),
    }
}

pub fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Plant(a) => plant(a),
        Command::Find(a) => find(a),
        Command::Construct(a) => construct(a),
        Command::Verify(a) => verify(a),
        Command::Algebraic(a) => algebraic(a),
        Command::Probe(a) => probe(a),
        Command::Depth(a) => depth(a),
        Command::Approx(a) => approx(a),
        Command::Parity(a) => parity(a),
        Command::Homogeneity(a) => homogeneity(a),
    }
}

fn plant(a: PlantArgs) -> Result<Outcome> {
    let mut cfg = PlantConfig::new(a.d, a.n, a.m, a.activation, a.seed);
    if let Some(path) = &a.target_file {
        cfg.target = Target::General(read_target(path)?);
    }
    let (block, cert) = plant_instance(&cfg)?;
    write_weights(&a.out, &block)?;
    outcome(
        &cert,
        cert.passed,
        Some(a.seed),
        &[("subset", DEFAULT_TOLERANCE)],
        a.report,
    )
}

fn find(a: FindArgs) -> Result<Outcome> {
    let block = read_weights(&a.input)?;
    let (block, reduced) = match block.skip() {
        Skip::Identity => (block, false),
        Skip::General(_) if a.target_file.is_some() => {
            bail!("--target-file only applies to identity-skip blocks")
        }
        Skip::General(_) => (reduce_invertible_skip(&block)?, true),
        Skip::None => bail!("the block has no skip connection to absorb"),
    };
    let (w_up, w_down) = ungated_parts(&block)?;
    let target = match &a.target_file {
        Some(path) => Target::General(read_target(path)?),
        None => Target::NegIdentity,
    };
    let limits = SearchLimits {
        max_hidden_width: a.max_width,
        tolerance: a.tol,
        ..SearchLimits::default()
    };
    let certificate = find_absorbing_subset(w_up, w_down, &target, &limits)?;
    let result = FindResult {
        characterization: characterization(block.activation(), block.dim()),
        reduced_skip: reduced,
        certificate,
    };
    let found = result.certificate.is_some();
    outcome(&result, found, None, &[("subset", a.tol)], a.report)
}

fn construct(a: ConstructArgs) -> Result<Outcome> {
    let original = read_weights(&a.input)?;
    let (block, lift) = match original.skip() {
        Skip::General(m) => (reduce_invertible_skip(&original)?, Some(m.clone())),
        _ => (original, None),
    };
    let (w_up, w_down) = ungated_parts(&block)?;
    let certificate = check_subset_product(
        w_up,
        w_down,
        &a.subset,
        &Target::NegIdentity,
        DEFAULT_TOLERANCE,
    )?;
    let written = certificate.passed;
    if written {
        let mut v = construct_absorbed(&block, &certificate.subset)?;
        if let Some(m) = &lift {
            v = lift_reduced_solution(&v, m)?;
        }
        write_weights(&a.out, &v)?;
    }
    let result = ConstructResult {
        reduced_skip: lift.is_some(),
        certificate,
        written,
    };
    outcome(
        &result,
        written,
        None,
        &[("subset", DEFAULT_TOLERANCE)],
        a.report,
    )
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    let lhs = read_weights(&a.lhs)?;
    let rhs = read_weights(&a.rhs)?;
    let cfg = SamplerConfig::standard_normal(a.samples, a.seed, a.tol);
    let standard_normal = functional_equality(&lhs, &rhs, &cfg)?;
    let near_kinks = if a.near_kinks {
        let cfg = SamplerConfig {
            count: a.kink_samples,
            ..SamplerConfig::near_kinks(a.seed, a.tol)
        };
        Some(functional_equality(&lhs, &rhs, &cfg)?)
    } else {
        None
    };
    let passed = standard_normal.passed && near_kinks.as_ref().is_none_or(|r| r.passed);
    let result = VerifyResult {
        standard_normal,
        near_kinks,
    };
    outcome(
        &result,
        passed,
        Some(a.seed),
        &[("functional", a.tol)],
        a.report,
    )
}

fn algebraic(a: AlgebraicArgs) -> Result<Outcome> {
    let w = read_weights(&a.w)?;
    let v = read_weights(&a.v)?;
    let report = algebraic_absorption_check(&w, &v, a.tol)?;
    outcome(
        &report,
        report.passed,
        None,
        &[("algebraic", a.tol)],
        a.report,
    )
}

fn probe(a: ProbeArgs) -> Result<Outcome> {
    let limits = SearchLimits {
        tolerance: a.tol,
        ..SearchLimits::default()
    };
    let generic = generic_probe(a.d, a.n, a.trials, &limits, a.seed)?;
    let control = a
        .control
        .map(|m| planted_control_probe(a.d, a.n, m, a.trials, &limits, a.seed))
        .transpose()?;
    let hits = generic.hits > 0;
    let result = ProbeResult { generic, control };
    outcome(&result, hits, Some(a.seed), &[("subset", a.tol)], a.report)
}

/// Random stack for the origin-Jacobian probe.
pub fn depth_stack(
    act: ActivationKind,
    layers: usize,
    d: usize,
    width: usize,
    residual: bool,
    weight_std: f64,
    seed: u64,
) -> Result<Stack> {
    if d == 0 || width == 0 {
        bail!("d and width must be positive");
    }
    if layers == 0 {
        return Ok(Stack::empty(d));
    }
    let skip = if residual { Skip::Identity } else { Skip::None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r, c| Matrix::random_normal(r, c, &mut rng).scale(weight_std);
    let blocks = (0..layers)
        .map(|_| match act {
            ActivationKind::ReluSquared => {
                Block::ungated(draw(width, d), draw(d, width), act, skip.clone())
            }
            ActivationKind::Relu | ActivationKind::Gelu | ActivationKind::Silu => Block::gated(
                draw(width, d),
                draw(width, d),
                draw(d, width),
                act,
                skip.clone(),
            ),
            ActivationKind::Identity => Err(Error::UnsupportedActivation {
                activation: act,
                context: "the depth probe",
            }),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Stack::new(blocks)?)
}

fn depth(a: DepthArgs) -> Result<Outcome> {
    let residual = !a.skipless;
    let stack = depth_stack(
        a.activation,
        a.layers,
        a.d,
        a.width.unwrap_or(2 * a.d),
        residual,
        a.weight_std,
        a.seed,
    )?;
    let report = origin_jacobian_report(&stack, a.h)?;
    let tol = report.tolerance;
    outcome(
        &report,
        report.passed,
        Some(a.seed),
        &[("jacobian", tol)],
        a.report,
    )
}

fn approx(a: ApproxArgs) -> Result<Outcome> {
    let block = read_weights(&a.input)?;
    let cfg = ApproxConfig {
        sample_count: a.samples,
        seed: a.seed,
        max_iters: a.iters,
        step_size: a.lr,
        init: a.init,
        alternate_every: a.alternate_every,
    };
    let result = fit_approximate(&block, &cfg)?;
    let fitted = result.block(block.activation())?;
    write_weights(&a.out, &fitted)?;
    let passed =
        block.activation() != ActivationKind::Gelu || result.grad_check <= GELU_GRAD_CHECK_LIMIT;
    outcome(
        &result,
        passed,
        Some(a.seed),
        &[("grad_check", GELU_GRAD_CHECK_LIMIT)],
        a.report,
    )
}

fn parity(a: ParityArgs) -> Result<Outcome> {
    let cfg = SamplerConfig {
        count: a.samples,
        distribution: Sampling::UniformBox { radius: a.radius },
        seed: a.seed,
        tolerance: a.tol,
    };
    let report = parity_check(a.activation, &cfg)?;
    outcome(
        &report,
        report.passed,
        Some(a.seed),
        &[("parity", a.tol)],
        a.report,
    )
}

fn homogeneity(a: HomogeneityArgs) -> Result<Outcome> {
    let block = read_weights(&a.input)?;
    let cfg = SamplerConfig::standard_normal(a.samples, a.seed, a.tol);
    let report = homogeneity_check(&block, a.degree, &cfg).context("homogeneity check")?;
    outcome(
        &report,
        report.passed,
        Some(a.seed),
        &[("homogeneity", a.tol)],
        a.report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_parsing() {
        assert_eq!(parse_init("from_weights").unwrap(), ApproxInit::FromWeights);
        assert_eq!(parse_init("best_subset").unwrap(), ApproxInit::BestSubset);
        assert_eq!(
            parse_init("sign_flips:0,2").unwrap(),
            ApproxInit::SignFlips(vec![0, 2])
        );
        assert_eq!(parse_init("random:9").unwrap(), ApproxInit::Random(9));
        assert!(parse_init("sign_flips:a").is_err());
        assert!(parse_init("zeros").is_err());
    }

    #[test]
    fn depth_stacks() {
        let s = depth_stack(ActivationKind::Silu, 2, 4, 8, true, 0.5, 1).unwrap();
        assert_eq!(s.depth(), 2);
        assert!(s
            .blocks()
            .iter()
            .all(|b| b.is_gated() && *b.skip() == Skip::Identity));
        let sq = depth_stack(ActivationKind::ReluSquared, 1, 4, 8, false, 0.5, 1).unwrap();
        assert!(!sq.blocks()[0].is_gated());
        assert_eq!(
            depth_stack(ActivationKind::Gelu, 0, 3, 6, true, 0.5, 1)
                .unwrap()
                .depth(),
            0
        );
        assert!(depth_stack(ActivationKind::Identity, 1, 3, 6, true, 0.5, 1).is_err());
    }
}
