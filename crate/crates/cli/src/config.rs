//! Run configuration shared by the command line and `run --config`.
//!
//! Every subcommand's flags deserialize from the same JSON document, tagged
//! by `command`, so a config file reproduces a command line exactly.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use qiv_core::dgp::DgpSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

/// Where a command gets its data: a CSV file, or a DGP that is either
/// simulated (`n` and `seed` given) or used at population moments.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Source {
    /// `y,d,w,z` CSV with 1-based codes
    #[arg(long, conflicts_with_all = ["bundled", "dgp"])]
    pub data: Option<PathBuf>,
    /// Name of a bundled design (see `qiv list`)
    #[arg(long, conflicts_with = "dgp")]
    pub bundled: Option<String>,
    /// DGP specification JSON file
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    /// Inline DGP specification (config files only)
    #[arg(skip)]
    pub dgp_inline: Option<DgpSpec>,
    /// Sample size when simulating from a DGP
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulation seed
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Source {
    pub fn has_dgp(&self) -> bool {
        self.bundled.is_some() || self.dgp.is_some() || self.dgp_inline.is_some()
    }
}

/// DGP selection for commands that always simulate.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpChoice {
    #[arg(long, conflicts_with = "dgp")]
    pub bundled: Option<String>,
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    #[arg(skip)]
    pub dgp_inline: Option<DgpSpec>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub dgp: DgpChoice,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; defaults to `data.csv` in the output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    /// Number of equispaced u levels
    #[arg(long, default_value_t = 101)]
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// sigma_min / sigma_max threshold; defaults by data kind
    #[arg(long)]
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileParams {
    #[arg(long, default_value_t = 101)]
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Band over which each observation spreads its mass
    #[arg(long, default_value_t = DEFAULT_WIDTH)]
    #[serde(default = "default_width")]
    pub width: f64,
    /// Newton tolerance; defaults by law kind
    #[arg(long)]
    #[serde(default)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 50)]
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveQuantileArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: QuantileParams,
}

#[derive(ValueEnum, Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdditiveEstimator {
    /// Cell-mean system with exact centering
    #[default]
    Discrete,
    /// GMM with saturated indicator bases
    IndicatorGmm,
    /// GMM with linear bases
    LinearGmm,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdditiveParams {
    #[arg(long, value_enum, default_value_t)]
    #[serde(default)]
    pub method: AdditiveEstimator,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAdditiveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: AdditiveParams,
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    #[arg(long)]
    #[serde(default)]
    pub compare_ols: bool,
    #[arg(long)]
    #[serde(default)]
    pub compare_iv: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLinearArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: LinearParams,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapParams {
    /// Bootstrap replications; 0 skips standard errors
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub bootstrap: usize,
    /// Bootstrap seed (required with --bootstrap)
    #[arg(long)]
    #[serde(default)]
    pub bootstrap_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateParams {
    /// Baseline W code (1-based)
    #[arg(long)]
    pub w0: u32,
    /// Shifted W code (1-based)
    #[arg(long)]
    pub w1: u32,
    /// Z code at which the LATE is evaluated (1-based)
    #[arg(long)]
    pub z: u32,
    /// Local-irrelevance tolerance; defaults to two pooled standard errors
    #[arg(long)]
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub bootstrap: BootstrapParams,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: LateParams,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteParams {
    /// Base W code (1-based)
    #[arg(long)]
    pub w: u32,
    /// Z code (1-based)
    #[arg(long)]
    pub z: u32,
    /// Propensity levels, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Width of the finite-difference window
    #[arg(long, default_value_t = 0.02)]
    #[serde(default = "default_step")]
    pub step: f64,
    #[arg(long)]
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub bootstrap: BootstrapParams,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMteArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub source: Source,
    #[command(flatten)]
    #[serde(flatten)]
    pub params: MteParams,
}

/// Estimation command repeated by `montecarlo`.
#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Estimator {
    SolveQuantile(QuantileParams),
    FitAdditive(AdditiveParams),
    FitLinear(LinearParams),
    FitLate(LateParams),
    FitMte(MteParams),
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::SolveQuantile(_) => "solve-quantile",
            Estimator::FitAdditive(_) => "fit-additive",
            Estimator::FitLinear(_) => "fit-linear",
            Estimator::FitLate(_) => "fit-late",
            Estimator::FitMte(_) => "fit-mte",
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub dgp: DgpChoice,
    /// Sample size per replication
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Nominal coverage of the reported intervals
    #[arg(long, default_value_t = 0.95)]
    #[serde(default = "default_level")]
    pub level: f64,
    #[command(subcommand)]
    pub estimator: Estimator,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Draw a dataset from a DGP and write it as CSV
    Simulate(SimulateArgs),
    /// Rank of the selection matrix over a grid of levels
    DiagnoseRelevance(RelevanceArgs),
    /// Structural quantile functions by continuation in u
    SolveQuantile(SolveQuantileArgs),
    /// Additive model by the discrete system or GMM
    FitAdditive(FitAdditiveArgs),
    /// Quasi-IV 2SLS, optionally beside OLS and standard IV
    FitLinear(FitLinearArgs),
    /// Complier effect of a W shift, netting out direct effects
    FitLate(FitLateArgs),
    /// Marginal treatment effects by finite differences
    FitMte(FitMteArgs),
    /// Bias, spread, and coverage of an estimator over fresh simulations
    Montecarlo(MonteCarloArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::DiagnoseRelevance(_) => "diagnose-relevance",
            Command::SolveQuantile(_) => "solve-quantile",
            Command::FitAdditive(_) => "fit-additive",
            Command::FitLinear(_) => "fit-linear",
            Command::FitLate(_) => "fit-late",
            Command::FitMte(_) => "fit-mte",
            Command::Montecarlo(_) => "montecarlo",
        }
    }
}

/// A fully resolved run: one command plus where its outputs go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub command: Command,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub const DEFAULT_WIDTH: f64 = 0.1;

fn default_grid() -> usize {
    101
}
fn default_width() -> f64 {
    DEFAULT_WIDTH
}
fn default_max_iter() -> usize {
    50
}
fn default_step() -> f64 {
    0.02
}
fn default_reps() -> usize {
    200
}
fn default_level() -> f64 {
    0.95
}

impl RunConfig {
    /// Parse a JSON config, rejecting keys the schema does not know.
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let raw: Value =
            serde_json::from_str(text).map_err(|e| Failure::schema(format!("config: {e}")))?;
        let cfg: RunConfig = serde_json::from_value(raw.clone())
            .map_err(|e| Failure::schema(format!("config: {e}")))?;
        // flattened fields swallow unknown keys, so compare against the
        // re-serialized form, where every known field is present
        let known = serde_json::to_value(&cfg).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&raw, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Failure::schema(format!(
                "config: unknown keys {}",
                unknown.join(", ")
            )));
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form; defaults are filled in, so
    /// configs that differ only in omitted defaults hash alike.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical))
    }

    /// Paths exist and stochastic commands carry a seed.
    pub fn validate(&self) -> Result<(), Failure> {
        let exists = |p: &Option<PathBuf>| -> Result<(), Failure> {
            match p {
                Some(p) if !p.exists() => {
                    Err(Failure::schema(format!("{} does not exist", p.display())))
                }
                _ => Ok(()),
            }
        };
        let source = |s: &Source| -> Result<(), Failure> {
            exists(&s.data)?;
            exists(&s.dgp)?;
            if s.data.is_none() && !s.has_dgp() {
                return Err(Failure::schema("give --data, --bundled, or --dgp"));
            }
            if s.data.is_some() && (s.n.is_some() || s.seed.is_some()) {
                return Err(Failure::schema(
                    "--n and --seed apply only when simulating from a DGP",
                ));
            }
            if s.n.is_some() && s.seed.is_none() {
                return Err(Failure::schema("simulating needs --seed"));
            }
            Ok(())
        };
        let dgp = |c: &DgpChoice| -> Result<(), Failure> {
            exists(&c.dgp)?;
            if c.bundled.is_none() && c.dgp.is_none() && c.dgp_inline.is_none() {
                return Err(Failure::schema("give --bundled or --dgp"));
            }
            Ok(())
        };
        let bootstrap = |b: &BootstrapParams| -> Result<(), Failure> {
            if b.bootstrap > 0 && b.bootstrap_seed.is_none() {
                return Err(Failure::schema("--bootstrap needs --bootstrap-seed"));
            }
            Ok(())
        };
        match &self.command {
            Command::Simulate(a) => {
                dgp(&a.dgp)?;
                if a.seed.is_none() {
                    return Err(Failure::schema("simulate needs --seed"));
                }
                if a.out.is_none() && self.output_dir.is_none() {
                    return Err(Failure::schema(
                        "simulate needs --out or an output directory",
                    ));
                }
            }
            Command::DiagnoseRelevance(a) => source(&a.source)?,
            Command::SolveQuantile(a) => source(&a.source)?,
            Command::FitAdditive(a) => source(&a.source)?,
            Command::FitLinear(a) => source(&a.source)?,
            Command::FitLate(a) => {
                source(&a.source)?;
                bootstrap(&a.params.bootstrap)?;
            }
            Command::FitMte(a) => {
                source(&a.source)?;
                bootstrap(&a.params.bootstrap)?;
            }
            Command::Montecarlo(a) => {
                dgp(&a.dgp)?;
                if a.seed.is_none() {
                    return Err(Failure::schema("montecarlo needs --seed"));
                }
                if let Estimator::FitLate(LateParams { bootstrap: b, .. })
                | Estimator::FitMte(MteParams { bootstrap: b, .. }) = &a.estimator
                {
                    bootstrap(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn output_path(&self, file: &str) -> Option<PathBuf> {
        self.output_dir.as_deref().map(|d| Path::new(d).join(file))
    }
}

fn unknown_keys(raw: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(r), Value::Object(k)) = (raw, known) {
        for (key, value) in r {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match k.get(key) {
                Some(inner) => unknown_keys(value, inner, &path, out),
                None => out.push(path),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omitted_defaults_hash_like_explicit_ones() {
        let a = RunConfig::from_json(
            r#"{"command":"fit-linear","bundled":"linear-additive","n":100,"seed":1}"#,
        )
        .unwrap();
        let b = RunConfig::from_json(
            r#"{"seed":1,"n":100,"compare_ols":false,"bundled":"linear-additive","command":"fit-linear","compare_iv":false}"#,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_json(
            r#"{"command":"fit-linear","bundled":"linear-additive","n":100,"seed":2}"#,
        )
        .unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let err =
            RunConfig::from_json(r#"{"command":"fit-linear","bundled":"x","sede":1}"#).unwrap_err();
        assert!(err.message.contains("sede"), "{}", err.message);
        assert!(RunConfig::from_json(r#"{"command":"fit-everything"}"#).is_err());
    }

    #[test]
    fn stochastic_commands_need_a_seed() {
        let cfg =
            RunConfig::from_json(r#"{"command":"fit-linear","bundled":"linear-additive","n":100}"#)
                .unwrap();
        assert!(cfg.validate().unwrap_err().message.contains("seed"));
    }
}
