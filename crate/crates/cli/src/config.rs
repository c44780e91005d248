//! Run configuration: JSON file plus command-line overrides.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected so typos fail loudly, and parse errors
//! name the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedlora::aggregation::{Method, StrategyConfig, Weighting};
use fedlora::fedsim::{SimulationConfig, TaskSpec, TrainerConfig};
use fedlora::lora::InitScheme;
use fedlora::metrics::GridSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}, column {column}, at `{key}`: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        key: String,
        msg: String,
    },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub d: usize,
    pub k: usize,
    pub r_star: usize,
    #[serde(alias = "N")]
    pub samples: usize,
    pub noise_std: f64,
    pub input_shift: f64,
    pub shift_groups: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 64,
            k: 64,
            r_star: 8,
            samples: 1024,
            noise_std: 0.1,
            input_shift: 0.0,
            shift_groups: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub r: usize,
    pub alpha: f64,
    /// Draw `B` randomly too (nonzero initial delta) instead of `B = 0`.
    pub init_b_random: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            r: 32,
            alpha: 64.0,
            init_b_random: false,
        }
    }
}

/// How `federation.rounds` is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundUnit {
    /// `rounds` communication rounds.
    #[default]
    Rounds,
    /// `rounds` is a total local-step budget; the run uses
    /// `ceil(rounds / local_steps)` communication rounds.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n: usize,
    pub rounds: usize,
    pub beta: f64,
    pub weighting: Weighting,
    pub round_unit: RoundUnit,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n: 10,
            rounds: 100,
            beta: 0.5,
            weighting: Weighting::UniformMean,
            round_unit: RoundUnit::Rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub tau: f64,
    pub balanced_split: bool,
    pub keep_residual: bool,
}

impl Default for StrategySection {
    fn default() -> Self {
        let d = StrategyConfig::default();
        Self {
            tau: d.tau,
            balanced_split: d.balanced_split,
            keep_residual: d.keep_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Layer whose weight trajectory feeds the PCA plane.
    pub pca_layer: usize,
    /// Upper bound on trajectory points kept per method (rounds are strided).
    pub max_trajectory_points: usize,
    pub grid: GridSpec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            pca_layer: 0,
            max_trajectory_points: 50,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub strategy: StrategySection,
    pub trainer: TrainerConfig,
    pub metrics: MetricsConfig,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            federation: FederationConfig::default(),
            strategy: StrategySection::default(),
            trainer: TrainerConfig::default(),
            metrics: MetricsConfig::default(),
            methods: Method::ALL.to_vec(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Every violated constraint, each naming its key path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        let t = &self.task;
        check(t.d >= 1, format!("task.d must be >= 1 (got {})", t.d));
        check(t.k >= 1, format!("task.k must be >= 1 (got {})", t.k));
        check(
            t.r_star <= t.d.min(t.k),
            format!("task.r_star must be <= min(d, k) = {} (got {})", t.d.min(t.k), t.r_star),
        );
        check(t.samples >= 1, format!("task.samples must be >= 1 (got {})", t.samples));
        check(
            t.noise_std.is_finite() && t.noise_std >= 0.0,
            format!("task.noise_std must be finite and >= 0 (got {})", t.noise_std),
        );
        check(
            t.input_shift.is_finite() && t.input_shift >= 0.0,
            format!("task.input_shift must be finite and >= 0 (got {})", t.input_shift),
        );
        check(t.shift_groups >= 1, format!("task.shift_groups must be >= 1 (got {})", t.shift_groups));

        let m = &self.model;
        check(m.layers >= 1, format!("model.layers must be >= 1 (got {})", m.layers));
        check(
            m.r >= 1 && m.r <= t.d.min(t.k),
            format!("model.r must be in 1..=min(task.d, task.k) = {} (got {})", t.d.min(t.k), m.r),
        );
        check(
            m.alpha.is_finite() && m.alpha > 0.0,
            format!("model.alpha must be positive (got {})", m.alpha),
        );

        let f = &self.federation;
        check(f.n >= 1, format!("federation.n must be >= 1 (got {})", f.n));
        check(
            f.n <= t.samples,
            format!("federation.n ({}) must not exceed task.samples ({})", f.n, t.samples),
        );
        check(
            f.beta.is_finite() && f.beta > 0.0,
            format!("federation.beta must be positive (got {})", f.beta),
        );

        let s = &self.strategy;
        check(
            s.tau > 0.0 && s.tau <= 1.0,
            format!("strategy.tau must be in (0, 1] (got {})", s.tau),
        );

        for msg in self.trainer.violations() {
            check(false, format!("trainer.{msg}"));
        }
        if self.federation.round_unit == RoundUnit::Steps {
            check(
                self.trainer.local_steps >= 1,
                "trainer.local_steps must be >= 1 when federation.round_unit = \"steps\"".into(),
            );
        }

        let mt = &self.metrics;
        check(
            mt.pca_layer < m.layers.max(1),
            format!("metrics.pca_layer must be < model.layers (got {})", mt.pca_layer),
        );
        check(
            mt.max_trajectory_points >= 1,
            "metrics.max_trajectory_points must be >= 1".into(),
        );
        check(
            mt.grid.margin.is_finite() && mt.grid.margin >= 0.0,
            format!("metrics.grid.margin must be finite and >= 0 (got {})", mt.grid.margin),
        );

        check(!self.methods.is_empty(), "methods must name at least one method".into());
        let mut seen = Vec::new();
        for method in &self.methods {
            check(!seen.contains(method), format!("methods lists `{method}` twice"));
            seen.push(*method);
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Communication rounds actually run.
    pub fn effective_rounds(&self) -> usize {
        match self.federation.round_unit {
            RoundUnit::Rounds => self.federation.rounds,
            RoundUnit::Steps => self.federation.rounds.div_ceil(self.trainer.local_steps.max(1)),
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            d: self.task.d,
            k: self.task.k,
            r_star: self.task.r_star,
            samples: self.task.samples,
            noise_std: self.task.noise_std,
            layers: self.model.layers,
            input_shift: self.task.input_shift,
            shift_groups: self.task.shift_groups,
        }
    }

    pub fn simulation_config(&self, method: Method) -> SimulationConfig {
        SimulationConfig {
            clients: self.federation.n,
            rounds: self.effective_rounds(),
            beta: self.federation.beta,
            rank: self.model.r,
            alpha: self.model.alpha,
            init: if self.model.init_b_random {
                InitScheme::BothRandom
            } else {
                InitScheme::ZeroB
            },
            seed: self.seed,
            strategy: StrategyConfig {
                method,
                tau: self.strategy.tau,
                balanced_split: self.strategy.balanced_split,
                keep_residual: self.strategy.keep_residual,
                weighting: self.federation.weighting,
            },
            trainer: self.trainer.clone(),
            track_layer: Some(self.metrics.pca_layer),
        }
    }
}

/// Parses a config document; errors carry line, column and key path.
pub fn parse_config_str(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            key,
            msg: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        key: ".".into(),
        msg: e.to_string(),
    })?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum WeightingFlag {
    Mean,
    Sum,
    Samples,
}

impl From<WeightingFlag> for Weighting {
    fn from(w: WeightingFlag) -> Self {
        match w {
            WeightingFlag::Mean => Weighting::UniformMean,
            WeightingFlag::Sum => Weighting::UnweightedSum,
            WeightingFlag::Samples => Weighting::SampleWeighted,
        }
    }
}

/// Runs federated LoRA aggregation experiments on a synthetic task.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "fedlora", version)]
pub struct CliArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Comma-separated methods, e.g. fedmomentum,fedit,flora,ffa_lora,rolora,fedex_lora.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_name = "N")]
    pub rounds: Option<usize>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
    /// Residual energy threshold.
    #[arg(long, value_name = "FLOAT")]
    pub tau: Option<f64>,
    /// Use the unbalanced split (B = U Σ, A = Vᵀ).
    #[arg(long)]
    pub no_balance: bool,
    /// Drop the residual instead of merging it into the backbone.
    #[arg(long)]
    pub no_residual: bool,
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingFlag>,
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn parse_config(args: &CliArgs) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            })?;
            parse_config_str(&text, path)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &args.methods {
        cfg.methods = m.clone();
    }
    if let Some(r) = args.rounds {
        cfg.federation.rounds = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = args.tau {
        cfg.strategy.tau = t;
    }
    if args.no_balance {
        cfg.strategy.balanced_split = false;
    }
    if args.no_residual {
        cfg.strategy.keep_residual = false;
    }
    if let Some(w) = args.weighting {
        cfg.federation.weighting = w.into();
    }
    cfg.validate()?;
    Ok(cfg)
}
