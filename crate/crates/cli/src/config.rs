//! Run configuration: a flat JSON file whose keys mirror the command-line
//! flags, with flags taking precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use twobp::executor::OptimizerConfig;
use twobp::model::{toy_mixed, toy_mlp, uniform_boundaries, ModelConfig};
use twobp::schedule::{B2Mode, ScheduleConfig, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// `Linear -> ReLU` blocks.
    Mlp,
    /// Alternating attention and MLP blocks; every layer kind.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Reads `TWOBP_PRECISION` (`single` or `double`, default double).
    pub fn from_env() -> Result<Self> {
        match std::env::var("TWOBP_PRECISION") {
            Err(std::env::VarError::NotPresent) => Ok(Precision::Double),
            Ok(v) if v == "double" => Ok(Precision::Double),
            Ok(v) if v == "single" => Ok(Precision::Single),
            Ok(v) => bail!("TWOBP_PRECISION must be 'single' or 'double', got '{v}'"),
            Err(e) => bail!("TWOBP_PRECISION: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ScheduleKind,
    pub ranks: usize,
    /// Defaults to the schedule's own count; only GPipe accepts others.
    pub micro_batches: Option<usize>,
    pub two_bp: bool,
    pub b2_mode: B2Mode,
    pub seed: u64,
    pub out: PathBuf,

    pub model: ModelKind,
    pub blocks: usize,
    pub width: usize,
    pub classes: usize,
    /// Cumulative block index at which each stage ends; uniform if absent.
    pub stage_boundaries: Option<Vec<usize>>,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Defaults to four rows per micro-batch.
    pub batch_size: Option<usize>,
    pub steps: usize,
    pub repeats: usize,

    pub t_f: u64,
    pub t_b1: u64,
    pub t_b2: u64,
    pub t_comm: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::OneFOneB1,
            ranks: 4,
            micro_batches: None,
            two_bp: false,
            b2_mode: B2Mode::Concat,
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelKind::Mlp,
            blocks: 8,
            width: 32,
            classes: 4,
            stage_boundaries: None,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            batch_size: None,
            steps: 20,
            repeats: 3,
            t_f: 1,
            t_b1: 1,
            t_b2: 1,
            t_comm: 0,
        }
    }
}

/// Flags shared by every subcommand. Anything given here overrides the
/// config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// naive, gpipe, 1f1b-1, 1f1b-2 or 1f1b-2-memeff
    #[arg(long)]
    pub kind: Option<ScheduleKind>,
    #[arg(long)]
    pub ranks: Option<usize>,
    #[arg(long)]
    pub micro_batches: Option<usize>,
    /// Split backward into p1/p2 (`--two-bp false` to turn off)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub two_bp: Option<bool>,
    /// concat or loop
    #[arg(long)]
    pub b2_mode: Option<B2Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with keys mirroring the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model, optimizer and cost overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Forward cost in ticks
    #[arg(long)]
    pub t_f: Option<u64>,
    #[arg(long)]
    pub t_b1: Option<u64>,
    #[arg(long)]
    pub t_b2: Option<u64>,
    /// Per-hop communication delay in ticks
    #[arg(long)]
    pub t_comm: Option<u64>,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown model '{s}' (mlp, mixed)"))
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown optimizer '{s}' (sgd, adam)"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Config file (if any) with the flags applied on top.
    pub fn resolve(common: &CommonArgs, tuning: &TuningArgs) -> Result<Self> {
        let mut c = match &common.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($src:expr => $($field:ident),*) => {
                $(if let Some(v) = $src.$field.clone() { c.$field = v; })*
            };
        }
        set!(common => kind, ranks, two_bp, b2_mode, seed, out);
        set!(tuning => model, blocks, width, classes, optimizer, lr, steps, repeats, t_f, t_b1, t_b2, t_comm);
        if common.micro_batches.is_some() {
            c.micro_batches = common.micro_batches;
        }
        if tuning.batch_size.is_some() {
            c.batch_size = tuning.batch_size;
        }
        Ok(c)
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let mut s = ScheduleConfig::new(self.kind, self.ranks, self.two_bp).with_b2_mode(self.b2_mode);
        if let Some(m) = self.micro_batches {
            s = s.with_micro_batches(m);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.model {
            ModelKind::Mlp => toy_mlp(self.width, self.width, self.blocks, self.classes),
            ModelKind::Mixed => {
                let head_dim = 4;
                if !self.width.is_multiple_of(head_dim) {
                    bail!("mixed model width must be a multiple of {head_dim}, got {}", self.width);
                }
                toy_mixed(self.blocks, self.width / head_dim, head_dim, self.classes)
            }
        };
        m.stage_boundaries = match &self.stage_boundaries {
            Some(b) => b.clone(),
            None => uniform_boundaries(self.blocks, self.ranks)?,
        };
        twobp::model::build_model(&m)?;
        Ok(m)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
        }
    }

    pub fn batch_size(&self, micro_batches: usize) -> usize {
        self.batch_size.unwrap_or(4 * micro_batches)
    }
}
