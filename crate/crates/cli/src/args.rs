use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcl_core::config::{Policy, RunConfig};
use pcl_core::metrics::RankingProtocol;
use pcl_core::prompt::{CtxScope, InitMode};

#[derive(Parser, Debug)]
#[command(name = "pcl", version, about = "Prompt-based continual learning for sequential user representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Pretrain and freeze the backbone on next-item prediction.
    Pretrain(PretrainArgs),
    /// Tune downstream tasks in order on top of a pretrain run.
    Tune(TuneArgs),
    /// Paired learning curves with and without prompts on cold items.
    Coldstart(ColdstartArgs),
    /// Write prompted user representations of a tune run.
    Export(ExportArgs),
    /// Merge the metric tables of several run directories.
    Report(ReportArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML generator spec; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Pretrain run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; defaults to the one recorded by the pretrain run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Downstream task order, e.g. `4,2,3`. Defaults to ascending ids.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
    /// `all` or a list of `full`, `no_ctx`, `no_plm`.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ColdstartArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of items hidden from pretraining.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    /// Downstream task to tune; defaults to the first one.
    #[arg(long)]
    pub task: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Tune run directory.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tasks whose representations are concatenated, e.g. `2,3`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to merge.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the comparison table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Long-format CSV of every metric row.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Long-format CSV of every training curve.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Full-size defaults.
    Default,
    /// Small model for quick local runs.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Chain,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Visible,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    All,
    Batch,
}

/// Which training section `--lr`, `--epochs` and friends apply to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Tune,
    Both,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run config. Flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base config when no file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Maximum sequence length.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Prompt window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Sampled negatives per positive during training.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub policy: Option<Policy>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long, value_enum)]
    pub ctx_scope: Option<ScopeArg>,
    #[arg(long)]
    pub ctx_shared: Option<bool>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Negatives of the batch ranking protocol.
    #[arg(long)]
    pub eval_negatives: Option<usize>,
}

impl ConfigArgs {
    /// Flags on top of `cfg`; `PCL_SEED` sits between the file and `--seed`.
    pub fn apply(&self, cfg: &mut RunConfig, stage: Stage) -> pcl_core::Result<()> {
        cfg.apply_env()?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        let b = &mut cfg.backbone;
        set(&mut b.d, self.d);
        set(&mut b.n, self.n);
        set(&mut b.blocks, self.blocks);
        set(&mut b.heads, self.heads);
        let p = &mut cfg.prompt;
        set(&mut p.window, self.window);
        set(&mut p.lambda, self.lambda);
        set(&mut p.ctx_shared, self.ctx_shared);
        if let Some(i) = self.init {
            p.init = match i {
                InitArg::Chain => InitMode::Chain,
                InitArg::Random => InitMode::Random,
            };
        }
        if let Some(s) = self.ctx_scope {
            p.ctx_scope = match s {
                ScopeArg::Visible => CtxScope::Visible,
                ScopeArg::All => CtxScope::All,
            };
        }
        set(&mut cfg.policy, self.policy);
        let sections = match stage {
            Stage::Pretrain => vec![&mut cfg.pretrain],
            Stage::Tune => vec![&mut cfg.tune],
            Stage::Both => vec![&mut cfg.pretrain, &mut cfg.tune],
        };
        for t in sections {
            set(&mut t.lr, self.lr);
            set(&mut t.epochs, self.epochs);
            set(&mut t.patience, self.patience);
            set(&mut t.batch, self.batch);
            set(&mut t.negatives, self.negatives);
        }
        let (negatives, seed) = match cfg.eval.protocol {
            RankingProtocol::Batch { negatives, seed } => (negatives, seed),
            RankingProtocol::All => (100, 0),
        };
        let negatives = self.eval_negatives.unwrap_or(negatives);
        cfg.eval.protocol = match (self.protocol, cfg.eval.protocol) {
            (Some(ProtocolArg::All), _) | (None, RankingProtocol::All) => RankingProtocol::All,
            _ => RankingProtocol::Batch { negatives, seed },
        };
        cfg.validate()
    }

    pub fn base(&self) -> pcl_core::Result<RunConfig> {
        match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path),
            (None, Some(Preset::Desk)) => Ok(RunConfig::desk()),
            (None, _) => Ok(RunConfig::default()),
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
