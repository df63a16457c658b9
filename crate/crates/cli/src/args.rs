use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cacl",
    version,
    about = "Unsupervised re-identification with cluster-guided contrastive learning"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "cacl-out")]
    pub out: PathBuf,

    /// Config file of `key = value` lines. `preset` selects the base settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Base settings before the config file is applied.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,

    /// Run seed. Falls back to the config, then to `CACL_SEED`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Settings tuned for the 200-image synthetic set.
    Benchmark,
    /// Full-scale settings: 80 epochs, batch 64, lr decay every 20 epochs, d = 0.6.
    FullScale,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic PPM set with its split manifest.
    GenData(DataArgs),
    /// Train one model and write logs, checkpoints and final metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the query/gallery split.
    Eval(CheckpointArgs),
    /// Cluster a checkpoint's training features and dump the assignment.
    Cluster(CheckpointArgs),
    /// Run the finite-difference suite over every loss term.
    Gradcheck(GradcheckArgs),
    /// Train a matrix of variants over several seeds and compare them.
    Ablate(AblateArgs),
    /// Write features and pseudo labels of every image as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory with a manifest, or PPM files named `<id>_c<cam>_<seq>.ppm`.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Identities of the generated set.
    #[arg(long, default_value_t = 20)]
    pub identities: usize,

    /// Images per identity of the generated set.
    #[arg(long, default_value_t = 10)]
    pub per_identity: usize,
}

/// Dedicated flags for the most used config keys.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Training variant, e.g. `full`, `wo_LC`, `cscl`.
    #[arg(long, alias = "mode")]
    pub variant: Option<String>,
    /// Second-branch view: `gray`, `jitter` or `plain`.
    #[arg(long)]
    pub view: Option<String>,
}

impl ConfigFlags {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(v) = self.epochs {
            out.push(("epochs", v.to_string()));
        }
        if let Some(v) = self.batch_size {
            out.push(("batch_size", v.to_string()));
        }
        if let Some(v) = self.lr {
            out.push(("lr", v.to_string()));
        }
        if let Some(v) = self.tau {
            out.push(("tau", v.to_string()));
        }
        if let Some(v) = &self.variant {
            out.push(("variant", v.clone()));
        }
        if let Some(v) = &self.view {
            out.push(("view_mode", v.clone()));
        }
        out
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated rows: variant names or `gray`, `jitter`, `plain`.
    #[arg(long, value_delimiter = ',', default_value = "full,wo_LI,wo_LC,wo_intra,wo_inter")]
    pub rows: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    First,
    Second,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArgs,
    /// Encoder whose features are written.
    #[arg(long, value_enum, default_value = "first")]
    pub branch: Branch,
}
