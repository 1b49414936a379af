//! Command-line interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, ModelChoice, RenderSpec, StageArgs};
use crate::dataset::Split;
use crate::error::Result;
use crate::run::{Overrides, Profile, SupervisorKind};

#[derive(Debug, Parser)]
#[command(name = "zssrt", version, about = "Super-resolution radiance fields from low-resolution posed images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Side of the low-resolution training views.
        #[arg(long, default_value_t = 64)]
        res: usize,
    },
    /// Fit the coarse field to the low-resolution views.
    TrainCoarse(RunArgs),
    /// Learn the degradation network from coarse renders.
    TrainSdm(RunArgs),
    /// Train the super-resolution field.
    TrainFine(RunArgs),
    /// Render a split at the super-resolved size.
    Render(RenderArgs),
    /// Render a split and score it against the references.
    Evaluate(RenderArgs),
    /// Run every stage in order.
    Pipeline(RenderArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run directory (overridden by ZSSRT_RUN_DIR).
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON file layered over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["2", "4"])
        .map(|s| s.parse::<usize>().expect("validated")))]
    pub scale: Option<usize>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Supervision for the fine stage.
    #[arg(long, value_enum)]
    pub supervisor: Option<SupervisorKind>,
    /// Box-average stored images by this factor before training.
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Recompute artifacts that already exist.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Average the fine-stage snapshots per query (default).
    #[arg(long, overrides_with = "no_ensemble")]
    pub ensemble: bool,
    /// Use the final fine field alone.
    #[arg(long)]
    pub no_ensemble: bool,
    #[arg(long, value_enum, default_value = "fine")]
    pub model: ModelChoice,
    /// Render the training views instead of the test views.
    #[arg(long)]
    pub train_split: bool,
}

impl RunArgs {
    pub fn stage(&self) -> StageArgs {
        StageArgs {
            out: self.out.clone(),
            config: self.config.clone(),
            overrides: Overrides {
                dataset: self.dataset.clone(),
                seed: self.seed,
                scale: self.scale,
                profile: self.profile,
                supervisor: self.supervisor,
                downsample: self.downsample,
            },
            force: self.force,
        }
    }
}

impl RenderArgs {
    pub fn spec(&self) -> RenderSpec {
        RenderSpec {
            model: self.model,
            ensemble: !self.no_ensemble,
            split: if self.train_split { Split::Train } else { Split::Test },
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, seed, views, res } => commands::cmd_generate(&out, seed, views, res),
        Command::TrainCoarse(a) => commands::cmd_train_coarse(&a.stage()),
        Command::TrainSdm(a) => commands::cmd_train_sdm(&a.stage()),
        Command::TrainFine(a) => commands::cmd_train_fine(&a.stage()),
        Command::Render(a) => commands::cmd_render(&a.run.stage(), a.spec()).map(|_| ()),
        Command::Evaluate(a) => commands::cmd_evaluate(&a.run.stage(), a.spec()).map(|_| ()),
        Command::Pipeline(a) => commands::cmd_pipeline(&a.run.stage(), a.spec()).map(|_| ()),
    }
}

/// Parse `args` and run; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
