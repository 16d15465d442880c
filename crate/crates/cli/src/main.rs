//! `awlab` — command-line harness for the adaptive-weighting laboratory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "awlab", version, about = "Adaptive spatial-weighting laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set seg_train.epochs=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides config and $AWLAB_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/mask dataset on disk.
    GenData(Common),
    /// Train the MK-UNet segmentation network.
    TrainSeg(Common),
    /// Train the loss-modulation denoising pipeline.
    TrainLaw(Common),
    /// Evaluate a segmentation checkpoint on a dataset.
    Eval(Common),
    /// Report parameter counts and FLOPs for a configuration.
    Profile(Common),
    /// Export prediction maps from a segmentation checkpoint.
    ExportMaps(Common),
    /// Run one axis of config variants across seeds.
    Sweep(Common),
}

impl Command {
    fn mode(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainSeg(_) => "train-seg",
            Command::TrainLaw(_) => "train-law",
            Command::Eval(_) => "eval",
            Command::Profile(_) => "profile",
            Command::ExportMaps(_) => "export-maps",
            Command::Sweep(_) => "sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainSeg(c)
            | Command::TrainLaw(c)
            | Command::Eval(c)
            | Command::Profile(c)
            | Command::ExportMaps(c)
            | Command::Sweep(c) => c,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = cli.command.mode();
    let common = cli.command.common();

    // "sweep" configs carry the underlying train mode in `mode`, so skip the
    // subcommand/mode agreement check for that one command.
    let check_mode = if mode == "sweep" { "" } else { mode };
    let cfg = match config::load(common.config.as_deref(), &common.sets, check_mode) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let out = config::resolve_out_dir(common.out.clone(), &cfg, mode);

    let result = match &cli.command {
        Command::GenData(_) => run::gen_data(&cfg, &out),
        Command::TrainSeg(_) => run::train_seg_mode(&cfg, &out),
        Command::TrainLaw(_) => run::train_law_mode(&cfg, &out),
        Command::Eval(_) => run::eval_mode(&cfg, &out),
        Command::Profile(_) => run::profile(&cfg, &out),
        Command::ExportMaps(_) => run::export_maps(&cfg, &out),
        Command::Sweep(_) => run::sweep(&cfg, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
