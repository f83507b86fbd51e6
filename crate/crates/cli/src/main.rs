//! Command line front end: flag parsing, config assembly, and exit codes.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3 at least one
//! external hook failed (the report is still written). The `FRAMEADAPT_OUT_ROOT`
//! environment variable selects the output root; everything else arrives via
//! flags or a `key = value` config file.

mod run;

use clap::{Args, Parser, Subcommand};
use frameadapt_core::harness::Mode;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "frameadapt",
    version,
    about = "Consistency toolkit for multi-frame latent diffusion editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train temporal adapters on synthetic clips and write a checkpoint
    TrainAdapter(RunArgs),
    /// Bilateral-filtered inversion; writes per-step variance traces
    Invert(RunArgs),
    /// Sample clips from seeded noise with the configured backend
    Sample(RunArgs),
    /// Invert then resample each clip and score it against its clean frames
    Edit(RunArgs),
    /// Score clips: synthetic by default, saved ones via --clips
    Metrics(RunArgs),
    /// Run every cell of a config grid and write the sweep report
    Ablate(RunArgs),
}

impl Cmd {
    fn mode(&self) -> Mode {
        match self {
            Cmd::TrainAdapter(_) => Mode::TrainAdapter,
            Cmd::Invert(_) => Mode::Invert,
            Cmd::Sample(_) => Mode::Sample,
            Cmd::Edit(_) => Mode::Edit,
            Cmd::Metrics(_) => Mode::Metrics,
            Cmd::Ablate(_) => Mode::Ablate,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Cmd::TrainAdapter(a)
            | Cmd::Invert(a)
            | Cmd::Sample(a)
            | Cmd::Edit(a)
            | Cmd::Metrics(a)
            | Cmd::Ablate(a) => a,
        }
    }
}

/// Shared flag set. Named flags override config-file values; any key
/// without a named flag is reachable through `--set`.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file applied before any flags
    #[arg(long, value_name = "FILE")]
    config: Option<std::path::PathBuf>,

    /// Output directory, joined under FRAMEADAPT_OUT_ROOT unless absolute
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,

    /// Comma-separated seed list, one run (or report row) per seed
    #[arg(long, value_name = "S0,S1,...")]
    seeds: Option<String>,

    /// Concurrent grid cells in ablate mode
    #[arg(long, value_name = "N")]
    jobs: Option<String>,

    /// Denoiser backend: oracle (closed form) or toy (trainable)
    #[arg(long, value_name = "NAME")]
    backend: Option<String>,

    /// Training micro-steps for the toy backend
    #[arg(long, value_name = "N")]
    steps: Option<String>,

    // Bilateral inversion.
    /// Bilateral kernel size (odd); 1 disables the filter
    #[arg(long, value_name = "K")]
    kernel_size: Option<String>,
    /// Spatial sigma of the bilateral kernel
    #[arg(long, value_name = "SIGMA")]
    sigma_spatial: Option<String>,
    /// Intensity sigma of the bilateral kernel
    #[arg(long, value_name = "SIGMA")]
    sigma_intensity: Option<String>,
    /// Deterministic inversion depth in schedule steps
    #[arg(long, value_name = "N")]
    invert_steps: Option<String>,
    /// Filter direction: paper or roundtrip
    #[arg(long, value_name = "DIR")]
    filter_direction: Option<String>,

    // Adapters.
    /// Low-rank adapter rank
    #[arg(long, value_name = "R")]
    lora_rank: Option<String>,
    /// Weight of the temporal-consistency loss term
    #[arg(long, value_name = "W")]
    lambda_temporal: Option<String>,
    /// Weight of the diffusion loss term
    #[arg(long, value_name = "W")]
    lambda_diffusion: Option<String>,
    /// Training activation window as LO,HI fractions of the schedule
    #[arg(long, value_name = "LO,HI")]
    train_window: Option<String>,
    /// Inference activation window as LO,HI fractions of the schedule
    #[arg(long, value_name = "LO,HI")]
    infer_window: Option<String>,
    /// Fold adapters into the base weights at this ratio
    #[arg(long, value_name = "RATIO")]
    merge_ratio: Option<String>,

    // Semantic tokens.
    /// Number of learned shared token rows
    #[arg(long, value_name = "N")]
    n_share: Option<String>,
    /// Rows in the toy text embedding table
    #[arg(long, value_name = "N")]
    toy_text_len: Option<String>,
    /// Guidance variant: paper or standard
    #[arg(long, value_name = "NAME")]
    guided_mode: Option<String>,
    /// Scale on the per-frame unshared token rows
    #[arg(long, value_name = "GAIN")]
    unshare_boost: Option<String>,
    /// Drop the shared token block (ablation switch)
    #[arg(long)]
    drop_shared: bool,
    /// Drop the per-frame unshared rows (ablation switch)
    #[arg(long)]
    drop_unshared: bool,

    /// Extra `key=value` assignment; repeatable, applied before named flags
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Sweep axis `key=v1,v2,...`; repeatable, ablate mode only
    #[arg(long, value_name = "KEY=V1,V2")]
    axis: Vec<String>,

    /// External metric hook `name=COMMAND`; repeatable. The command runs
    /// through the shell and must print one float per line in clip order
    #[arg(long, value_name = "NAME=COMMAND")]
    hook: Vec<String>,

    /// Wall-clock budget per external hook invocation
    #[arg(long, value_name = "SECS", default_value_t = 60)]
    timeout_secs: u64,

    /// Directory of saved clip JSON files to score (metrics mode)
    #[arg(long, value_name = "DIR")]
    clips: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                // Usage problems are config errors.
                ExitCode::from(1)
            };
        }
    };
    match run::dispatch(&cli) {
        Ok(run::Outcome::Clean) => ExitCode::SUCCESS,
        Ok(run::Outcome::HookFailures(failures)) => {
            for (name, reason) in &failures {
                eprintln!("hook {name} failed: {reason}");
            }
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
