//! `lqmod`: phantom generation, modulated training, inference, evaluation,
//! and ablation studies for patch-based volumetric PET denoising.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lqmod_cli::commands;
use lqmod_cli::config::RunConfig;
use lqmod_core::metrics::aggregate_by_level;
use lqmod_core::Error;

#[derive(Parser)]
#[command(
    name = "lqmod",
    about = "Lesion-quantification-modulated denoising toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key=value configuration file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config value).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Individual key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_sets(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (volumes + manifest).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory for the manifest and volumes.
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects (overrides the config value).
        #[arg(long)]
        subjects: Option<usize>,
        /// Comma-separated low-count levels in percent.
        #[arg(long)]
        levels: Option<String>,
    },
    /// Train a denoiser on a cohort manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Cohort manifest directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable lesion-aware modulation (uniform sampling, no lesion loss).
        #[arg(long)]
        no_lemod: bool,
        /// Disable the multiscale quantification loss.
        #[arg(long)]
        no_qumod: bool,
        /// Disable both modulations (plain baseline).
        #[arg(long)]
        no_leqmod: bool,
    },
    /// Denoise every low-count volume of a manifest with a checkpoint.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (.lqmp).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate denoised volumes against their high-count references.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding den_<subject>_lc<level>.lqmv files.
        #[arg(long)]
        den: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-arm ablation end to end and write ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing cohort manifest; generated under <out>/cohort when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the multiscale parcellation plan for the configured patch.
    PlanDump {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Training(_) => 3,
        _ => 2,
    }
}

fn run() -> Result<(), Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            return Ok(());
        }
    };
    match cli.command {
        Command::Gen { common, out, subjects, levels } => {
            let mut cfg = common.build()?;
            if let Some(n) = subjects {
                cfg.subjects = n;
            }
            if let Some(l) = levels {
                cfg.set("levels", &l)?;
            }
            let cohort = commands::cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} subjects x {} levels to {}",
                cohort.len(),
                cfg.levels.0.len(),
                out.display()
            );
        }
        Command::Train { common, data, out, no_lemod, no_qumod, no_leqmod } => {
            let mut cfg = common.build()?;
            if no_lemod || no_leqmod {
                cfg.use_lemod = false;
            }
            if no_qumod || no_leqmod {
                cfg.use_qumod = false;
            }
            let params = commands::cmd_train(&cfg, &data, &out)?;
            println!(
                "trained {} ({} parameters) -> {}",
                cfg.arch.tag(),
                params.param_count(),
                out.join("model.lqmp").display()
            );
        }
        Command::Denoise { common, data, model, out } => {
            let cfg = common.build()?;
            let n = commands::cmd_denoise(&cfg, &data, &model, &out)?;
            println!("wrote {n} denoised volumes to {}", out.display());
        }
        Command::Eval { common, data, den, out } => {
            let cfg = common.build()?;
            let reports = commands::cmd_eval(&cfg, &data, &den, &out)?;
            print!("{}", commands::summarize(&reports, &commands::eval_config(&cfg)));
            println!("metrics for {} pairs -> {}", reports.len(), out.join("metrics.csv").display());
        }
        Command::Ablate { common, data, out } => {
            let cfg = common.build()?;
            let arms = commands::cmd_ablate(&cfg, data.as_deref(), &out)?;
            for arm in &arms {
                let level_aggs = aggregate_by_level(&arm.reports, &commands::eval_config(&cfg));
                let n: usize = level_aggs.iter().map(|a| a.n).sum();
                println!(
                    "arm {:9} n={} nrmse {:.4} |suv_max bias| {:.3}%",
                    arm.arm, n, arm.nrmse, arm.abs_suv_max_bias_pct
                );
            }
            println!("ablation report -> {}", out.join("ablation.csv").display());
        }
        Command::PlanDump { common } => {
            let cfg = common.build()?;
            print!("{}", commands::plan_dump(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
