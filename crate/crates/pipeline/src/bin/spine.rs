use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spine_core::ingest::PhantomSpec;
use spine_pipeline::commands::{cmd_eval, cmd_infer, cmd_phantom, cmd_plot, cmd_train};
use spine_pipeline::train::TrainOptions;
use spine_pipeline::{Profile, Result, RunConfig};

#[derive(Parser)]
#[command(name = "spine", version, about = "Spine keypoint detection: phantoms, training, evaluation, inference, plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// RunConfig JSON; missing fields come from the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to use when the config file names no profile.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let profile = self.profile.map(|p| match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        });
        RunConfig::resolve(self.config.as_deref(), profile, std::env::vars())
    }

    fn given(&self) -> bool {
        self.config.is_some() || self.profile.is_some()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom exams.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Square slice size in pixels.
        #[arg(long, default_value_t = 640)]
        image_size: usize,
        /// mm per pixel.
        #[arg(long, default_value_t = 0.4375)]
        spacing: f64,
        #[arg(long, default_value_t = 0.3)]
        degenerative_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        jitter: f64,
    },
    /// Train a model; checkpoints and logs go to the configured out_dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the last checkpoint of the run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
        /// Stop once this epoch (0-based) is done; continue later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a directory of annotated exams.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated thresholds in mm; one value gives a
        /// single-threshold report, several add a PCK curve.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Must match the config the checkpoint was trained with; defaults
        /// to the run's saved config.
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Detect keypoints in one exam directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exam: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a PCK figure from report files, or a training figure from a
    /// training log.
    Plot {
        #[arg(long = "report")]
        reports: Vec<PathBuf>,
        #[arg(long, conflicts_with = "reports")]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// TrueType font for labels; a system font is used by default.
        #[arg(long)]
        font: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            count,
            seed,
            image_size,
            spacing,
            degenerative_rate,
            jitter,
        } => {
            let spec = PhantomSpec {
                count,
                image_size,
                pixel_spacing: spacing,
                degenerative_rate,
                jitter,
                rng_seed: seed,
            };
            let dirs = cmd_phantom(&spec, &out)?;
            println!("wrote {} exams to {}", dirs.len(), out.display());
        }
        Command::Train {
            config,
            resume,
            quiet,
            stop_after,
        } => {
            let config = config.resolve()?;
            let options = TrainOptions {
                resume,
                verbose: !quiet,
                stop_after,
            };
            let outcome = cmd_train(&config, options)?;
            println!("{}", serde_json::to_string_pretty(&outcome.best).expect("serializable"));
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            thresholds,
            config,
        } => {
            let config = config.given().then(|| config.resolve()).transpose()?;
            let report = cmd_eval(&checkpoint, &data, config.as_ref(), thresholds.as_deref(), &out)?;
            println!(
                "pck {:.4}  macro_f1 {:.4}  micro_ap {:.4}  ({} exams at {} mm)",
                report.overall_pck, report.overall_macro_f1, report.micro_ap, report.n_exams, report.threshold_mm
            );
        }
        Command::Infer {
            checkpoint,
            exam,
            out,
            config,
        } => {
            let config = config.given().then(|| config.resolve()).transpose()?;
            let result = cmd_infer(&checkpoint, &exam, &out, config.as_ref())?;
            println!("{} detections in {:.3} s", result.detections.len(), result.latency_s);
        }
        Command::Plot { reports, log, out, font } => {
            cmd_plot(&reports, log.as_deref(), &out, font.as_deref())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
