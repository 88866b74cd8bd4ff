use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vibeam_core::config::RunConfig;
use vibeam_core::metrics::metrics_csv;
use vibeam_core::par::{init_threads_from_env, Exec};
use vibeam_core::pipeline::{self, Evaluation};
use vibeam_core::Error;

#[derive(Parser)]
#[command(name = "vibeam", version, about = "Multimodal beam prediction with product-of-experts fusion")]
struct Cli {
    /// Evaluate on one worker thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage I: pretrain one modality on its own samples.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse pretrained experts without alignment training.
    CombineExperts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        init: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage II: multimodal fine-tuning from pretrained experts.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        init: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        align_fraction: f64,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train the beam classifier on a frozen representation.
    TrainTask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        repr: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a representation and head, optionally masking modalities.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        repr: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long = "drop-modality")]
        drop_modality: Vec<String>,
        /// Directory for metrics.csv and predictions.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Overrides the DBA thresholds stored with the head.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the whole pipeline and write the ablation tables.
    ReproduceAblations {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::UnknownModality(_) | Error::LabelOutOfRange { .. } => 4,
        Error::Incompatible(_) | Error::Dimension(_) => 5,
        _ => 1,
    }
}

fn write(path: &Path, text: &str) -> vibeam_core::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report(ev: &Evaluation) {
    let r = &ev.run;
    println!(
        "Y1 {:.4}  Y2 {:.4}  Y3 {:.4}  DBA {:.4}  top-1 {:.4}  ({} episodes, dropped: {})",
        r.dba.y[0],
        r.dba.y[1],
        r.dba.y[2],
        r.dba.score,
        r.top1,
        ev.predictions.len(),
        vibeam_core::metrics::drop_label(&r.drop_set)
    );
}

fn run(cli: Cli) -> vibeam_core::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = pipeline::gen_data(&cfg, &cfg.scene, &out, exec)?;
            println!("wrote {} episodes of {} steps to {}", ds.episodes, ds.steps, out.display());
        }
        Command::Pretrain {
            data,
            modality,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ck = pipeline::pretrain(&cfg, &data, &modality, &out, exec)?;
            if let Some(last) = ck.log.last() {
                println!("{modality}: {} epochs, final elbo {:.4}", ck.epoch, last.elbo);
            }
        }
        Command::CombineExperts { data, init, config, out } => {
            let cfg = RunConfig::load(&config)?;
            pipeline::combine_experts(&cfg, &data, &init, &out)?;
            println!("combined {} experts into {}", init.len(), out.display());
        }
        Command::Finetune {
            data,
            init,
            config,
            out,
            align_fraction,
            resume,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (ck, count) = pipeline::finetune(&cfg, &data, &init, &out, align_fraction, resume, exec)?;
            println!("aligned on {count} episodes for {} epochs", ck.epoch);
        }
        Command::TrainTask {
            data,
            repr,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ck = pipeline::train_task(&cfg, &data, &repr, &out, exec)?;
            println!("head trained for {} epochs", ck.epoch);
        }
        Command::Eval {
            data,
            repr,
            task,
            drop_modality,
            out,
            config,
        } => {
            let thresholds = match config {
                Some(p) => Some(RunConfig::load(&p)?.metrics.thresholds),
                None => None,
            };
            let ev = pipeline::evaluate(&data, &repr, &task, &drop_modality, "eval", thresholds, exec)?;
            write(&out.join(pipeline::METRICS_FILE), &metrics_csv(std::slice::from_ref(&ev.run)))?;
            write(&out.join(pipeline::PREDICTIONS_FILE), &pipeline::predictions_csv(&ev))?;
            report(&ev);
        }
        Command::ReproduceAblations { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let s = pipeline::reproduce_ablations(&cfg, &out, exec)?;
            println!(
                "unaligned {:.4}  aligned {:.4}  shared-only {:.4}",
                s.unaligned, s.aligned, s.shared_only
            );
            println!("tables written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
