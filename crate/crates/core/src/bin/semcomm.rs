use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semcomm::config::RunConfig;
use semcomm::error::{Error, Result};
use semcomm::pipeline;

#[derive(Parser)]
#[command(name = "semcomm", version, about = "Semantic map transmission with a conditional diffusion receiver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `run.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with noisy-map conditioning.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the state files in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-sample PSNR sweep with sample images.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PSNR sweep reduced to per-PSNR means.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FDS x noisy-training grid; pass the noisy-trained checkpoint first.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write the synthetic shapes dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    run.apply_overrides(&common.overrides)?;
    if let Some(out) = &common.out {
        run.run.out_dir = out.clone();
    }
    run.validate()?;
    let out = run.run.out_dir.clone();
    Ok((run, out))
}

fn fmt_psnr(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "inf".into()
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let (run, out) = resolve(&common)?;
            let done = pipeline::train(&run, &out, resume)?;
            let last = done.metrics.last().map(|m| format!(", final loss {:.5}", m.total)).unwrap_or_default();
            println!("trained {} steps ({} skipped){last} -> {}", done.steps, done.skipped, out.display());
        }
        Command::Simulate { common, checkpoint } => {
            let (run, out) = resolve(&common)?;
            let rows = pipeline::run_simulate(&run, &checkpoint, &out)?;
            for s in pipeline::summarize(&rows) {
                println!("{:<8} psnr {:>5} dB  miou {:.3}  image psnr {}", s.method, s.psnr_db, s.miou_mean, fmt_psnr(s.image_psnr_mean));
            }
            println!("{} rows -> {}", rows.len(), out.join("simulate.csv").display());
        }
        Command::Eval { common, checkpoint } => {
            let (run, out) = resolve(&common)?;
            let summary = pipeline::run_eval(&run, &checkpoint, &out)?;
            print!("{}", pipeline::summary_csv(&summary));
        }
        Command::Ablate { common, checkpoint } => {
            let [noisy, clean] = checkpoint.as_slice() else {
                return Err(Error::Config(format!(
                    "ablate needs two --checkpoint paths (noisy-trained, then clean-trained), got {}",
                    checkpoint.len()
                )));
            };
            let (run, out) = resolve(&common)?;
            let rows = pipeline::run_ablation(&run, noisy, clean, &out)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::GenData { common } => {
            let (run, out) = resolve(&common)?;
            let dir = if common.out.is_some() { out } else { run.data.dir.clone().unwrap_or_else(|| Path::new(&out).join("data")) };
            let ds = pipeline::gen_data(&run, &dir)?;
            println!("{} train + {} test pairs -> {}", ds.train.len(), ds.test.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semcomm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
