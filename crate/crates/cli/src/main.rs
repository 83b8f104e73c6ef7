use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peswap_cli::{commands, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "peswap",
    version,
    about = "Reference insertion by positional-embedding transplant on a toy diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy base model, feature encoders and LoRA adapter.
    TrainToy(Common),
    /// Insert 1-4 references into a background.
    Edit(Common),
    /// Sweep tau at a fixed seed and emit an image grid plus CSV.
    AblateTau(Common),
    /// Shared-position clone demo against a native-position control.
    DemoClone(Common),
    /// Score all methods over classes and seeds.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<usize>,
    /// Output directory (default out/<command>/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// LoRA adapter file.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Directory of a train-toy run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            tau: self.tau,
            out: self.out.clone(),
            adapter: self.adapter.clone(),
            checkpoint: self.checkpoint.clone(),
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainToy(c) => {
            let mut cfg = c.config()?;
            let every = (cfg.train.steps / 50).max(1);
            let s = commands::train_toy(&mut cfg, |phase, r| {
                if r.step % every == 0 {
                    eprintln!(
                        "{phase} step {:>6}  loss {:.4}  grad {:.3}",
                        r.step, r.loss, r.grad_norm
                    );
                }
            })?;
            println!(
                "loss {:.4} -> {:.4} over {} steps",
                s.loss_first_tenth, s.loss_last_tenth, s.steps
            );
            for e in &s.encoders {
                println!("{:?} accuracy {:.3}", e.kind, e.accuracy);
            }
            println!("wrote {}", cfg.out.unwrap_or_default().display());
        }
        Command::Edit(c) => {
            let mut cfg = c.config()?;
            let o = commands::edit(&mut cfg)?;
            println!("wrote {}", o.path.display());
        }
        Command::AblateTau(c) => {
            let mut cfg = c.config()?;
            for r in commands::ablate_tau(&mut cfg)? {
                println!(
                    "tau {:>3}  dino-like {:.4}  background error {}",
                    r.tau, r.dino_like, r.background_error
                );
            }
        }
        Command::DemoClone(c) => {
            let mut cfg = c.config()?;
            let s = commands::demo_clone(&mut cfg)?;
            for r in &s.rows {
                println!(
                    "seed {:>4}  transplanted mse {:>8.1} cos {:+.3}  control mse {:>8.1} cos {:+.3}",
                    r.seed, r.transplanted_mse, r.transplanted_cosine, r.control_mse, r.control_cosine
                );
            }
            println!("margin {:+.4}", s.margin);
        }
        Command::Eval(c) => {
            let mut cfg = c.config()?;
            let report = commands::eval(&mut cfg)?;
            println!(
                "{:<12} {:>8} {:>8} {:>8} {:>7}",
                "method", "clip-i", "dino", "c+d", "missing"
            );
            for m in &report.summary {
                println!(
                    "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>7}",
                    m.method.label(),
                    m.clip_i_like,
                    m.dino_like,
                    m.composite,
                    m.missing
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
