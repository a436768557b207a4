use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcae_core::config::Config;
use mcae_core::gradsuite::{per_layer_max, run_suite, TOLERANCE};
use mcae_core::numerics::{inject_backward_fault, FaultTarget};
use mcae_core::pipeline::{self, EvalSummary};
use mcae_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mcae", version, about = "Masked capsule autoencoder: pretrain, finetune, evaluate, reconstruct")]
#[command(after_help = Config::help())]
struct Cli {
    /// Print per-batch progress (mask counts and losses).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Masked-patch pretraining; writes checkpoint.mcae and metrics.csv.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised finetuning with the class-capsule head.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretraining checkpoint, or `none` for the from-scratch arm.
        #[arg(long)]
        init: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-set accuracy and loss of a finetune checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes (masked input, reconstruction, original) PGM triplets.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every layer on tiny 64-bit models.
    Gradcheck {
        /// Only `seed` is read; model sizes are fixed small.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Lists every config key with its default.
    Keys,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric_error() {
                EXIT_NUMERIC
            } else if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            })
        }
    }
}

fn progress(verbose: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if verbose || !line.contains(" batch ") {
            eprintln!("{line}");
        }
    }
}

fn out_dir(cfg: &Config, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.out_dir.clone())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Pretrain { config, out } => {
            let cfg = Config::load(&config)?;
            let out = out_dir(&cfg, out);
            let run = pipeline::pretrain(&cfg, &out, &mut progress(cli.verbose))?;
            println!("best epoch {} of {}; checkpoint in {}", run.best_epoch, run.metrics.len(), out.display());
        }
        Cmd::Finetune { config, init, out } => {
            let cfg = Config::load(&config)?;
            let out = out_dir(&cfg, out);
            let init = (init != "none").then(|| PathBuf::from(init));
            let run = pipeline::finetune(&cfg, init.as_deref(), &out, &mut progress(cli.verbose))?;
            println!("best epoch {} of {}; checkpoint in {}", run.best_epoch, run.metrics.len(), out.display());
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = Config::load(&config)?;
            print_eval(&pipeline::eval_checkpoint(&cfg, &checkpoint)?);
        }
        Cmd::Reconstruct { config, checkpoint, n, out_dir } => {
            let cfg = Config::load(&config)?;
            let recons = pipeline::reconstruct(&cfg, &checkpoint, n)?;
            let files = pipeline::write_reconstructions(&recons, &out_dir)?;
            println!("wrote {} files to {}", files.len(), out_dir.display());
        }
        Cmd::Gradcheck { config, inject_fault } => return gradcheck(config.as_deref(), inject_fault.as_deref()),
        Cmd::Keys => print!("{}", Config::help()),
    }
    Ok(ExitCode::SUCCESS)
}

fn print_eval(s: &EvalSummary) {
    let mut text = format!("test top-1 {:.4} ({} examples), mean loss {:.6}\n", s.test.top1, s.test.count, s.test.loss);
    let mut json = format!("{{\"top1\":{},\"loss\":{},\"count\":{}", s.test.top1, s.test.loss, s.test.count);
    if let Some(n) = &s.novel {
        text += &format!("novel-angle top-1 {:.4} ({} examples), mean loss {:.6}\n", n.top1, n.count, n.loss);
        text += &format!("familiar - novel gap {:.4}\n", s.test.top1 - n.top1);
        json += &format!(",\"novel_top1\":{},\"novel_loss\":{},\"novel_count\":{}", n.top1, n.loss, n.count);
    }
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{text}{json}}}");
}

fn gradcheck(config: Option<&Path>, fault: Option<&str>) -> Result<ExitCode, Error> {
    let seed = match config {
        Some(p) => Config::load(p)?.seed,
        None => 0,
    };
    let fault: Option<FaultTarget> = fault.map(str::parse).transpose()?;
    inject_backward_fault(fault);
    let checks = run_suite(seed);
    inject_backward_fault(None);
    let checks = checks?;
    for c in &checks {
        let flag = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:<40} {:>6} coords  max rel err {:.3e}  {flag}", c.layer, c.tensor, c.coords, c.max_rel_error);
    }
    println!();
    for (layer, err) in per_layer_max(&checks) {
        println!("{layer:<22} max rel err {err:.3e}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        println!("{failed} tensors exceed {TOLERANCE:e}");
        return Ok(ExitCode::from(EXIT_NUMERIC));
    }
    println!("all {} tensors within {TOLERANCE:e}", checks.len());
    Ok(ExitCode::SUCCESS)
}
