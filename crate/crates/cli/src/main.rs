//! `cvnn`: train and evaluate config-defined complex-valued networks, run the
//! finite-difference gradient suite, and benchmark the Gauss matmul.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvnn::trainer::{bench, gradcheck, metrics_csv, Trainer, CSV_HEADER};
use cvnn::Error;

#[derive(Parser)]
#[command(name = "cvnn", version, about = "Complex-valued neural networks: training, evaluation and numerical checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving `metrics.csv` and `checkpoint/`.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Do not echo metrics rows to stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the config's test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Restrict to one module (layers, activations, masks, normalization,
        /// attention, manifold, losses).
        #[arg(long)]
        module: Option<String>,
        /// Random instances per operation.
        #[arg(long, default_value_t = gradcheck::DEFAULT_POINTS)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time naive (4 real products) against Gauss (3 real products) matmul.
    BenchGauss {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

/// Exit status: 1 for anything the user can fix in the input, 2 when a
/// numerical check fails.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(m) => Failure::Numeric(m),
            e => Failure::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn with_path(path: &Path, e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Validation(format!("{}: {m}", path.display())),
        e => e.into(),
    }
}

fn train(config: &Path, out: &Path, quiet: bool) -> Result<(), Failure> {
    let text = read_config(config)?;
    let mut trainer = Trainer::from_json(&text).map_err(|e| with_path(config, e))?;
    std::fs::create_dir_all(out)?;
    if !quiet {
        println!("{CSV_HEADER}");
    }
    let rows = trainer.run(|row| {
        if !quiet {
            println!("{}", row.csv_line());
            let _ = std::io::stdout().flush();
        }
    })?;
    let metrics = out.join("metrics.csv");
    std::fs::write(&metrics, metrics_csv(&rows))?;
    let ckpt = out.join("checkpoint");
    trainer.save_checkpoint(&ckpt)?;
    eprintln!("wrote {} and {}", metrics.display(), ckpt.display());
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let text = read_config(config)?;
    let mut trainer = Trainer::from_json(&text).map_err(|e| with_path(config, e))?;
    let meta = trainer.load_checkpoint(checkpoint, false)?;
    if meta.config_hash != trainer.cfg.hash() {
        eprintln!("warning: checkpoint was written under a different config");
    }
    let test = trainer.test_set.clone();
    let (loss, acc) = trainer.evaluate(&test)?;
    println!("epoch,eval_loss,accuracy");
    println!("{},{loss:e},{}", meta.epoch, acc.map(|a| a.to_string()).unwrap_or_default());
    Ok(())
}

fn run_gradcheck(module: Option<&str>, points: usize, seed: u64) -> Result<(), Failure> {
    println!("{:<14} {:<34} {:>10}", "module", "op", "worst");
    let results = gradcheck::run_suite(module, points, seed, |r| {
        let flag = if r.passed() { "" } else { "  FAIL" };
        println!("{:<14} {:<34} {:>10.2e}{flag}", r.module, r.op, r.worst);
    })?;
    let mut modules: Vec<&str> = results.iter().map(|r| r.module).collect();
    modules.dedup();
    for m in modules {
        let worst = results.iter().filter(|r| r.module == m).map(|r| r.worst).fold(0.0, f64::max);
        println!("worst {m}: {worst:.2e}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} operations, {points} points each, tolerance {:.0e}: {failed} failed", results.len(), gradcheck::TOLERANCE);
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} operations exceed the gradient tolerance")));
    }
    Ok(())
}

fn bench_gauss(size: usize, reps: usize) -> Result<(), Failure> {
    let r = bench::bench_gauss(size, reps, 0)?;
    println!("size {size}x{size}, best of {reps}");
    println!("naive: {:.4} s, {} real operator applications, {} real multiplications", r.naive_secs, r.naive.applications, r.naive.real_mults);
    println!("gauss: {:.4} s, {} real operator applications, {} real multiplications", r.gauss_secs, r.gauss.applications, r.gauss.real_mults);
    println!("multiplication ratio (gauss/naive): {}", r.mult_ratio());
    println!("time ratio (gauss/naive): {:.3}", r.gauss_secs / r.naive_secs);
    println!("max relative difference: {:.2e}", r.max_rel_diff);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Train { config, out, quiet } => train(config, out, *quiet),
        Command::Eval { config, checkpoint } => eval(config, checkpoint),
        Command::Gradcheck { module, points, seed } => run_gradcheck(module.as_deref(), *points, *seed),
        Command::BenchGauss { size, reps } => bench_gauss(*size, *reps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric check failed: {m}");
            ExitCode::from(2)
        }
    }
}
