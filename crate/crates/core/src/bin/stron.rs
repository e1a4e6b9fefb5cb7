use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stron::harness::{
    cmd_compare, cmd_crossval, cmd_gapify, cmd_reference, cmd_train, synthetic_separable, ConfigOverrides,
    CrossvalSummary, ExperimentConfig, HarnessError, Method, RunSummary,
};

#[derive(Parser)]
#[command(name = "stron", version, about = "Trust-region inexact Newton experiments on LibSVM data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with defaults; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigOverrides,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let file = self.config.as_deref().map(ConfigOverrides::from_toml_file).transpose()?;
        ExperimentConfig::resolve(&self.flags, file.as_ref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on an 80/20 split (or k folds with --folds)
    Train(Common),
    /// k-fold cross-validation (default 5 folds)
    Crossval(Common),
    /// Compute the high-accuracy reference optimum for the training split
    Reference(Common),
    /// Append optimality gaps to a trace using a reference optimum
    Gapify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several methods on the same split; --out names the output directory
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods (default: all)
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Write a synthetic linearly separable dataset in LibSVM format
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        points: usize,
        #[arg(long, default_value_t = 50)]
        features: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_run(s: &RunSummary) {
    let acc = s.test_accuracy.map_or("n/a".to_owned(), |a| format!("{a:.4}"));
    println!(
        "{:<11} F = {:.10e}  |g|/|g0| = {:.3e}  acc = {}  iters = {}  passes = {:.3}  ({})",
        s.method, s.final_function_value, s.gradient_ratio, acc, s.outer_iterations, s.effective_data_passes, s.stop
    );
}

fn print_crossval(s: &CrossvalSummary) {
    for f in &s.folds {
        print_run(f);
    }
    println!(
        "{}: {}-fold accuracy {:.4} ± {:.4}, mean passes {:.3}",
        s.method,
        s.folds.len(),
        s.mean_accuracy,
        s.std_accuracy,
        s.mean_effective_data_passes
    );
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            match cfg.folds {
                Some(k) => print_crossval(&cmd_crossval(&cfg, k)?),
                None => {
                    let s = cmd_train(&cfg)?;
                    print_run(&s);
                    if let Some(p) = &s.trace_file {
                        println!("trace written to {}", p.display());
                    }
                }
            }
        }
        Command::Crossval(common) => {
            let cfg = common.resolve()?;
            print_crossval(&cmd_crossval(&cfg, cfg.folds.unwrap_or(5))?);
        }
        Command::Reference(common) => {
            let cfg = common.resolve()?;
            let (r, path, cached) = cmd_reference(&cfg)?;
            println!(
                "f* = {:.16e}  |g|/|g0| = {:.3e}{}  iters = {}",
                r.f_star,
                r.achieved_gradient_ratio,
                if r.tolerance_reached { "" } else { " (tolerance not reached)" },
                r.outer_iterations
            );
            println!("{} {}", if cached { "cached at" } else { "written to" }, path.display());
        }
        Command::Gapify { trace, reference, out } => {
            let dest = cmd_gapify(&trace, &reference, out.as_deref())?;
            println!("gaps written to {}", dest.display());
        }
        Command::Compare { common, methods } => {
            let cfg = common.resolve()?;
            let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods };
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("compare"));
            for s in cmd_compare(&cfg, &methods, &dir)? {
                print_run(&s);
            }
            println!("traces written to {}", dir.display());
        }
        Command::Synth {
            out,
            points,
            features,
            seed,
        } => {
            if points < 2 || features == 0 {
                return Err(HarnessError::Usage("need --points >= 2 and --features >= 1".into()));
            }
            let data = synthetic_separable(points, features, seed);
            std::fs::write(&out, data.to_libsvm_string()).map_err(|source| HarnessError::Io {
                path: out.clone(),
                source,
            })?;
            println!("{points} points, {features} features written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
