use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kru_cli::bench::{self, BenchConfig, BenchMode};
use kru_cli::commands::{self, CliError, Globals, OUT_DIR_ENV};
use kru_core::linalg::Field;

#[derive(Parser, Debug)]
#[command(name = "kru", version, about = "Train, evaluate, benchmark and inspect Kronecker recurrent units")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where artifacts go; overrides the config's out_dir.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model described by a JSON config.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the task of a config.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Time dense and Kronecker recurrent products.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256, 512, 1024, 2048])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["dense", "kron"])]
        modes: Vec<BenchMode>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value = "complex")]
        field: String,
    },
    /// Spectral report for a checkpoint or a freshly initialized config.
    Diag {
        target: PathBuf,
        /// Train once per amplitude and tabulate residual and norm.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        /// Also record the per-step hidden-gradient norms on one batch.
        #[arg(long)]
        trace: bool,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let globals = Globals {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Train { config } => print_json(&commands::cmd_train(&config, &globals)?),
        Command::Eval { checkpoint, config } => print_json(&commands::cmd_eval(&checkpoint, &config, &globals)?),
        Command::Bench {
            sizes,
            modes,
            batch,
            reps,
            field,
        } => {
            let field = match field.as_str() {
                "real" => Field::Real,
                "complex" => Field::Complex,
                other => return Err(CliError::Config(format!("unknown field {other:?}"))),
            };
            let cfg = BenchConfig {
                sizes,
                modes,
                batch,
                reps,
                field,
                seed: globals.seed.unwrap_or(0),
                ..Default::default()
            };
            let rows = commands::cmd_bench(&cfg, &globals)?;
            print!("{}", bench::bench_csv(&rows));
            for mode in &cfg.modes {
                for (n, r) in bench::doubling_ratios(&rows, *mode) {
                    eprintln!("{mode} {n}->{}: x{r:.2}", 2 * n);
                }
            }
            Ok(())
        }
        Command::Diag { target, sweep, trace } => {
            print_json(&commands::cmd_diag(&target, sweep.as_deref(), trace, &globals)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
