use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockadapt::config::RunConfig;
use blockadapt::model::{Head, MlpSpec};
use blockadapt::runner::{self, GRADCHECK_TOL};
use blockadapt::{acceptance, Error, Result};

#[derive(Parser)]
#[command(
    name = "blockadapt",
    version,
    about = "Block-diagonal adaptive optimizers: experiments and checks"
)]
struct Cli {
    /// Worker threads for per-block math (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write trace.csv and summary.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        /// Comma-separated layer widths; default checks 2,2,2,1 and 784,100,10.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run two configurations in lockstep and join their traces.
    Compare {
        /// Given twice: `--config A --config B`.
        #[arg(long = "config", required = true, num_args = 1..=2)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the acceptance suite.
    Selftest {
        /// Directory with MNIST IDX files (also read from BLKADAPT_MNIST_DIR).
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Run { config, out, seed } => {
            let s = runner::cmd_run(load(&config, seed)?, &out)?;
            println!(
                "steps {}  final loss {:.6}  min grad^2 {:.3e}  accuracy {:.4}",
                s.steps, s.final_loss, s.min_grad_norm_sq, s.accuracy
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Gradcheck { widths, seed } => {
            let reports = match widths {
                None => runner::gradcheck_suite(seed)?,
                Some(w) => {
                    let head = if w.last() == Some(&1) {
                        Head::SigmoidBce
                    } else {
                        Head::SoftmaxCe
                    };
                    let spec = MlpSpec::new(w, head)?;
                    let r = runner::gradcheck_model(&spec, seed)?;
                    vec![(spec, r)]
                }
            };
            let mut ok = true;
            for (spec, r) in reports {
                let pass = r.max_rel_err < GRADCHECK_TOL;
                ok &= pass;
                println!(
                    "{} {spec}: max relative error {:.3e} at index {} ({} probes)",
                    if pass { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.worst_index,
                    r.probes
                );
            }
            Ok(ok)
        }
        Command::Compare { configs, out, seed } => {
            if configs.len() != 2 {
                return Err(Error::InvalidArgument(
                    "compare needs exactly two configs".into(),
                ));
            }
            let a = load(&configs[0], seed)?;
            let b = load(&configs[1], seed)?;
            let s = runner::cmd_compare(a, b, &out)?;
            println!(
                "final loss {:.6} vs {:.6}  median term_b {:.4e} vs {:.4e}  max param diff {:.3e}",
                s.final_loss_a,
                s.final_loss_b,
                s.median_term_b_a,
                s.median_term_b_b,
                s.max_param_diff
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Selftest { mnist_dir } => {
            let dir = mnist_dir.or_else(acceptance::mnist_dir_from_env);
            let mut ok = true;
            for r in acceptance::run_all(dir.as_deref()) {
                ok &= r.passed;
                println!("{r}");
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
