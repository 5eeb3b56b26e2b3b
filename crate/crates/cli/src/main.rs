use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dfca::harness::{self, VerifyOptions};
use dfca::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dfca", version, about = "Decentralized clustered federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write traces plus summary.json.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set k=4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a config once per value of a numeric key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check the algorithm's invariants on small random instances.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load(path: &PathBuf, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cfg.with_overrides(overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let out = harness::cmd_run(&cfg, &harness::output_root(&cfg))?;
            let s = &out.summary;
            println!(
                "{}: {} seeds, final test accuracy {:.4} +/- {:.4}, clustering accuracy {:.4}",
                s.name, s.n_seeds, s.test_accuracy.mean, s.test_accuracy.std, s.clustering_accuracy.mean
            );
            println!("wrote {}", out.dir.display());
            Ok(true)
        }
        Command::Sweep {
            config,
            key,
            values,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let out = harness::cmd_sweep(&cfg, &harness::output_root(&cfg), &key, &values)?;
            for (v, run) in &out.runs {
                let acc = run.summary.test_accuracy;
                println!("{key}={v}: {:.4} +/- {:.4}", acc.mean, acc.std);
            }
            println!("wrote {}", out.csv_path.display());
            Ok(true)
        }
        Command::Verify { inject_fault } => {
            let mut opts = VerifyOptions::default();
            if inject_fault {
                opts.fault = dfca::dfca::Fault::FlipRunningAverageWeights;
            }
            let results = harness::verify(&opts);
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {}  ({:.2}s) {}", r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} properties hold", results.len() - failed, results.len());
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
