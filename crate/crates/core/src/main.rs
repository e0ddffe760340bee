use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use rfpar::campaign::{
    build_victim, load_config, run_campaign_with, run_random_baseline_with, QueryBudget,
};

#[derive(Parser)]
#[command(name = "rfpar", version, about = "Remember-and-forget pixel attacks against image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an attack campaign described by a JSON config.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Images attacked in parallel.
        #[arg(long)]
        workers: Option<usize>,
        /// Also run the random baseline at a matched query budget.
        #[arg(long)]
        baseline: bool,
        /// Disable memory, re-initialization, or both.
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Memory,
    Init,
    Both,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Attack {
        config,
        workers,
        baseline,
        ablate,
    } = Cli::parse().command;

    let mut cfg = match load_config(&config) {
        Ok(c) => c,
        Err(e) => {
            error!("{}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = workers {
        if n == 0 {
            error!("--workers must be at least 1");
            return ExitCode::from(2);
        }
        cfg.workers = n;
    }
    cfg.baseline |= baseline;
    match ablate {
        Some(Ablation::Memory) => cfg.attack.use_memory = false,
        Some(Ablation::Init) => cfg.attack.use_initialization = false,
        Some(Ablation::Both) => {
            cfg.attack.use_memory = false;
            cfg.attack.use_initialization = false;
        }
        None => {}
    }

    let victim = match build_victim(cfg.task, &cfg.victim) {
        Ok(v) => v,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(3);
        }
    };
    let report = match run_campaign_with(&cfg, &victim) {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "rfpar: {}/{} succeeded ({:.3}), mean queries {:.1}, mean L0 {:.2}",
        report.successes, report.attacked, report.success_rate, report.mean_queries, report.mean_l0_pixels
    );
    if let Some(d) = &report.detection {
        println!(
            "rfpar: removal rate {:.3}, mAP {:.3} -> {:.3}",
            d.removal_rate, d.map_clean, d.map_adv
        );
    }

    if cfg.baseline {
        let budget = match cfg.baseline_query_budget {
            Some(n) => QueryBudget::Fixed(n),
            None => QueryBudget::matching(&report),
        };
        let base = match run_random_baseline_with(&cfg, &victim, &budget) {
            Ok(r) => r,
            Err(e) => {
                error!("baseline: {e}");
                return ExitCode::FAILURE;
            }
        };
        println!(
            "baseline: {}/{} succeeded ({:.3}), mean queries {:.1}",
            base.successes, base.attacked, base.success_rate, base.mean_queries
        );
        if let Some(d) = &base.detection {
            println!("baseline: removal rate {:.3}", d.removal_rate);
        }
    }
    info!("reports written to {}", cfg.output.display());
    ExitCode::SUCCESS
}
