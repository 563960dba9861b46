//! Experiment runner CLI. Every subcommand writes three artifacts into the
//! output directory: `<name>_rows.csv` (checkpoint rows), `<name>_per_agent.csv`
//! (per-agent rows, when the experiment produces them) and `<name>_summary.txt`
//! (config echo + flat summary), and prints the summary to stdout.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use peerlearn::experiments::{
    exp_bounds_check, exp_local_dp_baseline, exp_nonprivate_convergence, exp_private_tradeoff,
    exp_recommendation, tune_mu, BoundsCheckConfig, ExperimentReport, LocalDpConfig,
    PrivateTradeoffConfig, RecommendationConfig, SyntheticConfig,
};
use peerlearn::solver::{Allocation, WarmStart};

#[derive(Parser)]
#[command(
    name = "peerlearn",
    about = "Decentralized peer-to-peer learning of personalized models, with an optional \
             differentially private mode",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Output directory for CSV and summary files.
    #[arg(long, default_value = "out")]
    output: PathBuf,

    /// First seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 11)]
    seed: u64,

    /// Number of seeded repetitions.
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args, Clone)]
struct SynthOpts {
    /// Number of agents.
    #[arg(long, default_value_t = 100)]
    n: usize,

    /// Model dimension.
    #[arg(long, default_value_t = 10)]
    p: usize,

    /// Angle-graph kernel width.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,

    /// Trade-off weight between smoothness and local losses.
    #[arg(long, default_value_t = 1.28)]
    mu: f64,
}

impl SynthOpts {
    fn config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n: self.n,
            p: self.p,
            gamma: self.gamma,
            mu: self.mu,
            ..SyntheticConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Non-private convergence from the local-model warm start.
    SynthConvergence {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        synth: SynthOpts,
        /// Total global clock ticks.
        #[arg(long, default_value_t = 20_000)]
        ticks: usize,
        /// Tune mu over the standard grid on validation seeds first.
        #[arg(long)]
        tune_mu: bool,
    },
    /// Private runs over a grid of budgets and tick counts.
    SynthPrivate {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        synth: SynthOpts,
        /// Privacy budgets, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.15,0.5,1.0")]
        eps_bar: Vec<f64>,
        /// Total tick counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1000")]
        ticks: Vec<usize>,
        /// Failure probability budget.
        #[arg(long, default_value_t = (-5.0f64).exp())]
        delta_bar: f64,
        /// `zeros | constant:<v> | local-models | private-propagation:<eps>[:<floor>]`
        #[arg(long, default_value = "private-propagation:0.05:0.5")]
        warm_start: String,
        /// uniform | optimal
        #[arg(long, default_value = "uniform")]
        allocation: String,
    },
    /// Recommendation task on a ratings file (tab separated:
    /// user item rating timestamp).
    Recsys {
        #[command(flatten)]
        common: CommonOpts,
        /// Ratings file path.
        #[arg(long)]
        ratings: PathBuf,
        /// Optional item-feature CSV (rows = items); random unit rows
        /// otherwise.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Feature dimension.
        #[arg(long, default_value_t = 20)]
        p: usize,
        /// Trade-off weight.
        #[arg(long, default_value_t = 0.04)]
        mu: f64,
        /// Privacy budgets, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.1")]
        eps_bar: Vec<f64>,
        /// Noisy updates per agent for each budget, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10,6,1")]
        private_updates: Vec<usize>,
        /// Non-private updates per agent.
        #[arg(long, default_value_t = 40)]
        nonprivate_updates: usize,
        /// Failure probability budget.
        #[arg(long, default_value_t = (-5.0f64).exp())]
        delta_bar: f64,
    },
    /// Purely local models on locally perturbed data.
    LocalDp {
        #[command(flatten)]
        common: CommonOpts,
        /// Number of agents.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Dimensions to sweep, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
        dims: Vec<usize>,
        /// Per-point budgets, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1.0,5.0,25.0")]
        eps: Vec<f64>,
    },
    /// Monte-Carlo verification of the convergence and utility-loss bounds.
    BoundsCheck {
        #[command(flatten)]
        common: CommonOpts,
        /// Agents in the fixed instance.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Model dimension.
        #[arg(long, default_value_t = 3)]
        p: usize,
        /// Monte-Carlo runs.
        #[arg(long, default_value_t = 2000)]
        mc_runs: usize,
        /// Checkpoints (global ticks), comma separated.
        #[arg(long, value_delimiter = ',', default_value = "10,50,100,500")]
        checkpoints: Vec<usize>,
        /// Uniform per-agent Laplace scale for the private phase.
        #[arg(long, default_value_t = 0.05)]
        noise_scale: f64,
    },
}

fn seeds(common: &CommonOpts) -> Vec<u64> {
    (common.seed..common.seed + common.runs as u64).collect()
}

fn write_report(report: &ExperimentReport, dir: &PathBuf) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let rows = dir.join(format!("{}_rows.csv", report.name));
    fs::write(&rows, report.to_csv_string())?;
    if !report.per_agent_columns.is_empty() {
        let per_agent = dir.join(format!("{}_per_agent.csv", report.name));
        fs::write(per_agent, report.per_agent_csv_string())?;
    }
    let summary = dir.join(format!("{}_summary.txt", report.name));
    fs::write(&summary, report.summary_text())?;
    print!("{}", report.summary_text());
    println!("wrote {} and {}", rows.display(), summary.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthConvergence { common, synth, ticks, tune_mu: tune } => {
            let mut config = synth.config();
            if tune {
                let grid: Vec<f64> = (0..8).map(|k| 0.01 * 2f64.powi(k)).collect();
                let validation: Vec<u64> = (1000..1003).collect();
                let (best, table) = tune_mu(&config, &grid, ticks, &validation)?;
                for (mu, acc) in &table {
                    println!("mu={mu}: validation accuracy {acc:.4}");
                }
                println!("selected mu = {best}");
                config.mu = best;
            }
            let report = exp_nonprivate_convergence(&config, ticks, &seeds(&common))?;
            write_report(&report, &common.output)
        }
        Command::SynthPrivate {
            common,
            synth,
            eps_bar,
            ticks,
            delta_bar,
            warm_start,
            allocation,
        } => {
            let warm: WarmStart = warm_start.parse()?;
            let allocation: Allocation = allocation.parse()?;
            let config = PrivateTradeoffConfig {
                base: synth.config(),
                eps_grid: eps_bar,
                ticks_grid: ticks,
                delta_bar,
                warm_start: warm,
                allocation,
            };
            let report = exp_private_tradeoff(&config, &seeds(&common))?;
            write_report(&report, &common.output)
        }
        Command::Recsys {
            common,
            ratings,
            features,
            p,
            mu,
            eps_bar,
            private_updates,
            nonprivate_updates,
            delta_bar,
        } => {
            if eps_bar.len() != private_updates.len() {
                bail!("--eps-bar and --private-updates must have equal lengths");
            }
            let text = fs::read_to_string(&ratings)
                .with_context(|| format!("reading {}", ratings.display()))?;
            let features_csv = match &features {
                Some(path) => Some(
                    fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                ),
                None => None,
            };
            let config = RecommendationConfig {
                p,
                mu,
                eps_grid: eps_bar,
                private_updates_per_agent: private_updates,
                nonprivate_updates_per_agent: nonprivate_updates,
                delta_bar,
                ..RecommendationConfig::default()
            };
            let report =
                exp_recommendation(&config, &text, features_csv.as_deref(), &seeds(&common))?;
            write_report(&report, &common.output)
        }
        Command::LocalDp { common, n, dims, eps } => {
            let config = LocalDpConfig {
                n,
                dims,
                eps_grid: eps,
                ..LocalDpConfig::default()
            };
            let report = exp_local_dp_baseline(&config, &seeds(&common))?;
            write_report(&report, &common.output)
        }
        Command::BoundsCheck { common, n, p, mc_runs, checkpoints, noise_scale } => {
            let config = BoundsCheckConfig {
                n,
                p,
                runs: mc_runs,
                checkpoints,
                noise_scale,
                instance_seed: common.seed,
                ..BoundsCheckConfig::default()
            };
            let report = exp_bounds_check(&config)?;
            write_report(&report, &common.output)
        }
    }
}
