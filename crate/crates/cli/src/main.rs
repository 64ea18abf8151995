use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use netcause::estimator::{train, EstimatorConfig, EstimatorModel, Variant};
use netcause::graph::Graph;
use netcause::harness::{evaluate, run_experiment, ExperimentConfig};
use netcause::synth::{generate, GenConfig, NetworkDataset};
use netcause::theory::audit;

/// Treatment-effect estimation under network interference.
#[derive(Parser)]
#[command(name = "netcause", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a semi-synthetic dataset on a seeded small-world graph.
    Generate(GenerateArgs),
    /// Train one estimator variant on a dataset directory and save model.json.
    Train(TrainArgs),
    /// Score a saved model against a dataset's ground-truth outcomes.
    Evaluate(EvaluateArgs),
    /// Check the generalization-bound inequalities on random discrete scenarios.
    TheoryCheck(TheoryArgs),
    /// Run a full experiment from a TOML config and write result tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_units: usize,
    #[arg(long, default_value_t = 10)]
    mean_degree: usize,
    /// Small-world rewiring probability.
    #[arg(long, default_value_t = 0.1)]
    rewire: f64,
    /// Interference degree.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 10)]
    feature_dim: usize,
    /// Standard deviation of the outcome noise (0 for noiseless outcomes).
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, env = "NETCAUSE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving model.json and train_log.json.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with estimator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// none | reweight | repre | both
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, env = "NETCAUSE_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding model.json.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory with oracle.csv.
    #[arg(long)]
    data: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 100)]
    scenarios: usize,
    /// Seed of the first scenario; scenarios use consecutive seeds.
    #[arg(long, env = "NETCAUSE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "theory-report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment TOML; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, env = "NETCAUSE_SEED")]
    seed: Option<u64>,
    /// Override the number of concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::TheoryCheck(a) => cmd_theory(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let graph = Graph::small_world(a.n_units, a.mean_degree, a.rewire, a.seed)?;
    let cfg = GenConfig {
        k: a.k,
        feature_dim: a.feature_dim,
        noise_sd: a.noise_sd,
        seed: a.seed,
        ..Default::default()
    };
    let ds = generate(&graph, &cfg)?;
    ds.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    log::info!(
        "wrote {} units, {} edges to {}",
        ds.n_units(),
        ds.graph.n_edges(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<EstimatorConfig>(&text)?
        }
        None => EstimatorConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = NetworkDataset::load(&a.data)?;
    log::info!(
        "training {} on {} units for {} epochs",
        cfg.variant,
        ds.n_units(),
        cfg.epochs
    );
    let out = train(&ds, &cfg)?;
    out.model.save(&a.out)?;
    std::fs::write(
        a.out.join("train_log.json"),
        serde_json::to_string_pretty(&out.log)?,
    )?;
    if let Some(last) = out.log.last() {
        log::info!("final factual loss {:.6}", last.factual_loss);
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = EstimatorModel::load(&a.model)?;
    let ds = NetworkDataset::load(&a.data)?;
    let metrics = evaluate(&model, &ds)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(p) = a.out {
        std::fs::write(p, text + "\n")?;
    }
    Ok(())
}

fn cmd_theory(a: TheoryArgs) -> Result<()> {
    let report = audit(a.seed, a.scenarios)?;
    report.write_json(&a.out)?;
    println!(
        "{} scenarios, {} inequality checks, {} violations",
        report.scenarios,
        report.entries.len(),
        report.violations
    );
    if report.violations > 0 {
        bail!("{} violations; see {}", report.violations, a.out.display());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = a.output {
        cfg.output = o;
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = run_experiment(&cfg)?;
    println!(
        "{} runs, {} missing; tables in {}",
        out.runs.len(),
        out.table.missing.len(),
        cfg.output.display()
    );
    Ok(())
}
