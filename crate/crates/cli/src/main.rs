//! Command-line entry point for the dualrec pipeline: data preparation,
//! training, evaluation, ablation experiments, synthetic data and paired
//! significance tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dualrec::error::Error;
use dualrec::eval::RelevanceRule;
use dualrec::runner::{
    run_evaluate, run_experiment, run_prepare, run_synth, run_train, run_ttest, RunConfig,
};
use dualrec::synth::SynthConfig;
use dualrec::{BprMode, FeatureMode, GraphMode};

#[derive(Parser)]
#[command(name = "dualrec", version, about = "Dual-graph micro-video recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction log, label pairs and write a split manifest.
    Prepare(PrepareArgs),
    /// Train on a prepared split and write a checkpoint plus history.
    Train(TrainArgs),
    /// Score the test pairs of a split with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run ablation variants across paired seeds with t-tests.
    Experiment(ExperimentArgs),
    /// Generate a synthetic interaction corpus with ground truth tiers.
    Synth(SynthArgs),
    /// Paired t-test between two per-seed metrics CSV files.
    Ttest(TtestArgs),
}

/// Flags shared by every run-configuring subcommand. Values provided here
/// override the `--config` file, which overrides built-in defaults.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file with flat RunConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Quick-skip threshold in seconds.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = parse_graph_mode)]
    graph_mode: Option<GraphMode>,
    #[arg(long, value_parser = parse_bpr_mode)]
    bpr_mode: Option<BprMode>,
    /// BPR/BCE mixing weight.
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Metric cutoffs, comma separated.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Count less positive test pairs as relevant too.
    #[arg(long)]
    include_less: bool,
    #[arg(long, value_parser = parse_feature_mode)]
    feature_mode: Option<FeatureMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_graph_mode(s: &str) -> Result<GraphMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bpr_mode(s: &str) -> Result<BprMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_feature_mode(s: &str) -> Result<FeatureMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(
        &self,
        interactions: Option<&Path>,
        features: Option<&Path>,
    ) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = interactions {
            config.interactions = Some(path.display().to_string());
        }
        if let Some(path) = features {
            config.features = Some(path.display().to_string());
            if self.feature_mode.is_none() {
                config.feature_mode = FeatureMode::FixedFeatures;
            }
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(threshold) = self.threshold {
            config.train.threshold = threshold;
        }
        if let Some(mode) = self.graph_mode {
            config.train.graph_mode = mode;
        }
        if let Some(mode) = self.bpr_mode {
            config.train.bpr_mode = mode;
        }
        if let Some(lambda) = self.lambda {
            config.train.lambda = lambda;
        }
        if let Some(d) = self.d {
            config.train.d = d;
        }
        if let Some(batch) = self.batch_size {
            config.train.batch_size = batch;
        }
        if let Some(epochs) = self.max_epochs {
            config.train.max_epochs = epochs;
        }
        if let Some(patience) = self.patience {
            config.train.patience = patience;
        }
        if let Some(ks) = &self.ks {
            config.ks = ks.clone();
        }
        if let Some(repeats) = self.repeats {
            config.repeats = repeats;
        }
        if self.include_less {
            config.relevance = RelevanceRule::HighlyOrLess;
        }
        if let Some(mode) = self.feature_mode {
            config.feature_mode = mode;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.display().to_string();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Comma-separated variant names: dual, total, highly_only,
    /// hierarchical, unseen_negative.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    interactions_per_user: Option<usize>,
    #[arg(long)]
    tau_high: Option<f64>,
    #[arg(long)]
    tau_low: Option<f64>,
    #[arg(long)]
    taste_bias: Option<f64>,
    #[arg(long)]
    exposure_sharpness: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    duration_min: Option<f64>,
    #[arg(long)]
    duration_max: Option<f64>,
}

#[derive(Args)]
struct TtestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap would exit 2; the contract is 1 for usage errors
            let _ = err.print();
            std::process::exit(if err.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare(args) => {
            let config = args
                .common
                .resolve(Some(&args.interactions), args.features.as_deref())?;
            let (manifest, stats) = run_prepare(&config)?;
            println!(
                "prepared {} pairs ({} users, {} videos) -> {}",
                manifest.pairs.len(),
                stats.n_users,
                stats.n_videos,
                config.out_dir
            );
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train(args) => {
            let config = args.common.resolve(None, args.features.as_deref())?;
            let outcome = run_train(&config, &args.manifest)?;
            println!(
                "trained {} epochs, best validation recall@3 {:.4} at epoch {} -> {}",
                outcome.history.len(),
                outcome.best_val_recall,
                outcome.best_epoch,
                config.out_dir
            );
        }
        Command::Evaluate(args) => {
            let config = args.common.resolve(None, None)?;
            let out_dir = PathBuf::from(&config.out_dir);
            let report = run_evaluate(
                &args.checkpoint,
                &args.manifest,
                &config.ks,
                config.relevance,
                &out_dir,
            )?;
            for value in &report.values {
                println!("{}@{} = {:.4} (+/- {:.4})", value.metric, value.k, value.mean, value.std);
            }
            println!(
                "{} users evaluated, {} excluded without relevant candidates",
                report.n_eligible_users, report.n_excluded_users
            );
        }
        Command::Experiment(args) => {
            let config = args
                .common
                .resolve(Some(&args.interactions), args.features.as_deref())?;
            let summary = run_experiment(&config, &args.variants)?;
            println!("variant means over seeds {:?}:", summary.seeds);
            for row in &summary.aggregates {
                println!(
                    "  {:<16} {}@{} = {:.4} (+/- {:.4})",
                    row.variant, row.metric, row.k, row.mean, row.std
                );
            }
            println!("paired t-tests:");
            for row in &summary.t_tests {
                println!(
                    "  {} vs {:<16} {}@{}: t = {:+.3}, p = {:.4}{}",
                    row.variant_a,
                    row.variant_b,
                    row.metric,
                    row.k,
                    row.t,
                    row.p,
                    if row.degenerate { " (degenerate)" } else { "" }
                );
            }
        }
        Command::Synth(args) => {
            let mut config = SynthConfig::default();
            if let Some(v) = args.users {
                config.n_users = v;
            }
            if let Some(v) = args.videos {
                config.n_videos = v;
            }
            if let Some(v) = args.rank {
                config.latent_rank = v;
            }
            if let Some(v) = args.interactions_per_user {
                config.interactions_per_user = v;
            }
            if let Some(v) = args.tau_high {
                config.tau_high = v;
            }
            if let Some(v) = args.tau_low {
                config.tau_low = v;
            }
            if let Some(v) = args.taste_bias {
                config.taste_bias = v;
            }
            if let Some(v) = args.exposure_sharpness {
                config.exposure_sharpness = v;
            }
            if let Some(v) = args.seed {
                config.seed = v;
            }
            if let Some(v) = args.feature_dim {
                config.feature_dim = v;
            }
            if let Some(v) = args.duration_min {
                config.duration_range.0 = v;
            }
            if let Some(v) = args.duration_max {
                config.duration_range.1 = v;
            }
            let (interactions, features) = run_synth(&config, &args.out)?;
            println!(
                "wrote {} and {}",
                interactions.display(),
                features.display()
            );
        }
        Command::Ttest(args) => {
            let rows = run_ttest(&args.a, &args.b)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}
