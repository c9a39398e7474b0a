//! File-based orchestration: split manifests, checkpoints, training runs,
//! evaluation reports and the paired multi-variant experiment grid.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate, paired_t_test, MetricsReport, RelevanceRule,
};
use crate::graph::{build_graphs, GraphMode};
use crate::ingest::{
    deduplicate_and_label, load_features, parse_interactions, split_per_user, user_profiles,
    DatasetSplit, FeatureTable, IdMaps, InteractionClass, LabeledPair,
};
use crate::model::{forward, init_params, Activation, FeatureMode, ModelParams};
use crate::optim::{train, BprMode, TrainConfig, TrainOutcome};
use crate::synth::{features_csv, generate, tier_histogram, SynthConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Full run configuration: training hyperparameters plus dataset paths,
/// feature mode, output directory, repeat count and metric flags.
/// Serialized flat alongside every run for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub interactions: Option<String>,
    pub features: Option<String>,
    pub feature_mode: FeatureMode,
    pub out_dir: String,
    pub repeats: usize,
    pub ks: Vec<usize>,
    pub relevance: RelevanceRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            interactions: None,
            features: None,
            feature_mode: FeatureMode::LearnableEmbeddings,
            out_dir: "runs".into(),
            repeats: 10,
            ks: vec![3, 5],
            relevance: RelevanceRule::HighlyOnly,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.feature_mode == FeatureMode::FixedFeatures && self.features.is_none() {
            return Err(Error::InvalidConfig {
                reason: "fixed feature mode requires a features path".into(),
            });
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig {
                reason: "metric cutoffs must be positive".into(),
            });
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig {
                reason: "repeats must be positive".into(),
            });
        }
        Ok(())
    }

    /// Load a JSON config file with flat keys; missing keys take defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-pair split assignment written by `prepare`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAssignment {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPair {
    pub user: usize,
    pub video: usize,
    pub class: InteractionClass,
    pub split: SplitAssignment,
}

/// The persisted split: id maps in dense order plus every labeled pair
/// with its assignment. Rebuilding graphs from this file alone is enough
/// to reproduce training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split_seed: u64,
    pub threshold: f64,
    pub ratios: (f64, f64, f64),
    pub users: Vec<String>,
    pub videos: Vec<String>,
    pub pairs: Vec<ManifestPair>,
}

impl SplitManifest {
    pub fn from_split(id_maps: &IdMaps, split: &DatasetSplit, threshold: f64) -> Self {
        let mut pairs = Vec::with_capacity(
            split.train.len() + split.validation.len() + split.test.len(),
        );
        let mut push = |list: &[LabeledPair], assignment: SplitAssignment| {
            for p in list {
                pairs.push(ManifestPair {
                    user: p.user_index,
                    video: p.video_index,
                    class: p.class,
                    split: assignment,
                });
            }
        };
        push(&split.train, SplitAssignment::Train);
        push(&split.validation, SplitAssignment::Validation);
        push(&split.test, SplitAssignment::Test);
        pairs.sort_by_key(|p| (p.user, p.video));
        SplitManifest {
            split_seed: split.split_seed,
            threshold,
            ratios: SPLIT_RATIOS,
            users: id_maps.users.clone(),
            videos: id_maps.videos.clone(),
            pairs,
        }
    }

    pub fn to_split(&self) -> DatasetSplit {
        let mut split = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            split_seed: self.split_seed,
        };
        for p in &self.pairs {
            let pair = LabeledPair::new(p.user, p.video, p.class);
            match p.split {
                SplitAssignment::Train => split.train.push(pair),
                SplitAssignment::Validation => split.validation.push(pair),
                SplitAssignment::Test => split.test.push(pair),
            }
        }
        split
    }

    pub fn id_maps(&self) -> IdMaps {
        IdMaps::from_lists(self.users.clone(), self.videos.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Dataset statistics written next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareStats {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_interactions: usize,
    pub n_pairs: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub split_sizes: BTreeMap<String, usize>,
    pub users_without_train_pairs: usize,
}

/// Row-major matrix payload of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    fn from_array(a: &Array2<f64>) -> Self {
        MatrixData {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::ShapeMismatch {
                context: format!("checkpoint matrix {}x{}", self.rows, self.cols),
            }
        })
    }
}

/// Persisted model state; round-trips to bitwise-equal parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub feature_mode: FeatureMode,
    pub activation: String,
    pub d: usize,
    pub n_users: usize,
    pub n_videos: usize,
    pub config: TrainConfig,
    pub h_v0: MatrixData,
    pub w_h1: MatrixData,
    pub w_l1: MatrixData,
    pub w_h2: MatrixData,
    pub w_l2: MatrixData,
    pub w_p1: MatrixData,
    pub w_p2: MatrixData,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, config: &TrainConfig, n_users: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            feature_mode: params.mode,
            activation: params.activation.name().to_string(),
            d: params.dim(),
            n_users,
            n_videos: params.n_videos(),
            config: config.clone(),
            h_v0: MatrixData::from_array(&params.h_v0),
            w_h1: MatrixData::from_array(&params.w_h1),
            w_l1: MatrixData::from_array(&params.w_l1),
            w_h2: MatrixData::from_array(&params.w_h2),
            w_l2: MatrixData::from_array(&params.w_l2),
            w_p1: MatrixData::from_array(&params.w_p1),
            w_p2: MatrixData::from_array(&params.w_p2),
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                got: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if self.activation != Activation::Relu.name() {
            return Err(Error::InvalidConfig {
                reason: format!("unknown activation {:?}", self.activation),
            });
        }
        Ok(ModelParams {
            h_v0: self.h_v0.to_array()?,
            w_h1: self.w_h1.to_array()?,
            w_l1: self.w_l1.to_array()?,
            w_h2: self.w_h2.to_array()?,
            w_l2: self.w_l2.to_array()?,
            w_p1: self.w_p1.to_array()?,
            w_p2: self.w_p2.to_array()?,
            mode: self.feature_mode,
            activation: Activation::Relu,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

fn write_history(path: &Path, history: &[crate::optim::EpochRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    for record in history {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// `variant,seed,metric,k,value` rows for one report.
fn metrics_csv_rows(report: &MetricsReport) -> String {
    let mut out = String::new();
    for v in &report.values {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.variant, report.seed, v.metric, v.k, v.mean
        ));
    }
    out
}

fn write_metrics_csv(path: &Path, reports: &[&MetricsReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut content = String::from("variant,seed,metric,k,value\n");
    for report in reports {
        content.push_str(&metrics_csv_rows(report));
    }
    fs::write(path, content)?;
    Ok(())
}

/// Parse, label, split and persist a dataset.
/// Writes `manifest.json`, `stats.json` and `run_config.json` to `out_dir`.
pub fn run_prepare(config: &RunConfig) -> Result<(SplitManifest, PrepareStats)> {
    config.validate()?;
    let interactions_path = config.interactions.as_ref().ok_or(Error::InvalidConfig {
        reason: "prepare requires an interactions path".into(),
    })?;
    let file = fs::File::open(interactions_path)?;
    let interactions = parse_interactions(file)?;
    let id_maps = IdMaps::from_interactions(&interactions);
    let pairs = deduplicate_and_label(&interactions, &id_maps, config.train.threshold)?;
    if config.feature_mode == FeatureMode::FixedFeatures {
        // fail early if the table is unusable before any training run
        let features_path = config.features.as_ref().expect("validated above");
        let table = load_features(fs::File::open(features_path)?, &id_maps)?;
        if table.dim() != config.train.d {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "feature dim {} but configured d {}",
                    table.dim(),
                    config.train.d
                ),
            });
        }
    }
    let split = split_per_user(&pairs, SPLIT_RATIOS, config.train.seed);
    let manifest = SplitManifest::from_split(&id_maps, &split, config.train.threshold);

    let profiles = user_profiles(&pairs, id_maps.n_users());
    let train_pairs_per_user = {
        let mut counts = vec![0usize; id_maps.n_users()];
        for p in &split.train {
            counts[p.user_index] += 1;
        }
        counts
    };
    let mut class_counts = BTreeMap::new();
    class_counts.insert(
        "highly_positive".to_string(),
        profiles.iter().map(|p| p.n_highly).sum(),
    );
    class_counts.insert(
        "less_positive".to_string(),
        profiles.iter().map(|p| p.n_less).sum(),
    );
    class_counts.insert(
        "negative".to_string(),
        profiles.iter().map(|p| p.n_negative).sum(),
    );
    let mut split_sizes = BTreeMap::new();
    split_sizes.insert("train".to_string(), split.train.len());
    split_sizes.insert("validation".to_string(), split.validation.len());
    split_sizes.insert("test".to_string(), split.test.len());
    let stats = PrepareStats {
        n_users: id_maps.n_users(),
        n_videos: id_maps.n_videos(),
        n_interactions: interactions.len(),
        n_pairs: pairs.len(),
        class_counts,
        split_sizes,
        users_without_train_pairs: train_pairs_per_user.iter().filter(|&&c| c == 0).count(),
    };

    let out_dir = Path::new(&config.out_dir);
    manifest.save(&out_dir.join("manifest.json"))?;
    write_json(&out_dir.join("stats.json"), &stats)?;
    write_json(&out_dir.join("run_config.json"), config)?;
    Ok((manifest, stats))
}

fn load_feature_table(config: &RunConfig, id_maps: &IdMaps) -> Result<Option<FeatureTable>> {
    match (config.feature_mode, config.features.as_ref()) {
        (FeatureMode::FixedFeatures, Some(path)) => {
            let table = load_features(fs::File::open(path)?, id_maps)?;
            Ok(Some(table))
        }
        (FeatureMode::FixedFeatures, None) => Err(Error::MissingFeatureTable),
        (FeatureMode::LearnableEmbeddings, _) => Ok(None),
    }
}

/// Train on a prepared split and write `checkpoint.json`, `history.jsonl`
/// and `run_config.json` to `out_dir`.
pub fn run_train(config: &RunConfig, manifest_path: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = SplitManifest::load(manifest_path)?;
    let id_maps = manifest.id_maps();
    let split = manifest.to_split();
    let features = load_feature_table(config, &id_maps)?;
    let outcome = train_in_memory(&config.train, config.feature_mode, features.as_ref(), &split,
        id_maps.n_users(), id_maps.n_videos())?;

    let out_dir = Path::new(&config.out_dir);
    let checkpoint = Checkpoint::from_params(&outcome.params, &config.train, id_maps.n_users());
    checkpoint.save(&out_dir.join("checkpoint.json"))?;
    write_history(&out_dir.join("history.jsonl"), &outcome.history)?;
    write_json(&out_dir.join("run_config.json"), config)?;
    Ok(outcome)
}

/// Build graphs, initialize parameters and run the training loop.
pub fn train_in_memory(
    config: &TrainConfig,
    feature_mode: FeatureMode,
    features: Option<&FeatureTable>,
    split: &DatasetSplit,
    n_users: usize,
    n_videos: usize,
) -> Result<TrainOutcome> {
    let graphs = build_graphs(&split.train, n_users, n_videos, config.graph_mode)?;
    let params = init_params(config.d, n_users, n_videos, config.seed, feature_mode, features)?;
    train(config, split, &graphs, params)
}

/// Score the test pairs of a split with a checkpointed model and write
/// `metrics.csv` and `metrics.json` to `out_dir`.
pub fn run_evaluate(
    checkpoint_path: &Path,
    manifest_path: &Path,
    ks: &[usize],
    relevance: RelevanceRule,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let params = checkpoint.to_params()?;
    let manifest = SplitManifest::load(manifest_path)?;
    let split = manifest.to_split();
    let report = evaluate_in_memory(&params, &checkpoint.config, &split, ks, relevance)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &[&report])?;
    write_json(&out_dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Rebuild graphs from the split, run the forward pass and compute metrics.
pub fn evaluate_in_memory(
    params: &ModelParams,
    config: &TrainConfig,
    split: &DatasetSplit,
    ks: &[usize],
    relevance: RelevanceRule,
) -> Result<MetricsReport> {
    let n_videos = params.n_videos();
    let n_users = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .map(|p| p.user_index + 1)
        .max()
        .unwrap_or(0);
    let graphs = build_graphs(&split.train, n_users, n_videos, config.graph_mode)?;
    let embeddings = forward(params, &graphs)?;
    evaluate(params, &embeddings, split, ks, relevance)
}

/// A named experiment arm: ablation variants toggle either the graph
/// construction or the ranking loss, everything else stays fixed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub graph_mode: GraphMode,
    pub bpr_mode: BprMode,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        let (graph_mode, bpr_mode) = match name {
            "dual" => (GraphMode::Dual, BprMode::Hierarchical),
            "total" => (GraphMode::Total, BprMode::Hierarchical),
            "highly_only" => (GraphMode::HighlyOnly, BprMode::Hierarchical),
            "hierarchical" => (GraphMode::Dual, BprMode::Hierarchical),
            "unseen_negative" => (GraphMode::Dual, BprMode::UnseenNegative),
            other => {
                return Err(Error::InvalidConfig {
                    reason: format!(
                        "unknown variant {other:?} (expected dual, total, highly_only, \
                         hierarchical or unseen_negative)"
                    ),
                })
            }
        };
        Ok(Variant {
            name: name.to_string(),
            graph_mode,
            bpr_mode,
        })
    }
}

/// Aggregated mean and standard deviation of one metric for one variant
/// across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

/// Paired t-test between two variants on one metric across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestRow {
    pub variant_a: String,
    pub variant_b: String,
    pub metric: String,
    pub k: usize,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub degenerate: bool,
}

/// Everything an experiment produces besides the on-disk run directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub aggregates: Vec<AggregateRow>,
    pub t_tests: Vec<TTestRow>,
    pub reports: Vec<MetricsReport>,
}

impl ExperimentSummary {
    pub fn aggregate_mean(&self, variant: &str, metric: &str, k: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.metric == metric && a.k == k)
            .map(|a| a.mean)
    }

    pub fn t_test(&self, a: &str, b: &str, metric: &str, k: usize) -> Option<&TTestRow> {
        self.t_tests.iter().find(|r| {
            r.variant_a == a && r.variant_b == b && r.metric == metric && r.k == k
        })
    }
}

/// Run every variant across `repeats` seeds on identical per-seed splits,
/// then aggregate means and paired t-tests per metric. Run directories
/// follow `<out>/<variant>/<seed>/`.
pub fn run_experiment(config: &RunConfig, variant_names: &[String]) -> Result<ExperimentSummary> {
    config.validate()?;
    if variant_names.len() < 2 {
        return Err(Error::InvalidConfig {
            reason: "an experiment needs at least 2 variants".into(),
        });
    }
    if config.repeats < 2 {
        return Err(Error::TooFewRuns {
            got: config.repeats,
        });
    }
    let variants: Vec<Variant> = variant_names
        .iter()
        .map(|n| Variant::parse(n))
        .collect::<Result<_>>()?;

    let interactions_path = config.interactions.as_ref().ok_or(Error::InvalidConfig {
        reason: "experiment requires an interactions path".into(),
    })?;
    let interactions = parse_interactions(fs::File::open(interactions_path)?)?;
    let id_maps = IdMaps::from_interactions(&interactions);
    let pairs = deduplicate_and_label(&interactions, &id_maps, config.train.threshold)?;
    let features = load_feature_table(config, &id_maps)?;

    let out_dir = Path::new(&config.out_dir);
    let seeds: Vec<u64> = (0..config.repeats)
        .map(|i| config.train.seed + i as u64)
        .collect();

    let mut reports: Vec<MetricsReport> = Vec::new();
    for &seed in &seeds {
        let split = split_per_user(&pairs, SPLIT_RATIOS, seed);
        for variant in &variants {
            let mut train_config = config.train.clone();
            train_config.seed = seed;
            train_config.graph_mode = variant.graph_mode;
            train_config.bpr_mode = variant.bpr_mode;

            let outcome = train_in_memory(
                &train_config,
                config.feature_mode,
                features.as_ref(),
                &split,
                id_maps.n_users(),
                id_maps.n_videos(),
            )?;
            let mut report = evaluate_in_memory(
                &outcome.params,
                &train_config,
                &split,
                &config.ks,
                config.relevance,
            )?;
            report.variant = variant.name.clone();
            report.seed = seed;

            let cell_dir = out_dir.join(&variant.name).join(seed.to_string());
            let checkpoint =
                Checkpoint::from_params(&outcome.params, &train_config, id_maps.n_users());
            checkpoint.save(&cell_dir.join("checkpoint.json"))?;
            write_history(&cell_dir.join("history.jsonl"), &outcome.history)?;
            write_metrics_csv(&cell_dir.join("metrics.csv"), &[&report])?;
            reports.push(report);
        }
    }

    let summary = summarize_experiment(&variants, &seeds, reports)?;
    write_metrics_csv(
        &out_dir.join("metrics.csv"),
        &summary.reports.iter().collect::<Vec<_>>(),
    )?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_json(&out_dir.join("run_config.json"), config)?;
    Ok(summary)
}

fn summarize_experiment(
    variants: &[Variant],
    seeds: &[u64],
    reports: Vec<MetricsReport>,
) -> Result<ExperimentSummary> {
    let mut aggregates = Vec::new();
    let mut t_tests = Vec::new();
    let metric_keys: Vec<(String, usize)> = reports
        .first()
        .map(|r| r.values.iter().map(|v| (v.metric.clone(), v.k)).collect())
        .unwrap_or_default();

    let series = |variant: &str, metric: &str, k: usize| -> Vec<f64> {
        seeds
            .iter()
            .map(|&seed| {
                reports
                    .iter()
                    .find(|r| r.variant == variant && r.seed == seed)
                    .and_then(|r| r.get(metric, k))
                    .expect("every (variant, seed) cell has a report")
            })
            .collect()
    };

    for variant in variants {
        for (metric, k) in &metric_keys {
            let xs = series(&variant.name, metric, *k);
            let (mean, std) = crate::eval::mean_std(&xs);
            aggregates.push(AggregateRow {
                variant: variant.name.clone(),
                metric: metric.clone(),
                k: *k,
                mean,
                std,
            });
        }
    }
    for i in 0..variants.len() {
        for j in (i + 1)..variants.len() {
            for (metric, k) in &metric_keys {
                let a = series(&variants[i].name, metric, *k);
                let b = series(&variants[j].name, metric, *k);
                let result = paired_t_test(&a, &b)?;
                t_tests.push(TTestRow {
                    variant_a: variants[i].name.clone(),
                    variant_b: variants[j].name.clone(),
                    metric: metric.clone(),
                    k: *k,
                    t: result.t,
                    df: result.df,
                    p: result.p,
                    degenerate: result.degenerate,
                });
            }
        }
    }
    Ok(ExperimentSummary {
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        seeds: seeds.to_vec(),
        aggregates,
        t_tests,
        reports,
    })
}

/// Generate a synthetic dataset; writes `interactions.csv`, `features.csv`
/// and `synth_config.json` to `out_dir`. Returns the two CSV paths.
pub fn run_synth(config: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let output = generate(config)?;
    fs::create_dir_all(out_dir)?;
    let interactions_path = out_dir.join("interactions.csv");
    fs::write(&interactions_path, &output.interactions_csv)?;
    let features_path = out_dir.join("features.csv");
    let csv = features_csv(
        &output.features,
        (0..config.n_videos).map(|v| format!("v{v}")),
    );
    fs::write(&features_path, csv)?;
    write_json(&out_dir.join("synth_config.json"), config)?;
    write_json(
        &out_dir.join("tier_histogram.json"),
        &tier_histogram(&output.interactions, config.quick_skip_window),
    )?;
    Ok((interactions_path, features_path))
}

/// Paired t-tests between two per-seed metrics CSV files
/// (`variant,seed,metric,k,value`), paired by seed per metric.
pub fn run_ttest(a_path: &Path, b_path: &Path) -> Result<Vec<TTestRow>> {
    let a = read_metric_series(a_path)?;
    let b = read_metric_series(b_path)?;
    let mut rows = Vec::new();
    for ((metric, k), series_a) in &a {
        let Some(series_b) = b.get(&(metric.clone(), *k)) else {
            continue;
        };
        let seeds_a: Vec<u64> = series_a.iter().map(|(s, _)| *s).collect();
        let seeds_b: Vec<u64> = series_b.iter().map(|(s, _)| *s).collect();
        if seeds_a != seeds_b {
            return Err(Error::InvalidConfig {
                reason: format!("seed sets differ for metric {metric}@{k}"),
            });
        }
        let xs: Vec<f64> = series_a.iter().map(|(_, v)| *v).collect();
        let ys: Vec<f64> = series_b.iter().map(|(_, v)| *v).collect();
        let result = paired_t_test(&xs, &ys)?;
        rows.push(TTestRow {
            variant_a: a_path.display().to_string(),
            variant_b: b_path.display().to_string(),
            metric: metric.clone(),
            k: *k,
            t: result.t,
            df: result.df,
            p: result.p,
            degenerate: result.degenerate,
        });
    }
    Ok(rows)
}

type MetricSeries = BTreeMap<(String, usize), Vec<(u64, f64)>>;

fn read_metric_series(path: &Path) -> Result<MetricSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(fs::File::open(path)?);
    let mut series: MetricSeries = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |field: &str| Error::InvalidField {
            line,
            field: field.to_string(),
            reason: "metrics csv".into(),
        };
        let seed: u64 = record[1].parse().map_err(|_| parse_err("seed"))?;
        let metric = record[2].to_string();
        let k: usize = record[3].parse().map_err(|_| parse_err("k"))?;
        let value: f64 = record[4].parse().map_err(|_| parse_err("value"))?;
        series.entry((metric, k)).or_default().push((seed, value));
    }
    for values in series.values_mut() {
        values.sort_by_key(|(seed, _)| *seed);
    }
    Ok(series)
}
