//! Reproducible synthetic interaction corpora with three-tier ground-truth
//! preferences and skip timings concentrated in the first few seconds.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{classify, FeatureTable, Interaction, InteractionClass};
use crate::optim::sigmoid;

/// Generator configuration. Affinity tiers map onto interaction classes:
/// at or above `tau_high` the video is watched to completion, between the
/// cutoffs the user skips after the quick-skip window, below `tau_low`
/// the skip lands inside the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub latent_rank: usize,
    pub interactions_per_user: usize,
    pub duration_range: (f64, f64),
    pub tau_high: f64,
    pub tau_low: f64,
    /// Quick skips land in (0, quick_skip_window].
    pub quick_skip_window: f64,
    /// Mean shift of the first user-factor coordinate. A positive value
    /// gives every user some shared taste, so videos vary in base appeal
    /// the way viral micro-video catalogs do.
    pub taste_bias: f64,
    /// Exposure weighting: a user's interacted videos are drawn without
    /// replacement with weight exp(sharpness * u.v), mimicking a curated
    /// feed. Zero recovers uniform exposure.
    pub exposure_sharpness: f64,
    /// Dimension of the emitted feature rows.
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_videos: 1000,
            latent_rank: 8,
            interactions_per_user: 30,
            duration_range: (5.0, 60.0),
            tau_high: 0.85,
            tau_low: 0.5,
            quick_skip_window: 5.0,
            taste_bias: 1.0,
            exposure_sharpness: 0.5,
            feature_dim: 128,
            feature_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low > 0.0 && self.tau_low < self.tau_high && self.tau_high < 1.0) {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "affinity cutoffs must satisfy 0 < tau_low < tau_high < 1, got ({}, {})",
                    self.tau_low, self.tau_high
                ),
            });
        }
        let (lo, hi) = self.duration_range;
        if lo < self.quick_skip_window {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "duration lower bound {lo} is below the quick-skip window \
                     {}; delayed-skip sampling would be degenerate",
                    self.quick_skip_window
                ),
            });
        }
        if !(lo < hi && hi <= 60.0 && lo >= 5.0) {
            return Err(Error::InvalidConfig {
                reason: format!("duration range must lie within [5, 60], got ({lo}, {hi})"),
            });
        }
        if self.n_users == 0 || self.n_videos == 0 || self.interactions_per_user == 0 {
            return Err(Error::InvalidConfig {
                reason: "corpus dimensions must be positive".into(),
            });
        }
        if self.interactions_per_user > self.n_videos {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "interactions_per_user {} exceeds catalog size {}",
                    self.interactions_per_user, self.n_videos
                ),
            });
        }
        Ok(())
    }
}

/// Ground truth behind a generated corpus: the latent factors whose dot
/// products define per-pair affinities sigmoid(u . v).
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub user_factors: Array2<f64>,
    pub video_factors: Array2<f64>,
}

impl SynthTruth {
    pub fn affinity(&self, user: usize, video: usize) -> f64 {
        let dot = self
            .user_factors
            .row(user)
            .iter()
            .zip(self.video_factors.row(video).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        sigmoid(dot)
    }
}

/// A generated corpus: the interactions CSV bytes, the feature table and
/// the latent ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub interactions_csv: String,
    pub features: FeatureTable,
    pub truth: SynthTruth,
    pub interactions: Vec<Interaction>,
}

/// Which affinity tier a pair falls into.
fn tier(affinity: f64, config: &SynthConfig) -> InteractionClass {
    if affinity >= config.tau_high {
        InteractionClass::HighlyPositive
    } else if affinity >= config.tau_low {
        InteractionClass::LessPositive
    } else {
        InteractionClass::Negative
    }
}

/// Playing time for a tier given a unit sample in [0, 1). Complete views
/// replay the full duration; delayed skips land strictly inside
/// (window, duration); quick skips land in (0, window].
pub fn playing_time_for_tier(
    class: InteractionClass,
    duration: f64,
    window: f64,
    unit: f64,
) -> f64 {
    match class {
        InteractionClass::HighlyPositive => duration,
        InteractionClass::LessPositive => {
            let mut t = window + (duration - window) * unit;
            // unit rounding can pin t to an interval endpoint; nudge inward
            if t <= window || t >= duration {
                t = window + (duration - window) * 0.5;
            }
            t
        }
        InteractionClass::Negative => window * (1.0 - unit),
    }
}

/// Latent factor scale chosen so dot products spread across the sigmoid.
const FACTOR_STD: f64 = 0.75;

/// Weighted sampling without replacement via Gumbel top-k: key(v) =
/// sharpness * u.v + Gumbel noise, take the `interactions_per_user`
/// largest keys.
fn sample_exposed_videos(
    user: usize,
    config: &SynthConfig,
    truth: &SynthTruth,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let u_row = truth.user_factors.row(user);
    let mut keyed: Vec<(f64, usize)> = (0..config.n_videos)
        .map(|v| {
            let dot: f64 = u_row
                .iter()
                .zip(truth.video_factors.row(v).iter())
                .map(|(a, b)| a * b)
                .sum();
            let uniform: f64 = rng.gen();
            let gumbel = -(-uniform.ln()).ln();
            (config.exposure_sharpness * dot + gumbel, v)
        })
        .collect();
    keyed.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    keyed
        .into_iter()
        .take(config.interactions_per_user)
        .map(|(_, v)| v)
        .collect()
}

/// Generate a corpus. Each user interacts with `interactions_per_user`
/// distinct videos on an independent seeded substream; regenerating with
/// the same config yields byte-identical CSV output.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let normal = Normal::new(0.0, FACTOR_STD).expect("valid std");

    let mut factor_rng = ChaCha8Rng::seed_from_u64(config.seed);
    factor_rng.set_stream(1);
    let user_factors = Array2::from_shape_fn((config.n_users, config.latent_rank), |(_, k)| {
        let bias = if k == 0 { config.taste_bias } else { 0.0 };
        bias + normal.sample(&mut factor_rng)
    });
    let video_factors = Array2::from_shape_fn((config.n_videos, config.latent_rank), |_| {
        normal.sample(&mut factor_rng)
    });
    let truth = SynthTruth {
        user_factors,
        video_factors,
    };

    let mut feature_rng = ChaCha8Rng::seed_from_u64(config.seed);
    feature_rng.set_stream(2);
    let proj_dist = Normal::new(0.0, 1.0 / (config.latent_rank as f64).sqrt()).expect("valid std");
    let projection = Array2::from_shape_fn((config.latent_rank, config.feature_dim), |_| {
        proj_dist.sample(&mut feature_rng)
    });
    let mut features = truth.video_factors.dot(&projection);
    let noise = Normal::new(0.0, config.feature_noise).expect("valid std");
    for x in features.iter_mut() {
        *x += noise.sample(&mut feature_rng);
    }

    let (lo, hi) = config.duration_range;
    let mut interactions = Vec::with_capacity(config.n_users * config.interactions_per_user);
    for u in 0..config.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(16 + u as u64);
        let videos = sample_exposed_videos(u, config, &truth, &mut rng);
        for (i, v) in videos.into_iter().enumerate() {
            let duration = rng.gen_range(lo..hi);
            let affinity = truth.affinity(u, v);
            let class = tier(affinity, config);
            let unit: f64 = rng.gen();
            let playing_time =
                playing_time_for_tier(class, duration, config.quick_skip_window, unit);
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                video_id: format!("v{v}"),
                playing_time,
                duration,
                timestamp: (u * config.interactions_per_user + i) as i64,
            });
        }
    }

    let mut csv = String::from("user_id,video_id,playing_time,duration,timestamp\n");
    for it in &interactions {
        writeln!(
            csv,
            "{},{},{},{},{}",
            it.user_id, it.video_id, it.playing_time, it.duration, it.timestamp
        )
        .expect("string write");
    }

    Ok(SynthOutput {
        interactions_csv: csv,
        features: FeatureTable { matrix: features },
        truth,
        interactions,
    })
}

/// Render the feature table in the ingest CSV format.
pub fn features_csv(features: &FeatureTable, video_ids: impl Iterator<Item = String>) -> String {
    let d = features.dim();
    let mut out = String::from("video_id");
    for j in 0..d {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for (row, id) in video_ids.enumerate() {
        out.push_str(&id);
        for j in 0..d {
            write!(out, ",{}", features.matrix[(row, j)]).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Class counts of a corpus after classification at `threshold`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierHistogram {
    pub highly: usize,
    pub less: usize,
    pub negative: usize,
}

impl TierHistogram {
    pub fn total(&self) -> usize {
        self.highly + self.less + self.negative
    }
}

pub fn tier_histogram(interactions: &[Interaction], threshold: f64) -> TierHistogram {
    let mut hist = TierHistogram::default();
    for it in interactions {
        match classify(it, threshold) {
            InteractionClass::HighlyPositive => hist.highly += 1,
            InteractionClass::LessPositive => hist.less += 1,
            InteractionClass::Negative => hist.negative += 1,
        }
    }
    hist
}
