//! Dual-path two-hop graph convolution and the MLP preference head.

use ndarray::{Array1, Array2, ArrayView1};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{spmm, DualGraphs, SparseMatrix};
use crate::ingest::FeatureTable;

/// Whether initial video embeddings come from a feature file or are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    FixedFeatures,
    #[default]
    LearnableEmbeddings,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::FixedFeatures => "fixed_features",
            FeatureMode::LearnableEmbeddings => "learnable_embeddings",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_features" | "fixed" => Ok(FeatureMode::FixedFeatures),
            "learnable_embeddings" | "learnable" => Ok(FeatureMode::LearnableEmbeddings),
            other => Err(Error::InvalidConfig {
                reason: format!("unknown feature mode {other:?}"),
            }),
        }
    }
}

/// The nonlinearity used in propagation and the prediction head.
/// Fixed per run and recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x` of the pre-activation (0 at the rectifier kink).
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_matrix(self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| self.apply(v))
    }
}

/// All trainable state: initial video embeddings, the four propagation
/// weights and the two prediction-head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// |V| x d; a fixed feature table or a learnable embedding matrix.
    pub h_v0: Array2<f64>,
    pub w_h1: Array2<f64>,
    pub w_l1: Array2<f64>,
    pub w_h2: Array2<f64>,
    pub w_l2: Array2<f64>,
    /// 2d x d hidden layer of the preference head.
    pub w_p1: Array2<f64>,
    /// d x 1 output layer of the preference head.
    pub w_p2: Array2<f64>,
    pub mode: FeatureMode,
    pub activation: Activation,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.h_v0.ncols()
    }

    pub fn n_videos(&self) -> usize {
        self.h_v0.nrows()
    }

    pub fn all_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    fn matrices(&self) -> [&Array2<f64>; 7] {
        [
            &self.h_v0, &self.w_h1, &self.w_l1, &self.w_h2, &self.w_l2, &self.w_p1, &self.w_p2,
        ]
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Array2::from_shape_vec((rows, cols), data).expect("row-major fill")
}

fn glorot_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_matrix(rng, rows, cols, bound)
}

/// Initialize parameters. Weight matrices use uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)); a learnable `h_v0` uses
/// uniform(-0.01, 0.01); in fixed mode `h_v0` is the feature table verbatim.
pub fn init_params(
    d: usize,
    _n_users: usize,
    n_videos: usize,
    seed: u64,
    mode: FeatureMode,
    features: Option<&FeatureTable>,
) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xD0A1);

    let w_h1 = glorot_matrix(&mut rng, d, d);
    let w_l1 = glorot_matrix(&mut rng, d, d);
    let w_h2 = glorot_matrix(&mut rng, d, d);
    let w_l2 = glorot_matrix(&mut rng, d, d);
    let w_p1 = glorot_matrix(&mut rng, 2 * d, d);
    let w_p2 = glorot_matrix(&mut rng, d, 1);

    let h_v0 = match mode {
        FeatureMode::FixedFeatures => {
            let table = features.ok_or(Error::MissingFeatureTable)?;
            if table.dim() != d {
                return Err(Error::ShapeMismatch {
                    context: format!("feature dim {} but configured d {}", table.dim(), d),
                });
            }
            if table.n_videos() != n_videos {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "feature table has {} videos, expected {}",
                        table.n_videos(),
                        n_videos
                    ),
                });
            }
            table.matrix.clone()
        }
        FeatureMode::LearnableEmbeddings => uniform_matrix(&mut rng, n_videos, d, 0.01),
    };

    Ok(ModelParams {
        h_v0,
        w_h1,
        w_l1,
        w_h2,
        w_l2,
        w_p1,
        w_p2,
        mode,
        activation: Activation::Relu,
    })
}

/// First hop: sigma(R~ . H_v0 . W1) -> |U| x d user embeddings.
pub fn propagate_user(
    r_tilde: &SparseMatrix,
    h_v0: &Array2<f64>,
    w1: &Array2<f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    let aggregated = spmm(r_tilde, h_v0)?;
    check_dims(aggregated.ncols(), w1.nrows(), "propagate_user weight")?;
    Ok(activation.apply_matrix(&aggregated.dot(w1)))
}

/// Second hop: sigma(R~^T . H_u . W2) -> |V| x d video embeddings.
pub fn propagate_video(
    r_tilde_t: &SparseMatrix,
    h_u_path: &Array2<f64>,
    w2: &Array2<f64>,
    activation: Activation,
) -> Result<Array2<f64>> {
    let aggregated = spmm(r_tilde_t, h_u_path)?;
    check_dims(aggregated.ncols(), w2.nrows(), "propagate_video weight")?;
    Ok(activation.apply_matrix(&aggregated.dot(w2)))
}

fn check_dims(got: usize, expected: usize, context: &str) -> Result<()> {
    if got != expected {
        return Err(Error::ShapeMismatch {
            context: format!("{context}: {got} vs {expected}"),
        });
    }
    Ok(())
}

/// Elementwise mean of the two path embeddings.
pub fn fuse_mean(x_h: &Array2<f64>, x_l: &Array2<f64>) -> Result<Array2<f64>> {
    if x_h.shape() != x_l.shape() {
        return Err(Error::ShapeMismatch {
            context: format!("fuse_mean: {:?} vs {:?}", x_h.shape(), x_l.shape()),
        });
    }
    Ok((x_h + x_l) / 2.0)
}

/// Per-path and fused user/video embeddings.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub h_u_h: Array2<f64>,
    pub h_u_l: Array2<f64>,
    pub h_v_h: Array2<f64>,
    pub h_v_l: Array2<f64>,
    pub h_u: Array2<f64>,
    pub h_v: Array2<f64>,
}

/// Forward pass intermediates kept for the analytic backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// R~_h . H_v0 and R~_l . H_v0 (neighbor aggregates before weights).
    pub agg_u_h: Array2<f64>,
    pub agg_u_l: Array2<f64>,
    /// Pre-activations of the first hop.
    pub z_u_h: Array2<f64>,
    pub z_u_l: Array2<f64>,
    /// R~_h^T . H_u_h and R~_l^T . H_u_l.
    pub agg_v_h: Array2<f64>,
    pub agg_v_l: Array2<f64>,
    /// Pre-activations of the second hop.
    pub z_v_h: Array2<f64>,
    pub z_v_l: Array2<f64>,
    pub embeddings: Embeddings,
}

/// Full dual-path propagation with cached intermediates. Both paths consume
/// the same initial video embeddings.
pub fn forward_cached(params: &ModelParams, graphs: &DualGraphs) -> Result<ForwardCache> {
    let act = params.activation;

    let agg_u_h = spmm(&graphs.r_tilde_h, &params.h_v0)?;
    let z_u_h = agg_u_h.dot(&params.w_h1);
    let h_u_h = act.apply_matrix(&z_u_h);

    let agg_u_l = spmm(&graphs.r_tilde_l, &params.h_v0)?;
    let z_u_l = agg_u_l.dot(&params.w_l1);
    let h_u_l = act.apply_matrix(&z_u_l);

    let agg_v_h = spmm(&graphs.r_tilde_h_t, &h_u_h)?;
    let z_v_h = agg_v_h.dot(&params.w_h2);
    let h_v_h = act.apply_matrix(&z_v_h);

    let agg_v_l = spmm(&graphs.r_tilde_l_t, &h_u_l)?;
    let z_v_l = agg_v_l.dot(&params.w_l2);
    let h_v_l = act.apply_matrix(&z_v_l);

    let h_u = fuse_mean(&h_u_h, &h_u_l)?;
    let h_v = fuse_mean(&h_v_h, &h_v_l)?;

    Ok(ForwardCache {
        agg_u_h,
        agg_u_l,
        z_u_h,
        z_u_l,
        agg_v_h,
        agg_v_l,
        z_v_h,
        z_v_l,
        embeddings: Embeddings {
            h_u_h,
            h_u_l,
            h_v_h,
            h_v_l,
            h_u,
            h_v,
        },
    })
}

/// Fused user/video embeddings for the given parameters and graphs.
pub fn forward(params: &ModelParams, graphs: &DualGraphs) -> Result<Embeddings> {
    Ok(forward_cached(params, graphs)?.embeddings)
}

/// Raw preference logit for one (user, video) pair:
/// z = w_p2 . sigma(w_p1 . [h_u || h_v]). The sigmoid lives in the losses,
/// never here; it is monotone, so rankings over logits are unchanged.
pub fn predict_score(
    h_u_row: ArrayView1<f64>,
    h_v_row: ArrayView1<f64>,
    w_p1: &Array2<f64>,
    w_p2: &Array2<f64>,
    activation: Activation,
) -> f64 {
    let d = h_u_row.len();
    let hidden = w_p1.ncols();
    let mut z = 0.0;
    for k in 0..hidden {
        let mut pre = 0.0;
        for i in 0..d {
            pre += h_u_row[i] * w_p1[(i, k)];
        }
        for i in 0..d {
            pre += h_v_row[i] * w_p1[(d + i, k)];
        }
        z += activation.apply(pre) * w_p2[(k, 0)];
    }
    z
}

/// Batch scoring; identical to independent `predict_score` calls.
pub fn predict_scores(
    embeddings: &Embeddings,
    pairs: &[(usize, usize)],
    params: &ModelParams,
) -> Array1<f64> {
    Array1::from_iter(pairs.iter().map(|&(u, v)| {
        predict_score(
            embeddings.h_u.row(u),
            embeddings.h_v.row(v),
            &params.w_p1,
            &params.w_p2,
            params.activation,
        )
    }))
}
