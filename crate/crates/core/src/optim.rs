//! Triplet sampling, the hierarchical ranking + classification loss, exact
//! analytic gradients, AdamW with a cosine schedule, and the training loop.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{macro_recall_at_k, RelevanceRule};
use crate::graph::{spmm, DualGraphs, GraphMode};
use crate::ingest::{DatasetSplit, InteractionClass, LabeledPair};
use crate::model::{forward_cached, FeatureMode, ForwardCache, ModelParams};

/// Which ranking loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BprMode {
    /// Two pairwise terms (highly vs less, highly vs negative), averaged.
    #[default]
    Hierarchical,
    /// Single pairwise term with negatives drawn from unseen videos.
    UnseenNegative,
}

impl BprMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BprMode::Hierarchical => "hierarchical",
            BprMode::UnseenNegative => "unseen_negative",
        }
    }
}

impl std::str::FromStr for BprMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(BprMode::Hierarchical),
            "unseen_negative" => Ok(BprMode::UnseenNegative),
            other => Err(Error::InvalidConfig {
                reason: format!("unknown bpr mode {other:?}"),
            }),
        }
    }
}

/// Training hyperparameters. Defaults follow the experimental protocol:
/// batch 1024, at most 30 epochs, patience 5 on validation recall@3,
/// lambda 0.5, d 128, AdamW with cosine annealing from 1e-3 to 1e-6.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
    pub d: usize,
    pub graph_mode: GraphMode,
    pub bpr_mode: BprMode,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            batch_size: 1024,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            threshold: 5.0,
            d: 128,
            graph_mode: GraphMode::Dual,
            bpr_mode: BprMode::Hierarchical,
            lr0: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig {
                reason: format!("lambda must be in [0, 1], got {}", self.lambda),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                reason: "batch_size must be positive".into(),
            });
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig {
                reason: "d must be positive".into(),
            });
        }
        if self.threshold <= 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("threshold must be positive, got {}", self.threshold),
            });
        }
        Ok(())
    }
}

/// One training sample. In hierarchical mode the anchor is a highly
/// positive train pair joined by one less positive and one negative item
/// when the user's pools allow it. In the unseen-negative ablation the
/// anchor is any train interaction (the conventional playing-time-blind
/// positive) and `negative` holds the drawn unseen video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub anchor: usize,
    /// Skip label of the anchor interaction: 1 for highly positive.
    pub anchor_label: u8,
    pub less: Option<usize>,
    pub negative: Option<usize>,
}

/// Per-user class pools over train pairs.
#[derive(Debug, Clone)]
pub struct TripletPools {
    pub highly: Vec<Vec<usize>>,
    pub less: Vec<Vec<usize>>,
    pub negative: Vec<Vec<usize>>,
}

impl TripletPools {
    pub fn from_train_pairs(pairs: &[LabeledPair], n_users: usize) -> Self {
        let mut pools = TripletPools {
            highly: vec![Vec::new(); n_users],
            less: vec![Vec::new(); n_users],
            negative: vec![Vec::new(); n_users],
        };
        for p in pairs {
            match p.class {
                InteractionClass::HighlyPositive => pools.highly[p.user_index].push(p.video_index),
                InteractionClass::LessPositive => pools.less[p.user_index].push(p.video_index),
                InteractionClass::Negative => pools.negative[p.user_index].push(p.video_index),
            }
        }
        for pool in pools
            .highly
            .iter_mut()
            .chain(pools.less.iter_mut())
            .chain(pools.negative.iter_mut())
        {
            pool.sort_unstable();
        }
        pools
    }

    pub fn n_anchor_pairs(&self) -> usize {
        self.highly.iter().map(Vec::len).sum()
    }
}

/// One triplet per train highly-positive pair: the companion items are
/// sampled uniformly from the user's pools, absent when a pool is empty.
pub fn sample_triplets(pools: &TripletPools, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    let mut triplets = Vec::with_capacity(pools.n_anchor_pairs());
    for user in 0..pools.highly.len() {
        for &highly in &pools.highly[user] {
            let less_pool = &pools.less[user];
            let neg_pool = &pools.negative[user];
            let less = (!less_pool.is_empty()).then(|| less_pool[rng.gen_range(0..less_pool.len())]);
            let negative =
                (!neg_pool.is_empty()).then(|| neg_pool[rng.gen_range(0..neg_pool.len())]);
            triplets.push(Triplet {
                user,
                anchor: highly,
                anchor_label: 1,
                less,
                negative,
            });
        }
    }
    triplets
}

const UNSEEN_SAMPLE_CAP: usize = 100;

/// Conventional-BPR ablation sampling: one (anchor, unseen negative) pair
/// per train interaction of any class, the negative rejection-sampled from
/// videos the user has never interacted with. Returns the triplets and the
/// count of anchors skipped because sampling failed within the cap.
pub fn sample_unseen_triplets(
    pools: &TripletPools,
    seen: &[Vec<usize>],
    n_videos: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Triplet>, usize) {
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for user in 0..pools.highly.len() {
        let mut anchors: Vec<(usize, u8)> = pools.highly[user]
            .iter()
            .map(|&v| (v, 1u8))
            .chain(pools.less[user].iter().map(|&v| (v, 0u8)))
            .chain(pools.negative[user].iter().map(|&v| (v, 0u8)))
            .collect();
        anchors.sort_unstable();
        for (anchor, anchor_label) in anchors {
            let mut drawn = None;
            for _ in 0..UNSEEN_SAMPLE_CAP {
                let v = rng.gen_range(0..n_videos);
                if seen[user].binary_search(&v).is_err() {
                    drawn = Some(v);
                    break;
                }
            }
            match drawn {
                Some(v) => triplets.push(Triplet {
                    user,
                    anchor,
                    anchor_label,
                    less: None,
                    negative: Some(v),
                }),
                None => skipped += 1,
            }
        }
    }
    (triplets, skipped)
}

/// Sorted per-user sets of every video the user interacted with, across all
/// three split partitions.
pub fn seen_videos(split: &DatasetSplit, n_users: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![Vec::new(); n_users];
    for p in split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
    {
        seen[p.user_index].push(p.video_index);
    }
    for s in &mut seen {
        s.sort_unstable();
        s.dedup();
    }
    seen
}

/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^(-|x|)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -ln sigmoid(z_pos - z_neg), computed as softplus(z_neg - z_pos).
pub fn bpr_pair_loss(z_pos: f64, z_neg: f64) -> f64 {
    softplus(z_neg - z_pos)
}

/// Binary cross-entropy on a raw logit, in the stable softplus form.
pub fn bce_loss(z: f64, y: u8) -> f64 {
    if y == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// lambda * bpr + (1 - lambda) * bce.
pub fn combined_loss(bpr: f64, bce: f64, lambda: f64) -> f64 {
    lambda * bpr + (1.0 - lambda) * bce
}

/// Hierarchical ranking loss over batch triplet scores (z_h, z_l, z_n).
/// Each term is the mean over its present pairs; an all-absent term
/// contributes zero but the final halving remains.
pub fn hierarchical_bpr(triplet_scores: &[(f64, Option<f64>, Option<f64>)]) -> (f64, f64, f64) {
    let mut sum_hl = 0.0;
    let mut n_hl = 0usize;
    let mut sum_hn = 0.0;
    let mut n_hn = 0usize;
    for &(z_h, z_l, z_n) in triplet_scores {
        if let Some(z_l) = z_l {
            sum_hl += bpr_pair_loss(z_h, z_l);
            n_hl += 1;
        }
        if let Some(z_n) = z_n {
            sum_hn += bpr_pair_loss(z_h, z_n);
            n_hn += 1;
        }
    }
    let bpr_hl = if n_hl > 0 { sum_hl / n_hl as f64 } else { 0.0 };
    let bpr_hn = if n_hn > 0 { sum_hn / n_hn as f64 } else { 0.0 };
    (bpr_hl, bpr_hn, (bpr_hl + bpr_hn) / 2.0)
}

/// Loss components of one batch. In hierarchical mode
/// `bpr = (bpr_hl + bpr_hn) / 2`; in the unseen-negative ablation the
/// single ranking term lands in `bpr_hn` and `bpr` equals it.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub bpr_hl: f64,
    pub bpr_hn: f64,
    pub bpr: f64,
    pub bce: f64,
    pub combined: f64,
    /// Present-pair counts behind each mean; zero flags an omitted term.
    pub n_hl: usize,
    pub n_hn: usize,
    pub n_bce: usize,
}

/// Gradients for every trainable parameter; `h_v0` is absent in fixed
/// feature mode.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub h_v0: Option<Array2<f64>>,
    pub w_h1: Array2<f64>,
    pub w_l1: Array2<f64>,
    pub w_h2: Array2<f64>,
    pub w_l2: Array2<f64>,
    pub w_p1: Array2<f64>,
    pub w_p2: Array2<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.dim();
        ParamGrads {
            h_v0: (params.mode == FeatureMode::LearnableEmbeddings)
                .then(|| Array2::zeros((params.n_videos(), d))),
            w_h1: Array2::zeros((d, d)),
            w_l1: Array2::zeros((d, d)),
            w_h2: Array2::zeros((d, d)),
            w_l2: Array2::zeros((d, d)),
            w_p1: Array2::zeros((2 * d, d)),
            w_p2: Array2::zeros((d, 1)),
        }
    }

    fn all_finite(&self) -> Option<&'static str> {
        let named: [(&'static str, Option<&Array2<f64>>); 7] = [
            ("h_v0", self.h_v0.as_ref()),
            ("w_h1", Some(&self.w_h1)),
            ("w_l1", Some(&self.w_l1)),
            ("w_h2", Some(&self.w_h2)),
            ("w_l2", Some(&self.w_l2)),
            ("w_p1", Some(&self.w_p1)),
            ("w_p2", Some(&self.w_p2)),
        ];
        for (name, m) in named {
            if let Some(m) = m {
                if m.iter().any(|v| !v.is_finite()) {
                    return Some(name);
                }
            }
        }
        None
    }
}

/// Head forward state for one scored (user, video) item.
struct ScoredItem {
    user: usize,
    video: usize,
    label: u8,
    /// Ablation-drawn unseen videos carry no skip label, so the
    /// classification loss never sees them.
    bce_eligible: bool,
    a_pre: Array1<f64>,
    z: f64,
}

struct HeadEval {
    items: Vec<ScoredItem>,
    /// Per triplet: item indices of (h, l, n).
    structure: Vec<(usize, Option<usize>, Option<usize>)>,
}

fn score_batch(
    batch: &[Triplet],
    cache: &ForwardCache,
    params: &ModelParams,
    bpr_mode: BprMode,
) -> HeadEval {
    let d = params.dim();
    let emb = &cache.embeddings;
    let mut items = Vec::with_capacity(batch.len() * 3);
    let mut structure = Vec::with_capacity(batch.len());

    let push = |user: usize, video: usize, label: u8, bce_eligible: bool, items: &mut Vec<ScoredItem>| {
        let h_u = emb.h_u.row(user);
        let h_v = emb.h_v.row(video);
        let mut a_pre = Array1::zeros(d);
        for k in 0..d {
            let mut pre = 0.0;
            for i in 0..d {
                pre += h_u[i] * params.w_p1[(i, k)];
            }
            for i in 0..d {
                pre += h_v[i] * params.w_p1[(d + i, k)];
            }
            a_pre[k] = pre;
        }
        let z: f64 = (0..d)
            .map(|k| params.activation.apply(a_pre[k]) * params.w_p2[(k, 0)])
            .sum();
        items.push(ScoredItem {
            user,
            video,
            label,
            bce_eligible,
            a_pre,
            z,
        });
        items.len() - 1
    };

    let negatives_are_interactions = bpr_mode == BprMode::Hierarchical;
    for t in batch {
        let h_idx = push(t.user, t.anchor, t.anchor_label, true, &mut items);
        let l_idx = t.less.map(|v| push(t.user, v, 0, true, &mut items));
        let n_idx = t
            .negative
            .map(|v| push(t.user, v, 0, negatives_are_interactions, &mut items));
        structure.push((h_idx, l_idx, n_idx));
    }
    HeadEval { items, structure }
}

fn breakdown_from_head(head: &HeadEval, lambda: f64, bpr_mode: BprMode) -> LossBreakdown {
    let scores: Vec<(f64, Option<f64>, Option<f64>)> = head
        .structure
        .iter()
        .map(|&(h, l, n)| {
            (
                head.items[h].z,
                l.map(|i| head.items[i].z),
                n.map(|i| head.items[i].z),
            )
        })
        .collect();
    let (bpr_hl, bpr_hn, bpr) = match bpr_mode {
        BprMode::Hierarchical => hierarchical_bpr(&scores),
        BprMode::UnseenNegative => {
            let (_, term, _) = hierarchical_bpr(&scores);
            (0.0, term, term)
        }
    };
    let n_bce = head.items.iter().filter(|i| i.bce_eligible).count();
    let bce = if n_bce > 0 {
        head.items
            .iter()
            .filter(|i| i.bce_eligible)
            .map(|i| bce_loss(i.z, i.label))
            .sum::<f64>()
            / n_bce as f64
    } else {
        0.0
    };
    LossBreakdown {
        bpr_hl,
        bpr_hn,
        bpr,
        bce,
        combined: combined_loss(bpr, bce, lambda),
        n_hl: head.structure.iter().filter(|s| s.1.is_some()).count(),
        n_hn: head.structure.iter().filter(|s| s.2.is_some()).count(),
        n_bce,
    }
}

/// Batch combined loss without gradients; the forward pass runs inside.
/// This is the function the finite-difference oracle differentiates.
pub fn batch_loss(
    batch: &[Triplet],
    params: &ModelParams,
    graphs: &DualGraphs,
    lambda: f64,
    bpr_mode: BprMode,
) -> Result<LossBreakdown> {
    let cache = forward_cached(params, graphs)?;
    let head = score_batch(batch, &cache, params, bpr_mode);
    Ok(breakdown_from_head(&head, lambda, bpr_mode))
}

/// Exact gradient of the batch combined loss for every trainable parameter,
/// propagated analytically through the head and both convolution paths.
pub fn backward(
    batch: &[Triplet],
    params: &ModelParams,
    graphs: &DualGraphs,
    cache: &ForwardCache,
    lambda: f64,
    bpr_mode: BprMode,
) -> Result<(LossBreakdown, ParamGrads)> {
    let d = params.dim();
    let act = params.activation;
    let head = score_batch(batch, cache, params, bpr_mode);
    let breakdown = breakdown_from_head(&head, lambda, bpr_mode);

    // d combined / d z per scored item
    let mut alphas = vec![0.0f64; head.items.len()];
    let (weight_hl, weight_hn) = match bpr_mode {
        BprMode::Hierarchical => (lambda / 2.0, lambda / 2.0),
        BprMode::UnseenNegative => (0.0, lambda),
    };
    for &(h, l, n) in &head.structure {
        if let Some(l) = l {
            if breakdown.n_hl > 0 {
                let s = sigmoid(head.items[l].z - head.items[h].z);
                let scale = weight_hl / breakdown.n_hl as f64;
                alphas[h] -= scale * s;
                alphas[l] += scale * s;
            }
        }
        if let Some(n) = n {
            if breakdown.n_hn > 0 {
                let s = sigmoid(head.items[n].z - head.items[h].z);
                let scale = weight_hn / breakdown.n_hn as f64;
                alphas[h] -= scale * s;
                alphas[n] += scale * s;
            }
        }
    }
    if breakdown.n_bce > 0 {
        let scale = (1.0 - lambda) / breakdown.n_bce as f64;
        for (i, item) in head.items.iter().enumerate() {
            if item.bce_eligible {
                alphas[i] += scale * (sigmoid(item.z) - f64::from(item.label));
            }
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    let emb = &cache.embeddings;
    let n_users = emb.h_u.nrows();
    let n_videos = emb.h_v.nrows();
    let mut g_h_u = Array2::<f64>::zeros((n_users, d));
    let mut g_h_v = Array2::<f64>::zeros((n_videos, d));

    // head backward per scored item
    for (item, &alpha) in head.items.iter().zip(&alphas) {
        if alpha == 0.0 {
            continue;
        }
        let h_u = emb.h_u.row(item.user);
        let h_v = emb.h_v.row(item.video);
        for k in 0..d {
            let gate = act.derivative(item.a_pre[k]);
            if gate == 0.0 && act.apply(item.a_pre[k]) == 0.0 {
                // rectified unit is inactive: only w_p2 sees its output (zero)
                continue;
            }
            grads.w_p2[(k, 0)] += alpha * act.apply(item.a_pre[k]);
            let g_pre = alpha * params.w_p2[(k, 0)] * gate;
            if g_pre == 0.0 {
                continue;
            }
            for i in 0..d {
                grads.w_p1[(i, k)] += g_pre * h_u[i];
                grads.w_p1[(d + i, k)] += g_pre * h_v[i];
                g_h_u[(item.user, i)] += g_pre * params.w_p1[(i, k)];
                g_h_v[(item.video, i)] += g_pre * params.w_p1[(d + i, k)];
            }
        }
    }

    // fused embeddings are plain means of the two paths
    let g_h_u_path = &g_h_u * 0.5;
    let g_h_v_path = &g_h_v * 0.5;

    // second hop, highly path: H_v_h = act(R~_h^T . H_u_h . W_h2)
    let gate_v_h = cache.z_v_h.mapv(|z| act.derivative(z));
    let g_z_v_h = &g_h_v_path * &gate_v_h;
    grads.w_h2 = cache.agg_v_h.t().dot(&g_z_v_h);
    let g_agg_v_h = g_z_v_h.dot(&params.w_h2.t());
    let g_h_u_h_from_video = spmm(&graphs.r_tilde_h, &g_agg_v_h)?;

    let gate_v_l = cache.z_v_l.mapv(|z| act.derivative(z));
    let g_z_v_l = &g_h_v_path * &gate_v_l;
    grads.w_l2 = cache.agg_v_l.t().dot(&g_z_v_l);
    let g_agg_v_l = g_z_v_l.dot(&params.w_l2.t());
    let g_h_u_l_from_video = spmm(&graphs.r_tilde_l, &g_agg_v_l)?;

    // first hop, both paths: H_u_x = act(R~_x . H_v0 . W_x1)
    let g_h_u_h = &g_h_u_path + &g_h_u_h_from_video;
    let gate_u_h = cache.z_u_h.mapv(|z| act.derivative(z));
    let g_z_u_h = &g_h_u_h * &gate_u_h;
    grads.w_h1 = cache.agg_u_h.t().dot(&g_z_u_h);

    let g_h_u_l = &g_h_u_path + &g_h_u_l_from_video;
    let gate_u_l = cache.z_u_l.mapv(|z| act.derivative(z));
    let g_z_u_l = &g_h_u_l * &gate_u_l;
    grads.w_l1 = cache.agg_u_l.t().dot(&g_z_u_l);

    if let Some(g_h_v0) = grads.h_v0.as_mut() {
        let g_agg_u_h = g_z_u_h.dot(&params.w_h1.t());
        let g_agg_u_l = g_z_u_l.dot(&params.w_l1.t());
        *g_h_v0 = spmm(&graphs.r_tilde_h_t, &g_agg_u_h)? + spmm(&graphs.r_tilde_l_t, &g_agg_u_l)?;
    }

    if let Some(param) = grads.all_finite() {
        return Err(Error::NonFiniteGradient { param });
    }
    Ok((breakdown, grads))
}

/// Cosine annealing from `lr0` down to `lr_min`; both endpoints are exact.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if step == 0 || total_steps == 0 {
        return lr0;
    }
    if step >= total_steps {
        return lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    lr_min + (lr0 - lr_min) * (1.0 + phase.cos()) / 2.0
}

/// First/second moment accumulators and the step counter for AdamW.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    m: ParamGrads,
    v: ParamGrads,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            step: 0,
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
        }
    }
}

fn adamw_update(
    theta: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    config: &TrainConfig,
    bias1: f64,
    bias2: f64,
) {
    azip_update(theta, grad, m, v, |theta, g, m, v| {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *theta -= lr * m_hat / (v_hat.sqrt() + config.epsilon) + lr * config.weight_decay * *theta;
    });
}

fn azip_update(
    theta: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    mut f: impl FnMut(&mut f64, f64, &mut f64, &mut f64),
) {
    ndarray::Zip::from(theta)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|t, &g, m, v| f(t, g, m, v));
}

/// One decoupled-weight-decay Adam step with bias-corrected moments.
/// A fixed-mode `h_v0` is never touched.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) {
    state.step += 1;
    let bias1 = 1.0 - config.beta1.powi(state.step as i32);
    let bias2 = 1.0 - config.beta2.powi(state.step as i32);

    if let (Some(g), Some(m), Some(v)) = (
        grads.h_v0.as_ref(),
        state.m.h_v0.as_mut(),
        state.v.h_v0.as_mut(),
    ) {
        adamw_update(&mut params.h_v0, g, m, v, lr, config, bias1, bias2);
    }
    adamw_update(&mut params.w_h1, &grads.w_h1, &mut state.m.w_h1, &mut state.v.w_h1, lr, config, bias1, bias2);
    adamw_update(&mut params.w_l1, &grads.w_l1, &mut state.m.w_l1, &mut state.v.w_l1, lr, config, bias1, bias2);
    adamw_update(&mut params.w_h2, &grads.w_h2, &mut state.m.w_h2, &mut state.v.w_h2, lr, config, bias1, bias2);
    adamw_update(&mut params.w_l2, &grads.w_l2, &mut state.m.w_l2, &mut state.v.w_l2, lr, config, bias1, bias2);
    adamw_update(&mut params.w_p1, &grads.w_p1, &mut state.m.w_p1, &mut state.v.w_p1, lr, config, bias1, bias2);
    adamw_update(&mut params.w_p2, &grads.w_p2, &mut state.m.w_p2, &mut state.v.w_p2, lr, config, bias1, bias2);
}

/// One line of the training history, emitted as JSON per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub bpr_hl: f64,
    pub bpr_hn: f64,
    pub bce: f64,
    #[serde(rename = "val_recall@3")]
    pub val_recall_at_3: f64,
}

/// A finished training run: the best-validation snapshot and the history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    /// Unseen-negative anchors dropped because rejection sampling hit its cap.
    pub skipped_unseen_samples: usize,
}

/// Run the full training loop: shuffled triplet batches, cosine-annealed
/// AdamW, per-epoch validation recall@3, early stopping with the configured
/// patience, returning the best-validation parameter snapshot.
pub fn train(
    config: &TrainConfig,
    split: &DatasetSplit,
    graphs: &DualGraphs,
    params: ModelParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n_users = graphs.n_users();
    let n_videos = graphs.n_videos();
    let pools = TripletPools::from_train_pairs(&split.train, n_users);
    let seen = match config.bpr_mode {
        BprMode::UnseenNegative => seen_videos(split, n_users),
        BprMode::Hierarchical => Vec::new(),
    };

    let n_anchors = match config.bpr_mode {
        BprMode::Hierarchical => pools.n_anchor_pairs(),
        BprMode::UnseenNegative => split.train.len(),
    };
    let batches_per_epoch = n_anchors.div_ceil(config.batch_size).max(1);
    let total_steps = config.max_epochs * batches_per_epoch;

    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    let mut global_step = 0usize;
    let mut skipped_total = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x5A00 + epoch as u64);
        let mut triplets = match config.bpr_mode {
            BprMode::Hierarchical => sample_triplets(&pools, &mut rng),
            BprMode::UnseenNegative => {
                let (t, skipped) = sample_unseen_triplets(&pools, &seen, n_videos, &mut rng);
                skipped_total += skipped;
                t
            }
        };
        triplets.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_hl = 0.0;
        let mut epoch_hn = 0.0;
        let mut epoch_bce = 0.0;
        let mut n_batches = 0usize;
        let mut last_lr = cosine_lr(global_step, total_steps, config.lr0, config.lr_min);

        for batch in triplets.chunks(config.batch_size) {
            let cache = forward_cached(&params, graphs)?;
            let (breakdown, grads) =
                backward(batch, &params, graphs, &cache, config.lambda, config.bpr_mode)?;
            last_lr = cosine_lr(global_step, total_steps, config.lr0, config.lr_min);
            adamw_step(&mut params, &grads, &mut state, last_lr, config);
            global_step += 1;
            epoch_loss += breakdown.combined;
            epoch_hl += breakdown.bpr_hl;
            epoch_hn += breakdown.bpr_hn;
            epoch_bce += breakdown.bce;
            n_batches += 1;
        }

        let scale = 1.0 / n_batches.max(1) as f64;
        let cache = forward_cached(&params, graphs)?;
        let val_recall = macro_recall_at_k(
            &split.validation,
            &cache.embeddings,
            &params,
            RelevanceRule::HighlyOnly,
            3,
        )
        .unwrap_or(0.0);

        history.push(EpochRecord {
            epoch,
            lr: last_lr,
            loss: epoch_loss * scale,
            bpr_hl: epoch_hl * scale,
            bpr_hn: epoch_hn * scale,
            bce: epoch_bce * scale,
            val_recall_at_3: val_recall,
        });

        if val_recall > best_val {
            best_val = val_recall;
            best_params = params.clone();
            best_epoch = epoch;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_recall: if best_val.is_finite() { best_val } else { 0.0 },
        skipped_unseen_samples: skipped_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graphs;
    use crate::ingest::split_per_user;
    use crate::model::init_params;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bpr_pair_loss_closed_forms() {
        assert!((bpr_pair_loss(2.0, 2.0) - LN2).abs() < 1e-15);
        // frozen softplus(-1) from a high-precision evaluation
        assert!((bpr_pair_loss(1.0, 0.0) - 0.3132616875182228).abs() < 1e-15);
        let tiny = bpr_pair_loss(40.0, 0.0);
        assert!(tiny.is_finite() && tiny > 0.0);
        assert!((tiny - 4.248354255291589e-18).abs() < 1e-30);
        assert!(bpr_pair_loss(500.0, -500.0).is_finite());
        assert!(bpr_pair_loss(-500.0, 500.0).is_finite());
    }

    #[test]
    fn bpr_pair_loss_is_strictly_decreasing_in_margin() {
        let mut last = f64::INFINITY;
        for margin in [-5.0, -1.0, 0.0, 0.5, 2.0, 10.0] {
            let loss = bpr_pair_loss(margin, 0.0);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn bce_closed_forms_and_symmetry() {
        assert!((bce_loss(0.0, 1) - LN2).abs() < 1e-15);
        assert!((bce_loss(0.0, 0) - LN2).abs() < 1e-15);
        // frozen softplus(-2)
        assert!((bce_loss(2.0, 1) - 0.1269280110429725).abs() < 1e-15);
        for z in [-500.0, -3.2, 0.0, 1.7, 500.0] {
            assert!((bce_loss(z, 1) - bce_loss(-z, 0)).abs() < 1e-15);
            assert!(bce_loss(z, 1).is_finite());
        }
    }

    #[test]
    fn combined_loss_mixes_linearly() {
        assert!((combined_loss(0.6, 0.2, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(combined_loss(0.6, 0.2, 1.0), 0.6);
        assert_eq!(combined_loss(0.6, 0.2, 0.0), 0.2);
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            assert!((combined_loss(0.7, 0.7, lambda) - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn hierarchical_bpr_all_equal_scores_is_ln2() {
        let scores = vec![(1.5, Some(1.5), Some(1.5)); 4];
        let (hl, hn, bpr) = hierarchical_bpr(&scores);
        assert!((hl - LN2).abs() < 1e-12);
        assert!((hn - LN2).abs() < 1e-12);
        assert!((bpr - LN2).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_bpr_averages_its_terms() {
        let scores = vec![(1.0, Some(0.5), None), (2.0, None, Some(-1.0))];
        let (hl, hn, bpr) = hierarchical_bpr(&scores);
        assert!((bpr - (hl + hn) / 2.0).abs() < 1e-15);

        // all less-positive slots absent: the term vanishes, the halving stays
        let scores = vec![(1.0, None, Some(0.0)), (0.5, None, Some(0.2))];
        let (hl, hn, bpr) = hierarchical_bpr(&scores);
        assert_eq!(hl, 0.0);
        assert!((bpr - hn / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-6), 1e-6);
        let mid = cosine_lr(50, 100, 1e-3, 1e-6);
        assert!((mid - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_uses_forced_pools_and_is_deterministic() {
        let pairs = vec![
            LabeledPair::new(0, 1, InteractionClass::HighlyPositive),
            LabeledPair::new(0, 2, InteractionClass::LessPositive),
            LabeledPair::new(0, 3, InteractionClass::Negative),
        ];
        let pools = TripletPools::from_train_pairs(&pairs, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let triplets = sample_triplets(&pools, &mut rng);
        assert_eq!(
            triplets,
            vec![Triplet {
                user: 0,
                anchor: 1,
                anchor_label: 1,
                less: Some(2),
                negative: Some(3),
            }]
        );

        let empty_less = vec![
            LabeledPair::new(0, 1, InteractionClass::HighlyPositive),
            LabeledPair::new(0, 3, InteractionClass::Negative),
        ];
        let pools = TripletPools::from_train_pairs(&empty_less, 1);
        let triplets = sample_triplets(&pools, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(triplets[0].less, None);
        assert_eq!(triplets[0].negative, Some(3));

        // determinism over a larger pool
        let many: Vec<LabeledPair> = (0..40)
            .map(|v| {
                let class = match v % 3 {
                    0 => InteractionClass::HighlyPositive,
                    1 => InteractionClass::LessPositive,
                    _ => InteractionClass::Negative,
                };
                LabeledPair::new(v % 4, v, class)
            })
            .collect();
        let pools = TripletPools::from_train_pairs(&many, 4);
        let a = sample_triplets(&pools, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_triplets(&pools, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn unseen_sampler_avoids_seen_videos_and_caps() {
        let pairs = vec![LabeledPair::new(0, 0, InteractionClass::HighlyPositive)];
        let pools = TripletPools::from_train_pairs(&pairs, 1);

        let seen = vec![vec![0usize, 1]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (triplets, skipped) = sample_unseen_triplets(&pools, &seen, 4, &mut rng);
        assert_eq!(skipped, 0);
        for t in &triplets {
            let v = t.negative.unwrap();
            assert!(v == 2 || v == 3);
        }

        // user has seen the entire catalog: sampling must skip with a flag
        let seen_all = vec![vec![0usize, 1, 2, 3]];
        let (triplets, skipped) =
            sample_unseen_triplets(&pools, &seen_all, 4, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(triplets.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let mut params = init_params(2, 1, 2, 0, FeatureMode::LearnableEmbeddings, None).unwrap();
        let before = params.clone();
        let grads = ParamGrads::zeros_like(&params);
        let mut state = OptimizerState::new(&params);
        let mut config = TrainConfig::default();
        config.weight_decay = 0.0;
        adamw_step(&mut params, &grads, &mut state, 0.1, &config);
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_single_step_matches_hand_trace() {
        let mut params = init_params(1, 1, 1, 0, FeatureMode::LearnableEmbeddings, None).unwrap();
        params.w_p2 = array![[1.0]];
        let mut grads = ParamGrads::zeros_like(&params);
        grads.w_p2 = array![[1.0]];
        let mut state = OptimizerState::new(&params);
        let mut config = TrainConfig::default();
        config.weight_decay = 0.0;
        adamw_step(&mut params, &grads, &mut state, 0.1, &config);
        // bias-corrected m_hat/sqrt(v_hat) = 1 at t=1, so the step is
        // lr / (1 + eps) up to epsilon
        let delta = 1.0 - params.w_p2[(0, 0)];
        assert!((delta - 0.1).abs() < 1e-8);
        assert!(delta < 0.1);
    }

    #[test]
    fn adamw_decay_only_scales_parameters() {
        let mut params = init_params(1, 1, 1, 0, FeatureMode::LearnableEmbeddings, None).unwrap();
        params.w_p2 = array![[2.0]];
        let grads = ParamGrads::zeros_like(&params);
        let mut state = OptimizerState::new(&params);
        let config = TrainConfig::default();
        adamw_step(&mut params, &grads, &mut state, 0.5, &config);
        let want = 2.0 * (1.0 - 0.5 * config.weight_decay);
        assert!((params.w_p2[(0, 0)] - want).abs() < 1e-15);
    }

    fn tiny_split(seed: u64) -> (DatasetSplit, DualGraphs, ModelParams) {
        let mut pairs = Vec::new();
        for u in 0..5 {
            for v in 0..8 {
                let class = match (u + v) % 3 {
                    0 => InteractionClass::HighlyPositive,
                    1 => InteractionClass::LessPositive,
                    _ => InteractionClass::Negative,
                };
                pairs.push(LabeledPair::new(u, v, class));
            }
        }
        let split = split_per_user(&pairs, (0.6, 0.2, 0.2), seed);
        let graphs = build_graphs(&split.train, 5, 8, GraphMode::Dual).unwrap();
        let params = init_params(4, 5, 8, seed, FeatureMode::LearnableEmbeddings, None).unwrap();
        (split, graphs, params)
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_instance() {
        let (split, graphs, mut params) = tiny_split(3);
        // move pre-activations away from the rectifier kink so the central
        // difference never straddles it
        params.h_v0.mapv_inplace(|x| x * 40.0);
        let pools = TripletPools::from_train_pairs(&split.train, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = sample_triplets(&pools, &mut rng);
        assert!(!batch.is_empty());

        let cache = forward_cached(&params, &graphs).unwrap();
        let (_, grads) =
            backward(&batch, &params, &graphs, &cache, 0.5, BprMode::Hierarchical).unwrap();

        let eps = 1e-4;
        let check = |name: &str, get: &dyn Fn(&ModelParams) -> &Array2<f64>,
                         get_mut: &dyn Fn(&mut ModelParams) -> &mut Array2<f64>,
                         grad: &Array2<f64>| {
            let shape = get(&params).raw_dim();
            for i in 0..shape[0] {
                for j in 0..shape[1] {
                    let mut p_plus = params.clone();
                    get_mut(&mut p_plus)[(i, j)] += eps;
                    let l_plus = batch_loss(&batch, &p_plus, &graphs, 0.5, BprMode::Hierarchical)
                        .unwrap()
                        .combined;
                    let mut p_minus = params.clone();
                    get_mut(&mut p_minus)[(i, j)] -= eps;
                    let l_minus = batch_loss(&batch, &p_minus, &graphs, 0.5, BprMode::Hierarchical)
                        .unwrap()
                        .combined;
                    let fd = (l_plus - l_minus) / (2.0 * eps);
                    let analytic = grad[(i, j)];
                    let denom = analytic.abs().max(fd.abs());
                    if denom < 1e-6 {
                        assert!(
                            (analytic - fd).abs() < 1e-8,
                            "{name}[{i},{j}]: {analytic} vs {fd}"
                        );
                    } else {
                        assert!(
                            (analytic - fd).abs() / denom < 1e-5,
                            "{name}[{i},{j}]: {analytic} vs {fd}"
                        );
                    }
                }
            }
        };
        check("w_h1", &|p| &p.w_h1, &|p| &mut p.w_h1, &grads.w_h1);
        check("w_l2", &|p| &p.w_l2, &|p| &mut p.w_l2, &grads.w_l2);
        check("w_p1", &|p| &p.w_p1, &|p| &mut p.w_p1, &grads.w_p1);
        check("w_p2", &|p| &p.w_p2, &|p| &mut p.w_p2, &grads.w_p2);
        check(
            "h_v0",
            &|p| &p.h_v0,
            &|p| &mut p.h_v0,
            grads.h_v0.as_ref().unwrap(),
        );
    }

    #[test]
    fn fixed_mode_has_no_feature_gradient() {
        let (split, graphs, mut params) = tiny_split(4);
        params.mode = FeatureMode::FixedFeatures;
        let pools = TripletPools::from_train_pairs(&split.train, 5);
        let batch = sample_triplets(&pools, &mut ChaCha8Rng::seed_from_u64(2));
        let cache = forward_cached(&params, &graphs).unwrap();
        let (_, grads) =
            backward(&batch, &params, &graphs, &cache, 0.5, BprMode::Hierarchical).unwrap();
        assert!(grads.h_v0.is_none());
    }

    #[test]
    fn train_zero_epochs_returns_initial_params() {
        let (split, graphs, params) = tiny_split(5);
        let mut config = TrainConfig::default();
        config.max_epochs = 0;
        config.d = 4;
        let outcome = train(&config, &split, &graphs, params.clone()).unwrap();
        assert_eq!(outcome.params, params);
        assert!(outcome.history.is_empty());
    }

    #[test]
    fn train_is_deterministic() {
        let (split, graphs, params) = tiny_split(6);
        let mut config = TrainConfig::default();
        config.max_epochs = 3;
        config.batch_size = 8;
        config.d = 4;
        let a = train(&config, &split, &graphs, params.clone()).unwrap();
        let b = train(&config, &split, &graphs, params).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.val_recall_at_3.to_bits(), y.val_recall_at_3.to_bits());
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_snapshot() {
        let (split, graphs, params) = tiny_split(7);
        let mut config = TrainConfig::default();
        config.max_epochs = 12;
        config.patience = 2;
        config.batch_size = 8;
        config.d = 4;
        let outcome = train(&config, &split, &graphs, params).unwrap();
        let best_from_history = outcome
            .history
            .iter()
            .map(|r| r.val_recall_at_3)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((outcome.best_val_recall - best_from_history).abs() < 1e-15);
        // the snapshot is from the first epoch achieving the best recall
        let first_argmax = outcome
            .history
            .iter()
            .position(|r| r.val_recall_at_3 == best_from_history)
            .unwrap()
            + 1;
        assert_eq!(outcome.best_epoch, first_argmax);
        assert!(outcome.history.len() <= 12);
    }
}
