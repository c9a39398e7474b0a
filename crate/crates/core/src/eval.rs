//! Top-k ranking metrics over per-user test candidates, aggregation across
//! users, and a paired t-test on per-run scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, InteractionClass, LabeledPair};
use crate::model::{predict_score, Embeddings, ModelParams};

/// One user's candidates sorted by descending logit; ties break by
/// ascending video index so rankings are reproducible across runs.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub user: usize,
    /// (video_index, logit, relevant) in rank order.
    pub entries: Vec<(usize, f64, bool)>,
}

impl RankedList {
    pub fn n_relevant(&self) -> usize {
        self.entries.iter().filter(|e| e.2).count()
    }

    fn hits_at_k(&self, k: usize) -> usize {
        self.entries.iter().take(k).filter(|e| e.2).count()
    }
}

/// Sort a user's candidates into a ranked list.
pub fn rank_user(user: usize, mut candidates: Vec<(usize, f64, bool)>) -> RankedList {
    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("logits are finite")
            .then(a.0.cmp(&b.0))
    });
    RankedList {
        user,
        entries: candidates,
    }
}

pub fn precision_at_k(r: &RankedList, k: usize) -> f64 {
    r.hits_at_k(k) as f64 / k as f64
}

pub fn recall_at_k(r: &RankedList, k: usize) -> f64 {
    r.hits_at_k(k) as f64 / r.n_relevant() as f64
}

/// MAP@k = (1 / min(#relevant, k)) * sum_{i<=k} P(i) * rel_i.
pub fn map_at_k(r: &RankedList, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, entry) in r.entries.iter().take(k).enumerate() {
        if entry.2 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.n_relevant().min(k) as f64
}

/// NDCG@k with binary gains and 1/log2(rank+1) discounts, rank starting at 1.
pub fn ndcg_at_k(r: &RankedList, k: usize) -> f64 {
    let dcg: f64 = r
        .entries
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, e)| e.2)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal = r.n_relevant().min(k);
    let idcg: f64 = (0..ideal).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Which videos count as relevant when ranking test candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceRule {
    /// Highly positive test pairs only.
    #[default]
    HighlyOnly,
    /// Sensitivity variant: highly or less positive test pairs.
    HighlyOrLess,
}

impl RelevanceRule {
    pub fn is_relevant(self, class: InteractionClass) -> bool {
        match self {
            RelevanceRule::HighlyOnly => class == InteractionClass::HighlyPositive,
            RelevanceRule::HighlyOrLess => class != InteractionClass::Negative,
        }
    }
}

const METRIC_NAMES: [&str; 4] = ["precision", "recall", "map", "ndcg"];

/// One aggregated metric value at one cutoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

/// Macro-averaged metrics for one trained model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub values: Vec<MetricValue>,
    pub n_eligible_users: usize,
    pub n_excluded_users: usize,
}

impl MetricsReport {
    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.metric == metric && v.k == k)
            .map(|v| v.mean)
    }
}

/// Group labeled pairs per user, keeping the per-user video order stable.
pub fn candidates_per_user(pairs: &[LabeledPair]) -> Vec<(usize, Vec<LabeledPair>)> {
    let mut grouped: std::collections::BTreeMap<usize, Vec<LabeledPair>> =
        std::collections::BTreeMap::new();
    for p in pairs {
        grouped.entry(p.user_index).or_default().push(*p);
    }
    grouped.into_iter().collect()
}

fn ranked_list_for_user(
    user: usize,
    pairs: &[LabeledPair],
    embeddings: &Embeddings,
    params: &ModelParams,
    rule: RelevanceRule,
) -> RankedList {
    let candidates = pairs
        .iter()
        .map(|p| {
            let logit = predict_score(
                embeddings.h_u.row(user),
                embeddings.h_v.row(p.video_index),
                &params.w_p1,
                &params.w_p2,
                params.activation,
            );
            (p.video_index, logit, rule.is_relevant(p.class))
        })
        .collect();
    rank_user(user, candidates)
}

/// Macro average of recall@k over users with at least one relevant
/// candidate; `None` when no user is eligible. Used for validation-side
/// early stopping, where an empty validation set must not abort training.
pub fn macro_recall_at_k(
    pairs: &[LabeledPair],
    embeddings: &Embeddings,
    params: &ModelParams,
    rule: RelevanceRule,
    k: usize,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (user, user_pairs) in candidates_per_user(pairs) {
        let ranked = ranked_list_for_user(user, &user_pairs, embeddings, params, rule);
        if ranked.n_relevant() == 0 {
            continue;
        }
        sum += recall_at_k(&ranked, k);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Evaluate a trained model on the test pairs of a split: per-user metrics,
/// macro-averaged with equal user weight. Users without a relevant test
/// candidate are excluded and counted in the report metadata.
pub fn evaluate(
    params: &ModelParams,
    embeddings: &Embeddings,
    split: &DatasetSplit,
    ks: &[usize],
    rule: RelevanceRule,
) -> Result<MetricsReport> {
    let mut per_metric: Vec<Vec<f64>> = vec![Vec::new(); METRIC_NAMES.len() * ks.len()];
    let mut excluded = 0usize;
    for (user, user_pairs) in candidates_per_user(&split.test) {
        let ranked = ranked_list_for_user(user, &user_pairs, embeddings, params, rule);
        if ranked.n_relevant() == 0 {
            excluded += 1;
            continue;
        }
        for (ki, &k) in ks.iter().enumerate() {
            per_metric[ki * 4].push(precision_at_k(&ranked, k));
            per_metric[ki * 4 + 1].push(recall_at_k(&ranked, k));
            per_metric[ki * 4 + 2].push(map_at_k(&ranked, k));
            per_metric[ki * 4 + 3].push(ndcg_at_k(&ranked, k));
        }
    }
    let n_eligible = per_metric[0].len();
    if n_eligible == 0 {
        return Err(Error::NoEligibleUsers);
    }

    let mut values = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        for (mi, name) in METRIC_NAMES.iter().enumerate() {
            let xs = &per_metric[ki * 4 + mi];
            let (mean, std) = mean_std(xs);
            values.push(MetricValue {
                metric: name.to_string(),
                k,
                mean,
                std,
            });
        }
    }
    Ok(MetricsReport {
        variant: String::new(),
        seed: split.split_seed,
        ks: ks.to_vec(),
        values,
        n_eligible_users: n_eligible,
        n_excluded_users: excluded,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Result of a two-sided paired t-test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Set when the difference has zero variance and the test degenerates.
    pub degenerate: bool,
}

/// Two-sided paired t-test over per-run scores, paired by position.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::TooFewRuns {
            got: a.len().min(b.len()),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&diffs);
    let n = diffs.len();
    let df = n - 1;
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult {
                t: 0.0,
                df,
                p: 1.0,
                degenerate: true,
            }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, df as f64);
    Ok(TTestResult {
        t,
        df,
        p,
        degenerate: false,
    })
}

/// Two-sided p-value of Student's t: I_x(df/2, 1/2) with x = df/(df + t^2).
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    reg_inc_beta(df / 2.0, 0.5, x)
}

/// ln Gamma(x) for x > 0, Lanczos approximation.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, c) in COEFFS.iter().enumerate() {
        sum += c / (x + i as f64 + 1.0);
    }
    let tmp = x + 5.5;
    (x + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / x).ln()
}

/// Regularized incomplete beta I_x(a, b) via the continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // symmetry keeps the continued fraction in its fast-convergence region
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(flags: &[bool]) -> RankedList {
        RankedList {
            user: 0,
            entries: flags
                .iter()
                .enumerate()
                .map(|(i, &rel)| (i, -(i as f64), rel))
                .collect(),
        }
    }

    #[test]
    fn rank_user_sorts_by_logit_then_index() {
        let ranked = rank_user(0, vec![(0, 0.9, true), (1, 0.1, false), (2, 0.5, true)]);
        let order: Vec<usize> = ranked.entries.iter().map(|e| e.0).collect();
        assert_eq!(order, vec![0, 2, 1]);

        let tied = rank_user(0, vec![(5, 1.0, false), (2, 1.0, true), (9, 1.0, false)]);
        let order: Vec<usize> = tied.entries.iter().map(|e| e.0).collect();
        assert_eq!(order, vec![2, 5, 9]);

        let single = rank_user(3, vec![(7, 0.2, true)]);
        assert_eq!(single.entries.len(), 1);
    }

    #[test]
    fn worked_example_rel_non_rel() {
        let r = list(&[true, false, true]);
        assert!((precision_at_k(&r, 3) - 2.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&r, 3) - 1.0).abs() < 1e-15);
        // frozen from the AP and DCG/IDCG hand evaluations
        assert!((map_at_k(&r, 3) - 0.8333333333333333).abs() < 1e-12);
        assert!((ndcg_at_k(&r, 3) - 0.9197207891481876).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let r = list(&[true, true, true]);
        for k in [1, 2, 3] {
            assert_eq!(precision_at_k(&r, k), 1.0);
            assert_eq!(map_at_k(&r, k), 1.0);
            assert_eq!(ndcg_at_k(&r, k), 1.0);
        }
        assert_eq!(recall_at_k(&r, 3), 1.0);
    }

    #[test]
    fn t_test_zero_mean_alternating() {
        let a = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let b = [0.0; 6];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.t.abs() < 1e-12);
        assert!((r.p - 1.0).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn t_test_matches_frozen_oracle_case() {
        // differences with sample mean 1 and sample sd 1 over n=10
        let x = (9.0f64 / 10.0).sqrt();
        let mut a = Vec::new();
        for i in 0..10 {
            a.push(1.0 + if i % 2 == 0 { x } else { -x });
        }
        let b = vec![0.0; 10];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.df, 9);
        assert!((r.t - 3.1622776601683795).abs() < 1e-12);
        // high-precision value of I_{9/19}(4.5, 0.5)
        assert!((r.p - 0.011507985165943664).abs() < 1e-10);
        assert!((r.p - 0.0115).abs() < 1e-3);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [1.0, 1.0, 1.0];
        let b = [0.0, 0.0, 0.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);

        let r = paired_t_test(&a, &a.clone()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);

        assert!(matches!(
            paired_t_test(&[1.0], &[2.0]),
            Err(Error::TooFewRuns { got: 1 })
        ));
    }

    #[test]
    fn t_test_is_antisymmetric() {
        let a = [0.3, 0.5, 0.9, 0.1, 0.6];
        let b = [0.2, 0.6, 0.4, 0.2, 0.3];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_against_numerical_integration() {
        // Simpson integration of the t pdf as an independent route
        fn pdf(u: f64, df: f64) -> f64 {
            let c = (ln_gamma((df + 1.0) / 2.0)
                - ln_gamma(df / 2.0)
                - 0.5 * (df * std::f64::consts::PI).ln())
            .exp();
            c * (1.0 + u * u / df).powf(-(df + 1.0) / 2.0)
        }
        // integrate the bounded center [0, t]: p = 1 - 2 * integral
        for &(t, df) in &[(0.5, 3.0), (1.7, 9.0), (3.16227766, 9.0), (2.2, 6.0)] {
            let steps = 200_000;
            let h = t / steps as f64;
            let mut center = pdf(0.0, df) + pdf(t, df);
            for i in 1..steps {
                let u = i as f64 * h;
                center += pdf(u, df) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            center *= h / 3.0;
            let expected = 1.0 - 2.0 * center;
            let got = student_t_two_sided_p(t, df);
            assert!(
                (got - expected).abs() < 1e-10,
                "t={t} df={df}: {got} vs {expected}"
            );
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(flags in proptest::collection::vec(any::<bool>(), 1..10), k in 1usize..7) {
            prop_assume!(flags.iter().any(|&f| f));
            let r = list(&flags);
            for value in [precision_at_k(&r, k), recall_at_k(&r, k), map_at_k(&r, k), ndcg_at_k(&r, k)] {
                prop_assert!((0.0..=1.0).contains(&value));
            }
            // recall is non-decreasing in k and precision * k counts hits exactly
            prop_assert!(recall_at_k(&r, k + 1) + 1e-15 >= recall_at_k(&r, k));
            let hits = r.entries.iter().take(k).filter(|e| e.2).count();
            prop_assert!((precision_at_k(&r, k) * k as f64 - hits as f64).abs() < 1e-12);
        }

        #[test]
        fn ranking_is_invariant_under_sigmoid(logits in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let raw: Vec<(usize, f64, bool)> = logits.iter().enumerate().map(|(i, &z)| (i, z, false)).collect();
            let squashed: Vec<(usize, f64, bool)> = logits.iter().enumerate()
                .map(|(i, &z)| (i, 1.0 / (1.0 + (-z).exp()), false)).collect();
            let a: Vec<usize> = rank_user(0, raw).entries.iter().map(|e| e.0).collect();
            let b: Vec<usize> = rank_user(0, squashed).entries.iter().map(|e| e.0).collect();
            prop_assert_eq!(a, b);
        }
    }
}
