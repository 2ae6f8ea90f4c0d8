//! All-item top-K evaluation (Recall@K, NDCG@K with binary gains) and the
//! popularity-group alignment breakdown.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionSet;
use crate::embedding::{score_all_items, EmbeddingTable, Scoring};
use crate::error::{Error, Result};
use crate::losses::alignment_distance;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_POPULAR_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserMetrics>>,
    pub n_eval_users: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub k: usize,
    pub scoring: Scoring,
    pub per_user: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            scoring: Scoring::Dot,
            per_user: false,
        }
    }
}

/// Highest-scoring `k` items not excluded by `masked`, ties broken by
/// ascending item index. `-0.0` and `0.0` tie.
pub fn top_k(scores: &[f64], k: usize, masked: impl Fn(usize) -> bool) -> Vec<usize> {
    let order = |a: &usize, b: &usize| -> Ordering {
        (scores[*b] + 0.0)
            .total_cmp(&(scores[*a] + 0.0))
            .then(a.cmp(b))
    };
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !masked(i)).collect();
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand.truncate(k);
    cand
}

/// Recall (denominator `|relevant|`) and NDCG (ideal DCG over
/// `min(k, |relevant|)` hits) for one ranked list. `relevant` must be sorted.
pub fn recall_ndcg(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64) {
    if relevant.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..k.min(relevant.len()))
        .map(|pos| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    (hits as f64 / relevant.len() as f64, dcg / ideal)
}

/// Train items are masked from each user's ranking.
pub fn evaluate_topk(
    model: &EmbeddingTable,
    train: &InteractionSet,
    test: &InteractionSet,
    k: usize,
    scoring: Scoring,
) -> Result<MetricsReport> {
    evaluate_masked(
        model,
        &[train],
        test,
        &EvalOptions {
            k,
            scoring,
            per_user: false,
        },
    )
}

/// Every set in `masks` is excluded from the candidate items of its users.
pub fn evaluate_masked(
    model: &EmbeddingTable,
    masks: &[&InteractionSet],
    test: &InteractionSet,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if opts.k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if test.is_empty() {
        return Err(Error::Empty);
    }
    let dims = (model.num_users(), model.num_items());
    for set in masks.iter().copied().chain(std::iter::once(test)) {
        if (set.num_users(), set.num_items()) != dims {
            return Err(Error::DimensionMismatch(format!(
                "interaction set is {}x{}, model is {}x{}",
                set.num_users(),
                set.num_items(),
                dims.0,
                dims.1
            )));
        }
    }
    let k = opts.k;
    let per_user: Vec<Option<UserMetrics>> = (0..dims.0)
        .into_par_iter()
        .map(|user| {
            let relevant = test.items_of(user);
            if relevant.is_empty() {
                return None;
            }
            let scores = score_all_items(model, user, opts.scoring);
            let ranked = top_k(&scores, k, |i| masks.iter().any(|s| s.contains(user, i)));
            if ranked.is_empty() {
                log::warn!("user {user} has test items but no unmasked candidates; skipped");
                return None;
            }
            let (recall, ndcg) = recall_ndcg(&ranked, relevant, k);
            Some(UserMetrics { user, recall, ndcg })
        })
        .collect();
    let per_user: Vec<UserMetrics> = per_user.into_iter().flatten().collect();
    let count = per_user.len();
    let mean = |f: fn(&UserMetrics) -> f64| {
        if count == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / count as f64
        }
    };
    Ok(MetricsReport {
        k,
        recall_at_k: mean(|u| u.recall),
        ndcg_at_k: mean(|u| u.ndcg),
        n_eval_users: count,
        per_user: opts.per_user.then_some(per_user),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAlignmentReport {
    pub pop_user_align: f64,
    pub unpop_user_align: f64,
    pub pop_item_align: f64,
    pub unpop_item_align: f64,
    pub split_ratio: f64,
    /// Pair counts behind each of the four values, in the same order.
    pub pair_counts: [usize; 4],
    /// Alignment over all pairs.
    pub overall_align: f64,
}

/// Indices of the `ceil(ratio * len)` largest counts, ties by ascending index.
pub fn popular_group(counts: &[usize], ratio: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let take = (ratio * counts.len() as f64).ceil() as usize;
    let mut mask = vec![false; counts.len()];
    for &i in order.iter().take(take) {
        mask[i] = true;
    }
    mask
}

fn group_mean(sum: f64, count: usize, label: &str) -> f64 {
    if count == 0 {
        log::warn!("group `{label}` has no pairs; reporting NaN");
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Unit-weight alignment over `pairs`, broken down by popular/unpopular users
/// and items. Popularity is the training interaction count.
pub fn group_alignment(
    model: &EmbeddingTable,
    pairs: &InteractionSet,
    train: &InteractionSet,
    ratio: f64,
) -> Result<GroupAlignmentReport> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "group ratio must lie in (0,1), got {ratio}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Empty);
    }
    let dims = (model.num_users(), model.num_items());
    if (pairs.num_users(), pairs.num_items()) != dims
        || (train.num_users(), train.num_items()) != dims
    {
        return Err(Error::DimensionMismatch(
            "pairs, train and model disagree".into(),
        ));
    }
    let pop_users = popular_group(&train.user_counts(), ratio);
    let pop_items = popular_group(&train.item_counts(), ratio);
    // [pop user, unpop user, pop item, unpop item]
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    let mut total = 0.0;
    for p in pairs.pairs() {
        let dist = alignment_distance(model, p.user, p.item);
        total += dist;
        let ug = if pop_users[p.user] { 0 } else { 1 };
        let ig = if pop_items[p.item] { 2 } else { 3 };
        for g in [ug, ig] {
            sums[g] += dist;
            counts[g] += 1;
        }
    }
    Ok(GroupAlignmentReport {
        pop_user_align: group_mean(sums[0], counts[0], "popular users"),
        unpop_user_align: group_mean(sums[1], counts[1], "unpopular users"),
        pop_item_align: group_mean(sums[2], counts[2], "popular items"),
        unpop_item_align: group_mean(sums[3], counts[3], "unpopular items"),
        split_ratio: ratio,
        pair_counts: counts,
        overall_align: total / pairs.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of each metric across runs.
pub fn compare_runs(reports: &[MetricsReport]) -> Result<RunSummary> {
    if reports.len() < 2 {
        return Err(Error::invalid("comparing runs needs at least two reports"));
    }
    let recalls: Vec<f64> = reports.iter().map(|r| r.recall_at_k).collect();
    let ndcgs: Vec<f64> = reports.iter().map(|r| r.ndcg_at_k).collect();
    let (recall_mean, recall_std) = mean_std(&recalls);
    let (ndcg_mean, ndcg_std) = mean_std(&ndcgs);
    Ok(RunSummary {
        n_runs: reports.len(),
        recall_mean,
        recall_std,
        ndcg_mean,
        ndcg_std,
    })
}
