//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use debias_cf::losses::Batch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| unit(&r.to_vec())).collect()
}

pub fn uniformity(vs: &[Vec<f64>]) -> f64 {
    let s = vs.len();
    if s < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..s {
        for l in 0..s {
            if k != l {
                acc += (-2.0 * sq_dist(&vs[k], &vs[l])).exp();
            }
        }
    }
    (acc / (s * (s - 1)) as f64).ln()
}

/// Weighted DirectAU on already-normalized rows.
pub fn au(
    us: &[Vec<f64>],
    is: &[Vec<f64>],
    pairs: &[(usize, usize)],
    w: &[f64],
    gamma: f64,
) -> f64 {
    let b = pairs.len() as f64;
    let align: f64 = pairs
        .iter()
        .zip(w)
        .map(|(&(u, i), wk)| wk * sq_dist(&us[u], &is[i]))
        .sum::<f64>()
        / b;
    align + gamma * (uniformity(us) + uniformity(is)) / 2.0
}

pub fn project(vs: &[Vec<f64>], m: &Array2<f64>) -> Vec<Vec<f64>> {
    vs.iter()
        .map(|v| {
            let p: Vec<f64> = m
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect();
            unit(&p)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn learned_weights(
    us: &[Vec<f64>],
    is: &[Vec<f64>],
    mu: &Array2<f64>,
    mi: &Array2<f64>,
    pairs: &[(usize, usize)],
    floor: f64,
) -> Vec<f64> {
    let ru = project(us, mu);
    let ri = project(is, mi);
    pairs
        .iter()
        .map(|&(u, i)| {
            let s: f64 = ru[u].iter().zip(&ri[i]).map(|(a, b)| a * b).sum();
            1.0 / sigmoid(s).max(floor)
        })
        .collect()
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0) * scale)
}

pub fn near_identity(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(a, b)| if a == b { 1.0 } else { 0.0 }) + random(rng, d, d, 0.3)
}

/// Norm-wise relative error of `analytic` against the central difference of `f`.
pub fn fd_error(
    analytic: &Array2<f64>,
    point: &Array2<f64>,
    f: impl Fn(&Array2<f64>) -> f64,
) -> f64 {
    let mut numeric = Array2::zeros(point.raw_dim());
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let mut plus = point.clone();
        plus[[r, c]] += H;
        let mut minus = point.clone();
        minus[[r, c]] -= H;
        numeric[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    let diff = (analytic - &numeric).mapv(|x| x * x).sum().sqrt();
    let scale = numeric.mapv(|x| x * x).sum().sqrt().max(1e-8);
    diff / scale
}

pub fn check(
    name: &str,
    analytic: &Array2<f64>,
    point: &Array2<f64>,
    f: impl Fn(&Array2<f64>) -> f64,
) {
    let err = fd_error(analytic, point, f);
    assert!(err < TOL, "{name}: relative error {err:.3e}");
}

pub struct Case {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
    pub m_user: Array2<f64>,
    pub m_item: Array2<f64>,
    pub pairs: Vec<(usize, usize)>,
}

pub fn case(seed: u64, m: usize, n: usize, d: usize, b: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize)> = (0..m.max(n)).map(|k| (k % m, k % n)).collect();
    while pairs.len() < b {
        pairs.push((rng.random_range(0..m), rng.random_range(0..n)));
    }
    Case {
        users: random(&mut rng, m, d, 1.0),
        items: random(&mut rng, n, d, 1.0),
        m_user: near_identity(&mut rng, d),
        m_item: near_identity(&mut rng, d),
        pairs,
    }
}

pub fn batch(c: &Case, users: &Array2<f64>, items: &Array2<f64>) -> Batch {
    Batch::from_rows(users.clone(), items.clone(), &c.pairs).unwrap()
}

use debias_cf::data::{Interaction, InteractionSet};
use debias_cf::embedding::EmbeddingTable;

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    m: usize,
    n: usize,
    d: usize,
) -> (EmbeddingTable, InteractionSet, InteractionSet) {
    // small integer coordinates make score ties common
    let table = EmbeddingTable {
        user_vecs: Array2::from_shape_fn((m, d), |_| rng.random_range(-2i32..=2) as f32),
        item_vecs: Array2::from_shape_fn((n, d), |_| rng.random_range(-2i32..=2) as f32),
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..m {
        for i in 0..n {
            let r: f64 = rng.random();
            if r < 0.15 {
                train.push(Interaction::new(u, i));
            } else if r < 0.22 {
                test.push(Interaction::new(u, i));
            }
        }
    }
    (
        table,
        InteractionSet::from_pairs(m, n, train).unwrap(),
        InteractionSet::from_pairs(m, n, test).unwrap(),
    )
}

/// Full sort then filter, with the textbook metric formulas.
pub fn brute_topk(
    model: &EmbeddingTable,
    train: &InteractionSet,
    test: &InteractionSet,
    k: usize,
) -> (f64, f64, usize) {
    let (m, n) = (model.num_users(), model.num_items());
    let (mut recall_sum, mut ndcg_sum, mut users) = (0.0, 0.0, 0usize);
    for u in 0..m {
        let relevant: Vec<usize> = (0..n).filter(|&i| test.contains(u, i)).collect();
        if relevant.is_empty() {
            continue;
        }
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 0.0;
                for c in 0..model.dim() {
                    s += f64::from(model.user_vecs[[u, c]]) * f64::from(model.item_vecs[[i, c]]);
                }
                s
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let ranked: Vec<usize> = order
            .into_iter()
            .filter(|&i| !train.contains(u, i))
            .take(k)
            .collect();
        if ranked.is_empty() {
            continue;
        }
        let mut hits = 0;
        let mut dcg = 0.0;
        for (p, i) in ranked.iter().enumerate() {
            if relevant.contains(i) {
                hits += 1;
                dcg += 1.0 / ((p + 2) as f64).log2();
            }
        }
        let mut idcg = 0.0;
        for p in 0..k.min(relevant.len()) {
            idcg += 1.0 / ((p + 2) as f64).log2();
        }
        recall_sum += hits as f64 / relevant.len() as f64;
        ndcg_sum += dcg / idcg;
        users += 1;
    }
    if users == 0 {
        return (0.0, 0.0, 0);
    }
    (recall_sum / users as f64, ndcg_sum / users as f64, users)
}

/// `true` for entries ranked inside the top `ceil(ratio * len)` by count.
pub fn brute_popular(counts: &[usize], ratio: f64) -> Vec<bool> {
    let take = (ratio * counts.len() as f64).ceil() as usize;
    (0..counts.len())
        .map(|i| {
            let ahead = (0..counts.len())
                .filter(|&j| counts[j] > counts[i] || (counts[j] == counts[i] && j < i))
                .count();
            ahead < take
        })
        .collect()
}

/// Four group means in the order pop user, unpop user, pop item, unpop item.
pub fn brute_groups(
    model: &EmbeddingTable,
    pairs: &InteractionSet,
    train: &InteractionSet,
    ratio: f64,
) -> [f64; 4] {
    let (m, n) = (model.num_users(), model.num_items());
    let ucount: Vec<usize> = (0..m)
        .map(|u| (0..n).filter(|&i| train.contains(u, i)).count())
        .collect();
    let icount: Vec<usize> = (0..n)
        .map(|i| (0..m).filter(|&u| train.contains(u, i)).count())
        .collect();
    let pu = brute_popular(&ucount, ratio);
    let pi = brute_popular(&icount, ratio);
    let dist = |p: &Interaction| {
        let u = unit(&model.user_row(p.user));
        let i = unit(&model.item_row(p.item));
        sq_dist(&u, &i)
    };
    let mean = |keep: &dyn Fn(&Interaction) -> bool| {
        let sel: Vec<f64> = pairs.pairs().iter().filter(|p| keep(p)).map(dist).collect();
        if sel.is_empty() {
            f64::NAN
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    };
    [
        mean(&|p| pu[p.user]),
        mean(&|p| !pu[p.user]),
        mean(&|p| pi[p.item]),
        mean(&|p| !pi[p.item]),
    ]
}

/// NaN-aware equality.
pub fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}
