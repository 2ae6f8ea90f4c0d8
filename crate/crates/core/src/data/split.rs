use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolTag {
    /// Test set carved out of biased clicks by item-uniform sampling.
    SyntheticDebiased,
    /// Test set supplied externally (e.g. collected without exposure bias).
    Preprovided,
}

/// How the held-out test sample is drawn from the clicks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSampling {
    /// Every item contributes `test_frac` of its own interactions.
    #[default]
    PerItem,
    /// A single uniform draw of `test_frac` of all interactions.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_frac: f64,
    pub valid_frac: f64,
    pub seed: u64,
    pub sampling: TestSampling,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_frac: 0.1,
            valid_frac: 0.1,
            seed: 0,
            sampling: TestSampling::PerItem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBundle {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub protocol_tag: ProtocolTag,
}

/// `floor(x)` plus one with probability `frac(x)`.
fn stochastic_round(x: f64, rng: &mut impl Rng) -> usize {
    let base = x.floor();
    let extra = if rng.random::<f64>() < x - base { 1 } else { 0 };
    base as usize + extra
}

fn check_fractions(test_frac: f64, valid_frac: f64) -> Result<()> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(test_frac) || !in_unit(valid_frac) || test_frac + valid_frac >= 1.0 {
        return Err(Error::invalid(format!(
            "split fractions must lie in (0,1) and sum below 1 (test={test_frac}, valid={valid_frac})"
        )));
    }
    Ok(())
}

/// 80/10/10-style split with an item-uniform test sample.
pub fn split_unbiased_protocol(
    data: &InteractionSet,
    test_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<SplitBundle> {
    split_with(
        data,
        &SplitConfig {
            test_frac,
            valid_frac,
            seed,
            sampling: TestSampling::PerItem,
        },
    )
}

pub fn split_with(data: &InteractionSet, cfg: &SplitConfig) -> Result<SplitBundle> {
    check_fractions(cfg.test_frac, cfg.valid_frac)?;
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, n) = (data.num_users(), data.num_items());

    let mut test = Vec::new();
    let mut rest = Vec::new();
    match cfg.sampling {
        TestSampling::PerItem => {
            for item in 0..n {
                let mut users = data.users_of(item).to_vec();
                let k = stochastic_round(users.len() as f64 * cfg.test_frac, &mut rng);
                let (chosen, others) = users.partial_shuffle(&mut rng, k);
                test.extend(chosen.iter().map(|&u| Interaction::new(u, item)));
                rest.extend(others.iter().map(|&u| Interaction::new(u, item)));
            }
        }
        TestSampling::Global => {
            let mut all = data.pairs().to_vec();
            let k = stochastic_round(all.len() as f64 * cfg.test_frac, &mut rng);
            let (chosen, others) = all.partial_shuffle(&mut rng, k);
            test.extend_from_slice(chosen);
            rest.extend_from_slice(others);
        }
    }
    rest.sort_unstable();

    let valid_rate = cfg.valid_frac / (1.0 - cfg.test_frac);
    let k = stochastic_round(rest.len() as f64 * valid_rate, &mut rng);
    let (valid, train) = rest.partial_shuffle(&mut rng, k);
    let (mut train, mut valid) = (train.to_vec(), valid.to_vec());

    repair_untrained_users(m, &mut train, &mut valid, &mut test);

    Ok(SplitBundle {
        train: InteractionSet::from_pairs(m, n, train)?,
        validation: InteractionSet::from_pairs(m, n, valid)?,
        test: InteractionSet::from_pairs(m, n, test)?,
        protocol_tag: ProtocolTag::SyntheticDebiased,
    })
}

/// Moves one held-out interaction back to train for every user that the
/// sampling left without training data. The smallest item index is taken,
/// from validation before test.
fn repair_untrained_users(
    m: usize,
    train: &mut Vec<Interaction>,
    valid: &mut Vec<Interaction>,
    test: &mut Vec<Interaction>,
) {
    let mut has_train = vec![false; m];
    for p in train.iter() {
        has_train[p.user] = true;
    }
    for pool in [valid, test] {
        pool.sort_unstable();
        let mut keep = Vec::with_capacity(pool.len());
        for p in pool.drain(..) {
            if !has_train[p.user] {
                has_train[p.user] = true;
                train.push(p);
            } else {
                keep.push(p);
            }
        }
        *pool = keep;
    }
}

/// Split for data whose test set was collected separately: validation is
/// drawn uniformly from `train_data` at `valid_frac`.
pub fn split_preprovided(
    train_data: &InteractionSet,
    test: &InteractionSet,
    valid_frac: f64,
    seed: u64,
) -> Result<SplitBundle> {
    if !(valid_frac > 0.0 && valid_frac < 1.0) {
        return Err(Error::invalid(format!(
            "valid_frac must lie in (0,1), got {valid_frac}"
        )));
    }
    if train_data.is_empty() {
        return Err(Error::Empty);
    }
    let (m, n) = (train_data.num_users(), train_data.num_items());
    if test.num_users() != m || test.num_items() != n {
        return Err(Error::DimensionMismatch(
            "test set dimensions differ from training data".into(),
        ));
    }
    if let Some(p) = test
        .pairs()
        .iter()
        .find(|p| train_data.contains(p.user, p.item))
    {
        return Err(Error::invalid(format!(
            "pair ({}, {}) appears in both training data and test set",
            p.user, p.item
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = train_data.pairs().to_vec();
    let k = stochastic_round(all.len() as f64 * valid_frac, &mut rng);
    let (valid, train) = all.partial_shuffle(&mut rng, k);
    let (mut train, mut valid) = (train.to_vec(), valid.to_vec());
    let mut no_test = Vec::new();
    repair_untrained_users(m, &mut train, &mut valid, &mut no_test);
    Ok(SplitBundle {
        train: InteractionSet::from_pairs(m, n, train)?,
        validation: InteractionSet::from_pairs(m, n, valid)?,
        test: test.clone(),
        protocol_tag: ProtocolTag::Preprovided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn grid(m: usize, n: usize, keep: impl Fn(usize, usize) -> bool) -> InteractionSet {
        let pairs = (0..m)
            .flat_map(|u| (0..n).map(move |i| (u, i)))
            .filter(|&(u, i)| keep(u, i))
            .map(|(u, i)| Interaction::new(u, i));
        InteractionSet::from_pairs(m, n, pairs).unwrap()
    }

    fn assert_partition(data: &InteractionSet, b: &SplitBundle) {
        let sets: Vec<HashSet<Interaction>> = [&b.train, &b.validation, &b.test]
            .iter()
            .map(|s| s.pairs().iter().copied().collect())
            .collect();
        for a in 0..3 {
            for c in (a + 1)..3 {
                assert!(sets[a].is_disjoint(&sets[c]));
            }
        }
        let union: HashSet<Interaction> = sets.iter().flatten().copied().collect();
        let input: HashSet<Interaction> = data.pairs().iter().copied().collect();
        assert_eq!(union, input);
    }

    #[test]
    fn eighty_ten_ten() {
        let data = grid(100, 100, |u, i| (u * 7 + i * 3) % 5 < 2);
        let b = split_unbiased_protocol(&data, 0.1, 0.1, 42).unwrap();
        assert_partition(&data, &b);
        let total = data.len() as f64;
        assert!((b.test.len() as f64 / total - 0.1).abs() < 0.01);
        assert!((b.validation.len() as f64 / total - 0.1).abs() < 0.01);
        assert!((b.train.len() as f64 / total - 0.8).abs() < 0.01);
        assert_eq!(b.protocol_tag, ProtocolTag::SyntheticDebiased);
    }

    #[test]
    fn per_item_rate_is_one_in_ten() {
        // item 0 has 10 interactions; every user is dense enough that the
        // zero-train repair never fires
        let data = grid(10, 8, |_, _| true);
        let mut total = 0usize;
        let seeds = 1000;
        for seed in 0..seeds {
            let b = split_unbiased_protocol(&data, 0.1, 0.1, seed).unwrap();
            total += b.test.users_of(0).len();
        }
        let mean = total as f64 / seeds as f64;
        assert!((mean - 1.0).abs() <= 0.1, "mean test count {mean}");
    }

    #[test]
    fn per_item_rate_fractional_expectation() {
        // 7 interactions at rate 0.1 -> 0.7 expected per split
        let data = grid(7, 8, |_, _| true);
        let seeds = 2000;
        let total: usize = (0..seeds)
            .map(|s| {
                split_unbiased_protocol(&data, 0.1, 0.1, s)
                    .unwrap()
                    .test
                    .users_of(0)
                    .len()
            })
            .sum();
        let mean = total as f64 / seeds as f64;
        assert!((mean - 0.7).abs() < 0.05, "{mean}");
    }

    #[test]
    fn deterministic_for_seed() {
        let data = grid(30, 20, |u, i| (u + 2 * i) % 3 == 0);
        let a = split_unbiased_protocol(&data, 0.2, 0.1, 9).unwrap();
        let b = split_unbiased_protocol(&data, 0.2, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = split_unbiased_protocol(&data, 0.2, 0.1, 10).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn bad_fractions_rejected() {
        let data = grid(3, 3, |_, _| true);
        for (t, v) in [(0.0, 0.1), (0.1, 0.0), (0.6, 0.4), (1.2, 0.1), (-0.1, 0.1)] {
            assert!(split_unbiased_protocol(&data, t, v, 0).is_err(), "{t} {v}");
        }
    }

    #[test]
    fn every_user_keeps_a_training_pair() {
        // one interaction per user: without repair many users would vanish from train
        let data = grid(50, 50, |u, i| u == i);
        let b = split_unbiased_protocol(&data, 0.3, 0.3, 1).unwrap();
        assert_partition(&data, &b);
        b.train.ensure_trainable().unwrap();
    }

    #[test]
    fn global_sampling_is_supported() {
        let data = grid(40, 40, |u, i| (u * i) % 4 == 1);
        let cfg = SplitConfig {
            sampling: TestSampling::Global,
            seed: 3,
            ..Default::default()
        };
        let b = split_with(&data, &cfg).unwrap();
        assert_partition(&data, &b);
    }

    #[test]
    fn preprovided_keeps_test_and_rejects_overlap() {
        let train = grid(10, 10, |u, i| (u + i) % 2 == 0);
        let test = grid(10, 10, |u, i| (u + i) % 2 == 1 && u == i + 1);
        let b = split_preprovided(&train, &test, 0.1, 5).unwrap();
        assert_eq!(b.test, test);
        assert_eq!(b.protocol_tag, ProtocolTag::Preprovided);
        assert_eq!(b.train.len() + b.validation.len(), train.len());
        let overlapping = grid(10, 10, |u, i| u == 0 && i == 0);
        assert!(split_preprovided(&train, &overlapping, 0.1, 5).is_err());
    }

    fn arb_set() -> impl Strategy<Value = InteractionSet> {
        (2usize..15, 2usize..15).prop_flat_map(|(m, n)| {
            proptest::collection::vec((0..m, 0..n), 1..120).prop_map(move |ps| {
                InteractionSet::from_pairs(
                    m,
                    n,
                    ps.into_iter().map(|(u, i)| Interaction::new(u, i)),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn split_is_a_partition(data in arb_set(), seed in any::<u64>(), global in any::<bool>()) {
            let cfg = SplitConfig {
                test_frac: 0.2,
                valid_frac: 0.15,
                seed,
                sampling: if global { TestSampling::Global } else { TestSampling::PerItem },
            };
            let b = split_with(&data, &cfg).unwrap();
            assert_partition(&data, &b);
        }
    }
}
