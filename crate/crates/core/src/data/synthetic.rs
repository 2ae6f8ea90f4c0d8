//! A synthetic missing-not-at-random click generator.
//!
//! Each cell carries an exposure probability `omega` and a relevance
//! probability `rho`; a click is sampled with probability `omega * rho`.
//! Exposure follows an item-popularity power law scaled by a user activity
//! factor, and relevance comes from a random low-rank logistic model so the
//! true preferences have collaborative structure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Interaction, InteractionSet};
use crate::error::{Error, Result};

const WORLD_MAGIC: &[u8; 4] = b"SYNW";
const WORLD_VERSION: u32 = 1;
const SAMPLE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    /// Exposure floor; keeps every `omega` strictly positive.
    pub exposure_floor: f64,
    pub latent_dim: usize,
    /// Multiplier on the latent dot product inside the sigmoid.
    pub relevance_scale: f64,
    /// Offset inside the sigmoid; negative values make relevance sparse.
    pub relevance_bias: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            exposure_floor: 0.01,
            latent_dim: 8,
            relevance_scale: 4.0,
            relevance_bias: -2.0,
        }
    }
}

/// Ground-truth relevance and exposure matrices (row-major, users x items).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub relevance: Array2<f32>,
    pub exposure: Array2<f32>,
}

impl SyntheticWorld {
    pub fn new(relevance: Array2<f32>, exposure: Array2<f32>) -> Result<Self> {
        if relevance.dim() != exposure.dim() {
            return Err(Error::DimensionMismatch(format!(
                "relevance {:?} vs exposure {:?}",
                relevance.dim(),
                exposure.dim()
            )));
        }
        if relevance.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::invalid("relevance must lie in [0, 1]"));
        }
        if exposure.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::invalid("exposure must lie in (0, 1]"));
        }
        Ok(Self {
            relevance,
            exposure,
        })
    }

    pub fn num_users(&self) -> usize {
        self.relevance.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.relevance.ncols()
    }

    pub fn rho(&self, user: usize, item: usize) -> f64 {
        f64::from(self.relevance[[user, item]])
    }

    pub fn omega(&self, user: usize, item: usize) -> f64 {
        f64::from(self.exposure[[user, item]])
    }

    pub fn click_prob(&self, user: usize, item: usize) -> f64 {
        self.omega(user, item) * self.rho(user, item)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(WORLD_MAGIC)?;
        w.write_all(&WORLD_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_users() as u64).to_le_bytes())?;
        w.write_all(&(self.num_items() as u64).to_le_bytes())?;
        for mat in [&self.relevance, &self.exposure] {
            for &v in mat.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 8 + 8;
        if bytes.len() < HEADER {
            return Err(Error::Corrupt("world file shorter than header".into()));
        }
        if &bytes[..4] != WORLD_MAGIC {
            return Err(Error::Corrupt("bad world magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WORLD_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let m = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let cells = m
            .checked_mul(n)
            .ok_or_else(|| Error::Corrupt("world dimensions overflow".into()))?;
        if bytes.len() != HEADER + 2 * 4 * cells {
            return Err(Error::Corrupt(format!(
                "world file has {} bytes, expected {}",
                bytes.len(),
                HEADER + 8 * cells
            )));
        }
        let floats: Vec<f32> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let relevance =
            Array2::from_shape_vec((m, n), floats[..cells].to_vec()).expect("length checked");
        let exposure =
            Array2::from_shape_vec((m, n), floats[cells..].to_vec()).expect("length checked");
        Self::new(relevance, exposure)
    }
}

/// Power-law weights over a random popularity ranking: the item at rank `r`
/// (1 = most popular) gets `((n - r + 1) / n)^skew`, so the max/min ratio is
/// `n^skew`.
pub fn item_exposure_weights(n: usize, skew: f64, rng: &mut impl Rng) -> Vec<f64> {
    rank_weights(n, skew, rng)
}

fn rank_weights(len: usize, exponent: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (1..=len).collect();
    ranks.shuffle(rng);
    ranks
        .into_iter()
        .map(|r| ((len - r + 1) as f64 / len as f64).powf(exponent))
        .collect()
}

/// `omega_ui = clamp(item_weight_i * activity_u, floor, 1)` with the user
/// activity factor drawn from the same rank law at half the exponent;
/// `rho_ui = sigmoid(scale * <p_u, q_i> + bias)` for random latent factors.
pub fn generate_synthetic_world(
    m: usize,
    n: usize,
    skew: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    generate_with_params(m, n, skew, seed, &WorldParams::default())
}

pub(crate) fn generate_with_params(
    m: usize,
    n: usize,
    skew: f64,
    seed: u64,
    params: &WorldParams,
) -> Result<SyntheticWorld> {
    if m < 2 || n < 2 {
        return Err(Error::invalid(format!(
            "synthetic world needs at least 2 users and 2 items, got {m}x{n}"
        )));
    }
    if !(skew >= 0.0 && skew.is_finite()) {
        return Err(Error::invalid(format!(
            "skew must be finite and >= 0, got {skew}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item_w = rank_weights(n, skew, &mut rng);
    let user_w = rank_weights(m, skew / 2.0, &mut rng);

    let d0 = params.latent_dim;
    // entries N(0, 1/sqrt(d0)) so that the latent dot product has unit variance
    let std = (d0 as f64).powf(-0.25);
    let mut factors = |rows: usize| -> Array2<f64> {
        Array2::from_shape_fn((rows, d0), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
    };
    let p = factors(m);
    let q = factors(n);
    let logits = p.dot(&q.t());

    let relevance = logits.mapv(|x| {
        (1.0 / (1.0 + (-(params.relevance_scale * x + params.relevance_bias)).exp())) as f32
    });
    let floor = params.exposure_floor;
    let exposure = Array2::from_shape_fn((m, n), |(u, i)| {
        (item_w[i] * user_w[u]).clamp(floor, 1.0) as f32
    });
    SyntheticWorld::new(relevance, exposure)
}

/// Samples each cell independently with probability `omega * rho`. A user
/// row that comes up empty is redrawn up to ten times, after which the
/// user's most likely cell is clicked.
pub fn sample_clicks(world: &SyntheticWorld, seed: u64) -> InteractionSet {
    sample_rows(world, seed, |u, i| world.click_prob(u, i))
}

/// Independent Bernoulli clicks with probability `omega * rho` and no
/// empty-row repair, so every cell keeps its exact click probability.
pub fn sample_bernoulli_clicks(world: &SyntheticWorld, seed: u64) -> InteractionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (world.num_users(), world.num_items());
    let mut pairs = Vec::new();
    for u in 0..m {
        for i in 0..n {
            if rng.random::<f64>() < world.click_prob(u, i) {
                pairs.push(Interaction::new(u, i));
            }
        }
    }
    InteractionSet::from_pairs(m, n, pairs).expect("indices within world")
}

/// Missing-at-random clicks: each cell not in `exclude` is clicked with
/// probability `exposure * rho`, independent of popularity. Rows may be empty.
pub fn sample_relevance_clicks(
    world: &SyntheticWorld,
    exposure: f64,
    exclude: &InteractionSet,
    seed: u64,
) -> InteractionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (world.num_users(), world.num_items());
    let mut pairs = Vec::new();
    for u in 0..m {
        for i in 0..n {
            let p = exposure * world.rho(u, i);
            if rng.random::<f64>() < p && !exclude.contains(u, i) {
                pairs.push(Interaction::new(u, i));
            }
        }
    }
    InteractionSet::from_pairs(m, n, pairs).expect("indices within world")
}

fn sample_rows(
    world: &SyntheticWorld,
    seed: u64,
    prob: impl Fn(usize, usize) -> f64,
) -> InteractionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = (world.num_users(), world.num_items());
    let mut pairs = Vec::new();
    let mut row = Vec::new();
    for u in 0..m {
        for _ in 0..=SAMPLE_RETRIES {
            row.clear();
            row.extend((0..n).filter(|&i| rng.random::<f64>() < prob(u, i)));
            if !row.is_empty() {
                break;
            }
        }
        if row.is_empty() {
            let best = (0..n)
                .max_by(|&a, &b| prob(u, a).total_cmp(&prob(u, b)).then(b.cmp(&a)))
                .expect("n >= 1");
            row.push(best);
        }
        pairs.extend(row.iter().map(|&i| Interaction::new(u, i)));
    }
    InteractionSet::from_pairs(m, n, pairs).expect("indices within world")
}
