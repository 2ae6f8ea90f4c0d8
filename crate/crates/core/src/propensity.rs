//! Propensity estimators for inverse-propensity weighting of the alignment term.
//!
//! The learned estimator projects normalised user/item embeddings into a
//! relation space (`f_r(u) = u~ M_u^T`, `f_r(i) = i~ M_i^T`) and scores the
//! pair as `sigmoid(<f_r(u)~, f_r(i)~>)`. Since the dot product of unit
//! vectors lies in `[-1, 1]`, learned values are confined to
//! `[sigmoid(-1), sigmoid(1)] ~ [0.2689, 0.7311]`; the clip floor `mu = 0.1`
//! therefore never binds for this source and only affects the oracle and
//! popularity estimators.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionSet, SyntheticWorld};
use crate::embedding::{normalize, EmbeddingTable, ProjectionPair};
use crate::error::{Error, Result};

pub const DEFAULT_MU: f64 = 0.1;
pub const DEFAULT_POPULARITY_EXPONENT: f64 = 0.5;
/// Every estimate is capped here so that `omega_hat < 1` holds strictly.
pub const PROPENSITY_CAP: f64 = 1.0 - 1e-6;

const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySource {
    Learned,
    Oracle,
    ItemPopularity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityEstimate {
    pub values: Vec<f64>,
    pub source: PropensitySource,
}

impl PropensityEstimate {
    /// Inverse-propensity weights `1 / omega_hat`.
    pub fn weights(&self) -> Vec<f64> {
        self.values.iter().map(|w| 1.0 / w).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `max(w, mu)`.
pub fn clip(w: f64, mu: f64) -> f64 {
    w.max(mu)
}

/// Clip at `mu` and cap strictly below one.
pub fn clip_and_cap(w: f64, mu: f64) -> f64 {
    clip(w, mu).min(PROPENSITY_CAP)
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "clip floor mu must lie in (0,1), got {mu}"
        )))
    }
}

/// Row-wise `unit M^T` for a stack of row vectors.
pub fn project_rows(rows: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if rows.ncols() != m.ncols() || m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cannot project {}-dim rows with a {}x{} matrix",
            rows.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(rows.dot(&m.t()))
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// Relation-space vectors for each pair: `(u~ M_u^T, i~ M_i^T)`, computed
/// from the L2-normalised base embeddings.
pub fn project(
    model: &EmbeddingTable,
    projections: &ProjectionPair,
    pairs: &[Interaction],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = model.dim();
    if projections.m_user.dim() != (d, d) || projections.m_item.dim() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "projections are {:?}/{:?}, embeddings have d={d}",
            projections.m_user.dim(),
            projections.m_item.dim()
        )));
    }
    let mut users = Array2::zeros((pairs.len(), d));
    let mut items = Array2::zeros((pairs.len(), d));
    for (k, p) in pairs.iter().enumerate() {
        if p.user >= model.num_users() || p.item >= model.num_items() {
            return Err(Error::DimensionMismatch(format!(
                "pair ({}, {}) outside model",
                p.user, p.item
            )));
        }
        for (dst, v) in users
            .row_mut(k)
            .iter_mut()
            .zip(normalize(&model.user_row(p.user)))
        {
            *dst = v;
        }
        for (dst, v) in items
            .row_mut(k)
            .iter_mut()
            .zip(normalize(&model.item_row(p.item)))
        {
            *dst = v;
        }
    }
    Ok((
        project_rows(users.view(), to_f64(&projections.m_user).view())?,
        project_rows(items.view(), to_f64(&projections.m_item).view())?,
    ))
}

/// `sigmoid(<u, i>)` for already-normalised relation vectors.
pub fn estimate_learned(user_rel: &[f64], item_rel: &[f64]) -> Result<f64> {
    if user_rel.len() != item_rel.len() {
        return Err(Error::DimensionMismatch(
            "relation vectors differ in length".into(),
        ));
    }
    if cfg!(debug_assertions) {
        for v in [user_rel, item_rel] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!(
                    "relation vector is not normalised (norm {norm})"
                )));
            }
        }
    }
    let s: f64 = user_rel.iter().zip(item_rel).map(|(a, b)| a * b).sum();
    Ok(sigmoid(s))
}

/// Learned propensities for `pairs`, clipped at `mu` and capped below one.
pub fn estimate_learned_for_pairs(
    model: &EmbeddingTable,
    projections: &ProjectionPair,
    pairs: &[Interaction],
    mu: f64,
) -> Result<PropensityEstimate> {
    check_mu(mu)?;
    let (pu, pi) = project(model, projections, pairs)?;
    let values = pu
        .rows()
        .into_iter()
        .zip(pi.rows())
        .map(|(u, i)| {
            let u = normalize(u.as_slice().expect("standard layout"));
            let i = normalize(i.as_slice().expect("standard layout"));
            estimate_learned(&u, &i).map(|w| clip_and_cap(w, mu))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropensityEstimate {
        values,
        source: PropensitySource::Learned,
    })
}

/// Ground-truth exposure from a synthetic world, clipped.
pub fn estimate_oracle(
    world: &SyntheticWorld,
    pairs: &[Interaction],
    mu: f64,
) -> Result<PropensityEstimate> {
    check_mu(mu)?;
    let values = pairs
        .iter()
        .map(|p| {
            if p.user >= world.num_users() || p.item >= world.num_items() {
                Err(Error::DimensionMismatch(format!(
                    "pair ({}, {}) outside {}x{} world",
                    p.user,
                    p.item,
                    world.num_users(),
                    world.num_items()
                )))
            } else {
                Ok(clip_and_cap(world.omega(p.user, p.item), mu))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropensityEstimate {
        values,
        source: PropensitySource::Oracle,
    })
}

/// Item-only baseline: `(count(i) / max_count)^eta`, clipped and capped.
pub struct ItemPopularity {
    relative: Vec<f64>,
    exponent: f64,
}

impl ItemPopularity {
    pub fn new(train: &InteractionSet, exponent: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty);
        }
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(Error::invalid(format!(
                "popularity exponent must be >= 0, got {exponent}"
            )));
        }
        let counts = train.item_counts();
        let max = *counts.iter().max().expect("non-empty") as f64;
        Ok(Self {
            relative: counts.iter().map(|&c| c as f64 / max).collect(),
            exponent,
        })
    }

    pub fn value(&self, item: usize, mu: f64) -> f64 {
        clip_and_cap(self.relative[item].powf(self.exponent), mu)
    }
}

pub fn estimate_item_popularity(
    train: &InteractionSet,
    pairs: &[Interaction],
    exponent: f64,
    mu: f64,
) -> Result<PropensityEstimate> {
    check_mu(mu)?;
    let pop = ItemPopularity::new(train, exponent)?;
    let values = pairs
        .iter()
        .map(|p| {
            if p.item >= train.num_items() {
                Err(Error::DimensionMismatch(format!(
                    "item {} outside training set",
                    p.item
                )))
            } else {
                Ok(pop.value(p.item, mu))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropensityEstimate {
        values,
        source: PropensitySource::ItemPopularity,
    })
}
