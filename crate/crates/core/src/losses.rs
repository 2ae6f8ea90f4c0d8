//! Alignment/uniformity loss kernels with analytical gradients.
//!
//! Vectors are L2-normalised before every loss. Kernels at the bottom of the
//! stack ([`alignment_loss`], [`uniformity_loss`]) take unit vectors and
//! return gradients with respect to those unit vectors; the combined
//! objectives take raw rows from a [`Batch`] and return gradients with
//! respect to the raw rows (the normalisation chain rule is applied here).
//!
//! Uniformity convention: each side contributes
//! `log mean_{k != l} exp(-2 |v_k - v_l|^2)` over the distinct rows of the
//! batch, and the two sides enter the objective as `gamma * (U_user + U_item) / 2`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionSet, SyntheticWorld};
use crate::embedding::{normalize, normalize_with_norm, EmbeddingTable};
use crate::error::{Error, Result};
use crate::propensity::{clip_and_cap, project_rows, sigmoid, PROPENSITY_CAP};

/// Scalar pieces of one objective evaluation.
///
/// For the original-space objective `total = align + gamma * (uniform_user +
/// uniform_item) / 2` and `lambda_rel` is zero; for the relation-space
/// objective the roles swap: `gamma` is zero and `lambda_rel` weights the
/// uniformity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub align: f64,
    pub uniform_user: f64,
    pub uniform_item: f64,
    pub total: f64,
    pub gamma: f64,
    pub lambda_rel: f64,
}

impl LossTerms {
    pub fn directau(align: f64, uniform_user: f64, uniform_item: f64, gamma: f64) -> Self {
        Self {
            align,
            uniform_user,
            uniform_item,
            total: align + gamma * (uniform_user + uniform_item) / 2.0,
            gamma,
            lambda_rel: 0.0,
        }
    }

    pub fn relation(align: f64, uniform_user: f64, uniform_item: f64, lambda_rel: f64) -> Self {
        Self {
            align,
            uniform_user,
            uniform_item,
            total: align + lambda_rel * (uniform_user + uniform_item) / 2.0,
            gamma: 0.0,
            lambda_rel,
        }
    }

    /// Uniformity as it enters the objective, `(U_user + U_item) / 2`.
    pub fn uniform(&self) -> f64 {
        (self.uniform_user + self.uniform_item) / 2.0
    }
}

/// Unit rows plus the norms needed to backpropagate through normalisation.
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub unit: Array2<f64>,
    norms: Vec<Option<f64>>,
}

pub fn normalize_rows(raw: ArrayView2<'_, f64>) -> NormalizedRows {
    let mut unit = Array2::zeros(raw.raw_dim());
    let mut norms = Vec::with_capacity(raw.nrows());
    for (row, mut out) in raw.rows().into_iter().zip(unit.rows_mut()) {
        let (v, norm) = normalize_with_norm(&row.to_vec());
        out.iter_mut().zip(v).for_each(|(o, x)| *o = x);
        norms.push(norm);
    }
    NormalizedRows { unit, norms }
}

impl NormalizedRows {
    /// Maps `dL/d(unit)` to `dL/d(raw)`: `(g - u (u . g)) / |raw|` per row.
    /// Dead rows receive zero gradient.
    pub fn backprop(&self, grad_unit: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(grad_unit.raw_dim());
        for (k, mut dst) in out.rows_mut().into_iter().enumerate() {
            let Some(norm) = self.norms[k] else { continue };
            let u = self.unit.row(k);
            let g = grad_unit.row(k);
            let ug = u.dot(&g);
            for ((d, &gi), &ui) in dst.iter_mut().zip(g.iter()).zip(u.iter()) {
                *d = (gi - ui * ug) / norm;
            }
        }
        out
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    /// `B x d`, with respect to the user-side unit vectors.
    pub grad_user: Array2<f64>,
    /// `B x d`, with respect to the item-side unit vectors.
    pub grad_item: Array2<f64>,
}

fn check_weights(weights: &[f64], expected: usize) -> Result<()> {
    if weights.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {expected} pairs",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!(
            "pair weights must be finite and > 0, got {w}"
        )));
    }
    Ok(())
}

/// `(1/B) sum_k w_k |u_k - i_k|^2` over row-aligned unit vectors.
///
/// Unit weights give the plain (click-biased) alignment; `w_k = 1/omega_hat`
/// gives the inverse-propensity-weighted alignment.
pub fn alignment_loss(
    users: ArrayView2<'_, f64>,
    items: ArrayView2<'_, f64>,
    weights: &[f64],
) -> Result<PairLoss> {
    let b = users.nrows();
    if b == 0 {
        return Err(Error::invalid("alignment over an empty batch"));
    }
    if items.dim() != users.dim() {
        return Err(Error::DimensionMismatch(format!(
            "user rows {:?} vs item rows {:?}",
            users.dim(),
            items.dim()
        )));
    }
    check_weights(weights, b)?;
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad_user = Array2::zeros(users.raw_dim());
    for k in 0..b {
        let (u, i) = (users.row(k), items.row(k));
        value += weights[k] * sq_dist(u, i);
        let scale = 2.0 * weights[k] * inv_b;
        for ((g, &x), &y) in grad_user.row_mut(k).iter_mut().zip(u.iter()).zip(i.iter()) {
            *g = scale * (x - y);
        }
    }
    let grad_item = -&grad_user;
    Ok(PairLoss {
        value: value * inv_b,
        grad_user,
        grad_item,
    })
}

#[derive(Debug, Clone)]
pub struct SideLoss {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// `log( mean_{k != l} exp(-2 |v_k - v_l|^2) )` over the rows of `vecs`.
pub fn uniformity_loss(vecs: ArrayView2<'_, f64>) -> Result<SideLoss> {
    let b = vecs.nrows();
    if b < 2 {
        return Err(Error::invalid(format!(
            "uniformity needs at least 2 rows, got {b}"
        )));
    }
    // kernel values for k < l; S counts each unordered pair twice
    let mut kernel = Array2::<f64>::zeros((b, b));
    let mut half_sum = 0.0;
    for k in 0..b {
        for l in (k + 1)..b {
            let e = (-2.0 * sq_dist(vecs.row(k), vecs.row(l))).exp();
            kernel[[k, l]] = e;
            kernel[[l, k]] = e;
            half_sum += e;
        }
    }
    let sum = 2.0 * half_sum;
    let value = (sum / (b * (b - 1)) as f64).ln();

    let mut grad = Array2::zeros(vecs.raw_dim());
    let coef = -8.0 / sum;
    for k in 0..b {
        let vk = vecs.row(k);
        let mut gk = grad.row_mut(k);
        for l in 0..b {
            if l == k {
                continue;
            }
            let e = kernel[[k, l]];
            for ((g, &x), &y) in gk.iter_mut().zip(vk.iter()).zip(vecs.row(l).iter()) {
                *g += coef * e * (x - y);
            }
        }
    }
    Ok(SideLoss { value, grad })
}

/// A minibatch of clicked pairs with the distinct users and items it touches.
///
/// `user_raw`/`item_raw` hold one raw (unnormalised) row per distinct user /
/// item; `pair_user[k]`/`pair_item[k]` index those rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<Interaction>,
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub pair_user: Vec<usize>,
    pub pair_item: Vec<usize>,
    pub user_raw: Array2<f64>,
    pub item_raw: Array2<f64>,
}

fn local_index(ids: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let ids: Vec<usize> = ids.collect();
    let mut map = BTreeMap::new();
    for &id in &ids {
        map.entry(id).or_insert(0usize);
    }
    for (slot, v) in map.values_mut().enumerate() {
        *v = slot;
    }
    let unique = map.keys().copied().collect();
    let local = ids.iter().map(|id| map[id]).collect();
    (unique, local)
}

impl Batch {
    /// Gathers the rows a set of pairs touches. Distinct ids are sorted.
    pub fn gather(model: &EmbeddingTable, pairs: &[Interaction]) -> Result<Self> {
        if let Some(p) = pairs
            .iter()
            .find(|p| p.user >= model.num_users() || p.item >= model.num_items())
        {
            return Err(Error::DimensionMismatch(format!(
                "pair ({}, {}) outside model",
                p.user, p.item
            )));
        }
        let (users, pair_user) = local_index(pairs.iter().map(|p| p.user));
        let (items, pair_item) = local_index(pairs.iter().map(|p| p.item));
        let d = model.dim();
        let user_raw = Array2::from_shape_fn((users.len(), d), |(r, c)| {
            f64::from(model.user_vecs[[users[r], c]])
        });
        let item_raw = Array2::from_shape_fn((items.len(), d), |(r, c)| {
            f64::from(model.item_vecs[[items[r], c]])
        });
        Ok(Self {
            pairs: pairs.to_vec(),
            users,
            items,
            pair_user,
            pair_item,
            user_raw,
            item_raw,
        })
    }

    /// Builds a batch directly from raw rows; row `r` stands for id `r`.
    pub fn from_rows(
        user_raw: Array2<f64>,
        item_raw: Array2<f64>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        if user_raw.ncols() != item_raw.ncols() {
            return Err(Error::DimensionMismatch(
                "user and item rows differ in width".into(),
            ));
        }
        if pairs
            .iter()
            .any(|&(u, i)| u >= user_raw.nrows() || i >= item_raw.nrows())
        {
            return Err(Error::DimensionMismatch(
                "pair index outside provided rows".into(),
            ));
        }
        Ok(Self {
            pairs: pairs.iter().map(|&(u, i)| Interaction::new(u, i)).collect(),
            users: (0..user_raw.nrows()).collect(),
            items: (0..item_raw.nrows()).collect(),
            pair_user: pairs.iter().map(|p| p.0).collect(),
            pair_item: pairs.iter().map(|p| p.1).collect(),
            user_raw,
            item_raw,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn gather_rows(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    src.select(Axis(0), idx)
}

fn scatter_add(dst: &mut Array2<f64>, idx: &[usize], src: &Array2<f64>) {
    for (k, &r) in idx.iter().enumerate() {
        let mut row = dst.row_mut(r);
        row += &src.row(k);
    }
}

fn side_uniformity(unit: &Array2<f64>) -> Result<SideLoss> {
    if unit.nrows() < 2 {
        // a side with one distinct row carries no repulsion signal
        return Ok(SideLoss {
            value: 0.0,
            grad: Array2::zeros(unit.raw_dim()),
        });
    }
    uniformity_loss(unit.view())
}

/// DirectAU-shaped objective on unit rows: weighted alignment plus
/// `weight * (U_user + U_item) / 2`. Gradients are w.r.t. the unit rows.
struct AuOnUnits {
    align: f64,
    uniform_user: f64,
    uniform_item: f64,
    grad_user: Array2<f64>,
    grad_item: Array2<f64>,
    /// `|u_k - i_k|^2` per pair.
    distances: Vec<f64>,
}

fn au_on_units(
    unit_user: &Array2<f64>,
    unit_item: &Array2<f64>,
    pair_user: &[usize],
    pair_item: &[usize],
    weights: &[f64],
    uniform_weight: f64,
) -> Result<AuOnUnits> {
    if !(uniform_weight >= 0.0 && uniform_weight.is_finite()) {
        return Err(Error::invalid(format!(
            "uniformity weight must be finite and >= 0, got {uniform_weight}"
        )));
    }
    let pu = gather_rows(unit_user, pair_user);
    let pi = gather_rows(unit_item, pair_item);
    let align = alignment_loss(pu.view(), pi.view(), weights)?;
    let distances = pu
        .rows()
        .into_iter()
        .zip(pi.rows())
        .map(|(u, i)| sq_dist(u, i))
        .collect();

    let mut grad_user = Array2::zeros(unit_user.raw_dim());
    let mut grad_item = Array2::zeros(unit_item.raw_dim());
    scatter_add(&mut grad_user, pair_user, &align.grad_user);
    scatter_add(&mut grad_item, pair_item, &align.grad_item);

    let uu = side_uniformity(unit_user)?;
    let ui = side_uniformity(unit_item)?;
    let half = uniform_weight / 2.0;
    if half != 0.0 {
        grad_user.scaled_add(half, &uu.grad);
        grad_item.scaled_add(half, &ui.grad);
    }
    Ok(AuOnUnits {
        align: align.value,
        uniform_user: uu.value,
        uniform_item: ui.value,
        grad_user,
        grad_item,
        distances,
    })
}

/// Output of an original-space objective; gradients are w.r.t. the batch's
/// raw user/item rows.
#[derive(Debug, Clone)]
pub struct DauOutput {
    pub terms: LossTerms,
    pub grad_user: Array2<f64>,
    pub grad_item: Array2<f64>,
}

/// Biased DirectAU: unit-weight alignment plus gamma-weighted uniformity.
pub fn directau_loss(batch: &Batch, gamma: f64) -> Result<DauOutput> {
    unbiased_directau_loss(batch, &vec![1.0; batch.len()], gamma)
}

/// DirectAU with inverse-propensity weights on the alignment term only;
/// uniformity is never reweighted.
pub fn unbiased_directau_loss(batch: &Batch, weights: &[f64], gamma: f64) -> Result<DauOutput> {
    let nu = normalize_rows(batch.user_raw.view());
    let ni = normalize_rows(batch.item_raw.view());
    let au = au_on_units(
        &nu.unit,
        &ni.unit,
        &batch.pair_user,
        &batch.pair_item,
        weights,
        gamma,
    )?;
    Ok(DauOutput {
        terms: LossTerms::directau(au.align, au.uniform_user, au.uniform_item, gamma),
        grad_user: nu.backprop(au.grad_user.view()),
        grad_item: ni.backprop(au.grad_item.view()),
    })
}

/// Relation-space forward pass from unit base rows.
struct RelationForward {
    user: NormalizedRows,
    item: NormalizedRows,
}

fn relation_forward(
    unit_user: &Array2<f64>,
    unit_item: &Array2<f64>,
    m_user: ArrayView2<'_, f64>,
    m_item: ArrayView2<'_, f64>,
) -> Result<RelationForward> {
    let pu = project_rows(unit_user.view(), m_user)?;
    let pi = project_rows(unit_item.view(), m_item)?;
    Ok(RelationForward {
        user: normalize_rows(pu.view()),
        item: normalize_rows(pi.view()),
    })
}

/// `dL/dM = G^T U` where `G` is the gradient w.r.t. the projected rows.
fn projection_grad(
    rel: &NormalizedRows,
    grad_rel_unit: &Array2<f64>,
    base_unit: &Array2<f64>,
) -> Array2<f64> {
    let g = rel.backprop(grad_rel_unit.view());
    g.t().dot(base_unit)
}

#[derive(Debug, Clone)]
pub struct RelationOutput {
    pub terms: LossTerms,
    pub grad_m_user: Array2<f64>,
    pub grad_m_item: Array2<f64>,
}

/// DirectAU in the relation space. The base embeddings are constants here:
/// gradients are produced for the projection matrices only.
pub fn relation_directau_loss(
    batch: &Batch,
    m_user: ArrayView2<'_, f64>,
    m_item: ArrayView2<'_, f64>,
    lambda_rel: f64,
) -> Result<RelationOutput> {
    let nu = normalize_rows(batch.user_raw.view());
    let ni = normalize_rows(batch.item_raw.view());
    let rel = relation_forward(&nu.unit, &ni.unit, m_user, m_item)?;
    let ones = vec![1.0; batch.len()];
    let au = au_on_units(
        &rel.user.unit,
        &rel.item.unit,
        &batch.pair_user,
        &batch.pair_item,
        &ones,
        lambda_rel,
    )?;
    Ok(RelationOutput {
        terms: LossTerms::relation(au.align, au.uniform_user, au.uniform_item, lambda_rel),
        grad_m_user: projection_grad(&rel.user, &au.grad_user, &nu.unit),
        grad_m_item: projection_grad(&rel.item, &au.grad_item, &ni.unit),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UctrlParams {
    pub gamma: f64,
    pub lambda_rel: f64,
    pub mu: f64,
    /// Let the weighted alignment push gradients into the projections through
    /// `omega_hat`. Off by default: propensities are constants inside the
    /// original-space loss.
    pub propensity_grad_through: bool,
}

impl Default for UctrlParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_rel: 1.0,
            mu: crate::propensity::DEFAULT_MU,
            propensity_grad_through: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UctrlOutput {
    /// Original-space, propensity-weighted DirectAU.
    pub dau: LossTerms,
    /// Relation-space DirectAU.
    pub relation: LossTerms,
    pub total: f64,
    /// Clipped propensities, one per pair.
    pub propensities: Vec<f64>,
    pub grad_user: Array2<f64>,
    pub grad_item: Array2<f64>,
    pub grad_m_user: Array2<f64>,
    pub grad_m_item: Array2<f64>,
}

/// Learned propensities for the pairs of a batch.
pub fn batch_propensities(
    batch: &Batch,
    m_user: ArrayView2<'_, f64>,
    m_item: ArrayView2<'_, f64>,
    mu: f64,
) -> Result<Vec<f64>> {
    let nu = normalize_rows(batch.user_raw.view());
    let ni = normalize_rows(batch.item_raw.view());
    let rel = relation_forward(&nu.unit, &ni.unit, m_user, m_item)?;
    Ok(learned_from_relation(&rel, batch, mu).0)
}

/// Clipped propensities and the raw sigmoid values per pair.
fn learned_from_relation(rel: &RelationForward, batch: &Batch, mu: f64) -> (Vec<f64>, Vec<f64>) {
    batch
        .pair_user
        .iter()
        .zip(&batch.pair_item)
        .map(|(&u, &i)| {
            let s = rel.user.unit.row(u).dot(&rel.item.unit.row(i));
            let sig = sigmoid(s);
            (clip_and_cap(sig, mu), sig)
        })
        .unzip()
}

/// Joint objective: propensity-weighted DirectAU in the original space plus
/// DirectAU in the relation space.
///
/// Gradient partition: the embedding gradients come from the weighted term
/// alone (propensities detached), the projection gradients from the relation
/// term alone (embeddings detached). With `propensity_grad_through` the
/// weighted alignment additionally differentiates through `omega_hat` into
/// the projections.
pub fn uctrl_total_loss(
    batch: &Batch,
    m_user: ArrayView2<'_, f64>,
    m_item: ArrayView2<'_, f64>,
    params: &UctrlParams,
) -> Result<UctrlOutput> {
    if !(params.mu > 0.0 && params.mu < 1.0) {
        return Err(Error::invalid(format!(
            "mu must lie in (0,1), got {}",
            params.mu
        )));
    }
    let nu = normalize_rows(batch.user_raw.view());
    let ni = normalize_rows(batch.item_raw.view());
    let rel = relation_forward(&nu.unit, &ni.unit, m_user, m_item)?;
    let (propensities, sigmoids) = learned_from_relation(&rel, batch, params.mu);
    let weights: Vec<f64> = propensities.iter().map(|w| 1.0 / w).collect();

    let au = au_on_units(
        &nu.unit,
        &ni.unit,
        &batch.pair_user,
        &batch.pair_item,
        &weights,
        params.gamma,
    )?;
    let dau = LossTerms::directau(au.align, au.uniform_user, au.uniform_item, params.gamma);

    let ones = vec![1.0; batch.len()];
    let mut rau = au_on_units(
        &rel.user.unit,
        &rel.item.unit,
        &batch.pair_user,
        &batch.pair_item,
        &ones,
        params.lambda_rel,
    )?;
    let relation = LossTerms::relation(
        rau.align,
        rau.uniform_user,
        rau.uniform_item,
        params.lambda_rel,
    );

    if params.propensity_grad_through {
        let inv_b = 1.0 / batch.len() as f64;
        for k in 0..batch.len() {
            let (w, sig) = (propensities[k], sigmoids[k]);
            if sig <= params.mu || sig >= PROPENSITY_CAP {
                continue; // clipped: flat in the score
            }
            // d/ds of dist/(B * sigmoid(s))
            let ds = -au.distances[k] * inv_b / (w * w) * sig * (1.0 - sig);
            let (u, i) = (batch.pair_user[k], batch.pair_item[k]);
            let ri = rel.item.unit.row(i).to_owned();
            let ru = rel.user.unit.row(u).to_owned();
            rau.grad_user.row_mut(u).scaled_add(ds, &ri);
            rau.grad_item.row_mut(i).scaled_add(ds, &ru);
        }
    }

    Ok(UctrlOutput {
        total: dau.total + relation.total,
        dau,
        relation,
        propensities,
        grad_user: nu.backprop(au.grad_user.view()),
        grad_item: ni.backprop(au.grad_item.view()),
        grad_m_user: projection_grad(&rel.user, &rau.grad_user, &nu.unit),
        grad_m_item: projection_grad(&rel.item, &rau.grad_item, &ni.unit),
    })
}

/// `|u~ - i~|^2` for one user/item pair of the model.
pub fn alignment_distance(model: &EmbeddingTable, user: usize, item: usize) -> f64 {
    let u = normalize(&model.user_row(user));
    let i = normalize(&model.item_row(item));
    u.iter().zip(&i).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Relevance-weighted alignment `(1/|P|) sum_{(u,i) in P} rho_ui |u~ - i~|^2`
/// using ground-truth relevance. Only meaningful for synthetic data.
pub fn ideal_alignment_loss(
    model: &EmbeddingTable,
    world: &SyntheticWorld,
    pair_set: &InteractionSet,
) -> Result<f64> {
    let dims = (model.num_users(), model.num_items());
    if dims != (world.num_users(), world.num_items())
        || dims != (pair_set.num_users(), pair_set.num_items())
    {
        return Err(Error::DimensionMismatch(format!(
            "model {dims:?}, world {}x{}, pairs {}x{}",
            world.num_users(),
            world.num_items(),
            pair_set.num_users(),
            pair_set.num_items()
        )));
    }
    if pair_set.is_empty() {
        return Err(Error::Empty);
    }
    let sum: f64 = pair_set
        .pairs()
        .iter()
        .map(|p| world.rho(p.user, p.item) * alignment_distance(model, p.user, p.item))
        .sum();
    Ok(sum / pair_set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng))
    }

    fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        normalize_rows(random_rows(rows, d, rng).view()).unit
    }

    #[test]
    fn alignment_hand_cases() {
        let u = array![[1.0, 0.0]];
        let i = array![[0.0, 1.0]];
        assert_eq!(
            alignment_loss(u.view(), u.view(), &[3.0]).unwrap().value,
            0.0
        );
        let a = alignment_loss(u.view(), i.view(), &[1.0]).unwrap();
        assert!((a.value - 2.0).abs() < 1e-15);
        let w = alignment_loss(u.view(), i.view(), &[1.0 / 0.5]).unwrap();
        assert!((w.value - 4.0).abs() < 1e-15);
        // (2 w / B)(u - i)
        assert_eq!(w.grad_user, array![[4.0, -4.0]]);
        assert_eq!(w.grad_item, array![[-4.0, 4.0]]);
    }

    #[test]
    fn alignment_rejects_bad_input() {
        let e = Array2::<f64>::zeros((0, 2));
        assert!(alignment_loss(e.view(), e.view(), &[]).is_err());
        let u = array![[1.0, 0.0]];
        assert!(alignment_loss(u.view(), u.view(), &[0.0]).is_err());
        assert!(alignment_loss(u.view(), u.view(), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn uniformity_hand_cases() {
        let same = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        assert_eq!(uniformity_loss(same.view()).unwrap().value, 0.0);
        let orth = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((uniformity_loss(orth.view()).unwrap().value + 4.0).abs() < 1e-15);
        assert!(uniformity_loss(array![[1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn uniformity_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = unit_rows(8, 5, &mut rng);
        let mut acc = 0.0;
        let mut count = 0.0;
        for k in 0..8 {
            for l in 0..8 {
                if k != l {
                    let d2: f64 = (0..5).map(|c| (v[[k, c]] - v[[l, c]]).powi(2)).sum();
                    acc += (-2.0 * d2).exp();
                    count += 1.0;
                }
            }
        }
        let oracle = (acc / count).ln();
        assert!((uniformity_loss(v.view()).unwrap().value - oracle).abs() < 1e-10);
    }

    #[test]
    fn directau_combines_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Batch::from_rows(
            random_rows(4, 3, &mut rng),
            random_rows(5, 3, &mut rng),
            &[(0, 0), (1, 2), (2, 4), (3, 1), (0, 3)],
        )
        .unwrap();
        let zero = directau_loss(&batch, 0.0).unwrap();
        assert_eq!(zero.terms.total, zero.terms.align);

        let out = directau_loss(&batch, 1.0).unwrap();
        let nu = normalize_rows(batch.user_raw.view()).unit;
        let ni = normalize_rows(batch.item_raw.view()).unit;
        let pu = nu.select(Axis(0), &batch.pair_user);
        let pi = ni.select(Axis(0), &batch.pair_item);
        let a = alignment_loss(pu.view(), pi.view(), &[1.0; 5])
            .unwrap()
            .value;
        let uu = uniformity_loss(nu.view()).unwrap().value;
        let ui = uniformity_loss(ni.view()).unwrap().value;
        assert!((out.terms.total - (a + (uu + ui) / 2.0)).abs() < 1e-10);
    }

    #[test]
    fn collapsed_model_has_zero_loss() {
        let rows = Array2::from_elem((3, 2), 0.5);
        let batch = Batch::from_rows(rows.clone(), rows, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let out = directau_loss(&batch, 1.0).unwrap();
        assert!(out.terms.align.abs() < 1e-15);
        assert!(out.terms.uniform_user.abs() < 1e-15);
        assert!(out.terms.total.abs() < 1e-15);
        let rel = uctrl_total_loss(
            &batch,
            Array2::eye(2).view(),
            Array2::eye(2).view(),
            &UctrlParams::default(),
        )
        .unwrap();
        assert!(rel.total.abs() < 1e-15);
    }

    #[test]
    fn unbiased_directau_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Batch::from_rows(
            random_rows(3, 4, &mut rng),
            random_rows(3, 4, &mut rng),
            &[(0, 0), (1, 1), (2, 2), (0, 2)],
        )
        .unwrap();
        let biased = directau_loss(&batch, 0.7).unwrap();
        let unit = unbiased_directau_loss(&batch, &[1.0; 4], 0.7).unwrap();
        assert_eq!(biased.terms, unit.terms);
        let doubled = unbiased_directau_loss(&batch, &[2.0; 4], 0.7).unwrap();
        assert!((doubled.terms.align - 2.0 * biased.terms.align).abs() < 1e-14);
        assert_eq!(doubled.terms.uniform_user, biased.terms.uniform_user);
        assert_eq!(doubled.terms.uniform_item, biased.terms.uniform_item);
    }

    #[test]
    fn identity_relation_equals_directau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Batch::from_rows(
            random_rows(4, 3, &mut rng),
            random_rows(4, 3, &mut rng),
            &[(0, 1), (1, 0), (2, 3), (3, 2)],
        )
        .unwrap();
        let eye = Array2::<f64>::eye(3);
        let rel = relation_directau_loss(&batch, eye.view(), eye.view(), 0.8).unwrap();
        let dau = directau_loss(&batch, 0.8).unwrap();
        assert!((rel.terms.total - dau.terms.total).abs() < 1e-14);
        let no_uniform = relation_directau_loss(&batch, eye.view(), eye.view(), 0.0).unwrap();
        assert_eq!(no_uniform.terms.total, no_uniform.terms.align);
    }

    #[test]
    fn uctrl_total_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = Batch::from_rows(
            random_rows(5, 4, &mut rng),
            random_rows(5, 4, &mut rng),
            &[(0, 0), (1, 3), (2, 2), (3, 1), (4, 4)],
        )
        .unwrap();
        let mu = Array2::<f64>::eye(4) + random_rows(4, 4, &mut rng) * 0.3;
        let mi = Array2::<f64>::eye(4) + random_rows(4, 4, &mut rng) * 0.3;
        let params = UctrlParams::default();
        let out = uctrl_total_loss(&batch, mu.view(), mi.view(), &params).unwrap();
        let weights: Vec<f64> = out.propensities.iter().map(|w| 1.0 / w).collect();
        let dau = unbiased_directau_loss(&batch, &weights, params.gamma).unwrap();
        let rel = relation_directau_loss(&batch, mu.view(), mi.view(), params.lambda_rel).unwrap();
        assert!((out.total - (dau.terms.total + rel.terms.total)).abs() < 1e-12);
        // gradient partition at the kernel level
        assert_eq!(out.grad_user, dau.grad_user);
        assert_eq!(out.grad_item, dau.grad_item);
        assert_eq!(out.grad_m_user, rel.grad_m_user);
        assert_eq!(out.grad_m_item, rel.grad_m_item);
        let props = batch_propensities(&batch, mu.view(), mi.view(), params.mu).unwrap();
        assert_eq!(props, out.propensities);
    }

    #[test]
    fn normalisation_backprop_kills_radial_component() {
        let raw = array![[3.0, 4.0]];
        let n = normalize_rows(raw.view());
        // gradient along the vector itself changes nothing after normalising
        let g = n.backprop(array![[0.6, 0.8]].view());
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let dead = normalize_rows(array![[0.0, 0.0]].view());
        assert_eq!(dead.unit, array![[1.0, 0.0]]);
        assert_eq!(dead.backprop(array![[1.0, 1.0]].view()), array![[0.0, 0.0]]);
    }

    #[test]
    fn ideal_alignment_linear_in_relevance() {
        use crate::embedding::init_model;
        let (model, _) = init_model(4, 5, 3, 9, 1.0).unwrap();
        let pairs = InteractionSet::from_pairs(
            4,
            5,
            [(0, 0), (1, 4), (2, 2), (3, 1)].map(|(u, i)| Interaction::new(u, i)),
        )
        .unwrap();
        let world = |rho: f32| {
            SyntheticWorld::new(
                Array2::from_elem((4, 5), rho),
                Array2::from_elem((4, 5), 1.0),
            )
            .unwrap()
        };
        assert_eq!(
            ideal_alignment_loss(&model, &world(0.0), &pairs).unwrap(),
            0.0
        );
        let full = ideal_alignment_loss(&model, &world(1.0), &pairs).unwrap();
        let batch = Batch::gather(&model, pairs.pairs()).unwrap();
        let plain = directau_loss(&batch, 0.0).unwrap().terms.align;
        assert!((full - plain).abs() < 1e-12);
        let half = ideal_alignment_loss(&model, &world(0.5), &pairs).unwrap();
        assert!((half - full / 2.0).abs() < 1e-15);
        let other = InteractionSet::empty(5, 5);
        assert!(ideal_alignment_loss(&model, &world(1.0), &other).is_err());
    }

    #[test]
    fn batch_gather_dedups_and_sorts() {
        use crate::embedding::init_model;
        let (model, _) = init_model(5, 5, 2, 0, 1.0).unwrap();
        let pairs = [
            Interaction::new(3, 1),
            Interaction::new(1, 1),
            Interaction::new(3, 4),
        ];
        let b = Batch::gather(&model, &pairs).unwrap();
        assert_eq!(b.users, vec![1, 3]);
        assert_eq!(b.items, vec![1, 4]);
        assert_eq!(b.pair_user, vec![1, 0, 1]);
        assert_eq!(b.pair_item, vec![0, 0, 1]);
        assert_eq!(b.user_raw[[1, 0]], f64::from(model.user_vecs[[3, 0]]));
    }
}
