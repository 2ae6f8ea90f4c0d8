//! Minibatch training: epoch batching, one optimizer step per batch, and the
//! epoch loop with validation-based checkpoint selection.
//!
//! For the joint objective both loss terms are evaluated on the same batch.
//! Embeddings are updated from the propensity-weighted original-space term
//! and the projections from the relation-space term; neither term writes
//! into the other's parameters unless `propensity_grad_through` is set.

mod adam;

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionSet, SplitBundle, SyntheticWorld};
use crate::embedding::{init_model, EmbeddingTable, ProjectionPair, Scoring, DEFAULT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::eval::{evaluate_masked, EvalOptions, DEFAULT_K};
use crate::losses::{
    batch_propensities, directau_loss, relation_directau_loss, uctrl_total_loss,
    unbiased_directau_loss, Batch, LossTerms, UctrlParams,
};
use crate::propensity::{estimate_oracle, ItemPopularity, DEFAULT_MU, DEFAULT_POPULARITY_EXPONENT};

pub use adam::{Adam, Moments, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Alignment + uniformity on raw clicks.
    Directau,
    /// Propensity-weighted DirectAU with learned relation-space propensities.
    Uctrl,
    /// Weighted DirectAU with ground-truth exposure (synthetic data only).
    IpwAlignOracle,
    /// Weighted DirectAU with item-popularity propensities.
    IpwAlignPop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSchedule {
    /// Both terms on every batch.
    #[default]
    Joint,
    /// Odd steps update embeddings, even steps update projections.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub d: usize,
    pub gamma: f64,
    pub lambda_rel: f64,
    pub mu: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub scoring: Scoring,
    pub propensity_grad_through: bool,
    pub init_scale: f64,
    pub popularity_exponent: f64,
    pub schedule: JointSchedule,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Uctrl,
            d: 64,
            gamma: 1.0,
            lambda_rel: 1.0,
            mu: DEFAULT_MU,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 1024,
            epochs: 100,
            seed: 0,
            eval_every: 5,
            scoring: Scoring::Dot,
            propensity_grad_through: false,
            init_scale: DEFAULT_INIT_SCALE,
            popularity_exponent: DEFAULT_POPULARITY_EXPONENT,
            schedule: JointSchedule::Joint,
            eval_k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.d < 1 {
            return fail("d must be >= 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lambda_rel >= 0.0 && self.lambda_rel.is_finite()) {
            return fail(format!("lambda_rel must be >= 0, got {}", self.lambda_rel));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return fail(format!("mu must lie in (0,1), got {}", self.mu));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return fail("popularity_exponent must be >= 0".into());
        }
        if self.eval_every < 1 || self.eval_k < 1 {
            return fail("eval_every and eval_k must be >= 1".into());
        }
        Ok(())
    }

    fn uctrl_params(&self) -> UctrlParams {
        UctrlParams {
            gamma: self.gamma,
            lambda_rel: self.lambda_rel,
            mu: self.mu,
            propensity_grad_through: self.propensity_grad_through,
        }
    }
}

/// Model parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: EmbeddingTable,
    pub projections: ProjectionPair,
    pub user_moments: Moments,
    pub item_moments: Moments,
    pub m_user_moments: Moments,
    pub m_item_moments: Moments,
    /// Batches processed.
    pub step: u64,
}

impl TrainState {
    pub fn new(m: usize, n: usize, config: &TrainConfig) -> Result<Self> {
        let (model, projections) = init_model(m, n, config.d, config.seed, config.init_scale)?;
        Ok(Self::from_parts(model, projections))
    }

    pub fn from_parts(model: EmbeddingTable, projections: ProjectionPair) -> Self {
        Self {
            user_moments: Moments::zeros(model.user_vecs.len()),
            item_moments: Moments::zeros(model.item_vecs.len()),
            m_user_moments: Moments::zeros(projections.m_user.len()),
            m_item_moments: Moments::zeros(projections.m_item.len()),
            model,
            projections,
            step: 0,
        }
    }
}

/// One epoch of batches: a seeded permutation of the clicks cut into chunks
/// of `batch_size`. A trailing chunk of one pair is folded into the previous
/// batch.
pub fn make_batches(
    train: &InteractionSet,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<Interaction>> {
    let mut pairs = train.pairs().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    pairs.shuffle(&mut rng);
    let size = batch_size.max(1);
    let mut batches: Vec<Vec<Interaction>> = pairs.chunks(size).map(<[_]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("len >= 2");
        batches.last_mut().expect("len >= 1").extend(tail);
    }
    batches
}

/// Propensity sources needed by the weighted objectives.
pub struct PropensityContext<'a> {
    pub world: Option<&'a SyntheticWorld>,
    pub popularity: Option<ItemPopularity>,
}

impl<'a> PropensityContext<'a> {
    pub fn new(
        config: &TrainConfig,
        train: &InteractionSet,
        world: Option<&'a SyntheticWorld>,
    ) -> Result<Self> {
        let popularity = match config.objective {
            Objective::IpwAlignPop => Some(ItemPopularity::new(train, config.popularity_exponent)?),
            _ => None,
        };
        if config.objective == Objective::IpwAlignOracle {
            let w = world.ok_or_else(|| {
                Error::invalid("objective ipw_align_oracle needs a synthetic world")
            })?;
            if (w.num_users(), w.num_items()) != (train.num_users(), train.num_items()) {
                return Err(Error::DimensionMismatch(
                    "synthetic world does not match the training data".into(),
                ));
            }
        }
        Ok(Self { world, popularity })
    }

    pub fn none() -> Self {
        Self {
            world: None,
            popularity: None,
        }
    }
}

/// Which parts of the joint objective a step applies. Used to isolate the
/// two terms; ordinary training uses [`StepTerms::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTerms {
    pub original: bool,
    pub relation: bool,
}

impl StepTerms {
    pub const ALL: Self = Self {
        original: true,
        relation: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub dau: LossTerms,
    pub relation: Option<LossTerms>,
    pub total: f64,
}

fn check_finite(tensor: &str, grad: &Array2<f64>, step: u64) -> Result<()> {
    if grad.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure {
            tensor: tensor.to_owned(),
            step,
        })
    }
}

/// Scatters per-row gradients into a dense buffer shaped like `param`.
fn dense_grad(rows: usize, d: usize, ids: &[usize], grad: &Array2<f64>) -> Vec<f64> {
    let mut dense = vec![0.0; rows * d];
    for (r, &id) in ids.iter().enumerate() {
        dense[id * d..(id + 1) * d]
            .iter_mut()
            .zip(grad.row(r))
            .for_each(|(dst, &g)| *dst += g);
    }
    dense
}

struct Gradients {
    embeddings: Option<(Array2<f64>, Array2<f64>)>,
    projections: Option<(Array2<f64>, Array2<f64>)>,
}

pub fn train_step(
    state: &mut TrainState,
    pairs: &[Interaction],
    config: &TrainConfig,
    ctx: &PropensityContext<'_>,
) -> Result<StepLoss> {
    train_step_with_terms(state, pairs, config, ctx, StepTerms::ALL)
}

/// One optimizer step. `terms` can drop either part of the joint objective;
/// it must be [`StepTerms::ALL`] when propensity gradients flow through.
pub fn train_step_with_terms(
    state: &mut TrainState,
    pairs: &[Interaction],
    config: &TrainConfig,
    ctx: &PropensityContext<'_>,
    terms: StepTerms,
) -> Result<StepLoss> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let step = state.step + 1;
    let batch = Batch::gather(&state.model, pairs)?;
    let (loss, grads) = match config.objective {
        Objective::Directau => {
            let out = directau_loss(&batch, config.gamma)?;
            let loss = StepLoss {
                dau: out.terms,
                relation: None,
                total: out.terms.total,
            };
            let grads = Gradients {
                embeddings: Some((out.grad_user, out.grad_item)),
                projections: None,
            };
            (loss, grads)
        }
        Objective::IpwAlignOracle | Objective::IpwAlignPop => {
            let values: Vec<f64> = if config.objective == Objective::IpwAlignOracle {
                let world = ctx
                    .world
                    .ok_or_else(|| Error::invalid("oracle propensities need a synthetic world"))?;
                estimate_oracle(world, pairs, config.mu)?.values
            } else {
                let pop = ctx
                    .popularity
                    .as_ref()
                    .ok_or_else(|| Error::invalid("popularity propensities not prepared"))?;
                pairs.iter().map(|p| pop.value(p.item, config.mu)).collect()
            };
            let weights: Vec<f64> = values.iter().map(|w| 1.0 / w).collect();
            let out = unbiased_directau_loss(&batch, &weights, config.gamma)?;
            let loss = StepLoss {
                dau: out.terms,
                relation: None,
                total: out.terms.total,
            };
            let grads = Gradients {
                embeddings: Some((out.grad_user, out.grad_item)),
                projections: None,
            };
            (loss, grads)
        }
        Objective::Uctrl => uctrl_step(state, &batch, config, terms)?,
    };

    if let Some((gu, gi)) = &grads.embeddings {
        check_finite("user_vecs", gu, step)?;
        check_finite("item_vecs", gi, step)?;
    }
    if let Some((gmu, gmi)) = &grads.projections {
        check_finite("m_user", gmu, step)?;
        check_finite("m_item", gmi, step)?;
    }

    let adam = Adam::new(config.lr, config.weight_decay);
    let d = state.model.dim();
    if let Some((gu, gi)) = grads.embeddings {
        let dense_u = dense_grad(state.model.num_users(), d, &batch.users, &gu);
        let dense_i = dense_grad(state.model.num_items(), d, &batch.items, &gi);
        let users = state
            .model
            .user_vecs
            .as_slice_mut()
            .expect("standard layout");
        adam.update(users, &dense_u, &mut state.user_moments);
        let items = state
            .model
            .item_vecs
            .as_slice_mut()
            .expect("standard layout");
        adam.update(items, &dense_i, &mut state.item_moments);
    }
    if let Some((gmu, gmi)) = grads.projections {
        let mu = state
            .projections
            .m_user
            .as_slice_mut()
            .expect("standard layout");
        adam.update(
            mu,
            gmu.as_slice().expect("standard layout"),
            &mut state.m_user_moments,
        );
        let mi = state
            .projections
            .m_item
            .as_slice_mut()
            .expect("standard layout");
        adam.update(
            mi,
            gmi.as_slice().expect("standard layout"),
            &mut state.m_item_moments,
        );
    }
    state.step = step;

    let tensors = [
        ("user_vecs", &state.model.user_vecs),
        ("item_vecs", &state.model.item_vecs),
        ("m_user", &state.projections.m_user),
        ("m_item", &state.projections.m_item),
    ];
    for (tensor, values) in tensors {
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalFailure {
                tensor: tensor.to_owned(),
                step,
            });
        }
    }
    Ok(loss)
}

fn uctrl_step(
    state: &TrainState,
    batch: &Batch,
    config: &TrainConfig,
    mut terms: StepTerms,
) -> Result<(StepLoss, Gradients)> {
    if config.schedule == JointSchedule::Alternating {
        let odd = (state.step + 1) % 2 == 1;
        terms = StepTerms {
            original: terms.original && odd,
            relation: terms.relation && !odd,
        };
    }
    let m_user = state.projections.m_user.mapv(f64::from);
    let m_item = state.projections.m_item.mapv(f64::from);
    let params = config.uctrl_params();

    if terms == StepTerms::ALL {
        let out = uctrl_total_loss(batch, m_user.view(), m_item.view(), &params)?;
        let loss = StepLoss {
            dau: out.dau,
            relation: Some(out.relation),
            total: out.total,
        };
        let grads = Gradients {
            embeddings: Some((out.grad_user, out.grad_item)),
            projections: Some((out.grad_m_user, out.grad_m_item)),
        };
        return Ok((loss, grads));
    }
    if config.propensity_grad_through && config.schedule == JointSchedule::Joint {
        return Err(Error::invalid(
            "partial steps are not defined when propensity gradients flow through",
        ));
    }

    let mut loss = StepLoss {
        dau: LossTerms::default(),
        relation: None,
        total: 0.0,
    };
    let mut grads = Gradients {
        embeddings: None,
        projections: None,
    };
    if terms.original {
        let omega = batch_propensities(batch, m_user.view(), m_item.view(), config.mu)?;
        let weights: Vec<f64> = omega.iter().map(|w| 1.0 / w).collect();
        let out = unbiased_directau_loss(batch, &weights, config.gamma)?;
        loss.dau = out.terms;
        loss.total += out.terms.total;
        grads.embeddings = Some((out.grad_user, out.grad_item));
    }
    if terms.relation {
        let out = relation_directau_loss(batch, m_user.view(), m_item.view(), config.lambda_rel)?;
        loss.relation = Some(out.terms);
        loss.total += out.terms.total;
        grads.projections = Some((out.grad_m_user, out.grad_m_item));
    }
    Ok((loss, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub align: f64,
    pub uniform_user: f64,
    pub uniform_item: f64,
    pub relation_align: Option<f64>,
    pub relation_uniform: Option<f64>,
    pub total: f64,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub ndcg: f64,
    pub model: EmbeddingTable,
    pub projections: ProjectionPair,
}

/// Keeps the parameters from the epoch with the highest validation NDCG;
/// ties keep the earlier epoch.
#[derive(Debug, Clone, Default)]
pub struct BestTracker {
    best: Option<BestCheckpoint>,
}

impl BestTracker {
    pub fn offer(&mut self, epoch: usize, ndcg: f64, state: &TrainState) {
        let better = match &self.best {
            None => true,
            Some(b) => ndcg > b.ndcg,
        };
        if better {
            self.best = Some(BestCheckpoint {
                epoch,
                ndcg,
                model: state.model.clone(),
                projections: state.projections.clone(),
            });
        }
    }

    pub fn best(&self) -> Option<&BestCheckpoint> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<BestCheckpoint> {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best: Option<BestCheckpoint>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Best validated parameters, or the final ones if nothing was validated.
    pub fn selected(&self) -> (&EmbeddingTable, &ProjectionPair) {
        match &self.best {
            Some(b) => (&b.model, &b.projections),
            None => (&self.state.model, &self.state.projections),
        }
    }
}

pub fn train(
    data: &SplitBundle,
    config: &TrainConfig,
    world: Option<&SyntheticWorld>,
) -> Result<TrainOutcome> {
    train_with_callback(data, config, world, |_| {})
}

/// Runs the epoch loop, calling `on_epoch` after each epoch's record is
/// complete.
pub fn train_with_callback(
    data: &SplitBundle,
    config: &TrainConfig,
    world: Option<&SyntheticWorld>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = &data.train;
    if train_set.is_empty() {
        return Err(Error::Empty);
    }
    let ctx = PropensityContext::new(config, train_set, world)?;
    let mut state = TrainState::new(train_set.num_users(), train_set.num_items(), config)?;
    let mut tracker = BestTracker::default();
    let mut log = Vec::with_capacity(config.epochs);
    let eval_opts = EvalOptions {
        k: config.eval_k,
        scoring: config.scoring,
        per_user: false,
    };

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = make_batches(train_set, config.batch_size, config.seed, epoch as u64);
        let mut sums = EpochSums::default();
        for pairs in &batches {
            let loss = train_step(&mut state, pairs, config, &ctx)?;
            sums.add(&loss);
        }
        let mut record = sums.finish(epoch);

        let due = epoch % config.eval_every == 0 || epoch == config.epochs;
        if due && !data.validation.is_empty() {
            let report = evaluate_masked(&state.model, &[train_set], &data.validation, &eval_opts)?;
            record.val_recall20 = Some(report.recall_at_k);
            record.val_ndcg20 = Some(report.ndcg_at_k);
            tracker.offer(epoch, report.ndcg_at_k, &state);
        }
        record.wall_ms = started.elapsed().as_millis() as u64;
        log::info!(
            "epoch {epoch}: total {:.5} align {:.5} val ndcg {:?}",
            record.total,
            record.align,
            record.val_ndcg20
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        state,
        best: tracker.into_best(),
        log,
    })
}

#[derive(Default)]
struct EpochSums {
    batches: usize,
    align: f64,
    uniform_user: f64,
    uniform_item: f64,
    relation_align: f64,
    relation_uniform: f64,
    has_relation: bool,
    total: f64,
}

impl EpochSums {
    fn add(&mut self, loss: &StepLoss) {
        self.batches += 1;
        self.align += loss.dau.align;
        self.uniform_user += loss.dau.uniform_user;
        self.uniform_item += loss.dau.uniform_item;
        if let Some(r) = loss.relation {
            self.has_relation = true;
            self.relation_align += r.align;
            self.relation_uniform += r.uniform();
        }
        self.total += loss.total;
    }

    fn finish(&self, epoch: usize) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            align: self.align / n,
            uniform_user: self.uniform_user / n,
            uniform_item: self.uniform_item / n,
            relation_align: self.has_relation.then(|| self.relation_align / n),
            relation_uniform: self.has_relation.then(|| self.relation_uniform / n),
            total: self.total / n,
            val_recall20: None,
            val_ndcg20: None,
            wall_ms: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProtocolTag;

    fn pairs_set(m: usize, n: usize, count: usize) -> InteractionSet {
        let pairs = (0..count).map(|k| Interaction::new(k % m, (k * 7 + k / m) % n));
        InteractionSet::from_pairs(m, n, pairs).unwrap()
    }

    #[test]
    fn batch_chunking_rules() {
        let ten = pairs_set(10, 10, 10);
        assert_eq!(ten.len(), 10);
        let sizes: Vec<usize> = make_batches(&ten, 4, 1, 1).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let nine = pairs_set(9, 9, 9);
        let sizes: Vec<usize> = make_batches(&nine, 4, 1, 1).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 5]);
    }

    #[test]
    fn batches_are_seeded_per_epoch() {
        let set = pairs_set(10, 10, 30);
        assert_eq!(make_batches(&set, 4, 3, 2), make_batches(&set, 4, 3, 2));
        assert_ne!(make_batches(&set, 4, 3, 2), make_batches(&set, 4, 3, 3));
        let mut all: Vec<Interaction> = make_batches(&set, 4, 3, 2).concat();
        all.sort();
        assert_eq!(all, set.pairs());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                lr: -1.0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                gamma: -0.1,
                ..Default::default()
            },
            TrainConfig {
                mu: 1.0,
                ..Default::default()
            },
            TrainConfig {
                lambda_rel: f64::NAN,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn config_json_is_flat_and_rejects_unknown_keys() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"objective":"directau","lr":0.01}"#).unwrap();
        assert_eq!(cfg.objective, Objective::Directau);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.d, 64);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate":0.01}"#).is_err());
    }

    fn tiny_state(seed: u64) -> TrainState {
        let cfg = TrainConfig {
            d: 4,
            seed,
            init_scale: 0.5,
            ..Default::default()
        };
        TrainState::new(5, 5, &cfg).unwrap()
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut state = tiny_state(1);
        let before = state.clone();
        // lr must be > 0 for training runs; the optimizer itself accepts 0
        let cfg = TrainConfig {
            d: 4,
            lr: 0.0,
            ..Default::default()
        };
        let pairs = [
            Interaction::new(0, 1),
            Interaction::new(2, 3),
            Interaction::new(4, 0),
        ];
        train_step(&mut state, &pairs, &cfg, &PropensityContext::none()).unwrap();
        assert_eq!(state.model, before.model);
        assert_eq!(state.projections, before.projections);
        assert_eq!(state.step, 1);
        assert_ne!(state.user_moments, before.user_moments);
        assert_ne!(state.m_user_moments, before.m_user_moments);
    }

    #[test]
    fn nan_gradient_aborts_with_tensor_name() {
        let mut state = tiny_state(2);
        state.model.user_vecs[[0, 0]] = f32::NAN;
        let cfg = TrainConfig {
            d: 4,
            ..Default::default()
        };
        let err = train_step(
            &mut state,
            &[Interaction::new(0, 0), Interaction::new(1, 1)],
            &cfg,
            &PropensityContext::none(),
        )
        .unwrap_err();
        match err {
            Error::NumericalFailure { tensor, step } => {
                assert_eq!(tensor, "user_vecs");
                assert_eq!(step, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn best_tracker_keeps_argmax() {
        let mut tracker = BestTracker::default();
        let mut state = tiny_state(3);
        for (epoch, ndcg) in [(1, 0.1), (2, 0.3), (3, 0.2)] {
            state.model.user_vecs[[0, 0]] = epoch as f32;
            tracker.offer(epoch, ndcg, &state);
        }
        let best = tracker.best().unwrap();
        assert_eq!(best.epoch, 2);
        assert_eq!(best.model.user_vecs[[0, 0]], 2.0);
    }

    #[test]
    fn one_epoch_takes_ceil_steps() {
        let data = SplitBundle {
            train: pairs_set(10, 10, 10),
            validation: InteractionSet::empty(10, 10),
            test: InteractionSet::empty(10, 10),
            protocol_tag: ProtocolTag::SyntheticDebiased,
        };
        let cfg = TrainConfig {
            d: 4,
            batch_size: 4,
            epochs: 1,
            ..Default::default()
        };
        let out = train(&data, &cfg, None).unwrap();
        assert_eq!(out.state.step, 3);
        assert_eq!(out.log.len(), 1);
        assert!(out.best.is_none());
        assert!(out.log[0].relation_align.is_some());
    }

    #[test]
    fn oracle_objective_needs_world() {
        let set = pairs_set(4, 4, 8);
        let cfg = TrainConfig {
            objective: Objective::IpwAlignOracle,
            ..Default::default()
        };
        assert!(PropensityContext::new(&cfg, &set, None).is_err());
    }

    #[test]
    fn alternating_schedule_updates_one_side_per_step() {
        let mut state = tiny_state(4);
        let cfg = TrainConfig {
            d: 4,
            schedule: JointSchedule::Alternating,
            lr: 0.01,
            ..Default::default()
        };
        let pairs = [
            Interaction::new(0, 1),
            Interaction::new(2, 3),
            Interaction::new(4, 0),
        ];
        let before = state.clone();
        train_step(&mut state, &pairs, &cfg, &PropensityContext::none()).unwrap();
        assert_ne!(state.model, before.model);
        assert_eq!(state.projections, before.projections);
        let mid = state.clone();
        train_step(&mut state, &pairs, &cfg, &PropensityContext::none()).unwrap();
        assert_eq!(state.model, mid.model);
        assert_ne!(state.projections, mid.projections);
    }
}
