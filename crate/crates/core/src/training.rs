//! Weakly supervised triplet training.
//!
//! Each step takes one query, its best-matching positive within
//! `positive_radius_m` and its hardest negatives beyond `negative_radius_m`,
//! and applies one momentum-SGD update. Hard negatives found for a query are
//! remembered and compete again with a fresh random pool on its next visit.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PlaceSet;
use crate::encoder::{encode, stride2_stack, EncoderParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{triplet_objective, Model, ModelGrad};
use crate::pipeline::{evaluate_model, map_items, EvalSpec};
use crate::pyramid::{subsample, ImagePyramid, PyramidLevel};
use crate::vlad::{
    init_scale_specific, init_vocabulary, proportional_partition, NormState, VladDescriptor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Every image is seen at all training factors at once.
    None,
    /// Every image is seen at one factor, drawn per image and step.
    RandomResize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub positive_radius_m: f64,
    pub negative_radius_m: f64,
    pub negative_pool: usize,
    pub negatives_per_query: usize,
    /// Reduction factors of the training pyramid, increasing.
    pub factors: Vec<u32>,
    pub augmentation: Augmentation,
    /// Cap on queries visited per epoch (all when unset).
    pub queries_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            epochs: 35,
            // The paper's 1e-4 suits a pretrained backbone; the from-scratch
            // toy encoder needs a larger step to move within 35 epochs.
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 5,
            momentum: 0.9,
            weight_decay: 1e-3,
            positive_radius_m: 10.0,
            negative_radius_m: 25.0,
            negative_pool: 1000,
            negatives_per_query: 10,
            factors: vec![1, 2, 4],
            augmentation: Augmentation::None,
            queries_per_epoch: None,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.positive_radius_m > 0.0 && self.positive_radius_m < self.negative_radius_m) {
            return bad("radii must satisfy 0 < positive_radius_m < negative_radius_m");
        }
        if !(self.lr > 0.0)
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || self.lr_decay_every == 0
        {
            return bad("lr must be positive, lr_decay in (0, 1], lr_decay_every >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if self.negatives_per_query == 0 || self.negative_pool == 0 {
            return bad("negatives_per_query and negative_pool must be positive");
        }
        if self.factors.is_empty()
            || self.factors[0] == 0
            || self.factors.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("training factors must be positive and strictly increasing");
        }
        if self.queries_per_epoch == Some(0) {
            return bad("queries_per_epoch must be positive when set");
        }
        Ok(())
    }

    /// Step decay: `lr * lr_decay^floor(epoch / lr_decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyKind {
    Shared,
    /// One cluster block per pyramid level, sized in proportion to
    /// `partition_reference`.
    ScaleSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the layers before the last.
    pub hidden_channels: Vec<usize>,
    /// Feature dimension `D`.
    pub depth: usize,
    /// Cluster count `V`.
    pub clusters: usize,
    /// Encoder layers updated by training, counted from the top.
    pub trainable_layers: usize,
    pub vocabulary: VocabularyKind,
    pub partition_reference: Vec<usize>,
    /// Database images whose features seed the vocabulary.
    pub init_images: usize,
    /// Cap on features fed to k-means.
    pub init_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_channels: vec![8, 16],
            depth: 16,
            clusters: 8,
            trainable_layers: 2,
            vocabulary: VocabularyKind::Shared,
            partition_reference: vec![34, 18, 12],
            init_images: 100,
            init_features: 20_000,
        }
    }
}

impl ModelConfig {
    pub fn layer_specs(&self) -> Vec<crate::encoder::LayerSpec> {
        let mut ch = vec![3];
        ch.extend(&self.hidden_channels);
        ch.push(self.depth);
        stride2_stack(&ch)
    }

    pub fn validate(&self) -> Result<()> {
        crate::encoder::validate_specs(&self.layer_specs())?;
        if self.clusters == 0 || self.init_images == 0 || self.init_features < self.clusters {
            return Err(Error::InvalidConfig(
                "clusters, init_images must be positive and init_features >= clusters".into(),
            ));
        }
        if self.vocabulary == VocabularyKind::ScaleSpecific
            && (self.partition_reference.is_empty()
                || self.partition_reference.iter().any(|&r| r == 0))
        {
            return Err(Error::InvalidConfig(
                "partition_reference must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn level(img: &Image, l: u32) -> Result<PyramidLevel> {
    Ok(PyramidLevel {
        factor: l as f64,
        image: if l == 1 {
            img.clone()
        } else {
            subsample(img, l as usize)?
        },
        sigma_eff: None,
    })
}

/// Nth-pixel pyramid over arbitrary increasing factors (the first need not be 1).
pub fn factor_pyramid(img: &Image, factors: &[u32]) -> Result<ImagePyramid> {
    Ok(ImagePyramid {
        levels: factors
            .iter()
            .map(|&l| level(img, l))
            .collect::<Result<_>>()?,
    })
}

/// The pyramid an image is trained on; draws from `rng` in random-resize mode.
pub fn training_pyramid(
    img: &Image,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImagePyramid> {
    match cfg.augmentation {
        Augmentation::None => factor_pyramid(img, &cfg.factors),
        Augmentation::RandomResize => {
            let l = cfg.factors[rng.random_range(0..cfg.factors.len())];
            factor_pyramid(img, &[l])
        }
    }
}

/// The deterministic pyramid used for mining descriptors: the training
/// pyramid, or the base image alone in random-resize mode.
pub fn mining_pyramid(img: &Image, cfg: &TrainConfig) -> Result<ImagePyramid> {
    match cfg.augmentation {
        Augmentation::None => factor_pyramid(img, &cfg.factors),
        Augmentation::RandomResize => Ok(ImagePyramid::single(img.clone())),
    }
}

/// Builds an untrained model: He-initialized encoder and a k-means
/// vocabulary on encoder features of up to `init_images` database images at
/// every training factor.
pub fn init_model(
    cfg: &ModelConfig,
    db_images: &[Image],
    train: &TrainConfig,
    seed: u64,
) -> Result<Model> {
    cfg.validate()?;
    train.validate()?;
    if db_images.is_empty() {
        return Err(Error::DatasetTooSmall(
            "no database images to seed the vocabulary".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams::init(&cfg.layer_specs(), cfg.trainable_layers, rng.random())?;
    let mut picks = sample(
        &mut rng,
        db_images.len(),
        cfg.init_images.min(db_images.len()),
    )
    .into_vec();
    picks.sort_unstable();
    let levels = train.factors.len();
    let mut per_level: Vec<Vec<Vec<f64>>> = vec![Vec::new(); levels];
    for &i in &picks {
        for (li, &l) in train.factors.iter().enumerate() {
            let t = encode(&level(&db_images[i], l)?.image, &encoder)?;
            per_level[li].extend(t.features().map(<[f64]>::to_vec));
        }
    }
    let thin = |s: Vec<Vec<f64>>, cap: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        if s.len() <= cap {
            return s;
        }
        let mut keep = sample(rng, s.len(), cap).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| s[i].clone()).collect()
    };
    let vocab_seed = rng.random();
    let vocab = match cfg.vocabulary {
        VocabularyKind::Shared => {
            let all: Vec<Vec<f64>> = per_level.into_iter().flatten().collect();
            let s = thin(all, cfg.init_features, &mut rng);
            init_vocabulary(&s, cfg.clusters, vocab_seed)?
        }
        VocabularyKind::ScaleSpecific => {
            if train.augmentation != Augmentation::None || cfg.partition_reference.len() != levels {
                return Err(Error::InvalidConfig(format!(
                    "a scale-specific vocabulary needs one partition per training level ({levels}) \
                     and no random resizing"
                )));
            }
            let counts = proportional_partition(&cfg.partition_reference, cfg.clusters);
            if counts.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "partition {counts:?} leaves a level without clusters"
                )));
            }
            let cap = cfg.init_features / levels;
            let samples: Vec<Vec<Vec<f64>>> = per_level
                .into_iter()
                .map(|s| thin(s, cap, &mut rng))
                .collect();
            init_scale_specific(&samples, &counts, vocab_seed)?
        }
    };
    Ok(Model { encoder, vocab })
}

/// Sum over negatives of `max(|q - p| + margin - |q - n|, 0)`.
pub fn triplet_loss(
    q: &VladDescriptor,
    p: &VladDescriptor,
    negs: &[&VladDescriptor],
    margin: f64,
) -> Result<f64> {
    for d in std::iter::once(&p).chain(negs.iter()) {
        if d.len() != q.len() {
            return Err(Error::Contract(format!(
                "descriptor dimensions differ: {} vs {}",
                q.len(),
                d.len()
            )));
        }
    }
    if std::iter::once(&q)
        .chain(std::iter::once(&p))
        .chain(negs.iter())
        .any(|d| d.state != NormState::FullyNormalized)
    {
        return Err(Error::Contract(
            "triplet loss needs fully normalized descriptors".into(),
        ));
    }
    let ns: Vec<&[f64]> = negs.iter().map(|d| d.values.as_slice()).collect();
    Ok(triplet_objective(&q.values, &p.values, &ns, margin).0)
}

/// Database side of mining: ids, positions and current descriptors.
pub struct MiningPool<'a> {
    ids: &'a [u64],
    positions: &'a [(f64, f64)],
    descriptors: &'a [Vec<f64>],
    by_id: HashMap<u64, usize>,
}

impl<'a> MiningPool<'a> {
    pub fn new(
        ids: &'a [u64],
        positions: &'a [(f64, f64)],
        descriptors: &'a [Vec<f64>],
    ) -> Result<Self> {
        if ids.len() != positions.len() || ids.len() != descriptors.len() {
            return Err(Error::Contract(
                "mining pool columns differ in length".into(),
            ));
        }
        Ok(Self {
            ids,
            positions,
            descriptors,
            by_id: ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub query: u64,
    pub positive: u64,
    pub negatives: Vec<u64>,
    /// Pool rows of the positive and negatives.
    pub positive_row: usize,
    pub negative_rows: Vec<usize>,
    pub positive_dist_m: f64,
    pub negative_dists_m: Vec<f64>,
}

fn planar(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks the positive and hard negatives for one query.
///
/// The positive is the database record within `positive_radius_m` whose
/// descriptor is closest to the query's. Negatives are the
/// `negatives_per_query` closest descriptors among a random sample of
/// `negative_pool` records beyond `negative_radius_m` together with the
/// query's cached negatives. Ties go to the lower id. `cache` is replaced by
/// the selected negatives.
pub fn mine_triplets(
    query: u64,
    query_position: (f64, f64),
    query_descriptor: &[f64],
    pool: &MiningPool<'_>,
    cache: &mut Vec<u64>,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<TripletBatch> {
    let dist_m: Vec<f64> = pool
        .positions
        .iter()
        .map(|&p| planar(p, query_position))
        .collect();
    let key = |i: usize| (sq_dist(query_descriptor, &pool.descriptors[i]), pool.ids[i]);
    let positive = (0..pool.ids.len())
        .filter(|&i| dist_m[i] <= cfg.positive_radius_m)
        .map(|i| (key(i), i))
        .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.cmp(&b.0 .1)))
        .map(|(_, i)| i)
        .ok_or(Error::NoPositive(query))?;
    let far: Vec<usize> = (0..pool.ids.len())
        .filter(|&i| dist_m[i] > cfg.negative_radius_m)
        .collect();
    if far.len() < cfg.negatives_per_query {
        return Err(Error::DatasetTooSmall(format!(
            "query {query} has {} candidates beyond {} m, needs {}",
            far.len(),
            cfg.negative_radius_m,
            cfg.negatives_per_query
        )));
    }
    let mut candidates: BTreeSet<usize> = sample(rng, far.len(), cfg.negative_pool.min(far.len()))
        .into_iter()
        .map(|k| far[k])
        .collect();
    candidates.extend(
        cache
            .iter()
            .filter_map(|id| pool.by_id.get(id).copied())
            .filter(|&i| dist_m[i] > cfg.negative_radius_m),
    );
    let mut ranked: Vec<((f64, u64), usize)> =
        candidates.into_iter().map(|i| (key(i), i)).collect();
    ranked.sort_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.cmp(&b.0 .1)));
    ranked.truncate(cfg.negatives_per_query);
    let negative_rows: Vec<usize> = ranked.iter().map(|r| r.1).collect();
    *cache = negative_rows.iter().map(|&i| pool.ids[i]).collect();
    Ok(TripletBatch {
        query,
        positive: pool.ids[positive],
        negatives: cache.clone(),
        positive_row: positive,
        positive_dist_m: dist_m[positive],
        negative_dists_m: negative_rows.iter().map(|&i| dist_m[i]).collect(),
        negative_rows,
    })
}

/// Rejects a batch that breaks the radius contract.
pub fn check_batch(batch: &TripletBatch, cfg: &TrainConfig) -> Result<()> {
    if !(batch.positive_dist_m <= cfg.positive_radius_m) {
        return Err(Error::Contract(format!(
            "query {}: positive {} is {} m away",
            batch.query, batch.positive, batch.positive_dist_m
        )));
    }
    if let Some((id, d)) = batch
        .negatives
        .iter()
        .zip(&batch.negative_dists_m)
        .find(|(_, &d)| !(d > cfg.negative_radius_m))
    {
        return Err(Error::Contract(format!(
            "query {}: negative {id} is {d} m away",
            batch.query
        )));
    }
    Ok(())
}

/// Training images: the database to mine from and the queries to visit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub db: PlaceSet,
    pub queries: PlaceSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers, aligned with [`Model::trainable_mut`].
    pub velocity: Vec<Vec<f64>>,
    pub negative_cache: BTreeMap<u64, Vec<u64>>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(mut model: Model, seed: u64) -> Self {
        let velocity = model
            .trainable_mut()
            .iter()
            .map(|(_, p)| vec![0.0; p.len()])
            .collect();
        Self {
            model,
            velocity,
            negative_cache: BTreeMap::new(),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `v = momentum * v + g + wd * theta` (no decay on cluster centers),
    /// then `theta -= lr * v`.
    pub fn sgd_step(&mut self, grad: &ModelGrad, lr: f64, cfg: &TrainConfig) {
        let grads: Vec<Vec<f64>> = grad
            .groups(&self.model)
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        for (((group, params), g), v) in self
            .model
            .trainable_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut self.velocity)
        {
            let wd = if group.decays() {
                cfg.weight_decay
            } else {
                0.0
            };
            for ((p, &gi), vi) in params.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = cfg.momentum * *vi + gi + wd * *p;
                *p -= lr * *vi;
            }
        }
    }

    /// One update on prepared pyramids `[query, positive, negatives..]`.
    /// Returns the summed hinge loss and the active negative count.
    pub fn step(
        &mut self,
        pyrs: &[ImagePyramid],
        lr: f64,
        cfg: &TrainConfig,
        sequential: bool,
    ) -> Result<(f64, usize)> {
        if pyrs.len() < 3 {
            return Err(Error::Contract(
                "a step needs a query, a positive and a negative".into(),
            ));
        }
        let model = &self.model;
        let fwd = map_items(pyrs, sequential, |p| model.forward(p))?;
        let negs: Vec<&[f64]> = fwd[2..].iter().map(|f| f.0.values.as_slice()).collect();
        let (loss, active, gq, gp, gn) =
            triplet_objective(&fwd[0].0.values, &fwd[1].0.values, &negs, cfg.margin);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: 0,
                detail: format!("loss {loss}"),
            });
        }
        let mut ups = vec![gq, gp];
        ups.extend(gn);
        let work: Vec<(usize, &Vec<f64>)> = ups.iter().enumerate().collect();
        let grads = map_items(&work, sequential, |&(i, g)| model.backward(&fwd[i].1, g))?;
        let mut total = model.zero_grad();
        for g in &grads {
            total.add_assign(g);
        }
        self.sgd_step(&total, lr, cfg);
        Ok((loss, active))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub queries: usize,
    pub skipped: usize,
    pub max_positive_m: f64,
    pub min_negative_m: f64,
}

/// One pass over (a shuffled subset of) the training queries.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    sequential: bool,
) -> Result<EpochStats> {
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let model = &state.model;
    let describe = |img: &Image| -> Result<Vec<f64>> {
        Ok(model.descriptor(&mining_pyramid(img, cfg)?)?.values)
    };
    let db_desc = map_items(&data.db.images, sequential, describe)?;
    let q_desc = map_items(&data.queries.images, sequential, describe)?;
    let pool = MiningPool::new(&data.db.ids, &data.db.positions, &db_desc)?;

    let mut order: Vec<usize> = (0..data.queries.len()).collect();
    order.shuffle(&mut state.rng);
    if let Some(k) = cfg.queries_per_epoch {
        order.truncate(k);
    }
    let (mut loss_sum, mut active, mut used, mut skipped) = (0.0, 0usize, 0usize, 0usize);
    let (mut max_pos, mut min_neg) = (0.0f64, f64::INFINITY);
    for (step, &qi) in order.iter().enumerate() {
        let qid = data.queries.ids[qi];
        let mut cache = state.negative_cache.remove(&qid).unwrap_or_default();
        let mined = mine_triplets(
            qid,
            data.queries.positions[qi],
            &q_desc[qi],
            &pool,
            &mut cache,
            &mut state.rng,
            cfg,
        );
        state.negative_cache.insert(qid, cache);
        let batch = match mined {
            Err(Error::NoPositive(_)) => {
                skipped += 1;
                continue;
            }
            other => other?,
        };
        check_batch(&batch, cfg)?;
        max_pos = max_pos.max(batch.positive_dist_m);
        min_neg = batch
            .negative_dists_m
            .iter()
            .copied()
            .fold(min_neg, f64::min);

        let mut imgs = vec![
            &data.queries.images[qi],
            &data.db.images[batch.positive_row],
        ];
        imgs.extend(batch.negative_rows.iter().map(|&r| &data.db.images[r]));
        let pyrs = imgs
            .into_iter()
            .map(|img| training_pyramid(img, cfg, &mut state.rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, n_active) = state
            .step(&pyrs, lr, cfg, sequential)
            .map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("query {qid}: {detail}"),
                },
                e => e,
            })?;
        if !state.model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("query {qid}: parameters became non-finite"),
            });
        }
        loss_sum += loss;
        active += n_active;
        used += 1;
    }
    state.epoch += 1;
    if used == 0 {
        return Err(Error::DatasetTooSmall(format!(
            "epoch {epoch}: no query had a positive"
        )));
    }
    Ok(EpochStats {
        epoch,
        lr,
        mean_loss: loss_sum / used as f64,
        active_fraction: active as f64 / (used * cfg.negatives_per_query) as f64,
        queries: used,
        skipped,
        max_positive_m: max_pos,
        min_negative_m: min_neg,
    })
}

/// Held-out split scored after every epoch.
pub struct Validation<'a> {
    pub db: &'a PlaceSet,
    pub queries: &'a PlaceSet,
    pub spec: EvalSpec,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    #[serde(flatten)]
    pub stats: EpochStats,
    #[serde(rename = "val_recall@1")]
    pub val_recall_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Model with the best validation Recall@1 (earliest on ties), or the
    /// final model without validation.
    pub best_model: Model,
    pub best_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
}

/// Fixed-epoch training with best-validation model selection.
/// `on_epoch` sees each log line, the state after the epoch, and whether
/// that epoch is the new best.
pub fn train(
    model: Model,
    data: &TrainData,
    val: Option<&Validation<'_>>,
    cfg: &TrainConfig,
    seed: u64,
    sequential: bool,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = TrainState::new(model, seed);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let stats = train_epoch(&mut state, data, cfg, sequential)?;
        let val_r1 = match val {
            Some(v) => Some(
                evaluate_model(&state.model, v.db, v.queries, &v.spec, None, sequential)?
                    .recall_at(1)
                    .unwrap_or(0.0),
            ),
            None => None,
        };
        let is_best = match (val_r1, &best) {
            (Some(r), Some((b, ..))) => r > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            best = Some((val_r1.unwrap_or(0.0), stats.epoch, state.model.clone()));
        }
        let log = EpochLog {
            stats,
            val_recall_at_1: val_r1,
        };
        log::info!(
            "epoch {} lr {:.2e} loss {:.4} active {:.3} val R@1 {}",
            log.stats.epoch,
            log.stats.lr,
            log.stats.mean_loss,
            log.stats.active_fraction,
            val_r1.map_or("-".into(), |r| format!("{:.3}", r))
        );
        on_epoch(&log, &state, is_best)?;
        logs.push(log);
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (state.model.clone(), None),
    };
    Ok(TrainOutcome {
        state,
        best_model,
        best_epoch,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use crate::vlad::{Variant, Vocabulary};

    fn unit(angle: f64) -> VladDescriptor {
        VladDescriptor {
            values: vec![angle.cos(), angle.sin()],
            block_dim: 2,
            state: NormState::FullyNormalized,
            variant: Variant::Br,
        }
    }

    /// Angle whose chord from angle 0 has length `d`.
    fn at_chord(d: f64) -> f64 {
        2.0 * (d / 2.0).asin()
    }

    #[test]
    fn loss_examples() {
        let q = unit(0.0);
        let p = unit(at_chord(0.2));
        let n = unit(-at_chord(0.5));
        assert_eq!(triplet_loss(&q, &p, &[&n], 0.1).unwrap(), 0.0);
        let p = unit(at_chord(0.4));
        let n = unit(-at_chord(0.3));
        assert!((triplet_loss(&q, &p, &[&n], 0.1).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(triplet_loss(&q, &p, &[&p.clone()], 0.1).unwrap(), 0.1);
        let n2 = unit(1.0);
        let both = triplet_loss(&q, &p, &[&n, &n2], 0.1).unwrap();
        let parts =
            triplet_loss(&q, &p, &[&n], 0.1).unwrap() + triplet_loss(&q, &p, &[&n2], 0.1).unwrap();
        assert!((both - parts).abs() < 1e-15);
    }

    #[test]
    fn loss_contract() {
        let q = unit(0.0);
        let mut short = unit(0.3);
        short.values.push(0.0);
        assert!(matches!(
            triplet_loss(&q, &short, &[&q], 0.1),
            Err(Error::Contract(_))
        ));
        let mut raw = unit(0.3);
        raw.state = NormState::Raw;
        assert!(matches!(
            triplet_loss(&q, &raw, &[&q], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr: 1e-4,
            ..Default::default()
        };
        for e in 0..5 {
            assert_eq!(cfg.lr_at(e), 1e-4);
        }
        for e in 5..10 {
            assert_eq!(cfg.lr_at(e), 5e-5);
        }
        assert_eq!(cfg.lr_at(10), 2.5e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                margin: 0.0,
                ..Default::default()
            },
            TrainConfig {
                positive_radius_m: 30.0,
                ..Default::default()
            },
            TrainConfig {
                factors: vec![2, 2],
                ..Default::default()
            },
            TrainConfig {
                factors: vec![],
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        let toml_err = toml::from_str::<TrainConfig>("margn = 0.2");
        assert!(toml_err.is_err());
    }

    struct Pool {
        ids: Vec<u64>,
        pos: Vec<(f64, f64)>,
        desc: Vec<Vec<f64>>,
    }

    fn line_pool(n: usize, rng: &mut ChaCha8Rng) -> Pool {
        Pool {
            ids: (0..n as u64).map(|i| 100 + i).collect(),
            pos: (0..n).map(|i| (i as f64 * 5.0, 0.0)).collect(),
            desc: (0..n)
                .map(|_| vec![rng.random(), rng.random(), rng.random()])
                .collect(),
        }
    }

    #[test]
    fn radius_contract_at_the_edges() {
        let cfg = TrainConfig {
            negative_pool: 1000,
            ..Default::default()
        };
        let ids: Vec<u64> = (0..14).collect();
        let mut pos = vec![(10.1, 0.0), (24.9, 0.0), (9.0, 0.0)];
        pos.extend((0..11).map(|i| (30.0 + i as f64, 0.0)));
        // the out-of-radius records are the best descriptor matches
        let mut desc = vec![vec![0.0], vec![0.0], vec![0.5]];
        desc.extend((0..11).map(|i| vec![1.0 + i as f64]));
        let pool = MiningPool::new(&ids, &pos, &desc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mut cache = vec![1];
            let b =
                mine_triplets(99, (0.0, 0.0), &[0.0], &pool, &mut cache, &mut rng, &cfg).unwrap();
            assert_eq!(b.positive, 2);
            assert!(!b.negatives.contains(&0) && !b.negatives.contains(&1));
            check_batch(&b, &cfg).unwrap();
        }
    }

    #[test]
    fn planted_hard_negative_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = line_pool(3000, &mut rng);
        let q_desc = vec![0.5, 0.5, 0.5];
        // record 6 sits at 30 m with a descriptor equal to the query's
        p.desc[6] = q_desc.clone();
        let pool = MiningPool::new(&p.ids, &p.pos, &p.desc).unwrap();
        let cfg = TrainConfig {
            negative_pool: 50,
            ..Default::default()
        };
        let mut cache = Vec::new();
        let first = mine_triplets(1, (0.0, 0.0), &q_desc, &pool, &mut cache, &mut rng, &cfg);
        let first = first.unwrap();
        cache = vec![p.ids[6]];
        for _ in 0..10 {
            let b =
                mine_triplets(1, (0.0, 0.0), &q_desc, &pool, &mut cache, &mut rng, &cfg).unwrap();
            assert_eq!(b.negatives[0], p.ids[6]);
            assert_eq!(cache, b.negatives);
        }
        // with the full pool the exhaustive scan is the oracle
        let cfg = TrainConfig {
            negative_pool: 5000,
            ..Default::default()
        };
        let b = mine_triplets(
            1,
            (0.0, 0.0),
            &q_desc,
            &pool,
            &mut Vec::new(),
            &mut rng,
            &cfg,
        )
        .unwrap();
        let mut oracle: Vec<(f64, u64)> = (0..p.ids.len())
            .filter(|&i| p.pos[i].0 > 25.0)
            .map(|i| (sq_dist(&q_desc, &p.desc[i]), p.ids[i]))
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<u64> = oracle.iter().take(10).map(|o| o.1).collect();
        assert_eq!(b.negatives, want);
        assert!(first.negatives.len() == 10);
    }

    #[test]
    fn cached_negatives_are_reranked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = line_pool(400, &mut rng);
        let pool = MiningPool::new(&p.ids, &p.pos, &p.desc).unwrap();
        let cfg = TrainConfig {
            negative_pool: 20,
            ..Default::default()
        };
        let q = vec![0.2, 0.9, 0.4];
        let mut cache = Vec::new();
        let mut prev_best = f64::INFINITY;
        for _ in 0..30 {
            let b = mine_triplets(7, (0.0, 0.0), &q, &pool, &mut cache, &mut rng, &cfg).unwrap();
            let best = sq_dist(&q, &p.desc[b.negative_rows[0]]);
            // the hardest negative never gets easier while it stays cached
            assert!(best <= prev_best);
            prev_best = best;
        }
    }

    #[test]
    fn equidistant_negatives_tie_break_by_id() {
        let ids: Vec<u64> = (0..40).rev().collect();
        let pos: Vec<(f64, f64)> = (0..40)
            .map(|i| (if i == 39 { 0.0 } else { 100.0 + i as f64 }, 0.0))
            .collect();
        let desc = vec![vec![1.0, 0.0]; 40];
        let pool = MiningPool::new(&ids, &pos, &desc).unwrap();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = mine_triplets(
            0,
            (0.0, 0.0),
            &[0.0, 1.0],
            &pool,
            &mut Vec::new(),
            &mut rng,
            &cfg,
        )
        .unwrap();
        assert_eq!(b.positive, 0);
        assert_eq!(b.negatives, (1..=10).collect::<Vec<u64>>());
    }

    #[test]
    fn mining_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = line_pool(8, &mut rng);
        let pool = MiningPool::new(&p.ids, &p.pos, &p.desc).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            mine_triplets(
                3,
                (0.0, 500.0),
                &[0.0; 3],
                &pool,
                &mut Vec::new(),
                &mut rng,
                &cfg
            ),
            Err(Error::NoPositive(3))
        ));
        assert!(matches!(
            mine_triplets(
                3,
                (0.0, 0.0),
                &[0.0; 3],
                &pool,
                &mut Vec::new(),
                &mut rng,
                &cfg
            ),
            Err(Error::DatasetTooSmall(_))
        ));
    }

    fn tiny_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&stride2_stack(&[3, 2]), 1, seed).unwrap();
        let centers = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        Model {
            encoder,
            vocab: Vocabulary::from_centers(centers, 2, 3.0).unwrap(),
        }
    }

    fn tiny_pyrs(seed: u64) -> Vec<ImagePyramid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| {
                let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
                ImagePyramid::single(Image::from_fn(8, 8, |x, y| {
                    std::array::from_fn(|c| {
                        (base[c] + 0.05 * (x as f32 - y as f32) + 0.3 * rng.random::<f32>())
                            .clamp(0.0, 1.0)
                    })
                }))
            })
            .collect()
    }

    fn objective(m: &Model, pyrs: &[ImagePyramid], margin: f64) -> f64 {
        let d: Vec<Vec<f64>> = pyrs
            .iter()
            .map(|p| m.descriptor(p).unwrap().values)
            .collect();
        triplet_objective(&d[0], &d[1], &[&d[2]], margin).0
    }

    #[test]
    fn one_step_follows_finite_difference_descent() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            margin: 2.5,
            ..Default::default()
        };
        let pyrs = tiny_pyrs(3);
        let model = tiny_model(3);
        let before = objective(&model, &pyrs, cfg.margin);
        let lr = 1e-3;
        let mut state = TrainState::new(model.clone(), 0);
        state.step(&pyrs, lr, &cfg, true).unwrap();

        let mut probe = model.clone();
        let mut fd = Vec::new();
        let mut delta = Vec::new();
        let n = probe.trainable_mut().len();
        let mut after_model = state.model.clone();
        let after_groups: Vec<Vec<f64>> = after_model
            .trainable_mut()
            .into_iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        for g in 0..n {
            let len = probe.trainable_mut()[g].1.len();
            for i in 0..len {
                let orig = probe.trainable_mut()[g].1[i];
                probe.trainable_mut()[g].1[i] = orig + 1e-5;
                let up = objective(&probe, &pyrs, cfg.margin);
                probe.trainable_mut()[g].1[i] = orig - 1e-5;
                let down = objective(&probe, &pyrs, cfg.margin);
                probe.trainable_mut()[g].1[i] = orig;
                fd.push((up - down) / 2e-5);
                delta.push(after_groups[g][i] - orig);
            }
        }
        let dot: f64 = fd.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let cos = -dot / (crate::vlad::l2(&fd) * crate::vlad::l2(&delta));
        assert!(cos > 0.9999, "cosine {cos}");
        let after = objective(&state.model, &pyrs, cfg.margin);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_gradient_step_only_decays() {
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let model = tiny_model(1);
        let mut state = TrainState::new(model.clone(), 0);
        let zero = model.zero_grad();
        state.sgd_step(&zero, 0.1, &cfg);
        let mut before = model.clone();
        let mut after = state.model.clone();
        for ((g, b), (_, a)) in before
            .trainable_mut()
            .into_iter()
            .zip(after.trainable_mut())
        {
            for (x, y) in b.iter().zip(a.iter()) {
                let want = if g == ParamGroup::Centers {
                    *x
                } else {
                    x * (1.0 - 0.1 * 0.01)
                };
                assert!((y - want).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
        // frozen layers never move
        assert_eq!(state.model.encoder.layers.len(), 1);
        let mut frozen = model.clone();
        frozen.encoder.set_trainable_last(0);
        let mut st = TrainState::new(frozen.clone(), 0);
        st.sgd_step(&frozen.zero_grad(), 0.1, &cfg);
        assert_eq!(st.model.encoder, frozen.encoder);
    }

    #[test]
    fn inactive_triplet_gives_zero_gradient() {
        let model = tiny_model(2);
        let pyrs = tiny_pyrs(2);
        let fwd: Vec<_> = pyrs.iter().map(|p| model.forward(p).unwrap()).collect();
        let (loss, active, gq, gp, gn) = triplet_objective(
            &fwd[0].0.values,
            &fwd[1].0.values,
            &[&fwd[2].0.values],
            -5.0,
        );
        assert_eq!((loss, active), (0.0, 0));
        for (f, g) in fwd.iter().zip([gq, gp, gn[0].clone()]) {
            assert!(model.backward(&f.1, &g).unwrap().is_zero());
        }
    }

    #[test]
    fn factor_pyramid_levels() {
        let img = Image::from_fn(16, 12, |x, y| [x as f32 / 16.0, y as f32 / 12.0, 0.5]);
        let p = factor_pyramid(&img, &[2, 4]).unwrap();
        assert_eq!(p.levels.len(), 2);
        assert_eq!(
            (p.levels[0].image.width(), p.levels[0].image.height()),
            (8, 6)
        );
        assert_eq!(p.levels[1].image.pixel(1, 1), img.pixel(4, 4));
        let cfg = TrainConfig {
            factors: vec![1, 2, 4],
            augmentation: Augmentation::RandomResize,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = BTreeSet::new();
        for _ in 0..50 {
            let p = training_pyramid(&img, &cfg, &mut rng).unwrap();
            assert_eq!(p.len(), 1);
            seen.insert(p.levels[0].factor as u32);
        }
        assert_eq!(seen, BTreeSet::from([1, 2, 4]));
        assert_eq!(mining_pyramid(&img, &cfg).unwrap().levels[0].factor, 1.0);
    }
}
