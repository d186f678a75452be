//! The nine defense strategies behind one defended-prediction interface.
//!
//! Seven kinds retrain the classifier (PGD-AT, Interpolated AT, TRADES,
//! Free AT, Gaussian augmentation, defensive distillation, RSLAD); two wrap
//! the frozen baseline with an input transform (feature squeezing,
//! Gaussian noise).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attack::DomainBounds;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    backward, ce_input_gradients, epoch_batches, forward, forward_cached, loss_ce, loss_ce_soft,
    predict_from_logits, softmax_rows, MlpModel, OptimizerState, TrainConfig,
};
use crate::seeding::{derive_seed, seed_for_indexed};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    PgdAt,
    InterpolatedAt,
    Trades,
    FreeAt,
    GaussianAugmenter,
    DefensiveDistillation,
    Rslad,
    FeatureSqueezing,
    GaussianNoise,
}

impl DefenseKind {
    /// Stable router label order: ids 0..8.
    pub const ALL: [DefenseKind; 9] = [
        DefenseKind::PgdAt,
        DefenseKind::InterpolatedAt,
        DefenseKind::Trades,
        DefenseKind::FreeAt,
        DefenseKind::GaussianAugmenter,
        DefenseKind::DefensiveDistillation,
        DefenseKind::Rslad,
        DefenseKind::FeatureSqueezing,
        DefenseKind::GaussianNoise,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<DefenseKind> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::PgdAt => "pgd_at",
            DefenseKind::InterpolatedAt => "interpolated_at",
            DefenseKind::Trades => "trades",
            DefenseKind::FreeAt => "free_at",
            DefenseKind::GaussianAugmenter => "gaussian_augmenter",
            DefenseKind::DefensiveDistillation => "defensive_distillation",
            DefenseKind::Rslad => "rslad",
            DefenseKind::FeatureSqueezing => "feature_squeezing",
            DefenseKind::GaussianNoise => "gaussian_noise",
        }
    }

    /// Transform-based kinds wrap the baseline; the rest retrain.
    pub fn is_transform_based(self) -> bool {
        matches!(self, DefenseKind::FeatureSqueezing | DefenseKind::GaussianNoise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsladVariant {
    Rslad10,
    Rslad100,
}

impl RsladVariant {
    /// Inner attack iterations; the "100" variant is desk-scaled to 25.
    pub fn inner_steps(self) -> usize {
        match self {
            RsladVariant::Rslad10 => 10,
            RsladVariant::Rslad100 => 25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RsladVariant::Rslad10 => "rslad10",
            RsladVariant::Rslad100 => "rslad100",
        }
    }
}

/// Inner PGD settings for the adversarial-training family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerAttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Step size as a fraction of epsilon.
    pub step_fraction: f64,
}

impl Default for InnerAttackConfig {
    fn default() -> Self {
        InnerAttackConfig {
            epsilon: 0.1,
            steps: 7,
            step_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub attack_for_training: InnerAttackConfig,
    pub trades_beta: f64,
    pub mixup_alpha: f64,
    pub free_replays: usize,
    pub augment_sigma: f64,
    pub distill_temperature: f64,
    pub rslad_variant: RsladVariant,
    pub squeeze_bits: u32,
    pub noise_sigma: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            attack_for_training: InnerAttackConfig::default(),
            trades_beta: 6.0,
            mixup_alpha: 1.0,
            free_replays: 4,
            augment_sigma: 0.1,
            distill_temperature: 20.0,
            rslad_variant: RsladVariant::Rslad10,
            squeeze_bits: 4,
            noise_sigma: 0.05,
            train: TrainConfig {
                epochs: 6,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trades_beta > 0.0) {
            return Err(Error::InvalidArgument("trades_beta must be > 0".into()));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::InvalidArgument("mixup_alpha must be > 0".into()));
        }
        if self.free_replays < 1 {
            return Err(Error::InvalidArgument("free_replays must be >= 1".into()));
        }
        if self.augment_sigma < 0.0 {
            return Err(Error::InvalidArgument("augment_sigma must be >= 0".into()));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::InvalidArgument("distill_temperature must be > 0".into()));
        }
        if !(1..=16).contains(&self.squeeze_bits) {
            return Err(Error::InvalidArgument("squeeze_bits must be in [1, 16]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(self.attack_for_training.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("attack epsilon must be >= 0".into()));
        }
        if self.attack_for_training.steps < 1 {
            return Err(Error::InvalidArgument("attack steps must be >= 1".into()));
        }
        if !(self.attack_for_training.step_fraction > 0.0) {
            return Err(Error::InvalidArgument("attack step_fraction must be > 0".into()));
        }
        self.train.validate()
    }
}

/// Inference-time input transform attached to the frozen baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputTransform {
    FeatureSqueeze { bits: u32, bounds: DomainBounds },
    GaussianNoise { sigma: f64, seed: u64, bounds: DomainBounds },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub variant: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DefendedModel {
    pub kind: DefenseKind,
    pub transform: Option<InputTransform>,
    pub model: MlpModel,
    pub meta: TrainMeta,
}

// ---------------------------------------------------------------------------
// Small building blocks (spec operations)
// ---------------------------------------------------------------------------

/// Convex combination of two samples and their one-hot labels.
pub fn mixup(
    x1: ArrayView1<f64>,
    y1: ArrayView1<f64>,
    x2: ArrayView1<f64>,
    y2: ArrayView1<f64>,
    lambda: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixup lambda must be in [0,1], got {lambda}"
        )));
    }
    let x = &x1.to_owned() * lambda + &(&x2.to_owned() * (1.0 - lambda));
    let y = &y1.to_owned() * lambda + &(&y2.to_owned() * (1.0 - lambda));
    Ok((x, y))
}

/// Quantizes each feature to 2^bits - 1 levels inside its bounds.
pub fn feature_squeeze(x: ArrayView1<f64>, bits: u32, bounds: &DomainBounds) -> Array1<f64> {
    let levels = (2u32.pow(bits) - 1) as f64;
    let mut out = Array1::zeros(x.len());
    for (j, &v) in x.iter().enumerate() {
        let (lo, hi) = (bounds.lo[j], bounds.hi[j]);
        if hi > lo {
            let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let q = (u * levels).round() / levels;
            out[j] = lo + q * (hi - lo);
        } else {
            out[j] = lo;
        }
    }
    out
}

/// Adds seeded Gaussian noise and clips to the domain box.
pub fn gaussian_perturb(
    x: ArrayView1<f64>,
    sigma: f64,
    seed: u64,
    bounds: &DomainBounds,
) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_owned();
    for (j, v) in out.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + sigma * z).clamp(bounds.lo[j], bounds.hi[j]);
    }
    out
}

/// Temperature-softened teacher probabilities, rows summing to one.
pub fn distill_soft_labels(teacher: &MlpModel, x: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let logits = forward(teacher, x)?;
    Ok(softmax_rows(&logits.mapv(|v| v / temperature)))
}

/// Row-wise KL(p || q) with probability flooring.
pub fn kl_divergence_rows(p: &Array2<f64>, q: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(p.nrows());
    for (i, (pr, qr)) in p.rows().into_iter().zip(q.rows()).enumerate() {
        out[i] = pr
            .iter()
            .zip(qr.iter())
            .map(|(&pv, &qv)| {
                let pv = pv.max(PROB_FLOOR);
                let qv = qv.max(PROB_FLOOR);
                pv * (pv.ln() - qv.ln())
            })
            .sum();
    }
    out
}

/// CE(f(x), y) + beta * KL(p(x) || p(x_adv)), both terms batch means.
pub fn trades_loss(
    model: &MlpModel,
    x: &Array2<f64>,
    x_adv: &Array2<f64>,
    y: &[usize],
    beta: f64,
) -> Result<f64> {
    let clean_logits = forward(model, x)?;
    let adv_logits = forward(model, x_adv)?;
    let (ce, _) = loss_ce(&clean_logits, y);
    let p = softmax_rows(&clean_logits);
    let a = softmax_rows(&adv_logits);
    let kl = kl_divergence_rows(&p, &a);
    Ok(ce + beta * kl.mean().unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Batched attack helpers for training loops
// ---------------------------------------------------------------------------

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_batch_bounds(x: &mut Array2<f64>, bounds: &DomainBounds) {
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = v.clamp(bounds.lo[j], bounds.hi[j]);
        }
    }
}

fn clamp_batch_ball(x: &mut Array2<f64>, origin: &Array2<f64>, eps: f64) {
    ndarray::Zip::from(x).and(origin).for_each(|v, &o| {
        *v = v.clamp(o - eps, o + eps);
    });
}

fn random_ball_init(x: &Array2<f64>, eps: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = x.clone();
    if eps > 0.0 {
        for v in out.iter_mut() {
            *v += rng.gen::<f64>() * 2.0 * eps - eps;
        }
    }
    out
}

/// Vectorized PGD on a batch, ascending the cross-entropy of the current
/// model. Used inside adversarial-training loops.
fn pgd_batch(
    model: &MlpModel,
    x: &Array2<f64>,
    y: &[usize],
    attack: &InnerAttackConfig,
    bounds: &DomainBounds,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let eps = attack.epsilon;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let alpha = eps * attack.step_fraction;
    let mut cur = random_ball_init(x, eps, rng);
    clamp_batch_bounds(&mut cur, bounds);
    for _ in 0..attack.steps {
        let (_, grads) = ce_input_gradients(model, &cur, y)?;
        ndarray::Zip::from(&mut cur).and(&grads).for_each(|v, &g| {
            *v += alpha * sign(g);
        });
        clamp_batch_bounds(&mut cur, bounds);
        clamp_batch_ball(&mut cur, x, eps);
    }
    Ok(cur)
}

/// Inner PGD maximizing KL(target_probs || p_model(x_adv)).
fn kl_ascent_batch(
    model: &MlpModel,
    x: &Array2<f64>,
    target_probs: &Array2<f64>,
    eps: f64,
    steps: usize,
    step_fraction: f64,
    bounds: &DomainBounds,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let alpha = eps * step_fraction;
    let mut cur = random_ball_init(x, eps, rng);
    clamp_batch_bounds(&mut cur, bounds);
    for _ in 0..steps {
        let cache = forward_cached(model, &cur)?;
        // d KL(t || softmax(z)) / dz = softmax(z) - t
        let mut dlogits = softmax_rows(cache.logits());
        dlogits -= target_probs;
        let (_, input_grads) = backward(model, &cache, &dlogits);
        ndarray::Zip::from(&mut cur).and(&input_grads).for_each(|v, &g| {
            *v += alpha * sign(g);
        });
        clamp_batch_bounds(&mut cur, bounds);
        clamp_batch_ball(&mut cur, x, eps);
    }
    Ok(cur)
}

fn onehot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), n_classes));
    for (i, &y) in labels.iter().enumerate() {
        out[(i, y)] = 1.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Training-based defenses
// ---------------------------------------------------------------------------

struct BatchView {
    x: Array2<f64>,
    y: Vec<usize>,
}

fn batch_of(data: &Dataset, idx: &[usize]) -> BatchView {
    BatchView {
        x: data.features().select(Axis(0), idx),
        y: idx.iter().map(|&i| data.labels()[i]).collect(),
    }
}

fn check_finite(loss: f64, kind: DefenseKind, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            context: kind.name().into(),
        })
    }
}

fn train_pgd_at(
    config: &DefenseConfig,
    train: &Dataset,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<MlpModel> {
    let dims = model_dims(train);
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"attack"]));
    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let adv = pgd_batch(&model, &batch.x, &batch.y, &config.attack_for_training, bounds, &mut attack_rng)?;
            let cache = forward_cached(&model, &adv)?;
            let (loss, dlogits) = loss_ce(cache.logits(), &batch.y);
            check_finite(loss, DefenseKind::PgdAt, epoch, b)?;
            let (grads, _) = backward(&model, &cache, &dlogits);
            opt.step(&mut model, &grads, config.train.learning_rate);
        }
    }
    Ok(model)
}

fn train_interpolated_at(
    config: &DefenseConfig,
    train: &Dataset,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<MlpModel> {
    let dims = model_dims(train);
    let n_classes = train.n_classes();
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"attack"]));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"mixup"]));
    let beta = Beta::new(config.mixup_alpha, config.mixup_alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup beta: {e}")))?;

    let mix_batch = |x: &Array2<f64>, y_soft: &Array2<f64>, rng: &mut ChaCha8Rng| {
        let m = x.nrows();
        let lambda: f64 = beta.sample(rng);
        let mut perm: Vec<usize> = (0..m).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(rng);
        let x2 = x.select(Axis(0), &perm);
        let y2 = y_soft.select(Axis(0), &perm);
        let xm = x * lambda + &(&x2 * (1.0 - lambda));
        let ym = y_soft * lambda + &(&y2 * (1.0 - lambda));
        (xm, ym)
    };

    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let y_soft = onehot(&batch.y, n_classes);
            let adv = pgd_batch(&model, &batch.x, &batch.y, &config.attack_for_training, bounds, &mut attack_rng)?;

            let (x_clean_mix, y_clean_mix) = mix_batch(&batch.x, &y_soft, &mut mix_rng);
            let (x_adv_mix, y_adv_mix) = mix_batch(&adv, &y_soft, &mut mix_rng);

            let cache_c = forward_cached(&model, &x_clean_mix)?;
            let (loss_c, dlogits_c) = loss_ce_soft(cache_c.logits(), &y_clean_mix);
            let cache_a = forward_cached(&model, &x_adv_mix)?;
            let (loss_a, dlogits_a) = loss_ce_soft(cache_a.logits(), &y_adv_mix);
            check_finite(loss_c + loss_a, DefenseKind::InterpolatedAt, epoch, b)?;

            let (grads_c, _) = backward(&model, &cache_c, &dlogits_c);
            let (grads_a, _) = backward(&model, &cache_a, &dlogits_a);
            let grads: Vec<_> = grads_c
                .into_iter()
                .zip(grads_a)
                .map(|((wc, bc), (wa, ba))| (wc + wa, bc + ba))
                .collect();
            opt.step(&mut model, &grads, config.train.learning_rate);
        }
    }
    Ok(model)
}

fn train_trades(
    config: &DefenseConfig,
    train: &Dataset,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<MlpModel> {
    let dims = model_dims(train);
    let beta = config.trades_beta;
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"attack"]));

    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let m = batch.x.nrows() as f64;

            let clean_probs = softmax_rows(&forward(&model, &batch.x)?);
            let adv = kl_ascent_batch(
                &model,
                &batch.x,
                &clean_probs,
                config.attack_for_training.epsilon,
                config.attack_for_training.steps,
                config.attack_for_training.step_fraction,
                bounds,
                &mut attack_rng,
            )?;

            let cache_clean = forward_cached(&model, &batch.x)?;
            let cache_adv = forward_cached(&model, &adv)?;
            let p = softmax_rows(cache_clean.logits());
            let a = softmax_rows(cache_adv.logits());
            let kl = kl_divergence_rows(&p, &a);
            let (ce, ce_grad) = loss_ce(cache_clean.logits(), &batch.y);
            let loss = ce + beta * kl.mean().unwrap_or(0.0);
            check_finite(loss, DefenseKind::Trades, epoch, b)?;

            // d/dz_clean of KL(p||a): p_j((ln p_j - ln a_j) - KL_i)
            let mut dlogits_clean = ce_grad;
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    let pv = p[(i, j)].max(PROB_FLOOR);
                    let av = a[(i, j)].max(PROB_FLOOR);
                    dlogits_clean[(i, j)] +=
                        beta * p[(i, j)] * ((pv.ln() - av.ln()) - kl[i]) / m;
                }
            }
            // d/dz_adv of KL(p||a): a - p
            let mut dlogits_adv = a.clone();
            dlogits_adv -= &p;
            dlogits_adv.mapv_inplace(|v| beta * v / m);

            let (grads_c, _) = backward(&model, &cache_clean, &dlogits_clean);
            let (grads_a, _) = backward(&model, &cache_adv, &dlogits_adv);
            let grads: Vec<_> = grads_c
                .into_iter()
                .zip(grads_a)
                .map(|((wc, bc), (wa, ba))| (wc + wa, bc + ba))
                .collect();
            opt.step(&mut model, &grads, config.train.learning_rate);
        }
    }
    Ok(model)
}

fn train_free_at(
    config: &DefenseConfig,
    train: &Dataset,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<MlpModel> {
    let dims = model_dims(train);
    let replays = config.free_replays;
    let epochs = config.train.epochs.div_ceil(replays).max(1);
    let eps = config.attack_for_training.epsilon;
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));

    for epoch in 0..epochs {
        // perturbation persists across batches within an epoch
        let mut delta = Array2::<f64>::zeros((config.train.batch_size, train.d()));
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let m = batch.x.nrows();
            for _ in 0..replays {
                let mut x_in = batch.x.clone();
                x_in += &delta.slice(ndarray::s![..m, ..]);
                clamp_batch_bounds(&mut x_in, bounds);
                let cache = forward_cached(&model, &x_in)?;
                let (loss, dlogits) = loss_ce(cache.logits(), &batch.y);
                check_finite(loss, DefenseKind::FreeAt, epoch, b)?;
                let (grads, input_grads) = backward(&model, &cache, &dlogits);
                opt.step(&mut model, &grads, config.train.learning_rate);
                let mut dslice = delta.slice_mut(ndarray::s![..m, ..]);
                ndarray::Zip::from(&mut dslice).and(&input_grads).for_each(|dv, &g| {
                    *dv = (*dv + eps * sign(g)).clamp(-eps, eps);
                });
            }
        }
    }
    Ok(model)
}

fn train_gaussian_augmenter(config: &DefenseConfig, train: &Dataset, seed: u64) -> Result<MlpModel> {
    let dims = model_dims(train);
    let sigma = config.augment_sigma;
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"shuffle"]));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"noise"]));

    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let mut x_noisy = batch.x.clone();
            for v in x_noisy.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                *v += sigma * z;
            }
            let cache = forward_cached(&model, &x_noisy)?;
            let (loss, dlogits) = loss_ce(cache.logits(), &batch.y);
            check_finite(loss, DefenseKind::GaussianAugmenter, epoch, b)?;
            let (grads, _) = backward(&model, &cache, &dlogits);
            opt.step(&mut model, &grads, config.train.learning_rate);
        }
    }
    Ok(model)
}

/// Trains one model on hard or soft labels at a fixed softmax temperature.
fn train_at_temperature(
    dims: &[usize],
    data: &Dataset,
    soft_targets: Option<&Array2<f64>>,
    temperature: f64,
    train_cfg: &TrainConfig,
    kind: DefenseKind,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<MlpModel> {
    let mut model = crate::nn::init_mlp(dims, init_seed)?;
    let mut opt = OptimizerState::new(train_cfg.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for epoch in 0..train_cfg.epochs {
        let batches = epoch_batches(data.n(), train_cfg.batch_size, train_cfg.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(data, idx);
            let cache = forward_cached(&model, &batch.x)?;
            let scaled = cache.logits().mapv(|v| v / temperature);
            let (loss, dscaled) = match soft_targets {
                Some(targets) => {
                    let t = targets.select(Axis(0), idx);
                    loss_ce_soft(&scaled, &t)
                }
                None => loss_ce(&scaled, &batch.y),
            };
            check_finite(loss, kind, epoch, b)?;
            let dlogits = dscaled.mapv(|v| v / temperature);
            let (grads, _) = backward(&model, &cache, &dlogits);
            opt.step(&mut model, &grads, train_cfg.learning_rate);
        }
    }
    Ok(model)
}

fn train_distillation(config: &DefenseConfig, train: &Dataset, seed: u64) -> Result<MlpModel> {
    let dims = model_dims(train);
    let temperature = config.distill_temperature;
    let teacher = train_at_temperature(
        &dims,
        train,
        None,
        temperature,
        &config.train,
        DefenseKind::DefensiveDistillation,
        derive_seed(seed, &[b"teacher-init"]),
        derive_seed(seed, &[b"teacher-shuffle"]),
    )?;
    let soft = distill_soft_labels(&teacher, train.features(), temperature)?;
    // student trains at T and deploys at T=1
    train_at_temperature(
        &dims,
        train,
        Some(&soft),
        temperature,
        &config.train,
        DefenseKind::DefensiveDistillation,
        derive_seed(seed, &[b"student-init"]),
        derive_seed(seed, &[b"student-shuffle"]),
    )
}

fn train_rslad(
    config: &DefenseConfig,
    train: &Dataset,
    bounds: &DomainBounds,
    seed: u64,
) -> Result<MlpModel> {
    let dims = model_dims(train);
    let teacher = train_pgd_at(config, train, bounds, derive_seed(seed, &[b"teacher"]))?;
    let teacher_probs = softmax_rows(&forward(&teacher, train.features())?);

    let inner_steps = config.rslad_variant.inner_steps();
    let mut model = crate::nn::init_mlp(&dims, derive_seed(seed, &[b"student-init"]))?;
    let mut opt = OptimizerState::new(config.train.optimizer, &model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"student-shuffle"]));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"student-attack"]));

    for epoch in 0..config.train.epochs {
        let batches = epoch_batches(train.n(), config.train.batch_size, config.train.shuffle, &mut shuffle_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch = batch_of(train, idx);
            let m = batch.x.nrows() as f64;
            let target = teacher_probs.select(Axis(0), idx);
            let adv = kl_ascent_batch(
                &model,
                &batch.x,
                &target,
                config.attack_for_training.epsilon,
                inner_steps,
                config.attack_for_training.step_fraction,
                bounds,
                &mut attack_rng,
            )?;

            let cache_clean = forward_cached(&model, &batch.x)?;
            let cache_adv = forward_cached(&model, &adv)?;
            let p_clean = softmax_rows(cache_clean.logits());
            let p_adv = softmax_rows(cache_adv.logits());
            let loss = kl_divergence_rows(&target, &p_clean).mean().unwrap_or(0.0)
                + kl_divergence_rows(&target, &p_adv).mean().unwrap_or(0.0);
            check_finite(loss, DefenseKind::Rslad, epoch, b)?;

            // d KL(t||p)/dz = p - t on each branch
            let mut d_clean = p_clean;
            d_clean -= &target;
            d_clean.mapv_inplace(|v| v / m);
            let mut d_adv = p_adv;
            d_adv -= &target;
            d_adv.mapv_inplace(|v| v / m);

            let (grads_c, _) = backward(&model, &cache_clean, &d_clean);
            let (grads_a, _) = backward(&model, &cache_adv, &d_adv);
            let grads: Vec<_> = grads_c
                .into_iter()
                .zip(grads_a)
                .map(|((wc, bc), (wa, ba))| (wc + wa, bc + ba))
                .collect();
            opt.step(&mut model, &grads, config.train.learning_rate);
        }
    }
    Ok(model)
}

/// Retrained models keep the baseline architecture.
fn model_dims(train: &Dataset) -> Vec<usize> {
    let mut dims = vec![train.d()];
    dims.extend_from_slice(&[128, 64]);
    dims.push(train.n_classes());
    dims
}

// ---------------------------------------------------------------------------
// Dispatch, prediction, serialization
// ---------------------------------------------------------------------------

/// Trains (or wraps) one defense. Deterministic given `config.seed`;
/// transform-based kinds carry the baseline parameters unchanged.
pub fn train_defense(
    kind: DefenseKind,
    config: &DefenseConfig,
    train: &Dataset,
    baseline: &MlpModel,
    bounds: &DomainBounds,
) -> Result<DefendedModel> {
    config.validate()?;
    if train.n() == 0 {
        return Err(Error::EmptyTable);
    }
    let seed = derive_seed(config.seed, &[b"defense", kind.name().as_bytes()]);
    let mut meta = TrainMeta {
        seed,
        epochs: config.train.epochs,
        variant: None,
    };
    let (model, transform) = match kind {
        DefenseKind::PgdAt => (train_pgd_at(config, train, bounds, seed)?, None),
        DefenseKind::InterpolatedAt => (train_interpolated_at(config, train, bounds, seed)?, None),
        DefenseKind::Trades => (train_trades(config, train, bounds, seed)?, None),
        DefenseKind::FreeAt => (train_free_at(config, train, bounds, seed)?, None),
        DefenseKind::GaussianAugmenter => (train_gaussian_augmenter(config, train, seed)?, None),
        DefenseKind::DefensiveDistillation => (train_distillation(config, train, seed)?, None),
        DefenseKind::Rslad => {
            meta.variant = Some(config.rslad_variant.name().to_string());
            (train_rslad(config, train, bounds, seed)?, None)
        }
        DefenseKind::FeatureSqueezing => {
            meta.epochs = 0;
            (
                baseline.clone(),
                Some(InputTransform::FeatureSqueeze {
                    bits: config.squeeze_bits,
                    bounds: bounds.clone(),
                }),
            )
        }
        DefenseKind::GaussianNoise => {
            meta.epochs = 0;
            (
                baseline.clone(),
                Some(InputTransform::GaussianNoise {
                    sigma: config.noise_sigma,
                    seed: derive_seed(seed, &[b"noise"]),
                    bounds: bounds.clone(),
                }),
            )
        }
    };
    Ok(DefendedModel {
        kind,
        transform,
        model,
        meta,
    })
}

/// Applies the transform (if any), then predicts. Deterministic: the noise
/// transform derives one seed per sample index.
pub fn defended_predict(dm: &DefendedModel, data: &Dataset) -> Result<(Vec<usize>, Array2<f64>)> {
    let logits = match &dm.transform {
        None => forward(&dm.model, data.features())?,
        Some(transform) => {
            let transformed = apply_transform(transform, data.features());
            forward(&dm.model, &transformed)?
        }
    };
    Ok(predict_from_logits(&logits))
}

/// Single-sample defended prediction for streaming-style use; the sample
/// index feeds the noise transform's per-sample seed.
pub fn defended_predict_row(
    dm: &DefendedModel,
    row: ArrayView1<f64>,
    sample_index: usize,
) -> Result<usize> {
    let transformed: Array1<f64> = match &dm.transform {
        None => row.to_owned(),
        Some(InputTransform::FeatureSqueeze { bits, bounds }) => {
            feature_squeeze(row, *bits, bounds)
        }
        Some(InputTransform::GaussianNoise { sigma, seed, bounds }) => gaussian_perturb(
            row,
            *sigma,
            seed_for_indexed(*seed, "sample", sample_index as u64),
            bounds,
        ),
    };
    let batch = transformed.insert_axis(ndarray::Axis(0));
    let logits = forward(&dm.model, &batch)?;
    Ok(crate::nn::argmax_lowest(logits.row(0).iter().cloned()))
}

pub fn apply_transform(transform: &InputTransform, features: &Array2<f64>) -> Array2<f64> {
    match transform {
        InputTransform::FeatureSqueeze { bits, bounds } => {
            let mut out = Array2::zeros(features.raw_dim());
            for (i, row) in features.rows().into_iter().enumerate() {
                out.row_mut(i).assign(&feature_squeeze(row, *bits, bounds));
            }
            out
        }
        InputTransform::GaussianNoise { sigma, seed, bounds } => {
            let mut out = Array2::zeros(features.raw_dim());
            for (i, row) in features.rows().into_iter().enumerate() {
                let sample_seed = seed_for_indexed(*seed, "sample", i as u64);
                out.row_mut(i)
                    .assign(&gaussian_perturb(row, *sigma, sample_seed, bounds));
            }
            out
        }
    }
}

const DEFENDED_MAGIC: &[u8; 4] = b"DYDF";
const DEFENDED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DefendedHeader {
    kind: DefenseKind,
    meta: TrainMeta,
    transform: Option<InputTransform>,
}

pub fn save_defended(dm: &DefendedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = DefendedHeader {
        kind: dm.kind,
        meta: dm.meta.clone(),
        transform: dm.transform.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let model_bytes = dm.model.to_bytes();
    let mut out = Vec::new();
    out.write_all(DEFENDED_MAGIC).unwrap();
    out.write_all(&DEFENDED_VERSION.to_le_bytes()).unwrap();
    out.write_all(&(header_json.len() as u32).to_le_bytes()).unwrap();
    out.write_all(&header_json).unwrap();
    out.write_all(&(model_bytes.len() as u64).to_le_bytes()).unwrap();
    out.write_all(&model_bytes).unwrap();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_defended(path: impl AsRef<Path>) -> Result<DefendedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::corrupt(path, "truncated magic"))?;
    if &magic != DEFENDED_MAGIC {
        return Err(Error::corrupt(path, "bad magic; not a defended-model file"));
    }
    let mut v4 = [0u8; 4];
    cursor
        .read_exact(&mut v4)
        .map_err(|_| Error::corrupt(path, "truncated version"))?;
    let version = u32::from_le_bytes(v4);
    if version != DEFENDED_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: DEFENDED_VERSION,
        });
    }
    cursor
        .read_exact(&mut v4)
        .map_err(|_| Error::corrupt(path, "truncated header length"))?;
    let header_len = u32::from_le_bytes(v4) as usize;
    let mut header_buf = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_buf)
        .map_err(|_| Error::corrupt(path, "truncated header"))?;
    let header: DefendedHeader =
        serde_json::from_slice(&header_buf).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let mut v8 = [0u8; 8];
    cursor
        .read_exact(&mut v8)
        .map_err(|_| Error::corrupt(path, "truncated model length"))?;
    let model_len = u64::from_le_bytes(v8) as usize;
    let mut model_buf = vec![0u8; model_len];
    cursor
        .read_exact(&mut model_buf)
        .map_err(|_| Error::corrupt(path, "truncated model block"))?;
    let model = MlpModel::from_bytes(&model_buf, path)?;
    Ok(DefendedModel {
        kind: header.kind,
        transform: header.transform,
        model,
        meta: header.meta,
    })
}
