//! Loss-based example weights and a feature-space MixMatch refinement stage.
//!
//! Selected examples keep their observed labels and are drawn in proportion to
//! their weight; everything else is treated as unlabeled. Augmentation is
//! additive Gaussian noise on the feature vector.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::NoisyDataset;
use crate::model::{soft_ce_dlogits, soft_ce_loss, squared_error_dlogits, Activations, Model};
use crate::selection::SelectionResult;
use crate::trainer::{LossLedger, Sgd, SgdConfig};
use crate::util::{rng_stream, Rng};
use crate::{Error, Result};

/// `exp(-κ (ℓ̄ - ℓ_lo) / (ℓ_hi - ℓ_lo))`; 1 when the class has a single loss level.
pub fn example_weight(mean_loss: f64, class_min: f64, class_max: f64, kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::param(format!("kappa must be non-negative, got {kappa}")));
    }
    if !(class_min <= mean_loss && mean_loss <= class_max) {
        return Err(Error::Range(format!("mean loss {mean_loss} outside [{class_min}, {class_max}]")));
    }
    if class_max == class_min {
        return Ok(1.0);
    }
    Ok((-kappa * (mean_loss - class_min) / (class_max - class_min)).exp())
}

/// Selected ids with their resampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSelection {
    pub entries: Vec<(usize, f64)>,
    /// Smallest and largest selected mean loss per class (`None` for classes
    /// with nothing selected).
    pub class_min: Vec<Option<f64>>,
    pub class_max: Vec<Option<f64>>,
}

impl WeightedSelection {
    pub fn from_selection(sel: &SelectionResult, ledger: &LossLedger, kappa: f64) -> Result<Self> {
        let c = sel.per_class_ids.len();
        let mut entries = Vec::with_capacity(sel.total());
        let mut class_min = vec![None; c];
        let mut class_max = vec![None; c];
        for (i, ids) in sel.per_class_ids.iter().enumerate() {
            let losses: Vec<f64> = ids.iter().map(|&id| ledger.mean_loss(id)).collect::<Result<_>>()?;
            let Some(lo) = losses.iter().copied().reduce(f64::min) else { continue };
            let hi = losses.iter().copied().fold(lo, f64::max);
            class_min[i] = Some(lo);
            class_max[i] = Some(hi);
            for (&id, &l) in ids.iter().zip(&losses) {
                entries.push((id, example_weight(l, lo, hi, kappa)?));
            }
        }
        Ok(WeightedSelection { entries, class_min, class_max })
    }

    /// All weights 1.
    pub fn uniform(ids: &[usize]) -> Self {
        WeightedSelection { entries: ids.iter().map(|&id| (id, 1.0)).collect(), class_min: vec![], class_max: vec![] }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn sampler(&self) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.entries.iter().map(|(_, w)| *w))
            .map_err(|e| Error::param(format!("cannot resample selection: {e}")))
    }
}

/// `batch_size` ids drawn i.i.d. with probability proportional to weight.
/// An empty selection yields an empty batch.
pub fn weighted_resample(selection: &WeightedSelection, batch_size: usize, seed: u64) -> Vec<usize> {
    if batch_size == 0 || selection.is_empty() {
        return Vec::new();
    }
    let Ok(dist) = selection.sampler() else { return Vec::new() };
    let mut rng = rng_stream(seed, 10);
    (0..batch_size).map(|_| selection.entries[dist.sample(&mut rng)].0).collect()
}

fn augment_with(x: &[f64], noise_std: f64, rng: &mut Rng) -> Vec<f64> {
    if noise_std == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `x` plus spherical Gaussian noise of scale `noise_std`.
pub fn augment(x: &[f64], noise_std: f64, seed: u64) -> Vec<f64> {
    augment_with(x, noise_std, &mut rng_stream(seed, 12))
}

/// `q_i^(1/temp) / sum_j q_j^(1/temp)`.
pub fn sharpen(q: &[f64], temp: f64) -> Vec<f64> {
    // Work relative to the largest entry so tiny temperatures do not underflow.
    let top = q.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return q.to_vec();
    }
    let powered: Vec<f64> = q.iter().map(|v| (v / top).powf(1.0 / temp)).collect();
    let sum: f64 = powered.iter().sum();
    powered.into_iter().map(|v| v / sum).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixMatchParams {
    /// Augmentations averaged per unlabeled example.
    pub k: usize,
    pub sharpen_temp: f64,
    /// Beta(α, α) parameter of the mixing coefficient; 0 disables mixing.
    pub alpha: f64,
    /// Final weight of the unlabeled loss.
    pub lambda_u: f64,
    /// Fraction of all steps over which the unlabeled weight ramps up from 0.
    pub rampup_fraction: f64,
    pub augment_noise_std: f64,
}

impl Default for MixMatchParams {
    fn default() -> Self {
        MixMatchParams { k: 2, sharpen_temp: 0.5, alpha: 0.75, lambda_u: 5.0, rampup_fraction: 0.25, augment_noise_std: 0.1 }
    }
}

impl MixMatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("K must be at least 1"));
        }
        if !(self.sharpen_temp > 0.0 && self.sharpen_temp.is_finite()) {
            return Err(Error::param("sharpening temperature must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param("alpha must be non-negative"));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::param("lambda_u must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.rampup_fraction) {
            return Err(Error::param("rampup_fraction must lie in [0, 1]"));
        }
        if !(self.augment_noise_std >= 0.0 && self.augment_noise_std.is_finite()) {
            return Err(Error::param("augment_noise_std must be non-negative"));
        }
        Ok(())
    }
}

fn guess_label_with(model: &Model, u: &[f64], params: &MixMatchParams, rng: &mut Rng, act: &mut Activations) -> Vec<f64> {
    let mut avg = vec![0.0; model.c];
    for _ in 0..params.k {
        model.forward_into(&augment_with(u, params.augment_noise_std, rng), act);
        for (a, p) in avg.iter_mut().zip(&act.probs) {
            *a += p;
        }
    }
    avg.iter_mut().for_each(|a| *a /= params.k as f64);
    sharpen(&avg, params.sharpen_temp)
}

/// Model output averaged over `K` augmentations of `u`, then sharpened.
pub fn guess_label(model: &Model, u: &[f64], params: &MixMatchParams, seed: u64) -> Vec<f64> {
    guess_label_with(model, u, params, &mut rng_stream(seed, 12), &mut Activations::default())
}

/// A feature vector with a (possibly soft) target distribution.
pub type Example = (Vec<f64>, Vec<f64>);

/// `λ' a + (1 - λ') b` on both features and targets, with `λ' = max(λ, 1 - λ)`.
pub fn mixup_pair_with_lambda(a: &Example, b: &Example, lambda: f64) -> Example {
    let l = lambda.max(1.0 - lambda);
    let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| l * x + (1.0 - l) * y).collect();
    (mix(&a.0, &b.0), mix(&a.1, &b.1))
}

fn draw_lambda(alpha: f64, rng: &mut Rng) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    Beta::new(alpha, alpha).expect("alpha validated positive").sample(rng)
}

/// MixUp with `λ ~ Beta(α, α)`; `α = 0` returns `a` unchanged.
pub fn mixup_pair(a: &Example, b: &Example, alpha: f64, seed: u64) -> Example {
    mixup_pair_with_lambda(a, b, draw_lambda(alpha, &mut rng_stream(seed, 13)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SslLoss {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
}

/// Soft-target CE over `labeled` plus `lambda_u` times the squared error over
/// `unlabeled`, the latter averaged over items and classes. Also returns the
/// gradient when `grad` is given.
fn ssl_loss_grad(
    model: &Model,
    labeled: &[Example],
    unlabeled: &[Example],
    lambda_u: f64,
    mut grad: Option<&mut [f64]>,
) -> SslLoss {
    let c = model.c;
    let mut act = Activations::default();
    let mut dlogits = vec![0.0; c];
    let mut supervised = 0.0;
    let scale_l = 1.0 / labeled.len().max(1) as f64;
    for (x, q) in labeled {
        model.forward_into(x, &mut act);
        supervised += soft_ce_loss(&act.probs, q);
        if let Some(g) = grad.as_deref_mut() {
            soft_ce_dlogits(&act.probs, q, &mut dlogits);
            dlogits.iter_mut().for_each(|v| *v *= scale_l);
            model.accumulate_grad(x, &act, &dlogits, g);
        }
    }
    let mut unsupervised = 0.0;
    let scale_u = 1.0 / (c * unlabeled.len().max(1)) as f64;
    for (x, q) in unlabeled {
        model.forward_into(x, &mut act);
        unsupervised += act.probs.iter().zip(q).map(|(p, t)| (t - p) * (t - p)).sum::<f64>();
        if lambda_u != 0.0 {
            if let Some(g) = grad.as_deref_mut() {
                squared_error_dlogits(&act.probs, q, &mut dlogits);
                dlogits.iter_mut().for_each(|v| *v *= lambda_u * scale_u);
                model.accumulate_grad(x, &act, &dlogits, g);
            }
        }
    }
    let supervised = supervised * scale_l;
    let unsupervised = unsupervised * scale_u;
    SslLoss { total: supervised + lambda_u * unsupervised, supervised, unsupervised }
}

/// `(total, supervised, unsupervised)` for already mixed batches.
pub fn ssl_loss(model: &Model, labeled: &[Example], unlabeled: &[Example], lambda_u: f64) -> SslLoss {
    ssl_loss_grad(model, labeled, unlabeled, lambda_u, None)
}

/// One row of the refinement log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SslStep {
    pub step: usize,
    pub epoch: usize,
    pub lambda_u: f64,
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
}

pub fn write_ssl_log<W: Write>(log: &[SslStep], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in log {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

struct Streams {
    labeled: Rng,
    unlabeled: Rng,
    augment: Rng,
    mix: Rng,
}

/// Builds the mixed labeled and unlabeled batches for one step.
fn mixmatch_batches(
    model: &Model,
    data: &NoisyDataset,
    labeled_ids: &[usize],
    unlabeled_ids: &[usize],
    params: &MixMatchParams,
    rngs: &mut Streams,
) -> (Vec<Example>, Vec<Example>) {
    let c = model.c;
    let mut act = Activations::default();
    let x_hat: Vec<Example> = labeled_ids
        .iter()
        .map(|&id| {
            let mut target = vec![0.0; c];
            target[data.y_obs()[id]] = 1.0;
            (augment_with(data.x(id), params.augment_noise_std, &mut rngs.augment), target)
        })
        .collect();
    let mut u_hat: Vec<Example> = Vec::with_capacity(unlabeled_ids.len() * params.k);
    for &id in unlabeled_ids {
        let u = data.x(id);
        let augs: Vec<Vec<f64>> =
            (0..params.k).map(|_| augment_with(u, params.augment_noise_std, &mut rngs.augment)).collect();
        let mut avg = vec![0.0; c];
        for a in &augs {
            model.forward_into(a, &mut act);
            avg.iter_mut().zip(&act.probs).for_each(|(s, p)| *s += p);
        }
        avg.iter_mut().for_each(|s| *s /= params.k as f64);
        let q = sharpen(&avg, params.sharpen_temp);
        u_hat.extend(augs.into_iter().map(|a| (a, q.clone())));
    }
    let mut pool: Vec<&Example> = x_hat.iter().chain(&u_hat).collect();
    pool.shuffle(&mut rngs.mix);
    let mut mixed = Vec::with_capacity(pool.len());
    for (item, partner) in x_hat.iter().chain(&u_hat).zip(&pool) {
        let lambda = draw_lambda(params.alpha, &mut rngs.mix);
        mixed.push(mixup_pair_with_lambda(item, partner, lambda));
    }
    let u_mixed = mixed.split_off(x_hat.len());
    (mixed, u_mixed)
}

/// MixMatch refinement: labeled batches are drawn from `selected` by weight,
/// unlabeled batches uniformly from `unlabeled`. One epoch is
/// `ceil(|selected| / batch_size)` steps. `on_epoch` runs after each epoch.
pub fn train_rsl_wm_with<F>(
    data: &NoisyDataset,
    selected: &WeightedSelection,
    unlabeled: &[usize],
    mut model: Model,
    params: &MixMatchParams,
    sgd: &SgdConfig,
    mut on_epoch: F,
) -> Result<(Model, Vec<SslStep>)>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    params.validate()?;
    sgd.validate()?;
    if selected.is_empty() {
        return Err(Error::param("weighted selection is empty"));
    }
    let sampler = selected.sampler()?;
    let mut rngs = Streams {
        labeled: rng_stream(sgd.seed, 10),
        unlabeled: rng_stream(sgd.seed, 11),
        augment: rng_stream(sgd.seed, 12),
        mix: rng_stream(sgd.seed, 13),
    };
    let b = sgd.batch_size;
    let steps_per_epoch = selected.len().div_ceil(b);
    let total_steps = steps_per_epoch * sgd.epochs.get();
    let ramp_steps = params.rampup_fraction * total_steps as f64;
    let mut opt = Sgd::new(sgd, model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..sgd.epochs.get() {
        let lr = sgd.lr_at(epoch);
        for _ in 0..steps_per_epoch {
            let labeled_ids: Vec<usize> =
                (0..b).map(|_| selected.entries[sampler.sample(&mut rngs.labeled)].0).collect();
            let unlabeled_ids: Vec<usize> = if unlabeled.is_empty() {
                Vec::new()
            } else {
                (0..b).map(|_| unlabeled[rngs.unlabeled.random_range(0..unlabeled.len())]).collect()
            };
            let (lx, ux) = mixmatch_batches(&model, data, &labeled_ids, &unlabeled_ids, params, &mut rngs);
            let lambda_u = if ramp_steps > 0.0 {
                params.lambda_u * (step as f64 / ramp_steps).min(1.0)
            } else {
                params.lambda_u
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = ssl_loss_grad(&model, &lx, &ux, lambda_u, Some(&mut grad));
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            opt.step(&mut model.params, &grad, lr);
            log.push(SslStep {
                step,
                epoch,
                lambda_u,
                total: loss.total,
                supervised: loss.supervised,
                unsupervised: loss.unsupervised,
            });
            step += 1;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        on_epoch(epoch, &model)?;
    }
    Ok((model, log))
}

pub fn train_rsl_wm(
    data: &NoisyDataset,
    selected: &WeightedSelection,
    unlabeled: &[usize],
    model: Model,
    params: &MixMatchParams,
    sgd: &SgdConfig,
) -> Result<(Model, Vec<SslStep>)> {
    train_rsl_wm_with(data, selected, unlabeled, model, params, sgd, |_, _| Ok(()))
}
