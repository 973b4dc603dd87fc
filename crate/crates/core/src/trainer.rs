//! Mini-batch SGD warm-up with a per-example loss ledger.
//!
//! After every epoch the whole training set is re-evaluated under the frozen
//! end-of-epoch parameters, and each example's cross-entropy is appended to the
//! [`LossLedger`]. The mean over epochs is what the selection stage ranks.

use std::io::Write;
use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::NoisyDataset;
use crate::model::{ce_loss, soft_ce_dlogits, Activations, Model};
use crate::util::rng_stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: NonZeroUsize,
    /// `(epoch, multiplier)`: from that (zero-based) epoch on, the learning rate
    /// is multiplied by `multiplier`, cumulatively.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl SgdConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4, batch 128, ×0.1 at 60% and 80%
    /// of the epochs.
    pub fn with_default_schedule(epochs: usize, seed: u64) -> Result<Self> {
        let epochs = NonZeroUsize::new(epochs).ok_or_else(|| Error::param("epochs must be positive"))?;
        let e = epochs.get();
        let mut lr_schedule: Vec<(usize, f64)> = Vec::new();
        for frac in [0.6, 0.8] {
            let at = (frac * e as f64).round() as usize;
            if at > 0 && at < e && lr_schedule.last().is_none_or(|(prev, _)| *prev < at) {
                lr_schedule.push((at, 0.1));
            }
        }
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs,
            lr_schedule,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        let mut prev = None;
        for &(epoch, mult) in &self.lr_schedule {
            if prev.is_some_and(|p| epoch <= p) || epoch > self.epochs.get() {
                return Err(Error::param("schedule epochs must be strictly increasing and at most E"));
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return Err(Error::param("schedule multipliers must be positive"));
            }
            prev = Some(epoch);
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(at, _)| *at <= epoch)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: &SgdConfig, num_params: usize) -> Self {
        Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Cross-entropy of every example at every recorded epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLedger {
    n: usize,
    columns: Vec<Vec<f64>>,
}

impl LossLedger {
    pub fn new(n: usize) -> Self {
        LossLedger { n, columns: Vec::new() }
    }

    /// Builds a ledger from per-example rows (all rows must have equal length).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let epochs = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != epochs) {
            return Err(Error::param("ledger rows must all cover the same epochs"));
        }
        let mut ledger = LossLedger::new(rows.len());
        for t in 0..epochs {
            ledger.push_epoch(rows.iter().map(|r| r[t]).collect())?;
        }
        Ok(ledger)
    }

    pub fn push_epoch(&mut self, losses: Vec<f64>) -> Result<()> {
        if losses.len() != self.n {
            return Err(Error::param(format!("epoch has {} losses, ledger tracks {}", losses.len(), self.n)));
        }
        if losses.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::param("recorded losses must be non-negative"));
        }
        self.columns.push(losses);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn epochs_recorded(&self) -> usize {
        self.columns.len()
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.n {
            return Err(Error::Lookup(format!("example {id} is not in the ledger")));
        }
        if self.columns.is_empty() {
            return Err(Error::Lookup("no epochs recorded".into()));
        }
        Ok(())
    }

    pub fn loss(&self, id: usize, epoch: usize) -> Result<f64> {
        Ok(self.epoch(epoch)?[id])
    }

    pub fn epoch(&self, epoch: usize) -> Result<&[f64]> {
        self.columns
            .get(epoch)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("epoch {epoch} not recorded")))
    }

    pub fn row(&self, id: usize) -> Result<Vec<f64>> {
        self.check_id(id)?;
        Ok(self.columns.iter().map(|col| col[id]).collect())
    }

    /// Arithmetic mean of the example's losses over all recorded epochs.
    pub fn mean_loss(&self, id: usize) -> Result<f64> {
        self.check_id(id)?;
        let sum: f64 = self.columns.iter().map(|col| col[id]).sum();
        Ok(sum / self.columns.len() as f64)
    }

    pub fn mean_losses(&self) -> Vec<f64> {
        (0..self.n).map(|id| self.mean_loss(id).unwrap_or(f64::NAN)).collect()
    }

    /// Prefix means of the example's row: the running mean after each epoch.
    pub fn cumulative_means(&self, id: usize) -> Result<Vec<f64>> {
        self.check_id(id)?;
        let mut sum = 0.0;
        Ok(self
            .columns
            .iter()
            .enumerate()
            .map(|(t, col)| {
                sum += col[id];
                sum / (t + 1) as f64
            })
            .collect())
    }

    /// CSV: one row per example id, one column per epoch.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.columns.len()).map(|t| format!("epoch_{t}")));
        writer.write_record(&header)?;
        for id in 0..self.n {
            let mut rec = vec![id.to_string()];
            rec.extend(self.columns.iter().map(|col| col[id].to_string()));
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Mean cross-entropy of `model` on the observed labels of `ids`, and its
/// gradient, written into `grad`.
fn batch_loss_grad(model: &Model, data: &NoisyDataset, ids: &[usize], grad: &mut [f64], act: &mut Activations) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let c = model.c;
    let mut dlogits = vec![0.0; c];
    let mut onehot = vec![0.0; c];
    let mut loss = 0.0;
    for &id in ids {
        let x = data.x(id);
        let y = data.y_obs()[id];
        model.forward_into(x, act);
        loss += ce_loss(&act.probs, y);
        onehot[y] = 1.0;
        soft_ce_dlogits(&act.probs, &onehot, &mut dlogits);
        onehot[y] = 0.0;
        model.accumulate_grad(x, act, &dlogits, grad);
    }
    let scale = 1.0 / ids.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    loss * scale
}

/// Cross-entropy of every example in `data` under `model`.
pub fn evaluate_losses(model: &Model, data: &NoisyDataset) -> Vec<f64> {
    let mut act = Activations::default();
    (0..data.len())
        .map(|id| {
            model.forward_into(data.x(id), &mut act);
            ce_loss(&act.probs, data.y_obs()[id])
        })
        .collect()
}

fn check_shapes(data: &NoisyDataset, model: &Model) -> Result<()> {
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if data.dim() != model.d || data.classes() != model.c {
        return Err(Error::param(format!(
            "model expects d = {}, c = {} but data has d = {}, c = {}",
            model.d,
            model.c,
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Mini-batch SGD on the observed labels of `ids`, reshuffled each epoch.
/// `on_epoch` runs after every epoch with the end-of-epoch model.
pub fn train_supervised<F>(
    data: &NoisyDataset,
    ids: &[usize],
    mut model: Model,
    cfg: &SgdConfig,
    mut on_epoch: F,
) -> Result<Model>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    cfg.validate()?;
    check_shapes(data, &model)?;
    if ids.is_empty() {
        return Err(Error::param("no training examples selected"));
    }
    let mut order = ids.to_vec();
    let mut rng = rng_stream(cfg.seed, 5);
    let mut opt = Sgd::new(cfg, model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut act = Activations::default();
    for epoch in 0..cfg.epochs.get() {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = batch_loss_grad(&model, data, batch, &mut grad, &mut act);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            opt.step(&mut model.params, &grad, lr);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        on_epoch(epoch, &model)?;
    }
    Ok(model)
}

/// Warm-up on the whole noisy set, recording every example's loss after each
/// epoch.
pub fn train_warmup(data: &NoisyDataset, model: Model, cfg: &SgdConfig) -> Result<(Model, LossLedger)> {
    train_warmup_with(data, model, cfg, |_, _| Ok(()))
}

/// [`train_warmup`] with an extra end-of-epoch hook (used for accuracy traces).
pub fn train_warmup_with<F>(
    data: &NoisyDataset,
    model: Model,
    cfg: &SgdConfig,
    mut on_epoch: F,
) -> Result<(Model, LossLedger)>
where
    F: FnMut(usize, &Model) -> Result<()>,
{
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut ledger = LossLedger::new(data.len());
    let model = train_supervised(data, &ids, model, cfg, |epoch, m| {
        let losses = evaluate_losses(m, data);
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        ledger.push_epoch(losses)?;
        on_epoch(epoch, m)
    })?;
    Ok((model, ledger))
}

/// A small labelled batch for gradient checking.
pub type LabeledBatch = [(Vec<f64>, usize)];

/// Mean cross-entropy over `batch` and its analytic gradient.
pub fn mean_ce_with_grad(model: &Model, batch: &LabeledBatch) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.num_params()];
    let mut act = Activations::default();
    let mut dlogits = vec![0.0; model.c];
    let mut loss = 0.0;
    for (x, y) in batch {
        model.forward_into(x, &mut act);
        loss += ce_loss(&act.probs, *y);
        let mut onehot = vec![0.0; model.c];
        onehot[*y] = 1.0;
        soft_ce_dlogits(&act.probs, &onehot, &mut dlogits);
        model.accumulate_grad(x, &act, &dlogits, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

fn mean_ce(model: &Model, batch: &LabeledBatch) -> f64 {
    batch.iter().map(|(x, y)| ce_loss(&model.predict_proba(x), *y)).sum::<f64>() / batch.len() as f64
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose gradient is
/// essentially zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

/// Compares `analytic` against central differences of the mean batch CE.
pub fn compare_gradients(model: &Model, batch: &LabeledBatch, analytic: &[f64]) -> GradCheck {
    let mut probe = model.clone();
    let mut worst = GradCheck { max_rel_error: 0.0, worst_coordinate: 0 };
    for i in 0..model.num_params() {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let up = mean_ce(&probe, batch);
        probe.params[i] = orig - FD_STEP;
        let down = mean_ce(&probe, batch);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if !(rel <= worst.max_rel_error) {
            worst = GradCheck { max_rel_error: rel, worst_coordinate: i };
        }
    }
    worst
}

/// True when the backprop gradient of the mean CE matches central finite
/// differences (step 1e-5) within `tolerance` relative error on every
/// coordinate. Intended for batches of at most 8 examples.
pub fn finite_diff_gradient_check(model: &Model, batch: &LabeledBatch, tolerance: f64) -> bool {
    if batch.is_empty() {
        return false;
    }
    let (_, analytic) = mean_ce_with_grad(model, batch);
    compare_gradients(model, batch, &analytic).max_rel_error <= tolerance
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_task, sample_dataset, TaskSpec};
    use crate::model::Architecture;
    use crate::util::rng_stream;
    use rand::Rng as _;

    fn random_batch(d: usize, c: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = rng_stream(seed, 99);
        (0..n)
            .map(|_| ((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..c)))
            .collect()
    }

    #[test]
    fn gradient_check_linear() {
        let model = Model::new(Architecture::LinearSoftmax, 5, 4, 3).unwrap();
        assert!(finite_diff_gradient_check(&model, &random_batch(5, 4, 8, 1), 1e-4));
    }

    #[test]
    fn gradient_check_mlp() {
        let model = Model::new(Architecture::Mlp { width: 8 }, 5, 4, 3).unwrap();
        assert!(finite_diff_gradient_check(&model, &random_batch(5, 4, 8, 2), 1e-3));
    }

    #[test]
    fn gradient_check_catches_corruption() {
        let model = Model::new(Architecture::Mlp { width: 8 }, 5, 4, 3).unwrap();
        let batch = random_batch(5, 4, 6, 7);
        let (_, mut grad) = mean_ce_with_grad(&model, &batch);
        let (i, _) = grad.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        grad[i] *= 2.0;
        let report = compare_gradients(&model, &batch, &grad);
        assert!(report.max_rel_error > 1e-3);
        assert_eq!(report.worst_coordinate, i);
    }

    #[test]
    fn ledger_means() {
        let ledger = LossLedger::from_rows(&[vec![2.5, 2.5, 2.5], vec![1.0, 2.0, 3.0], vec![4.0, 2.0, 0.0]]).unwrap();
        assert_eq!(ledger.mean_loss(0).unwrap(), 2.5);
        assert_eq!(ledger.mean_loss(1).unwrap(), 2.0);
        let prefix = LossLedger::from_rows(&[vec![4.0, 2.0]]).unwrap();
        assert_eq!(prefix.cumulative_means(0).unwrap(), vec![4.0, 3.0]);
        assert!(matches!(ledger.mean_loss(3), Err(Error::Lookup(_))));
        assert!(matches!(ledger.epoch(3), Err(Error::Lookup(_))));
    }

    #[test]
    fn ledger_rejects_negative_losses() {
        let mut ledger = LossLedger::new(2);
        assert!(ledger.push_epoch(vec![0.1, -0.2]).is_err());
        assert!(ledger.push_epoch(vec![0.1]).is_err());
    }

    #[test]
    fn ledger_csv() {
        let ledger = LossLedger::from_rows(&[vec![1.0, 0.5], vec![2.0, 0.25]]).unwrap();
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,epoch_0,epoch_1\n0,1,0.5\n1,2,0.25\n");
    }

    #[test]
    fn schedule_validation() {
        let cfg = SgdConfig::with_default_schedule(10, 0).unwrap();
        assert_eq!(cfg.lr_schedule, vec![(6, 0.1), (8, 0.1)]);
        assert!((cfg.lr_at(5) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(7) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 0.001).abs() < 1e-15);
        assert!(SgdConfig::with_default_schedule(1, 0).unwrap().lr_schedule.is_empty());
        assert!(SgdConfig::with_default_schedule(0, 0).is_err());
        let bad = SgdConfig { lr_schedule: vec![(5, 0.1), (5, 0.1)], ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = SgdConfig { lr_schedule: vec![(11, 0.1)], ..cfg };
        assert!(bad.validate().is_err());
    }

    fn separable(n: usize) -> NoisyDataset {
        let task = make_gaussian_task(4, 2, 8.0, 1.0, TaskSpec::uniform_prior(4), 21).unwrap();
        NoisyDataset::noiseless(sample_dataset(&task, n, 22).unwrap())
    }

    #[test]
    fn warmup_learns_separable_task() {
        let data = separable(2000);
        let mut cfg = SgdConfig::with_default_schedule(50, 1).unwrap();
        cfg.lr_schedule.clear();
        let model = Model::new(Architecture::LinearSoftmax, 2, 4, 1).unwrap();
        let (model, ledger) = train_warmup(&data, model, &cfg).unwrap();
        assert_eq!(ledger.epochs_recorded(), 50);
        let correct = (0..data.len()).filter(|&i| model.predict(data.x(i)) == data.y_true()[i]).count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn single_epoch_ledger_and_determinism() {
        let data = separable(300);
        let cfg = SgdConfig::with_default_schedule(1, 4).unwrap();
        let model = Model::new(Architecture::Mlp { width: 8 }, 2, 4, 1).unwrap();
        let (m1, l1) = train_warmup(&data, model.clone(), &cfg).unwrap();
        let (m2, l2) = train_warmup(&data, model, &cfg).unwrap();
        assert_eq!(l1.epochs_recorded(), 1);
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn end_of_epoch_loss_non_increasing_small_lr() {
        let data = separable(400);
        let cfg = SgdConfig {
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 400,
            epochs: NonZeroUsize::new(30).unwrap(),
            lr_schedule: vec![],
            seed: 3,
        };
        let model = Model::new(Architecture::LinearSoftmax, 2, 4, 2).unwrap();
        let (_, ledger) = train_warmup(&data, model, &cfg).unwrap();
        let means: Vec<f64> = (0..ledger.epochs_recorded())
            .map(|t| ledger.epoch(t).unwrap().iter().sum::<f64>() / data.len() as f64)
            .collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = separable(100);
        let cfg = SgdConfig {
            learning_rate: f64::MAX,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 10,
            epochs: NonZeroUsize::new(5).unwrap(),
            lr_schedule: vec![],
            seed: 3,
        };
        let model = Model::new(Architecture::LinearSoftmax, 2, 4, 2).unwrap();
        assert!(matches!(train_warmup(&data, model, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = separable(10);
        let cfg = SgdConfig::with_default_schedule(1, 0).unwrap();
        let model = Model::new(Architecture::LinearSoftmax, 3, 4, 2).unwrap();
        assert!(matches!(train_warmup(&data, model, &cfg), Err(Error::Parameter(_))));
    }
}
