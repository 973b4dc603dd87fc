//! Post-hoc diagnostics over loss ledgers: loss distributions, per-class
//! means, accuracy traces and the training-set-size sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_dataset, NoisyDataset, TaskSpec};
use crate::model::{Architecture, Model};
use crate::noise::{corrupt_labels, TransitionMatrix};
use crate::selection::{select_rsl, selection_precision, Gamma, SelectionConfig};
use crate::trainer::{train_warmup, LossLedger, SgdConfig};
use crate::{Error, Result};

/// Divides by the maximum; an all-zero input stays zero.
pub fn normalize_losses(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / max).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeResult {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
}

impl KdeResult {
    /// Trapezoid rule over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(s, p)| 0.5 * (s[1] - s[0]) * (p[0] + p[1]))
            .sum()
    }
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<KdeResult> {
    if samples.is_empty() {
        return Err(Error::param("kernel density estimate needs at least one sample"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::param(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * samples.len() as f64);
    let density = grid
        .iter()
        .map(|s| {
            norm * samples
                .iter()
                .map(|si| {
                    let z = (s - si) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeResult { grid: grid.to_vec(), density, bandwidth, n: samples.len() })
}

/// `1.06 σ̂ N^(-1/5)`, with σ̂ the sample standard deviation. `None` when the
/// samples have no spread.
pub fn silverman_bandwidth(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    (h > 0.0 && h.is_finite()).then_some(h)
}

/// `points` evenly spaced values from `5h` below the smallest sample to `5h`
/// above the largest.
pub fn kde_grid(samples: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * bandwidth;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * bandwidth;
    let points = points.max(2);
    (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect()
}

/// Mean losses of correctly and incorrectly labelled examples, in id order.
pub fn loss_split_by_correctness(ledger: &LossLedger, data: &NoisyDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    if ledger.len() != data.len() {
        return Err(Error::Lookup("ledger and dataset sizes differ".into()));
    }
    let (mut correct, mut incorrect) = (Vec::new(), Vec::new());
    for id in 0..data.len() {
        let l = ledger.mean_loss(id)?;
        if data.is_correct(id) {
            correct.push(l);
        } else {
            incorrect.push(l);
        }
    }
    Ok((correct, incorrect))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossMeans {
    /// `None` when the partition is empty.
    pub correct: Option<f64>,
    pub incorrect: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per observed class, the average mean loss of its correct and incorrect examples.
pub fn per_class_loss_means(ledger: &LossLedger, data: &NoisyDataset) -> Result<Vec<ClassLossMeans>> {
    if ledger.len() != data.len() {
        return Err(Error::Lookup("ledger and dataset sizes differ".into()));
    }
    let c = data.classes();
    let mut parts = vec![(Vec::new(), Vec::new()); c];
    for id in 0..data.len() {
        let l = ledger.mean_loss(id)?;
        let (good, bad) = &mut parts[data.y_obs()[id]];
        if data.is_correct(id) {
            good.push(l);
        } else {
            bad.push(l);
        }
    }
    Ok(parts.iter().map(|(g, b)| ClassLossMeans { correct: mean(g), incorrect: mean(b) }).collect())
}

/// Fraction of `data` whose true label the model predicts.
pub fn accuracy(model: &Model, data: &NoisyDataset) -> Result<f64> {
    accuracy_against(model, data, data.y_true())
}

/// Fraction of `data` whose observed (possibly noisy) label the model predicts.
pub fn noisy_accuracy(model: &Model, data: &NoisyDataset) -> Result<f64> {
    accuracy_against(model, data, data.y_obs())
}

fn accuracy_against(model: &Model, data: &NoisyDataset, labels: &[usize]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("evaluation set is empty"));
    }
    let hits = (0..data.len()).filter(|&i| model.predict(data.x(i)) == labels[i]).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Test and validation accuracy per epoch. Validation accuracy is measured on
/// observed labels, test accuracy on true labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTrace {
    pub test: Vec<f64>,
    pub validation: Vec<f64>,
}

impl AccuracyTrace {
    pub fn push(&mut self, model: &Model, test: &NoisyDataset, validation: &NoisyDataset) -> Result<()> {
        self.test.push(accuracy(model, test)?);
        self.validation.push(noisy_accuracy(model, validation)?);
        Ok(())
    }

    /// First epoch with maximal validation accuracy.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (t, v) in self.validation.iter().enumerate() {
            if best.is_none_or(|b| *v > self.validation[b]) {
                best = Some(t);
            }
        }
        best
    }

    /// Test accuracy at [`Self::best_epoch`].
    pub fn best(&self) -> Option<f64> {
        self.best_epoch().map(|t| self.test[t])
    }

    pub fn last(&self) -> Option<f64> {
        self.test.last().copied()
    }

    pub fn summary(&self) -> AccuracySummary {
        AccuracySummary {
            best: self.best().unwrap_or(f64::NAN),
            last: self.last().unwrap_or(f64::NAN),
            best_epoch: self.best_epoch().unwrap_or(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub best: f64,
    pub last: f64,
    pub best_epoch: usize,
}

/// Accuracy trace of a sequence of per-epoch models.
pub fn accuracy_trace<'a, I>(models: I, test: &NoisyDataset, validation: &NoisyDataset) -> Result<AccuracyTrace>
where
    I: IntoIterator<Item = &'a Model>,
{
    let mut trace = AccuracyTrace::default();
    for m in models {
        trace.push(m, test, validation)?;
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSweepConfig {
    /// Size of the full noisy training set.
    pub n: usize,
    pub architecture: Architecture,
    pub sgd: SgdConfig,
    pub data_seed: u64,
    pub noise_seed: u64,
    pub model_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub fraction: f64,
    pub n: usize,
    /// Mean of incorrect-label mean losses minus mean of correct-label ones.
    pub loss_gap: f64,
    pub precision: f64,
}

/// Trains on nested prefixes of one noisy training set and reports the loss gap
/// and the precision of selecting the `1 - η_i` smallest-loss share of every
/// class.
pub fn model_distance_sweep(
    task: &TaskSpec,
    t: &TransitionMatrix,
    fractions: &[f64],
    cfg: &DistanceSweepConfig,
) -> Result<Vec<DistanceRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::param(format!("fraction {f} outside (0, 1]")));
    }
    let clean = sample_dataset(task, cfg.n, cfg.data_seed)?;
    let full = corrupt_labels(&clean, t, cfg.noise_seed)?;
    let select_cfg = SelectionConfig::known_noise(t, task.prior.clone(), 0.0, Gamma::G1)?;
    fractions
        .par_iter()
        .map(|&fraction| {
            let n = ((fraction * cfg.n as f64).round() as usize).max(1);
            let ids: Vec<usize> = (0..n).collect();
            let data = full.subset(&ids);
            let model = Model::new(cfg.architecture, task.d, task.c, cfg.model_seed)?;
            let (_, ledger) = train_warmup(&data, model, &cfg.sgd)?;
            let (good, bad) = loss_split_by_correctness(&ledger, &data)?;
            let loss_gap = match (mean(&bad), mean(&good)) {
                (Some(b), Some(g)) => b - g,
                _ => f64::NAN,
            };
            let sel = select_rsl(&ledger, &data, &select_cfg)?;
            Ok(DistanceRow { fraction, n, loss_gap, precision: selection_precision(&sel, &data) })
        })
        .collect()
}
