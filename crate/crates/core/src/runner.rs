//! Experiment orchestration: one JSON config in, a directory of artifacts out.
//!
//! Four seeds drive a run. `data` fixes the task and the clean samples, `noise`
//! the label corruption, `train` model initialisation and SGD order, `ssl` the
//! MixMatch stage. Every file is written to a temporary name and renamed into
//! place, and metrics carry no timings, so repeated runs produce identical bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    kde, kde_grid, loss_split_by_correctness, model_distance_sweep, normalize_losses, per_class_loss_means,
    silverman_bandwidth, AccuracyTrace, DistanceSweepConfig,
};
use crate::data::{make_gaussian_task, sample_dataset, FiniteInstanceSpace, NoisyDataset, TaskSpec};
use crate::model::{Architecture, Model};
use crate::noise::{corrupt_labels, NoiseSpec, TransitionMatrix};
use crate::oracle::{
    theorem2_epsilon_bound, verify_lemma1, verify_lemma2, verify_theorem1, verify_theorem2_adversarial,
    TheoremReport, ENUMERATION_LIMIT,
};
use crate::selection::{
    compute_budgets, select_global_mean, select_rsl, select_single_epoch, selection_precision, Gamma,
    SelectionConfig, SelectionResult,
};
use crate::ssl::{train_rsl_wm_with, write_ssl_log, MixMatchParams, WeightedSelection};
use crate::trainer::{train_supervised, train_warmup_with, LossLedger, SgdConfig};
use crate::util::sub_seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    WarmupOnly,
    Rsl,
    RslWm,
    VerifyTheory,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub covariance_scale: f64,
    /// Class prior; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
}

impl TaskConfig {
    pub fn prior(&self) -> Vec<f64> {
        self.prior.clone().unwrap_or_else(|| TaskSpec::uniform_prior(self.classes))
    }
}

/// SGD settings without a seed; the run's seeds are attached at use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to ×0.1 at 60% and 80% of the epochs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
}

impl SgdSettings {
    pub fn with_seed(&self, seed: u64) -> Result<SgdConfig> {
        let mut cfg = SgdConfig::with_default_schedule(self.epochs, seed)?;
        cfg.learning_rate = self.learning_rate;
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        cfg.batch_size = self.batch_size;
        if let Some(s) = &self.lr_schedule {
            cfg.lr_schedule = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for SgdSettings {
    fn default() -> Self {
        SgdSettings { learning_rate: 0.1, momentum: 0.9, weight_decay: 1e-4, batch_size: 128, epochs: 40, lr_schedule: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSettings {
    pub beta: f64,
    pub gamma: Gamma,
    /// Per-class noise rates; derived from the transition matrix when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings { beta: 0.2, gamma: Gamma::Mid, eta: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub noise: u64,
    pub train: u64,
    pub ssl: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Beta,
    Gamma,
    Kappa,
    R,
    Fraction,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::param(format!("unknown sweep parameter {s:?}")))
    }
}

/// A sweep value: a number, or one of `g0`, `mid`, `g1` for gamma sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for SweepValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Text(s) => f.write_str(s),
        }
    }
}

impl std::str::FromStr for SweepValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(s.parse::<f64>().map(SweepValue::Number).unwrap_or_else(|_| SweepValue::Text(s.to_string())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<SweepValue>,
    /// Pipeline run for every value.
    #[serde(default = "default_sweep_pipeline")]
    pub pipeline: Pipeline,
}

fn default_sweep_pipeline() -> Pipeline {
    Pipeline::RslWm
}

fn default_fraction() -> f64 {
    1.0
}

fn default_kappa() -> f64 {
    -(0.7f64.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Use only this leading fraction of the noisy training set.
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    pub noise: NoiseSpec,
    pub model: Architecture,
    #[serde(default)]
    pub sgd: SgdSettings,
    /// Optimiser for the MixMatch stage; the warm-up settings when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_sgd: Option<SgdSettings>,
    #[serde(default)]
    pub selection: SelectionSettings,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub mixmatch: MixMatchParams,
    #[serde(default)]
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub pipeline: Pipeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Also write KDE curves and running-mean traces as CSV.
    #[serde(default)]
    pub emit_plot_data: bool,
}

impl ExperimentConfig {
    /// Parses without validating; [`run`] validates before doing any work.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.task.classes;
        self.noise.validate()?;
        self.noise.build(c)?;
        crate::util::check_prior(&self.task.prior(), c)?;
        if self.pipeline == Pipeline::VerifyTheory {
            return Ok(());
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_val == 0 {
            return Err(Error::param("n_train, n_val and n_test must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::param("train_fraction must lie in (0, 1]"));
        }
        if !(self.task.separation > 0.0) {
            return Err(Error::param("separation must be positive"));
        }
        self.sgd.with_seed(0)?;
        if let Some(s) = &self.ssl_sgd {
            s.with_seed(0)?;
        }
        self.mixmatch.validate()?;
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::param("kappa must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.selection.beta) {
            return Err(Error::param("beta must lie in [0, 1]"));
        }
        if let Gamma::Value(g) = self.selection.gamma {
            if !(g >= 1.0) {
                return Err(Error::param("gamma must be at least 1"));
            }
        }
        if let Some(eta) = &self.selection.eta {
            if eta.len() != c || eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
                return Err(Error::param("eta needs one rate in [0, 1] per class"));
            }
        }
        match (self.pipeline, &self.sweep) {
            (Pipeline::Sweep, None) => Err(Error::param("sweep pipeline needs a sweep section")),
            (Pipeline::Sweep, Some(s)) if s.pipeline == Pipeline::Sweep => {
                Err(Error::param("a sweep cannot run nested sweeps"))
            }
            _ => Ok(()),
        }
    }
}

/// Writes through a temporary file that is renamed into place.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut out = BufWriter::new(File::create(&tmp)?);
    f(&mut out)?;
    out.flush()?;
    drop(out);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n")?;
        Ok(())
    })
}

/// Everything drawn from the seeds before training starts.
pub struct Prepared {
    pub task: TaskSpec,
    pub transition: TransitionMatrix,
    pub train: NoisyDataset,
    pub val: NoisyDataset,
    pub test: NoisyDataset,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let t = &cfg.task;
    let task = make_gaussian_task(t.classes, t.dim, t.separation, t.covariance_scale, t.prior(), cfg.seeds.data)?;
    let transition = cfg.noise.build(t.classes)?;
    let draw = |n, k| sample_dataset(&task, n, sub_seed(cfg.seeds.data, k));
    let train = corrupt_labels(&draw(cfg.n_train, 1)?, &transition, cfg.seeds.noise)?;
    let keep = ((cfg.train_fraction * cfg.n_train as f64).round() as usize).clamp(1, cfg.n_train);
    let train = if keep < cfg.n_train { train.subset(&(0..keep).collect::<Vec<_>>()) } else { train };
    let val = corrupt_labels(&draw(cfg.n_val, 2)?, &transition, sub_seed(cfg.seeds.noise, 1))?;
    let test = NoisyDataset::noiseless(draw(cfg.n_test, 3)?);
    Ok(Prepared { task, transition, train, val, test })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Precision of class-wise mean-loss, global mean-loss and single-epoch
/// selection when every method keeps the `1 - η` share.
fn fixed_ratio_comparison(ledger: &LossLedger, data: &NoisyDataset, cfg: &SelectionConfig) -> Result<Value> {
    let rsl = select_rsl(ledger, data, cfg)?;
    let global = select_global_mean(ledger, data, rsl.total())?;
    let per_epoch: Vec<f64> = (0..ledger.epochs_recorded())
        .map(|e| select_single_epoch(ledger, data, cfg, e).map(|s| selection_precision(&s, data)))
        .collect::<Result<_>>()?;
    Ok(json!({
        "eta": cfg.eta,
        "selected": rsl.total(),
        "rsl": selection_precision(&rsl, data),
        "only_mean_loss": selection_precision(&global, data),
        "single_epoch_median": median(&per_epoch),
        "single_epoch": per_epoch,
    }))
}

fn run_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn selection_config(cfg: &ExperimentConfig, prep: &Prepared) -> Result<SelectionConfig> {
    let s = &cfg.selection;
    let prior = cfg.task.prior();
    let sel = match &s.eta {
        Some(eta) => SelectionConfig { beta: s.beta, gamma: s.gamma, prior, eta: eta.clone() },
        None => SelectionConfig::known_noise(&prep.transition, prior, s.beta, s.gamma)?,
    };
    sel.validate()?;
    Ok(sel)
}

fn trace_json(trace: &AccuracyTrace) -> Value {
    let s = trace.summary();
    json!({ "best": s.best, "last": s.last, "best_epoch": s.best_epoch })
}

/// Loss statistics of a warm-up ledger.
fn loss_summary(ledger: &LossLedger, data: &NoisyDataset) -> Result<Value> {
    let (good, bad) = loss_split_by_correctness(ledger, data)?;
    let per_class = per_class_loss_means(ledger, data)?;
    Ok(json!({
        "correct_mean": mean(&good),
        "incorrect_mean": mean(&bad),
        "correct_count": good.len(),
        "incorrect_count": bad.len(),
        "per_class": per_class,
    }))
}

/// KDE curves of normalised mean losses and running means of a few examples.
fn write_plot_data(dir: &Path, ledger: &LossLedger, data: &NoisyDataset) -> Result<()> {
    let means = ledger.mean_losses();
    let normalized = normalize_losses(&means);
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for (id, v) in normalized.iter().enumerate() {
        if data.is_correct(id) {
            good.push(*v);
        } else {
            bad.push(*v);
        }
    }
    for (name, samples) in [("kde_correct.csv", &good), ("kde_incorrect.csv", &bad)] {
        let Some(h) = silverman_bandwidth(samples) else { continue };
        let curve = kde(samples, h, &kde_grid(samples, h, 512))?;
        write_atomic(&dir.join(name), |out| {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["grid", "density"])?;
            for (s, p) in curve.grid.iter().zip(&curve.density) {
                w.write_record([s.to_string(), p.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    // First few correct and incorrect examples.
    let mut picks: Vec<usize> = (0..data.len()).filter(|&i| data.is_correct(i)).take(5).collect();
    picks.extend((0..data.len()).filter(|&i| !data.is_correct(i)).take(5));
    write_atomic(&dir.join("running_means.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "correct", "epoch", "loss", "running_mean"])?;
        for &id in &picks {
            let row = ledger.row(id)?;
            let running = ledger.cumulative_means(id)?;
            for (t, (l, m)) in row.iter().zip(&running).enumerate() {
                w.write_record([
                    id.to_string(),
                    data.is_correct(id).to_string(),
                    t.to_string(),
                    l.to_string(),
                    m.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

struct Warmup {
    model: Model,
    ledger: LossLedger,
    trace: AccuracyTrace,
}

fn warmup(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Warmup> {
    let sgd = cfg.sgd.with_seed(cfg.seeds.train)?;
    let model = Model::new(cfg.model, cfg.task.dim, cfg.task.classes, cfg.seeds.train)?;
    let mut trace = AccuracyTrace::default();
    let (model, ledger) =
        train_warmup_with(&prep.train, model, &sgd, |_, m| trace.push(m, &prep.test, &prep.val))?;
    Ok(Warmup { model, ledger, trace })
}

fn retrain_on(cfg: &ExperimentConfig, prep: &Prepared, ids: &[usize]) -> Result<(Model, AccuracyTrace)> {
    let sgd = cfg.sgd.with_seed(cfg.seeds.train)?;
    let model = Model::new(cfg.model, cfg.task.dim, cfg.task.classes, cfg.seeds.train)?;
    let mut trace = AccuracyTrace::default();
    let model = train_supervised(&prep.train, ids, model, &sgd, |_, m| trace.push(m, &prep.test, &prep.val))?;
    Ok((model, trace))
}

fn write_common(dir: &Path, cfg: &ExperimentConfig, prep: &Prepared) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("task.json"), &prep.task)?;
    write_atomic(&dir.join("transition.csv"), |out| prep.transition.write_csv(out))?;
    write_atomic(&dir.join("train.csv"), |out| prep.train.write_csv(out))
}

/// Runs the configured pipeline, writes its artifacts and returns the metrics
/// that were persisted as `metrics.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<Value> {
    run_with_jobs(cfg, None)
}

/// [`run`] with a cap on concurrent sweep entries (all cores when `None`).
pub fn run_with_jobs(cfg: &ExperimentConfig, jobs: Option<NonZeroUsize>) -> Result<Value> {
    cfg.validate()?;
    let metrics = match cfg.pipeline {
        Pipeline::VerifyTheory => return verify_theory(cfg),
        Pipeline::Sweep => {
            let spec = cfg.sweep.as_ref().ok_or_else(|| Error::param("missing sweep section"))?;
            let dir = run_dir(cfg)?;
            write_json(&dir.join("config.json"), cfg)?;
            let rows = sweep(cfg, spec.parameter, &spec.values, jobs)?;
            json!({ "pipeline": "sweep", "parameter": spec.parameter, "rows": rows })
        }
        Pipeline::WarmupOnly | Pipeline::Rsl | Pipeline::RslWm => training_pipeline(cfg)?,
    };
    write_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn training_pipeline(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = run_dir(cfg)?;
    let prep = prepare(cfg)?;
    write_common(dir, cfg, &prep)?;
    let warm = warmup(cfg, &prep)?;
    write_atomic(&dir.join("ledger.csv"), |out| warm.ledger.write_csv(out))?;
    if cfg.emit_plot_data {
        write_plot_data(dir, &warm.ledger, &prep.train)?;
    }
    let mut metrics = json!({
        "pipeline": cfg.pipeline,
        "n_train": prep.train.len(),
        "observed_noise_rate": prep.train.noise_rate(),
        "losses": loss_summary(&warm.ledger, &prep.train)?,
        "accuracy": { "ce_all": trace_json(&warm.trace) },
    });
    let mut traces = json!({ "ce_all": warm.trace });
    if cfg.pipeline == Pipeline::WarmupOnly {
        write_atomic(&dir.join("model.json"), |out| warm.model.write_json(out))?;
        write_json(&dir.join("traces.json"), &traces)?;
        return Ok(metrics);
    }

    let sel_cfg = selection_config(cfg, &prep)?;
    let budgets = compute_budgets(&prep.train.observed_counts(), &sel_cfg)?;
    let selection = select_rsl(&warm.ledger, &prep.train, &sel_cfg)?;
    write_json(&dir.join("selection.json"), &selection)?;

    let per_class = SelectionConfig { beta: 0.0, gamma: Gamma::G1, ..sel_cfg.clone() };
    let overall_eta = (1.0 - overall_clean_rate(&prep)).clamp(0.0, 1.0);
    let overall = SelectionConfig { eta: vec![overall_eta; cfg.task.classes], ..per_class.clone() };
    metrics["eta"] = json!(sel_cfg.eta);
    metrics["budgets"] = serde_json::to_value(&budgets)?;
    metrics["precision"] = json!({
        "rsl": selection_precision(&selection, &prep.train),
        "selected": selection.total(),
        "fixed_ratio": {
            "per_class_eta": fixed_ratio_comparison(&warm.ledger, &prep.train, &per_class)?,
            "overall_eta": fixed_ratio_comparison(&warm.ledger, &prep.train, &overall)?,
        },
    });

    let ids = selection.selected_ids();
    let (rsl_model, rsl_trace) = retrain_on(cfg, &prep, &ids)?;
    metrics["accuracy"]["rsl"] = trace_json(&rsl_trace);
    traces["rsl"] = serde_json::to_value(&rsl_trace)?;
    let final_model = if cfg.pipeline == Pipeline::RslWm {
        let (model, trace) = refine(cfg, &prep, &warm.ledger, &selection, dir)?;
        metrics["accuracy"]["rsl_wm"] = trace_json(&trace);
        traces["rsl_wm"] = serde_json::to_value(&trace)?;
        model
    } else {
        rsl_model
    };
    write_atomic(&dir.join("model.json"), |out| final_model.write_json(out))?;
    write_json(&dir.join("traces.json"), &traces)?;
    Ok(metrics)
}

/// `Σ_i p_i T_ii`: the expected fraction of labels left intact.
fn overall_clean_rate(prep: &Prepared) -> f64 {
    let t = &prep.transition;
    (0..t.classes()).map(|i| prep.task.prior[i] * t.get(i, i)).sum()
}

fn refine(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    ledger: &LossLedger,
    selection: &SelectionResult,
    dir: &Path,
) -> Result<(Model, AccuracyTrace)> {
    let weighted = WeightedSelection::from_selection(selection, ledger, cfg.kappa)?;
    let chosen = selection.selected_ids();
    let mut is_selected = vec![false; prep.train.len()];
    chosen.iter().for_each(|&id| is_selected[id] = true);
    let unlabeled: Vec<usize> = (0..prep.train.len()).filter(|&id| !is_selected[id]).collect();
    let settings = cfg.ssl_sgd.as_ref().unwrap_or(&cfg.sgd);
    let sgd = settings.with_seed(cfg.seeds.ssl)?;
    let model = Model::new(cfg.model, cfg.task.dim, cfg.task.classes, cfg.seeds.train)?;
    let mut trace = AccuracyTrace::default();
    let (model, log) = train_rsl_wm_with(&prep.train, &weighted, &unlabeled, model, &cfg.mixmatch, &sgd, |_, m| {
        trace.push(m, &prep.test, &prep.val)
    })?;
    write_atomic(&dir.join("ssl_log.csv"), |out| write_ssl_log(&log, out))?;
    Ok((model, trace))
}

/// Every check run by the `verify-theory` pipeline.
#[derive(Clone, Debug, Serialize)]
pub struct TheoryReport {
    pub lemma1: TheoremReport,
    pub lemma2: TheoremReport,
    pub theorem1: TheoremReport,
    pub theorem2: Vec<TheoremReport>,
}

impl TheoryReport {
    pub fn checks(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("lemma1", self.lemma1.verified),
            ("lemma2", self.lemma2.verified),
            ("theorem1", self.theorem1.verified),
            ("theorem2", self.theorem2.iter().all(|r| r.verified)),
        ]
    }

    pub fn all_verified(&self) -> bool {
        self.checks().iter().all(|(_, ok)| *ok)
    }
}

/// Largest point count whose classifier enumeration stays within the limit,
/// capped at `2c`.
fn lemma1_points(c: usize) -> usize {
    let mut points = 0;
    let mut total: u128 = 1;
    while points < 2 * c && total * c as u128 <= ENUMERATION_LIMIT {
        total *= c as u128;
        points += 1;
    }
    points.max(1)
}

pub fn check_theory(t: &TransitionMatrix, seed: u64) -> Result<TheoryReport> {
    let c = t.classes();
    let space = FiniteInstanceSpace::random(c, lemma1_points(c), seed)?;
    let mut theorem2 = Vec::new();
    for observed in 0..c {
        for wrong in (0..c).filter(|&w| w != observed) {
            let bound = theorem2_epsilon_bound(t, observed, wrong);
            if bound > 0.0 {
                theorem2.push(verify_theorem2_adversarial(t, observed, wrong, 0.5 * bound)?);
            }
        }
    }
    Ok(TheoryReport { lemma1: verify_lemma1(&space, t)?, lemma2: verify_lemma2(t), theorem1: verify_theorem1(t), theorem2 })
}

fn verify_theory(cfg: &ExperimentConfig) -> Result<Value> {
    let dir = run_dir(cfg)?;
    let t = cfg.noise.build(cfg.task.classes)?;
    let report = check_theory(&t, cfg.seeds.data)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("theory.json"), &report)?;
    let checks: serde_json::Map<String, Value> =
        report.checks().into_iter().map(|(k, v)| (k.to_string(), Value::Bool(v))).collect();
    let metrics = json!({
        "pipeline": "verify-theory",
        "row_diag_dominant": t.is_row_diag_dominant(),
        "diag_dominant": t.is_diag_dominant(),
        "checks": checks,
        "all_verified": report.all_verified(),
    });
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub precision: f64,
    pub best: f64,
    pub last: f64,
}

fn apply_sweep_value(cfg: &mut ExperimentConfig, parameter: SweepParameter, value: &SweepValue) -> Result<()> {
    let number = || match value {
        SweepValue::Number(v) => Ok(*v),
        SweepValue::Text(s) => Err(Error::param(format!("{parameter:?} sweep needs numbers, got {s:?}"))),
    };
    match parameter {
        SweepParameter::Beta => cfg.selection.beta = number()?,
        SweepParameter::Gamma => {
            cfg.selection.gamma = match value {
                SweepValue::Number(v) => Gamma::Value(*v),
                SweepValue::Text(s) => s.parse()?,
            }
        }
        SweepParameter::Kappa => cfg.kappa = number()?,
        SweepParameter::R => cfg.noise.r = number()?,
        SweepParameter::Fraction => cfg.train_fraction = number()?,
    }
    Ok(())
}

/// Runs the sweep's pipeline once per value, each in its own subdirectory,
/// with at most `jobs` runs at a time. Writes `sweep_<parameter>.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[SweepValue],
    jobs: Option<NonZeroUsize>,
) -> Result<Vec<SweepRow>> {
    let pipeline = cfg.sweep.as_ref().map_or(Pipeline::RslWm, |s| s.pipeline);
    if pipeline == Pipeline::Sweep || pipeline == Pipeline::VerifyTheory {
        return Err(Error::param("sweeps run warmup-only, rsl or rsl-wm pipelines"));
    }
    let name = serde_json::to_value(parameter)?.as_str().unwrap_or("param").to_string();
    let mut entries = Vec::with_capacity(values.len());
    for (k, value) in values.iter().enumerate() {
        let mut entry = cfg.clone();
        entry.pipeline = pipeline;
        entry.sweep = None;
        entry.output_dir = cfg.output_dir.join(format!("{name}_{k}"));
        apply_sweep_value(&mut entry, parameter, value)?;
        entry.validate()?;
        entries.push(entry);
    }
    let threads = jobs.map_or(0, NonZeroUsize::get);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let results: Vec<Result<Value>> = pool.install(|| entries.par_iter().map(run).collect());
    let mut rows = Vec::with_capacity(values.len());
    for (value, metrics) in values.iter().zip(results) {
        let metrics = metrics?;
        let stage = match pipeline {
            Pipeline::RslWm => "rsl_wm",
            Pipeline::Rsl => "rsl",
            _ => "ce_all",
        };
        let acc = &metrics["accuracy"][stage];
        rows.push(SweepRow {
            value: value.to_string(),
            precision: metrics["precision"]["rsl"].as_f64().unwrap_or(f64::NAN),
            best: acc["best"].as_f64().unwrap_or(f64::NAN),
            last: acc["last"].as_f64().unwrap_or(f64::NAN),
        });
    }
    fs::create_dir_all(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join(format!("sweep_{name}.csv")), |out| {
        let mut w = csv::Writer::from_writer(out);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(rows)
}

/// Draws the task and the three splits and writes them out.
pub fn generate(cfg: &ExperimentConfig) -> Result<Value> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let prep = prepare(cfg)?;
    write_common(dir, cfg, &prep)?;
    write_atomic(&dir.join("val.csv"), |out| prep.val.write_csv(out))?;
    write_atomic(&dir.join("test.csv"), |out| prep.test.write_csv(out))?;
    let metrics = json!({
        "pipeline": "gen",
        "n_train": prep.train.len(),
        "n_val": prep.val.len(),
        "n_test": prep.test.len(),
        "observed_counts": prep.train.observed_counts(),
        "observed_noise_rate": prep.train.noise_rate(),
        "diag_dominant": prep.transition.is_diag_dominant(),
    });
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Loss-distribution diagnostics of a warm-up plus the training-set-size sweep
/// over fractions 1/4, 1/2, 3/4 and 1.
pub fn analyze(cfg: &ExperimentConfig) -> Result<Value> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let prep = prepare(cfg)?;
    write_common(dir, cfg, &prep)?;
    let warm = warmup(cfg, &prep)?;
    write_atomic(&dir.join("ledger.csv"), |out| warm.ledger.write_csv(out))?;
    if cfg.emit_plot_data {
        write_plot_data(dir, &warm.ledger, &prep.train)?;
    }
    let sweep_cfg = DistanceSweepConfig {
        n: prep.train.len(),
        architecture: cfg.model,
        sgd: cfg.sgd.with_seed(cfg.seeds.train)?,
        data_seed: sub_seed(cfg.seeds.data, 1),
        noise_seed: cfg.seeds.noise,
        model_seed: cfg.seeds.train,
    };
    let rows = model_distance_sweep(&prep.task, &prep.transition, &[0.25, 0.5, 0.75, 1.0], &sweep_cfg)?;
    write_atomic(&dir.join("distance.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    let metrics = json!({
        "pipeline": "analyze",
        "losses": loss_summary(&warm.ledger, &prep.train)?,
        "accuracy": { "ce_all": trace_json(&warm.trace) },
        "model_distance": rows,
    });
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path, pipeline: Pipeline) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskConfig { classes: 3, dim: 4, separation: 4.0, covariance_scale: 1.0, prior: None },
            n_train: 300,
            n_val: 60,
            n_test: 120,
            train_fraction: 1.0,
            noise: NoiseSpec::pairwise(0.3),
            model: Architecture::Mlp { width: 16 },
            sgd: SgdSettings { epochs: 6, batch_size: 32, ..Default::default() },
            ssl_sgd: None,
            selection: SelectionSettings::default(),
            kappa: default_kappa(),
            mixmatch: MixMatchParams::default(),
            seeds: Seeds { data: 1, noise: 2, train: 3, ssl: 4 },
            output_dir: dir.to_path_buf(),
            pipeline,
            sweep: None,
            emit_plot_data: false,
        }
    }

    #[test]
    fn verify_theory_pairwise() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = run(&small_config(dir.path(), Pipeline::VerifyTheory)).unwrap();
        assert_eq!(metrics["all_verified"], Value::Bool(true));
        assert!(dir.path().join("theory.json").exists());
        assert_eq!(lemma1_points(10), 6);
        assert_eq!(lemma1_points(3), 6);
    }

    #[test]
    fn rsl_run_is_deterministic_and_reports_budgets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(&dir.path().join("a"), Pipeline::Rsl);
        let metrics = run(&cfg).unwrap();
        let first = fs::read(cfg.output_dir.join("metrics.json")).unwrap();
        run(&cfg).unwrap();
        assert_eq!(first, fs::read(cfg.output_dir.join("metrics.json")).unwrap());

        let prep = prepare(&cfg).unwrap();
        let sel = selection_config(&cfg, &prep).unwrap();
        let budgets = compute_budgets(&prep.train.observed_counts(), &sel).unwrap();
        assert_eq!(metrics["budgets"]["num"], json!(budgets.num));
        for name in ["config.json", "task.json", "train.csv", "ledger.csv", "selection.json", "model.json"] {
            assert!(cfg.output_dir.join(name).exists(), "{name}");
        }
    }

    #[test]
    fn persisted_config_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), Pipeline::WarmupOnly);
        run(&cfg).unwrap();
        let first = fs::read(dir.path().join("metrics.json")).unwrap();
        let echoed = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(echoed, cfg);
        run(&echoed).unwrap();
        assert_eq!(first, fs::read(dir.path().join("metrics.json")).unwrap());
    }

    #[test]
    fn sweeps_have_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), Pipeline::Sweep);
        cfg.noise = NoiseSpec::structured(0.4, vec![(2, 0)]);
        cfg.sweep = Some(SweepSpec {
            parameter: SweepParameter::Gamma,
            values: ["g0", "mid", "g1"].iter().map(|s| SweepValue::Text(s.to_string())).collect(),
            pipeline: Pipeline::Rsl,
        });
        let metrics = run(&cfg).unwrap();
        assert_eq!(metrics["rows"].as_array().unwrap().len(), 3);
        let csv = fs::read_to_string(dir.path().join("sweep_gamma.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("value,precision,best,last\n"));
    }

    #[test]
    fn invalid_configs_map_to_exit_code_two() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), Pipeline::Rsl);
        cfg.selection.beta = 2.0;
        assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
        let mut cfg = small_config(dir.path(), Pipeline::Sweep);
        cfg.sweep = None;
        assert_eq!(run(&cfg).unwrap_err().exit_code(), 2);
        assert!(ExperimentConfig::from_json("{\"pipeline\": \"rsl\"}").is_err());
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = small_config(&blocker.join("sub"), Pipeline::WarmupOnly);
        assert_eq!(run(&cfg).unwrap_err().exit_code(), 4);
    }
}
