//! Class-wise selection of small-mean-loss examples under per-class budgets.
//!
//! Each observed class `i` has a budget `num(i) = floor(min(γ p_i m, prop(i) n_i))`
//! where `m = min_i prop(i) n_i / p_i`. With `γ = 1` the selected class shares
//! follow the prior; at `γ = γ₁` every class keeps `prop(i) n_i` examples.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::data::NoisyDataset;
use crate::noise::{observed_class_noise_rates, TransitionMatrix};
use crate::trainer::LossLedger;
use crate::util::check_prior;
use crate::{Error, Result};

/// Slack added before flooring a budget, so that values which are integers in
/// exact arithmetic (e.g. `72` computed as `71.99999999999999`) are not lost.
const FLOOR_SLACK: f64 = 1e-9;

/// Budget multiplier: the two ends of the useful range, their midpoint, or an
/// explicit value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gamma {
    G0,
    Mid,
    G1,
    Value(f64),
}

impl FromStr for Gamma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g0" => Ok(Gamma::G0),
            "mid" => Ok(Gamma::Mid),
            "g1" => Ok(Gamma::G1),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::param(format!("gamma must be g0, mid, g1 or a number, got {other:?}")))?;
                if !(v >= 1.0 && v.is_finite()) {
                    return Err(Error::param(format!("gamma must be at least 1, got {v}")));
                }
                Ok(Gamma::Value(v))
            }
        }
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::G0 => f.write_str("g0"),
            Gamma::Mid => f.write_str("mid"),
            Gamma::G1 => f.write_str("g1"),
            Gamma::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Value(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => v.to_string().parse().map_err(de::Error::custom),
            Raw::Text(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub beta: f64,
    pub gamma: Gamma,
    pub prior: Vec<f64>,
    /// Noise rate of each observed class.
    pub eta: Vec<f64>,
}

impl SelectionConfig {
    /// Noise rates derived from a known transition matrix and prior.
    pub fn known_noise(t: &TransitionMatrix, prior: Vec<f64>, beta: f64, gamma: Gamma) -> Result<Self> {
        let eta = observed_class_noise_rates(t, &prior)?;
        let cfg = SelectionConfig { beta, gamma, prior, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classes(&self) -> usize {
        self.prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        check_prior(&self.prior, self.prior.len())?;
        if self.eta.len() != self.prior.len() {
            return Err(Error::param("eta and prior must have one entry per class"));
        }
        if self.eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::param("noise rates must lie in [0, 1]"));
        }
        if let Gamma::Value(v) = self.gamma {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::param(format!("gamma must be at least 1, got {v}")));
            }
        }
        Ok(())
    }

    pub fn props(&self) -> Vec<f64> {
        self.eta.iter().map(|&e| prop(e, self.beta)).collect()
    }
}

/// `max{1 - (1+β)η, (1-β)(1-η)}`, clamped to [0, 1].
pub fn prop(eta: f64, beta: f64) -> f64 {
    (1.0 - (1.0 + beta) * eta).max((1.0 - beta) * (1.0 - eta)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Budgets {
    pub m: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    /// The γ actually used.
    pub gamma: f64,
    pub props: Vec<f64>,
    pub num: Vec<usize>,
}

fn floor_budget(x: f64) -> usize {
    (x + FLOOR_SLACK * x.max(1.0)).floor() as usize
}

/// Budgets for explicit per-class proportions.
pub fn compute_budgets_from_props(counts: &[usize], props: &[f64], prior: &[f64], gamma: Gamma) -> Result<Budgets> {
    let c = counts.len();
    if props.len() != c || prior.len() != c {
        return Err(Error::param("counts, proportions and prior must have one entry per class"));
    }
    for i in 0..c {
        if prior[i] <= 0.0 {
            return Err(Error::param(format!("class {i} has zero prior mass")));
        }
        if counts[i] == 0 {
            return Err(Error::param(format!("observed class {i} has no examples")));
        }
        if !(0.0..=1.0).contains(&props[i]) {
            return Err(Error::param(format!("proportion {} of class {i} is outside [0, 1]", props[i])));
        }
    }
    let capacity: Vec<f64> = (0..c).map(|i| props[i] * counts[i] as f64).collect();
    let m = (0..c).map(|i| capacity[i] / prior[i]).fold(f64::INFINITY, f64::min);
    // m = 0 means some class may contribute nothing; every budget is then 0
    // and the γ range collapses to a point.
    let gamma1 = if m > 0.0 {
        (0..c).map(|i| capacity[i] / (prior[i] * m)).fold(1.0, f64::max)
    } else {
        1.0
    };
    let gamma = match gamma {
        Gamma::G0 => 1.0,
        Gamma::Mid => 0.5 * (1.0 + gamma1),
        Gamma::G1 => gamma1,
        Gamma::Value(v) => v,
    };
    let num = (0..c).map(|i| floor_budget((gamma * prior[i] * m).min(capacity[i]))).collect();
    Ok(Budgets { m, gamma0: 1.0, gamma1, gamma, props: props.to_vec(), num })
}

/// Budgets from observed class counts and a selection config.
pub fn compute_budgets(counts: &[usize], cfg: &SelectionConfig) -> Result<Budgets> {
    cfg.validate()?;
    compute_budgets_from_props(counts, &cfg.props(), &cfg.prior, cfg.gamma)
}

/// Selected example ids per observed class, in ascending score order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    #[serde(rename = "selected", serialize_with = "ser_class_map", deserialize_with = "de_class_map")]
    pub per_class_ids: Vec<Vec<usize>>,
    pub num: Vec<usize>,
    /// Largest selected score per class; `None` when nothing was selected.
    pub thresholds: Vec<Option<f64>>,
}

fn ser_class_map<S: Serializer>(ids: &[Vec<usize>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut map = s.serialize_map(Some(ids.len()))?;
    for (class, list) in ids.iter().enumerate() {
        map.serialize_entry(&class.to_string(), list)?;
    }
    map.end()
}

fn de_class_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<usize>>, D::Error> {
    let map = std::collections::BTreeMap::<usize, Vec<usize>>::deserialize(d)?;
    let c = map.len();
    if map.keys().copied().ne(0..c) {
        return Err(de::Error::custom("class keys must be 0..c"));
    }
    Ok(map.into_values().collect())
}

impl SelectionResult {
    pub fn total(&self) -> usize {
        self.per_class_ids.iter().map(Vec::len).sum()
    }

    /// All selected ids in ascending order.
    pub fn selected_ids(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_class_ids.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |a, b| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b))
}

/// Takes the `num[i]` lowest-scoring examples of each observed class.
pub fn select_by_scores(scores: &[f64], data: &NoisyDataset, num: &[usize]) -> Result<SelectionResult> {
    let c = data.classes();
    if scores.len() != data.len() {
        return Err(Error::param(format!("{} scores for {} examples", scores.len(), data.len())));
    }
    if num.len() != c {
        return Err(Error::param("one budget per class required"));
    }
    let mut groups = vec![Vec::new(); c];
    for (id, &y) in data.y_obs().iter().enumerate() {
        groups[y].push(id);
    }
    let mut thresholds = Vec::with_capacity(c);
    for (i, group) in groups.iter_mut().enumerate() {
        if num[i] > group.len() {
            return Err(Error::Internal(format!(
                "budget {} exceeds the {} examples of class {i}",
                num[i],
                group.len()
            )));
        }
        group.sort_unstable_by(by_score(scores));
        group.truncate(num[i]);
        thresholds.push(group.last().map(|&id| scores[id]));
    }
    Ok(SelectionResult { per_class_ids: groups, num: num.to_vec(), thresholds })
}

fn check_coverage(ledger: &LossLedger, data: &NoisyDataset) -> Result<()> {
    if ledger.len() != data.len() {
        return Err(Error::Lookup(format!("ledger covers {} examples, dataset has {}", ledger.len(), data.len())));
    }
    if ledger.epochs_recorded() == 0 {
        return Err(Error::Lookup("ledger has no recorded epochs".into()));
    }
    Ok(())
}

/// Class-wise selection by mean loss under the configured budgets.
pub fn select_rsl(ledger: &LossLedger, data: &NoisyDataset, cfg: &SelectionConfig) -> Result<SelectionResult> {
    check_coverage(ledger, data)?;
    let budgets = compute_budgets(&data.observed_counts(), cfg)?;
    select_by_scores(&ledger.mean_losses(), data, &budgets.num)
}

/// Same budgets as [`select_rsl`] but ranked by one epoch's losses.
pub fn select_single_epoch(
    ledger: &LossLedger,
    data: &NoisyDataset,
    cfg: &SelectionConfig,
    epoch: usize,
) -> Result<SelectionResult> {
    check_coverage(ledger, data)?;
    let scores = ledger.epoch(epoch)?;
    let budgets = compute_budgets(&data.observed_counts(), cfg)?;
    select_by_scores(scores, data, &budgets.num)
}

/// One global mean-loss ranking, ignoring classes; takes the `total` smallest.
pub fn select_global_mean(ledger: &LossLedger, data: &NoisyDataset, total: usize) -> Result<SelectionResult> {
    check_coverage(ledger, data)?;
    if total > data.len() {
        return Err(Error::param(format!("cannot select {total} of {} examples", data.len())));
    }
    let scores = ledger.mean_losses();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_unstable_by(by_score(&scores));
    let c = data.classes();
    let mut per_class_ids = vec![Vec::new(); c];
    for &id in &order[..total] {
        per_class_ids[data.y_obs()[id]].push(id);
    }
    let num = per_class_ids.iter().map(Vec::len).collect();
    let thresholds = per_class_ids.iter().map(|g| g.last().map(|&id| scores[id])).collect();
    Ok(SelectionResult { per_class_ids, num, thresholds })
}

/// Fraction of selected examples whose observed label is correct. An empty
/// selection contains no wrong labels and scores 1.
pub fn selection_precision(result: &SelectionResult, data: &NoisyDataset) -> f64 {
    let total = result.total();
    if total == 0 {
        return 1.0;
    }
    let correct = result.per_class_ids.iter().flatten().filter(|&&id| data.is_correct(id)).count();
    correct as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CleanDataset, TaskSpec};
    use crate::noise::{build_pairwise, build_structured, build_uniform, CIFAR10_STRUCTURED_MAP};
    use crate::oracle::oracle_ce_loss;
    use proptest::prelude::*;

    #[test]
    fn prop_examples() {
        assert!((prop(0.4, 0.2) - 0.52).abs() < 1e-12);
        assert!((prop(0.6, 0.2) - 0.32).abs() < 1e-12);
        for eta in [0.0, 0.1, 0.37, 0.9, 1.0] {
            assert!((prop(eta, 0.0) - (1.0 - eta)).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_two_class_budgets() {
        let props = [0.52, 0.92];
        let run = |g| compute_budgets_from_props(&[100, 100], &props, &[0.5, 0.5], g).unwrap();
        let b = run(Gamma::G0);
        assert!((b.m - 104.0).abs() < 1e-9);
        assert_eq!(b.gamma0, 1.0);
        assert!((b.gamma1 - 92.0 / 52.0).abs() < 1e-12);
        assert_eq!(b.num, vec![52, 52]);
        assert_eq!(run(Gamma::Mid).num, vec![52, 72]);
        assert_eq!(run(Gamma::G1).num, vec![52, 92]);
    }

    #[test]
    fn uniform_noise_budgets_ignore_gamma() {
        let t = build_uniform(5, 0.4).unwrap();
        for g in [Gamma::G0, Gamma::Mid, Gamma::G1, Gamma::Value(3.0)] {
            let cfg = SelectionConfig::known_noise(&t, TaskSpec::uniform_prior(5), 0.2, g).unwrap();
            let b = compute_budgets(&[200; 5], &cfg).unwrap();
            assert!((b.gamma1 - 1.0).abs() < 1e-12);
            let expect = floor_budget(prop(0.32, 0.2) * 200.0);
            assert!(b.num.iter().all(|&n| n == expect), "{:?}", b.num);
        }
    }

    /// Relative number of class i = num(i) / (p_i Σ n), with expected counts
    /// n_j = Σ_k p_k T_kj.
    fn structured_relative_numbers(gamma: Gamma) -> Vec<f64> {
        let (r, beta, total) = (0.4, 0.2, 1_000_000.0);
        let t = build_structured(10, r, &CIFAR10_STRUCTURED_MAP).unwrap();
        let prior = TaskSpec::uniform_prior(10);
        let counts: Vec<usize> = (0..10)
            .map(|j| ((0..10).map(|k| prior[k] * t.get(k, j)).sum::<f64>() * total).round() as usize)
            .collect();
        let cfg = SelectionConfig::known_noise(&t, prior.clone(), beta, gamma).unwrap();
        let b = compute_budgets(&counts, &cfg).unwrap();
        b.num.iter().map(|&n| n as f64 / (0.1 * total)).collect()
    }

    #[test]
    fn structured_relative_numbers_match_table() {
        let (r, beta) = (0.4, 0.2);
        let a = 1.0 - beta * r;
        let b = 1.0 - r;
        let cc = 1.0 - (1.0 + beta) * r;
        let at_g1 = [a, a, b, cc, b, cc, 1.0, a, 1.0, b];
        for (got, want) in structured_relative_numbers(Gamma::G1).iter().zip(at_g1) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        for got in structured_relative_numbers(Gamma::G0) {
            assert!((got - cc).abs() < 1e-4, "{got}");
        }
        let mid = structured_relative_numbers(Gamma::Mid);
        for i in [0, 1, 6, 7, 8] {
            assert!((mid[i] - (1.0 - (1.0 + beta) * r / 2.0)).abs() < 1e-4, "{}", mid[i]);
        }
    }

    #[test]
    fn zero_prior_is_rejected() {
        assert!(compute_budgets_from_props(&[10, 10], &[0.5, 0.5], &[1.0, 0.0], Gamma::G0).is_err());
    }

    #[test]
    fn gamma_parsing() {
        assert_eq!("g0".parse::<Gamma>().unwrap(), Gamma::G0);
        assert_eq!("mid".parse::<Gamma>().unwrap(), Gamma::Mid);
        assert_eq!("1.5".parse::<Gamma>().unwrap(), Gamma::Value(1.5));
        assert!("0.5".parse::<Gamma>().is_err());
        assert!("big".parse::<Gamma>().is_err());
        let g: Gamma = serde_json::from_str("2.0").unwrap();
        assert_eq!(g, Gamma::Value(2.0));
        assert_eq!(serde_json::to_string(&Gamma::Mid).unwrap(), "\"mid\"");
    }

    fn toy(y_true: Vec<usize>, y_obs: Vec<usize>, c: usize) -> NoisyDataset {
        let n = y_true.len();
        let clean = CleanDataset::new(c, 1, (0..n).map(|i| i as f64).collect(), y_true).unwrap();
        NoisyDataset::from_clean(clean, y_obs).unwrap()
    }

    #[test]
    fn rank_read_off() {
        let data = toy(vec![0, 0, 0, 1], vec![0, 0, 0, 1], 2);
        let ledger = LossLedger::from_rows(&[vec![0.1], vec![0.9], vec![0.2], vec![0.5]]).unwrap();
        let res = select_by_scores(&ledger.mean_losses(), &data, &[2, 1]).unwrap();
        assert_eq!(res.per_class_ids, vec![vec![0, 2], vec![3]]);
        assert_eq!(res.thresholds, vec![Some(0.2), Some(0.5)]);
        let json = serde_json::to_string(&res).unwrap();
        assert!(json.starts_with(r#"{"selected":{"0":[0,2],"1":[3]}"#), "{json}");
        let back: SelectionResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn equal_losses_take_lowest_ids() {
        let data = toy(vec![0, 1, 0, 1, 0, 1], vec![0, 1, 0, 1, 0, 1], 2);
        let res = select_by_scores(&[1.0; 6], &data, &[2, 1]).unwrap();
        assert_eq!(res.per_class_ids, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn over_budget_is_internal_error() {
        let data = toy(vec![0, 1], vec![0, 1], 2);
        assert!(matches!(select_by_scores(&[1.0; 2], &data, &[2, 1]), Err(Error::Internal(_))));
    }

    #[test]
    fn single_epoch_vs_mean() {
        let data = toy(vec![0, 0], vec![0, 0], 2);
        let ledger = LossLedger::from_rows(&[vec![0.1, 5.0], vec![1.0, 1.0]]).unwrap();
        let by_mean = select_by_scores(&ledger.mean_losses(), &data, &[1, 0]).unwrap();
        let by_last = select_by_scores(ledger.epoch(1).unwrap(), &data, &[1, 0]).unwrap();
        assert_eq!(by_mean.per_class_ids[0], vec![1]);
        assert_eq!(by_last.per_class_ids[0], vec![1]);
        let by_first = select_by_scores(ledger.epoch(0).unwrap(), &data, &[1, 0]).unwrap();
        assert_eq!(by_first.per_class_ids[0], vec![0]);
        let cfg = SelectionConfig { beta: 0.0, gamma: Gamma::G1, prior: vec![0.5, 0.5], eta: vec![0.0, 0.0] };
        assert!(matches!(select_single_epoch(&ledger, &data, &cfg, 2), Err(Error::Lookup(_))));
    }

    #[test]
    fn single_epoch_ledger_matches_rsl() {
        let data = toy(vec![0, 1, 0, 1, 0, 1], vec![0, 1, 1, 1, 0, 0], 2);
        let ledger = LossLedger::from_rows(&[vec![0.3], vec![0.1], vec![0.7], vec![0.2], vec![0.4], vec![0.9]]).unwrap();
        let cfg = SelectionConfig { beta: 0.2, gamma: Gamma::Mid, prior: vec![0.5, 0.5], eta: vec![0.3, 0.3] };
        assert_eq!(select_rsl(&ledger, &data, &cfg).unwrap(), select_single_epoch(&ledger, &data, &cfg, 0).unwrap());
    }

    #[test]
    fn global_selection() {
        let data = toy(vec![0, 1, 0, 1], vec![0, 1, 1, 1], 2);
        let ledger = LossLedger::from_rows(&[vec![0.3], vec![0.1], vec![0.7], vec![0.2]]).unwrap();
        let one = select_global_mean(&ledger, &data, 1).unwrap();
        assert_eq!(one.selected_ids(), vec![1]);
        let all = select_global_mean(&ledger, &data, 4).unwrap();
        assert_eq!(selection_precision(&all, &data), 1.0 - data.noise_rate());
        assert!(select_global_mean(&ledger, &data, 5).is_err());
    }

    #[test]
    fn precision_of_noiseless_selection() {
        let data = toy(vec![0, 1, 1], vec![0, 1, 1], 2);
        let res = select_by_scores(&[0.0; 3], &data, &[1, 2]).unwrap();
        assert_eq!(selection_precision(&res, &data), 1.0);
    }

    /// Dataset with exact class-conditional composition: `per_pair[i][j]`
    /// examples of true class i observed as j.
    fn composed(per_pair: &[Vec<usize>]) -> NoisyDataset {
        let c = per_pair.len();
        let (mut yt, mut yo) = (Vec::new(), Vec::new());
        for i in 0..c {
            for j in 0..c {
                for _ in 0..per_pair[i][j] {
                    yt.push(i);
                    yo.push(j);
                }
            }
        }
        toy(yt, yo, c)
    }

    fn oracle_ledger(t: &TransitionMatrix, data: &NoisyDataset) -> LossLedger {
        let rows: Vec<Vec<f64>> =
            (0..data.len()).map(|id| vec![oracle_ce_loss(t, data.y_true()[id], data.y_obs()[id]).value()]).collect();
        LossLedger::from_rows(&rows).unwrap()
    }

    #[test]
    fn oracle_ledger_selection_is_clean() {
        let t = build_pairwise(3, 0.3).unwrap();
        let counts: Vec<Vec<usize>> =
            (0..3).map(|i| (0..3).map(|j| (t.get(i, j) * 1000.0).round() as usize).collect()).collect();
        let data = composed(&counts);
        let ledger = oracle_ledger(&t, &data);
        let cfg = SelectionConfig::known_noise(&t, TaskSpec::uniform_prior(3), 0.0, Gamma::G1).unwrap();
        let res = select_rsl(&ledger, &data, &cfg).unwrap();
        assert_eq!(res.num, vec![700, 700, 700]);
        assert_eq!(selection_precision(&res, &data), 1.0);
    }

    #[test]
    fn global_selection_favours_clean_classes() {
        let t = build_structured(10, 0.4, &CIFAR10_STRUCTURED_MAP).unwrap();
        let counts: Vec<Vec<usize>> =
            (0..10).map(|i| (0..10).map(|j| (t.get(i, j) * 500.0).round() as usize).collect()).collect();
        let data = composed(&counts);
        let ledger = oracle_ledger(&t, &data);
        let cfg = SelectionConfig::known_noise(&t, TaskSpec::uniform_prior(10), 0.2, Gamma::G0).unwrap();
        let rsl = select_rsl(&ledger, &data, &cfg).unwrap();
        let global = select_global_mean(&ledger, &data, rsl.total()).unwrap();
        // Classes 6 and 8 are neither a source nor a target of any flip.
        for i in [6, 8] {
            assert!(global.num[i] > rsl.num[i]);
        }
    }

    fn arb_config() -> impl Strategy<Value = (Vec<usize>, SelectionConfig)> {
        (2usize..6).prop_flat_map(|c| {
            (
                proptest::collection::vec(1usize..500, c),
                proptest::collection::vec(0.05f64..1.0, c),
                proptest::collection::vec(0.0f64..0.9, c),
                0.0f64..=1.0,
            )
                .prop_map(|(n, w, eta, beta)| {
                    let s: f64 = w.iter().sum();
                    let mut prior: Vec<f64> = w.iter().map(|x| x / s).collect();
                    let rest: f64 = prior[1..].iter().sum();
                    prior[0] = 1.0 - rest;
                    (n, SelectionConfig { beta, gamma: Gamma::G0, prior, eta })
                })
        })
    }

    proptest! {
        #[test]
        fn budgets_respect_both_caps((n, cfg) in arb_config(), g in 1.0f64..4.0) {
            let cfg = SelectionConfig { gamma: Gamma::Value(g), ..cfg };
            let b = compute_budgets(&n, &cfg).unwrap();
            for i in 0..n.len() {
                let cap = b.props[i] * n[i] as f64;
                prop_assert!(b.num[i] as f64 <= cap + 1e-6);
                prop_assert!(b.num[i] as f64 <= g * cfg.prior[i] * b.m + 1e-6);
            }
        }

        #[test]
        fn budgets_monotone_in_gamma((n, cfg) in arb_config(), g1 in 1.0f64..4.0, dg in 0.0f64..2.0) {
            let lo = compute_budgets(&n, &SelectionConfig { gamma: Gamma::Value(g1), ..cfg.clone() }).unwrap();
            let hi = compute_budgets(&n, &SelectionConfig { gamma: Gamma::Value(g1 + dg), ..cfg }).unwrap();
            prop_assert!(lo.num.iter().zip(&hi.num).all(|(a, b)| a <= b));
        }

        #[test]
        fn gamma1_keeps_full_proportion((n, cfg) in arb_config()) {
            let b = compute_budgets(&n, &SelectionConfig { gamma: Gamma::G1, ..cfg }).unwrap();
            for i in 0..n.len() {
                prop_assert_eq!(b.num[i], floor_budget(b.props[i] * n[i] as f64));
            }
        }

        #[test]
        fn gamma0_follows_prior((n, cfg) in arb_config()) {
            let b = compute_budgets(&n, &SelectionConfig { gamma: Gamma::G0, ..cfg.clone() }).unwrap();
            for i in 0..n.len() {
                let share = cfg.prior[i] * b.m;
                prop_assert!((b.num[i] as f64 - share).abs() <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn selection_invariants(
            scores in proptest::collection::vec(0.0f64..3.0, 40),
            labels in proptest::collection::vec(0usize..3, 40),
            budget in proptest::collection::vec(0usize..20, 3),
            target in 0usize..40,
            drop in 0.0f64..3.0,
        ) {
            let data = toy(labels.clone(), labels.clone(), 3);
            let counts = data.observed_counts();
            let num: Vec<usize> = budget.iter().zip(&counts).map(|(b, n)| (*b).min(*n)).collect();
            let res = select_by_scores(&scores, &data, &num).unwrap();
            prop_assert_eq!(&res, &select_by_scores(&scores, &data, &num).unwrap());
            for i in 0..3 {
                prop_assert_eq!(res.per_class_ids[i].len(), num[i]);
                let chosen: std::collections::HashSet<_> = res.per_class_ids[i].iter().copied().collect();
                for id in (0..40).filter(|id| labels[*id] == i && !chosen.contains(id)) {
                    for &s in &chosen {
                        prop_assert!((scores[s], s) < (scores[id], id));
                    }
                }
            }
            let was_in = res.per_class_ids[labels[target]].contains(&target);
            let mut lowered = scores.clone();
            lowered[target] = (lowered[target] - drop).max(0.0);
            let again = select_by_scores(&lowered, &data, &num).unwrap();
            if was_in {
                prop_assert!(again.per_class_ids[labels[target]].contains(&target));
            }
        }
    }
}
