//! The noisy-risk minimiser in closed form and mechanical checks of the
//! small-loss theory.
//!
//! Under class-conditional noise the cross-entropy minimiser `g*` outputs, for
//! every `x`, the row `T[f*(x)]` of the transition matrix. Everything in this
//! module is a pure function of `T` (and, for the 0-1 risk, a finite instance
//! space), so each claim can be checked exhaustively.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::FiniteInstanceSpace;
use crate::noise::TransitionMatrix;
use crate::{Error, Result};

/// Upper limit on `c^points` for the brute-force 0-1 risk check.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Cross-entropy of the oracle, with zero-probability labels mapped to a
/// sentinel that orders above every finite loss.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub enum OracleLoss {
    Finite(f64),
    Infinite,
}

impl OracleLoss {
    pub fn value(self) -> f64 {
        match self {
            OracleLoss::Finite(v) => v,
            OracleLoss::Infinite => f64::INFINITY,
        }
    }
}

/// The softmax output of `g*` at any point whose true class is `true_class`.
pub fn oracle_softmax(t: &TransitionMatrix, true_class: usize) -> Vec<f64> {
    t.row(true_class).to_vec()
}

pub fn oracle_ce_loss(t: &TransitionMatrix, true_class: usize, observed: usize) -> OracleLoss {
    let p = t.get(true_class, observed);
    if p > 0.0 {
        OracleLoss::Finite(-p.ln())
    } else {
        OracleLoss::Infinite
    }
}

/// Expected 0-1 loss on noisy labels: `sum_x mass(x) (1 - T[f*(x)][f(x)])`.
pub fn expected_01_loss(f: &[usize], space: &FiniteInstanceSpace, t: &TransitionMatrix) -> f64 {
    assert_eq!(f.len(), space.len(), "classifier must label every point");
    space
        .true_class
        .iter()
        .zip(&space.mass)
        .zip(f)
        .map(|((&y, &m), &pred)| m * (1.0 - t.get(y, pred)))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub description: String,
    pub values: Vec<f64>,
}

/// Outcome of checking one claim on one instance.
///
/// `condition_holds` is the hypothesis (a dominance condition, or ε below its
/// bound), `conclusion_holds` the claimed consequence as observed, and
/// `verified` whether the statement held on this instance: the implication for
/// one-directional claims, the equivalence for iff-claims. `counterexamples`
/// lists the concrete cases in which the conclusion failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub claim: String,
    pub condition_holds: bool,
    pub conclusion_holds: bool,
    pub verified: bool,
    pub counterexamples: Vec<Counterexample>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_bounds: Option<Vec<f64>>,
}

fn enumeration_size(c: usize, points: usize) -> u128 {
    let mut total: u128 = 1;
    for _ in 0..points {
        total = total.saturating_mul(c as u128);
        if total > ENUMERATION_LIMIT {
            return total;
        }
    }
    total
}

/// Enumerates every classifier on `space` and compares its noisy 0-1 risk with
/// that of the target concept.
///
/// A classifier is a counterexample when it beats `f*`, or, while `T` is
/// row-diagonally dominant, when it ties `f*` despite disagreeing on positive
/// mass.
pub fn verify_lemma1(space: &FiniteInstanceSpace, t: &TransitionMatrix) -> Result<TheoremReport> {
    let c = t.classes();
    if space.classes != c {
        return Err(Error::param("instance space and transition matrix disagree on c"));
    }
    let total = enumeration_size(c, space.len());
    if total > ENUMERATION_LIMIT {
        return Err(Error::Size(total, ENUMERATION_LIMIT));
    }
    let condition = t.is_row_diag_dominant();
    let target_risk = expected_01_loss(&space.true_class, space, t);
    let mut counterexamples = Vec::new();
    let mut f = vec![0usize; space.len()];
    for index in 0..total as u64 {
        let mut rest = index;
        for slot in f.iter_mut() {
            *slot = (rest % c as u64) as usize;
            rest /= c as u64;
        }
        // risk(f) - risk(f*) accumulated over disagreeing points only
        let mut excess = 0.0;
        let mut differing_mass = 0.0;
        for ((&y, &m), &pred) in space.true_class.iter().zip(&space.mass).zip(&f) {
            if pred != y {
                excess += m * (t.get(y, y) - t.get(y, pred));
                differing_mass += m;
            }
        }
        let beats_target = excess < 0.0;
        let ties_on_mass = condition && differing_mass > 0.0 && excess <= 0.0;
        if beats_target || ties_on_mass {
            let mut values: Vec<f64> = f.iter().map(|&k| k as f64).collect();
            values.push(expected_01_loss(&f, space, t));
            values.push(target_risk);
            counterexamples.push(Counterexample {
                description: format!("classifier #{index} has risk not above the target concept's"),
                values,
            });
        }
    }
    let conclusion = counterexamples.is_empty();
    Ok(TheoremReport {
        claim: "target concept minimises the expected noisy 0-1 loss".into(),
        condition_holds: condition,
        conclusion_holds: conclusion,
        verified: !condition || conclusion,
        counterexamples,
        gap_bounds: None,
    })
}

/// Checks, row by row, whether the classifier induced by `g*` recovers the true
/// class, and compares that with row-diagonal dominance.
pub fn verify_lemma2(t: &TransitionMatrix) -> TheoremReport {
    let c = t.classes();
    let mut counterexamples = Vec::new();
    for i in 0..c {
        let out = oracle_softmax(t, i);
        let top = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..c).filter(|&k| out[k] == top).collect();
        if winners != [i] {
            counterexamples.push(Counterexample {
                description: format!("true class {i} is predicted as {winners:?}"),
                values: out,
            });
        }
    }
    let condition = t.is_row_diag_dominant();
    let conclusion = counterexamples.is_empty();
    TheoremReport {
        claim: "argmax of g* equals f* everywhere iff T is row-diagonally dominant".into(),
        condition_holds: condition,
        conclusion_holds: conclusion,
        verified: condition == conclusion,
        counterexamples,
        gap_bounds: None,
    }
}

/// For every observed label and every wrong true class, the oracle loss of a
/// correctly labelled example must be strictly below that of a mislabelled one.
pub fn verify_theorem1(t: &TransitionMatrix) -> TheoremReport {
    let c = t.classes();
    let mut counterexamples = Vec::new();
    let mut gaps = Vec::new();
    for observed in 0..c {
        let correct = oracle_ce_loss(t, observed, observed);
        for wrong in (0..c).filter(|&k| k != observed) {
            let incorrect = oracle_ce_loss(t, wrong, observed);
            gaps.push(incorrect.value() - correct.value());
            if correct.partial_cmp(&incorrect) != Some(Ordering::Less) {
                counterexamples.push(Counterexample {
                    description: format!(
                        "observed {observed}: correct loss is not below the loss of true class {wrong}"
                    ),
                    values: vec![correct.value(), incorrect.value()],
                });
            }
        }
    }
    let condition = t.is_diag_dominant();
    let conclusion = counterexamples.is_empty();
    TheoremReport {
        claim: "correct examples have strictly smaller oracle loss within each observed class".into(),
        condition_holds: condition,
        conclusion_holds: conclusion,
        verified: !condition || conclusion,
        counterexamples,
        gap_bounds: Some(gaps),
    }
}

/// Largest sup-norm deviation from `g*` that still keeps a correct example of
/// class `observed` below a mislabelled one with true class `wrong_true`:
/// `(T[o][o] - T[w][o]) / 2`. A non-positive value means no guarantee.
pub fn theorem2_epsilon_bound(t: &TransitionMatrix, observed: usize, wrong_true: usize) -> f64 {
    0.5 * (t.get(observed, observed) - t.get(wrong_true, observed))
}

/// `log((T[o][o] - eps) / (T[w][o] + eps))`, the guaranteed loss gap for an
/// eps-close model.
pub fn theorem2_gap_lower_bound(
    t: &TransitionMatrix,
    observed: usize,
    wrong_true: usize,
    epsilon: f64,
) -> Result<f64> {
    let bound = theorem2_epsilon_bound(t, observed, wrong_true);
    if !(epsilon >= 0.0 && epsilon < bound) {
        return Err(Error::Domain(format!("epsilon {epsilon} must lie in [0, {bound})")));
    }
    let num = t.get(observed, observed) - epsilon;
    let den = t.get(wrong_true, observed) + epsilon;
    Ok((num / den).ln())
}

const PROB_FLOOR: f64 = 1e-300;

/// Worst-case perturbation of `g*` at sup-norm distance `epsilon`: the correct
/// example loses `epsilon` on its observed coordinate, the mislabelled one gains
/// it, both clamped to `(0, 1]`.
pub fn verify_theorem2_adversarial(
    t: &TransitionMatrix,
    observed: usize,
    wrong_true: usize,
    epsilon: f64,
) -> Result<TheoremReport> {
    if observed == wrong_true {
        return Err(Error::param("wrong_true must differ from the observed class"));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::param("epsilon must be non-negative"));
    }
    let p_correct = (t.get(observed, observed) - epsilon).clamp(PROB_FLOOR, 1.0);
    let p_wrong = (t.get(wrong_true, observed) + epsilon).clamp(PROB_FLOOR, 1.0);
    let (loss_correct, loss_wrong) = (-p_correct.ln(), -p_wrong.ln());
    let realized_gap = loss_wrong - loss_correct;
    let ordered = loss_correct < loss_wrong;

    let bound = theorem2_epsilon_bound(t, observed, wrong_true);
    let in_domain = epsilon < bound;
    let condition = t.is_diag_dominant() && in_domain;
    let mut counterexamples = Vec::new();
    let mut gap_bounds = vec![realized_gap];
    if !ordered {
        counterexamples.push(Counterexample {
            description: format!("epsilon {epsilon}: worst-case losses are not ordered"),
            values: vec![loss_correct, loss_wrong],
        });
    }
    if in_domain {
        let lower = theorem2_gap_lower_bound(t, observed, wrong_true, epsilon)?;
        gap_bounds.push(lower);
        if realized_gap < lower - 1e-12 {
            counterexamples.push(Counterexample {
                description: format!("epsilon {epsilon}: realised gap falls below the guaranteed gap"),
                values: vec![realized_gap, lower],
            });
        }
    }
    let conclusion = counterexamples.is_empty();
    Ok(TheoremReport {
        claim: "an eps-close model keeps the small-loss ordering while eps is below the bound".into(),
        condition_holds: condition,
        conclusion_holds: conclusion,
        // beyond the bound the worst case must actually break the ordering
        verified: if condition {
            conclusion
        } else if epsilon > bound {
            !ordered
        } else {
            true
        },
        counterexamples,
        gap_bounds: Some(gap_bounds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{build_pairwise, build_uniform};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn softmax_reads_rows() {
        let id = TransitionMatrix::identity(3).unwrap();
        assert_eq!(oracle_softmax(&id, 2), vec![0.0, 0.0, 1.0]);
        let t = build_pairwise(3, 0.4).unwrap();
        assert_eq!(oracle_softmax(&t, 0), vec![0.6, 0.4, 0.0]);
        let u = build_uniform(7, 0.35).unwrap();
        for k in 0..7 {
            assert!((oracle_softmax(&u, k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_loss_examples() {
        let id = TransitionMatrix::identity(3).unwrap();
        assert_eq!(oracle_ce_loss(&id, 1, 1), OracleLoss::Finite(0.0));
        let t = build_pairwise(4, 0.3).unwrap();
        let correct = oracle_ce_loss(&t, 2, 2);
        let incorrect = oracle_ce_loss(&t, 1, 2);
        assert!(close(correct.value(), 0.3567));
        assert!(close(incorrect.value(), 1.2040));
        assert!(correct < incorrect);
        assert_eq!(oracle_ce_loss(&t, 0, 2), OracleLoss::Infinite);
        assert!(OracleLoss::Finite(1e300) < OracleLoss::Infinite);
    }

    #[test]
    fn expected_risk_examples() {
        let space = FiniteInstanceSpace::new(2, vec![0, 1], vec![0.5, 0.5]).unwrap();
        let t = TransitionMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        assert!((expected_01_loss(&[0, 1], &space, &t) - 0.25).abs() < 1e-12);
        assert!((expected_01_loss(&[1, 1], &space, &t) - 0.55).abs() < 1e-12);
        let id = TransitionMatrix::identity(2).unwrap();
        assert_eq!(expected_01_loss(&[0, 1], &space, &id), 0.0);
        let flat = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        for f in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert!((expected_01_loss(&f, &space, &flat) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lemma1_pairwise_four_points() {
        let space = FiniteInstanceSpace::new(3, vec![0, 1, 2, 0], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let report = verify_lemma1(&space, &build_pairwise(3, 0.3).unwrap()).unwrap();
        assert!(report.condition_holds && report.conclusion_holds && report.verified);
        assert!(report.counterexamples.is_empty());
        let report = verify_lemma1(&space, &TransitionMatrix::identity(3).unwrap()).unwrap();
        assert!(report.verified && report.counterexamples.is_empty());
    }

    #[test]
    fn lemma1_finds_better_classifier_without_dominance() {
        let space = FiniteInstanceSpace::new(2, vec![0, 1], vec![0.5, 0.5]).unwrap();
        let t = TransitionMatrix::from_rows(&[vec![0.4, 0.6], vec![0.5, 0.5]]).unwrap();
        let report = verify_lemma1(&space, &t).unwrap();
        assert!(!report.condition_holds);
        assert!(!report.counterexamples.is_empty());
        // predicting class 1 on point 0 lowers the risk
        assert!(report.counterexamples.iter().any(|c| c.values[0] == 1.0));
    }

    #[test]
    fn lemma1_zero_mass_disagreement_is_not_strict() {
        let space = FiniteInstanceSpace::new(2, vec![0, 1], vec![1.0, 0.0]).unwrap();
        let report = verify_lemma1(&space, &build_pairwise(2, 0.2).unwrap()).unwrap();
        assert!(report.verified && report.counterexamples.is_empty());
    }

    #[test]
    fn lemma1_guard() {
        let space = FiniteInstanceSpace::random(10, 7, 1).unwrap();
        let t = TransitionMatrix::identity(10).unwrap();
        assert!(matches!(verify_lemma1(&space, &t), Err(Error::Size(..))));
    }

    #[test]
    fn lemma2_examples() {
        let r = verify_lemma2(&build_pairwise(5, 0.4).unwrap());
        assert!(r.condition_holds && r.conclusion_holds && r.verified);
        let r = verify_lemma2(&build_pairwise(5, 0.6).unwrap());
        assert!(!r.condition_holds && !r.conclusion_holds && r.verified);
        assert_eq!(r.counterexamples.len(), 5);
        assert!(r.counterexamples[0].description.contains("[1]"));
        assert!(verify_lemma2(&TransitionMatrix::identity(4).unwrap()).conclusion_holds);
    }

    #[test]
    fn theorem1_pairwise() {
        let r = verify_theorem1(&build_pairwise(4, 0.3).unwrap());
        assert!(r.condition_holds && r.conclusion_holds);
        for r_flip in [0.5, 0.6] {
            let r = verify_theorem1(&build_pairwise(4, r_flip).unwrap());
            assert!(!r.condition_holds && !r.counterexamples.is_empty());
        }
    }

    #[test]
    fn epsilon_bound_examples() {
        let t = build_pairwise(4, 0.3).unwrap();
        assert!((theorem2_epsilon_bound(&t, 2, 1) - 0.2).abs() < 1e-12);
        let id = TransitionMatrix::identity(3).unwrap();
        assert_eq!(theorem2_epsilon_bound(&id, 0, 2), 0.5);
        let bad = build_pairwise(4, 0.6).unwrap();
        assert!(theorem2_epsilon_bound(&bad, 2, 1) < 0.0);
    }

    #[test]
    fn gap_bound_examples() {
        let t = build_pairwise(4, 0.3).unwrap();
        assert!(close(theorem2_gap_lower_bound(&t, 2, 1, 0.1).unwrap(), 0.4055));
        let at_zero = theorem2_gap_lower_bound(&t, 2, 1, 0.0).unwrap();
        assert!((at_zero - (0.7f64 / 0.3).ln()).abs() < 1e-12);
        let near = theorem2_gap_lower_bound(&t, 2, 1, 0.2 - 1e-9).unwrap();
        assert!(near > 0.0 && near < 1e-7);
        assert!(matches!(theorem2_gap_lower_bound(&t, 2, 1, 0.2), Err(Error::Domain(_))));
        assert!(theorem2_gap_lower_bound(&t, 2, 1, -0.1).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let t = build_pairwise(4, 0.3).unwrap();
        let r = verify_theorem2_adversarial(&t, 2, 1, 0.1).unwrap();
        assert!(r.condition_holds && r.conclusion_holds && r.verified);
        let gaps = r.gap_bounds.unwrap();
        assert!(gaps[0] >= 0.4055 - 1e-4 && gaps[0] >= gaps[1] - 1e-12);

        let r = verify_theorem2_adversarial(&t, 2, 1, 0.25).unwrap();
        assert!(!r.condition_holds && !r.conclusion_holds && r.verified);

        let r = verify_theorem2_adversarial(&t, 2, 1, 0.0).unwrap();
        let t1 = verify_theorem1(&t);
        assert_eq!(r.conclusion_holds, t1.conclusion_holds);
    }
}
