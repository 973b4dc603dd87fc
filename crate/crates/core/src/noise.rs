//! Class-conditional label noise.
//!
//! A [`TransitionMatrix`] holds `T[i][j] = p(observed = j | true = i)`. The three
//! recipes used throughout the crate (uniform, pairwise, structured) are built
//! from a [`NoiseSpec`], and [`corrupt_labels`] draws observed labels from the
//! rows of a matrix.

use std::fmt;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::{CleanDataset, NoisyDataset};
use crate::util::{check_prior, rng_stream};
use crate::{Error, Result};

/// Absolute tolerance on row sums of a stored matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Rows within this distance of summing to one are renormalised on construction.
pub const NORMALIZE_TOL: f64 = 1e-9;

/// Flip pairs of the structured CIFAR-10 recipe: truck → automobile,
/// bird → airplane, deer → horse, cat ↔ dog.
pub const CIFAR10_STRUCTURED_MAP: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

/// Row-stochastic `c × c` matrix, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionMatrix {
    c: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Validates and stores `rows`. Rows that miss stochasticity by at most
    /// [`NORMALIZE_TOL`] are renormalised; anything further off is rejected.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        if c < 2 {
            return Err(Error::param(format!("transition matrix needs c >= 2, got {c}")));
        }
        let mut entries = Vec::with_capacity(c * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::param(format!("row {i} has {} entries, expected {c}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::param(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORMALIZE_TOL {
                return Err(Error::param(format!("row {i} sums to {sum}")));
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                entries.extend(row.iter().map(|v| v / sum));
            } else {
                entries.extend_from_slice(row);
            }
        }
        Ok(TransitionMatrix { c, entries })
    }

    pub fn identity(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::param(format!("class count must be >= 2, got {c}")));
        }
        let mut entries = vec![0.0; c * c];
        for i in 0..c {
            entries[i * c + i] = 1.0;
        }
        Ok(TransitionMatrix { c, entries })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn get(&self, true_class: usize, observed: usize) -> f64 {
        self.entries[true_class * self.c + observed]
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        &self.entries[true_class * self.c..(true_class + 1) * self.c]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.c).map(<[f64]>::to_vec).collect()
    }

    /// `T_ii > max_{j != i} T_ij` for every row.
    pub fn is_row_diag_dominant(&self) -> bool {
        (0..self.c).all(|i| (0..self.c).filter(|&j| j != i).all(|j| self.get(i, i) > self.get(i, j)))
    }

    /// `T_ii` beats every other entry of both row `i` and column `i`.
    pub fn is_diag_dominant(&self) -> bool {
        (0..self.c).all(|i| {
            (0..self.c)
                .filter(|&j| j != i)
                .all(|j| self.get(i, i) > self.get(i, j) && self.get(i, i) > self.get(j, i))
        })
    }

    /// Row-major CSV, one line per true class, no header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in self.entries.chunks(self.c) {
            writer.write_record(row.iter().map(|v| v.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }
}

impl<'de> Deserialize<'de> for TransitionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            entries: Vec<f64>,
        }
        let raw = Raw::deserialize(de)?;
        let c = (raw.entries.len() as f64).sqrt().round() as usize;
        if c * c != raw.entries.len() || c == 0 {
            return Err(serde::de::Error::custom("entries do not form a square matrix"));
        }
        let rows: Vec<Vec<f64>> = raw.entries.chunks(c).map(<[f64]>::to_vec).collect();
        TransitionMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for TransitionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.entries.chunks(self.c) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(f, "[{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Uniform,
    Pairwise,
    Structured,
}

/// Noise recipe, serialised as `{"kind": ..., "r": ..., "map": [[s, t], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub r: f64,
    #[serde(default)]
    pub map: Vec<(usize, usize)>,
}

impl NoiseSpec {
    pub fn uniform(r: f64) -> Self {
        NoiseSpec { kind: NoiseKind::Uniform, r, map: Vec::new() }
    }

    pub fn pairwise(r: f64) -> Self {
        NoiseSpec { kind: NoiseKind::Pairwise, r, map: Vec::new() }
    }

    pub fn structured(r: f64, map: Vec<(usize, usize)>) -> Self {
        NoiseSpec { kind: NoiseKind::Structured, r, map }
    }

    pub fn validate(&self) -> Result<()> {
        check_flip(self.r)?;
        match self.kind {
            NoiseKind::Structured => check_map(&self.map, None),
            _ if !self.map.is_empty() => {
                Err(Error::param("flip map is only meaningful for structured noise"))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, c: usize) -> Result<TransitionMatrix> {
        self.validate()?;
        match self.kind {
            NoiseKind::Uniform => build_uniform(c, self.r),
            NoiseKind::Pairwise => build_pairwise(c, self.r),
            NoiseKind::Structured => build_structured(c, self.r, &self.map),
        }
    }
}

fn check_class_count(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::param(format!("class count must be >= 2, got {c}")));
    }
    Ok(())
}

fn check_flip(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::param(format!("flip parameter r must lie in [0, 1], got {r}")));
    }
    Ok(())
}

fn check_map(map: &[(usize, usize)], c: Option<usize>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for &(s, t) in map {
        if s == t {
            return Err(Error::param(format!("flip pair ({s}, {t}) maps a class onto itself")));
        }
        if !seen.insert(s) {
            return Err(Error::param(format!("class {s} appears twice as a flip source")));
        }
        if let Some(c) = c {
            if s >= c || t >= c {
                return Err(Error::param(format!("flip pair ({s}, {t}) out of range for c = {c}")));
            }
        }
    }
    Ok(())
}

/// Every label is redrawn uniformly over all `c` classes with probability `r`,
/// so the diagonal keeps the self-flip mass: `T_ii = 1 - r + r/c`.
pub fn build_uniform(c: usize, r: f64) -> Result<TransitionMatrix> {
    check_class_count(c)?;
    check_flip(r)?;
    let off = r / c as f64;
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 1.0 - r + off } else { off }).collect())
        .collect();
    TransitionMatrix::from_rows(&rows)
}

/// Circular flip to the next class with probability `r`.
pub fn build_pairwise(c: usize, r: f64) -> Result<TransitionMatrix> {
    check_class_count(c)?;
    check_flip(r)?;
    let mut rows = vec![vec![0.0; c]; c];
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = 1.0 - r;
        row[(i + 1) % c] += r;
    }
    TransitionMatrix::from_rows(&rows)
}

/// Each `(s, t)` pair flips class `s` to `t` with probability `r`; classes that
/// are not a source keep an identity row.
pub fn build_structured(c: usize, r: f64, map: &[(usize, usize)]) -> Result<TransitionMatrix> {
    check_class_count(c)?;
    check_flip(r)?;
    check_map(map, Some(c))?;
    let mut rows = vec![vec![0.0; c]; c];
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(s, t) in map {
        rows[s][s] = 1.0 - r;
        rows[s][t] = r;
    }
    TransitionMatrix::from_rows(&rows)
}

/// Draws each observed label independently from row `T[y_true]`.
pub fn corrupt_labels(clean: &CleanDataset, t: &TransitionMatrix, seed: u64) -> Result<NoisyDataset> {
    if clean.classes() != t.classes() {
        return Err(Error::param(format!(
            "dataset has {} classes but the transition matrix is {}x{}",
            clean.classes(),
            t.classes(),
            t.classes()
        )));
    }
    let c = t.classes();
    if let Some(bad) = clean.y_true().iter().find(|&&y| y >= c) {
        return Err(Error::param(format!("label {bad} out of range for c = {c}")));
    }
    let rows: Vec<WeightedIndex<f64>> = (0..c)
        .map(|i| WeightedIndex::new(t.row(i)).map_err(|e| Error::param(e.to_string())))
        .collect::<Result<_>>()?;
    let mut rng = rng_stream(seed, 0);
    let y_obs = clean.y_true().iter().map(|&y| rows[y].sample(&mut rng)).collect();
    NoisyDataset::from_clean(clean.clone(), y_obs)
}

/// Posterior probability that an example observed as class `i` carries a wrong
/// label: `eta_i = 1 - T_ii p_i / sum_j T_ji p_j`.
pub fn observed_class_noise_rates(t: &TransitionMatrix, prior: &[f64]) -> Result<Vec<f64>> {
    let c = t.classes();
    check_prior(prior, c)?;
    (0..c)
        .map(|i| {
            let mass: f64 = (0..c).map(|j| t.get(j, i) * prior[j]).sum();
            if mass <= 0.0 {
                return Err(Error::UndefinedRate(i));
            }
            Ok((1.0 - t.get(i, i) * prior[i] / mass).max(0.0))
        })
        .collect()
}
