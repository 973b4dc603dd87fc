//! Synthetic classification tasks with a known target concept.
//!
//! The true label of a point is the index of its nearest centroid, and every
//! sampled example is rejection-resampled until it agrees with that rule, so
//! clean datasets are realizable by construction.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::util::{check_prior, rng_stream, Rng};
use crate::{Error, Result};

const MAX_REJECTIONS: usize = 1_000_000;
const MAX_LATTICE_POINTS: usize = 1_000_000;

/// A Gaussian mixture task: spherical clusters around `centroids`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub c: usize,
    pub d: usize,
    pub centroids: Vec<Vec<f64>>,
    pub covariance_scale: f64,
    pub prior: Vec<f64>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 || self.d < 1 {
            return Err(Error::param(format!("need c >= 2 and d >= 1, got c = {}, d = {}", self.c, self.d)));
        }
        if self.centroids.len() != self.c || self.centroids.iter().any(|m| m.len() != self.d) {
            return Err(Error::param("centroids must be c vectors of length d"));
        }
        if !(self.covariance_scale >= 0.0 && self.covariance_scale.is_finite()) {
            return Err(Error::param("covariance_scale must be finite and non-negative"));
        }
        check_prior(&self.prior, self.c)?;
        for a in 0..self.c {
            for b in a + 1..self.c {
                if self.centroids[a] == self.centroids[b] {
                    return Err(Error::param(format!("centroids {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn uniform_prior(c: usize) -> Vec<f64> {
        vec![1.0 / c as f64; c]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; ties go to the smallest index.
pub fn target_concept(task: &TaskSpec, x: &[f64]) -> usize {
    debug_assert_eq!(x.len(), task.d);
    let mut best = 0;
    let mut best_d = sq_dist(x, &task.centroids[0]);
    for (k, m) in task.centroids.iter().enumerate().skip(1) {
        let dist = sq_dist(x, m);
        if dist < best_d {
            best = k;
            best_d = dist;
        }
    }
    best
}

/// Places `c` centroids with pairwise distance at least `separation`.
///
/// For `c <= d + 1` the centroids are the vertices of a regular simplex with
/// edge `separation`; otherwise they are the `c` lattice points of spacing
/// `separation` closest to the origin. Both layouts are centred and then
/// rotated by a seeded random orthogonal matrix (no rotation in one dimension,
/// where centroids are laid out in increasing order).
pub fn make_gaussian_task(
    c: usize,
    d: usize,
    separation: f64,
    covariance_scale: f64,
    prior: Vec<f64>,
    seed: u64,
) -> Result<TaskSpec> {
    if c < 2 || d < 1 {
        return Err(Error::param(format!("need c >= 2 and d >= 1, got c = {c}, d = {d}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::param(format!("separation must be positive, got {separation}")));
    }
    check_prior(&prior, c)?;
    let mut centroids = if c <= d + 1 { simplex(c, d, separation) } else { lattice(c, d, separation)? };
    if d > 1 {
        let mut rng = rng_stream(seed, 1);
        let q = random_orthogonal(d, &mut rng);
        centroids = centroids
            .iter()
            .map(|v| (0..d).map(|i| (0..d).map(|j| q[i][j] * v[j]).sum()).collect())
            .collect();
    } else {
        centroids.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    // rounding in the rotation may shave a few ulps off the closest pair
    let min_dist = min_pairwise_distance(&centroids);
    if min_dist < separation {
        let scale = separation / min_dist * (1.0 + 8.0 * f64::EPSILON);
        for v in &mut centroids {
            v.iter_mut().for_each(|x| *x *= scale);
        }
    }
    let task = TaskSpec { c, d, centroids, covariance_scale, prior };
    task.validate()?;
    Ok(task)
}

pub(crate) fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            best = best.min(sq_dist(&points[a], &points[b]).sqrt());
        }
    }
    best
}

fn simplex(c: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    // Scaled standard basis vectors e_k have pairwise distance `separation`;
    // express them in the Helmert basis of the hyperplane orthogonal to 1.
    let s = separation / std::f64::consts::SQRT_2;
    (0..c)
        .map(|k| {
            let mut v = vec![0.0; d];
            for j in 1..c {
                let norm = ((j * (j + 1)) as f64).sqrt();
                let coord = if k < j {
                    1.0
                } else if k == j {
                    -(j as f64)
                } else {
                    0.0
                };
                v[j - 1] = s * coord / norm;
            }
            v
        })
        .collect()
}

fn lattice(c: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let mut half = 1usize;
    loop {
        let side = 2 * half + 1;
        let total = (side as f64).powi(d as i32);
        if total > MAX_LATTICE_POINTS as f64 {
            return Err(Error::param(format!(
                "cannot pack {c} centroids in {d} dimensions at separation {separation}"
            )));
        }
        if total as usize >= c {
            let mut points: Vec<Vec<i64>> = Vec::with_capacity(total as usize);
            let mut idx = vec![-(half as i64); d];
            loop {
                points.push(idx.clone());
                let mut k = 0;
                while k < d {
                    idx[k] += 1;
                    if idx[k] <= half as i64 {
                        break;
                    }
                    idx[k] = -(half as i64);
                    k += 1;
                }
                if k == d {
                    break;
                }
            }
            points.sort_by(|a, b| {
                let na: i64 = a.iter().map(|v| v * v).sum();
                let nb: i64 = b.iter().map(|v| v * v).sum();
                na.cmp(&nb).then_with(|| a.cmp(b))
            });
            points.truncate(c);
            let mut out: Vec<Vec<f64>> =
                points.iter().map(|p| p.iter().map(|&v| v as f64 * separation).collect()).collect();
            let mean: Vec<f64> = (0..d).map(|j| out.iter().map(|p| p[j]).sum::<f64>() / c as f64).collect();
            for p in &mut out {
                p.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
            }
            return Ok(out);
        }
        half += 1;
    }
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut degenerate = false;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        if !degenerate {
            return basis;
        }
    }
}

/// Clean examples: features stored row-major, ids are positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanDataset {
    c: usize,
    d: usize,
    features: Vec<f64>,
    y_true: Vec<usize>,
}

impl CleanDataset {
    pub fn new(c: usize, d: usize, features: Vec<f64>, y_true: Vec<usize>) -> Result<Self> {
        if d == 0 || features.len() != d * y_true.len() {
            return Err(Error::param("feature matrix does not match the label count"));
        }
        if y_true.iter().any(|&y| y >= c) {
            return Err(Error::param(format!("labels must lie in 0..{c}")));
        }
        Ok(CleanDataset { c, d, features, y_true })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, id: usize) -> &[f64] {
        &self.features[id * self.d..(id + 1) * self.d]
    }

    pub fn y_true(&self) -> &[usize] {
        &self.y_true
    }
}

/// Examples with a hidden true label and an observed (possibly flipped) one.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    clean: CleanDataset,
    y_obs: Vec<usize>,
}

impl NoisyDataset {
    pub fn from_clean(clean: CleanDataset, y_obs: Vec<usize>) -> Result<Self> {
        if y_obs.len() != clean.len() {
            return Err(Error::param("observed labels do not match the dataset size"));
        }
        if y_obs.iter().any(|&y| y >= clean.c) {
            return Err(Error::param(format!("observed labels must lie in 0..{}", clean.c)));
        }
        Ok(NoisyDataset { clean, y_obs })
    }

    /// Observed labels equal to the true ones.
    pub fn noiseless(clean: CleanDataset) -> Self {
        let y_obs = clean.y_true.clone();
        NoisyDataset { clean, y_obs }
    }

    pub fn len(&self) -> usize {
        self.y_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_obs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.clean.c
    }

    pub fn dim(&self) -> usize {
        self.clean.d
    }

    pub fn x(&self, id: usize) -> &[f64] {
        self.clean.x(id)
    }

    pub fn y_true(&self) -> &[usize] {
        &self.clean.y_true
    }

    pub fn y_obs(&self) -> &[usize] {
        &self.y_obs
    }

    pub fn is_correct(&self, id: usize) -> bool {
        self.y_obs[id] == self.clean.y_true[id]
    }

    pub fn clean(&self) -> &CleanDataset {
        &self.clean
    }

    /// `n_i`: number of examples observed as each class.
    pub fn observed_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &y in &self.y_obs {
            counts[y] += 1;
        }
        counts
    }

    /// Fraction of examples whose observed label is wrong.
    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (0..self.len()).filter(|&i| !self.is_correct(i)).count() as f64 / self.len() as f64
    }

    /// The examples at `ids`, renumbered from zero in the given order.
    pub fn subset(&self, ids: &[usize]) -> NoisyDataset {
        let d = self.dim();
        let mut features = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            features.extend_from_slice(self.x(i));
        }
        NoisyDataset {
            clean: CleanDataset {
                c: self.classes(),
                d,
                features,
                y_true: ids.iter().map(|&i| self.clean.y_true[i]).collect(),
            },
            y_obs: ids.iter().map(|&i| self.y_obs[i]).collect(),
        }
    }

    /// CSV with header `id,x_0..x_{d-1},y_true,y_obs`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x_{j}")));
        header.push("y_true".into());
        header.push("y_obs".into());
        writer.write_record(&header)?;
        for id in 0..self.len() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.x(id).iter().map(|v| v.to_string()));
            rec.push(self.clean.y_true[id].to_string());
            rec.push(self.y_obs[id].to_string());
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, c: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        if header.len() < 4 {
            return Err(Error::param("dataset CSV needs id, features, y_true and y_obs columns"));
        }
        let d = header.len() - 3;
        let mut features = Vec::new();
        let mut y_true = Vec::new();
        let mut y_obs = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse_err = |what: &str| Error::param(format!("row {row}: bad {what}"));
            let id: usize = rec[0].parse().map_err(|_| parse_err("id"))?;
            if id != row {
                return Err(Error::param(format!("ids must be contiguous from 0, found {id} at row {row}")));
            }
            for j in 0..d {
                features.push(rec[1 + j].parse::<f64>().map_err(|_| parse_err("feature"))?);
            }
            y_true.push(rec[d + 1].parse().map_err(|_| parse_err("y_true"))?);
            y_obs.push(rec[d + 2].parse().map_err(|_| parse_err("y_obs"))?);
        }
        NoisyDataset::from_clean(CleanDataset::new(c, d, features, y_true)?, y_obs)
    }
}

/// Draws `n` examples: class from the prior, features from the class Gaussian,
/// resampled until the nearest centroid is the drawn class.
pub fn sample_dataset(task: &TaskSpec, n: usize, seed: u64) -> Result<CleanDataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    let classes = WeightedIndex::new(&task.prior).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = rng_stream(seed, 2);
    let mut features = Vec::with_capacity(n * task.d);
    let mut y_true = Vec::with_capacity(n);
    let mut x = vec![0.0; task.d];
    for _ in 0..n {
        let k = classes.sample(&mut rng);
        let mut attempts = 0;
        loop {
            for (xi, mi) in x.iter_mut().zip(&task.centroids[k]) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = mi + task.covariance_scale * z;
            }
            if target_concept(task, &x) == k {
                break;
            }
            attempts += 1;
            if attempts >= MAX_REJECTIONS {
                return Err(Error::param(format!("class {k} rejects nearly every draw; reduce covariance_scale")));
            }
        }
        features.extend_from_slice(&x);
        y_true.push(k);
    }
    CleanDataset::new(task.c, task.d, features, y_true)
}

/// A finite instance space: each point has a true class and a probability mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstanceSpace {
    pub classes: usize,
    pub true_class: Vec<usize>,
    pub mass: Vec<f64>,
}

impl FiniteInstanceSpace {
    pub fn new(classes: usize, true_class: Vec<usize>, mass: Vec<f64>) -> Result<Self> {
        if true_class.len() != mass.len() || true_class.is_empty() {
            return Err(Error::param("instance space needs one mass per point"));
        }
        if true_class.iter().any(|&y| y >= classes) {
            return Err(Error::param("true class out of range"));
        }
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::param("masses must be finite and non-negative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!("masses sum to {total}, not 1")));
        }
        Ok(FiniteInstanceSpace { classes, true_class, mass })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Random space: true classes uniform, masses from normalised uniforms.
    pub fn random(classes: usize, points: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_stream(seed, 3);
        let true_class = (0..points).map(|_| rng.random_range(0..classes)).collect();
        let raw: Vec<f64> = (0..points).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let mut mass: Vec<f64> = raw.iter().map(|m| m / total).collect();
        let drift: f64 = 1.0 - mass.iter().sum::<f64>();
        mass[0] += drift;
        Self::new(classes, true_class, mass)
    }
}
