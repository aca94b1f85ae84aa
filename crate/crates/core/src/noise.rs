//! Label-noise processes: symmetric, asymmetric and semantic corruption.
//!
//! All corruption flows through a row-stochastic transition matrix (row =
//! true class, column = observed class) or, for semantic noise, through the
//! predictive distribution of a deliberately under-trained classifier.
//!
//! Symmetric noise follows `eta_jc = eta / (|Y|-1)` off the diagonal and
//! `eta_cc = 1 - eta`, so a "flip" always lands on a different class and the
//! expected fraction of changed labels equals `eta` exactly.

use rand::Rng;
use thiserror::Error;

use crate::datagen::{onehot, LabeledDataset};
use crate::linalg::squared_distance;
use crate::net::{forward, ModelParams};
use crate::parallel;
use crate::rng::{seed_stream, TAG_NOISE};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model error: {0}")]
    Net(#[from] crate::net::NetError),
}

fn param_err<T>(msg: impl Into<String>) -> Result<T, NoiseError> {
    Err(NoiseError::Parameter(msg.into()))
}

/// Row-stochastic class-flip probabilities; row = true class, column =
/// observed class.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    class_count: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(class_count: usize) -> Self {
        let mut entries = vec![0.0; class_count * class_count];
        for c in 0..class_count {
            entries[c * class_count + c] = 1.0;
        }
        TransitionMatrix {
            class_count,
            entries,
        }
    }

    pub fn from_rows(class_count: usize, entries: Vec<f64>) -> Result<Self, NoiseError> {
        let m = TransitionMatrix {
            class_count,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, true_class: usize, observed: usize) -> f64 {
        self.entries[true_class * self.class_count + observed]
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        &self.entries[true_class * self.class_count..(true_class + 1) * self.class_count]
    }

    /// Entries in [0,1], every row summing to 1 within 1e-9.
    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.entries.len() != self.class_count * self.class_count {
            return param_err("transition matrix entry count mismatch");
        }
        for c in 0..self.class_count {
            let row = self.row(c);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return param_err(format!("row {c} has entries outside [0,1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return param_err(format!("row {c} sums to {sum}, expected 1"));
            }
        }
        Ok(())
    }

    /// Largest absolute entry-wise deviation from `other`.
    pub fn max_abs_deviation(&self, other: &TransitionMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Semantic,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "symmetric" => Ok(NoiseKind::Symmetric),
            "asymmetric" => Ok(NoiseKind::Asymmetric),
            "semantic" => Ok(NoiseKind::Semantic),
            other => Err(format!("unknown noise kind `{other}`")),
        }
    }
}

/// Declarative description of a noise process.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Class pairs for asymmetric noise, as (noisy class, target class).
    pub pair_map: Option<Vec<(usize, usize)>>,
    /// Under-trained classifier driving semantic noise.
    pub weak_model: Option<ModelParams>,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return param_err(format!("noise rate {} outside [0,1]", self.rate));
        }
        if let Some(pairs) = &self.pair_map {
            validate_pairs(pairs)?;
        }
        Ok(())
    }
}

fn validate_pairs(pairs: &[(usize, usize)]) -> Result<(), NoiseError> {
    for (i, &(from, to)) in pairs.iter().enumerate() {
        if from == to {
            return param_err(format!("pair {from}->{to} maps a class to itself"));
        }
        for &(f2, t2) in &pairs[..i] {
            if f2 == from {
                return param_err(format!("class {from} appears twice as a pair source"));
            }
            if t2 == to {
                return param_err(format!("class {to} appears twice as a pair target"));
            }
        }
    }
    Ok(())
}

/// Symmetric transition matrix: `1 - eta` on the diagonal, `eta / (|Y|-1)`
/// everywhere else.
pub fn symmetric_matrix(class_count: usize, eta: f64) -> Result<TransitionMatrix, NoiseError> {
    if class_count < 2 {
        return param_err("class_count must be >= 2");
    }
    if !(0.0..=1.0).contains(&eta) {
        return param_err(format!("eta {eta} outside [0,1]"));
    }
    let off = eta / (class_count as f64 - 1.0);
    let mut entries = vec![off; class_count * class_count];
    for c in 0..class_count {
        entries[c * class_count + c] = 1.0 - eta;
    }
    TransitionMatrix::from_rows(class_count, entries)
}

/// Asymmetric transition matrix: each mapped class keeps `1 - eta` and sends
/// `eta` to its pair target; unmapped classes stay put.
pub fn asymmetric_matrix(
    class_count: usize,
    eta: f64,
    pair_map: &[(usize, usize)],
) -> Result<TransitionMatrix, NoiseError> {
    if class_count < 2 {
        return param_err("class_count must be >= 2");
    }
    if !(0.0..=1.0).contains(&eta) {
        return param_err(format!("eta {eta} outside [0,1]"));
    }
    validate_pairs(pair_map)?;
    for &(from, to) in pair_map {
        if from >= class_count || to >= class_count {
            return param_err(format!("pair {from}->{to} out of class range"));
        }
    }
    let mut m = TransitionMatrix::identity(class_count);
    for &(from, to) in pair_map {
        m.entries[from * class_count + from] = 1.0 - eta;
        m.entries[from * class_count + to] = eta;
    }
    m.validate()?;
    Ok(m)
}

/// Inverse-CDF draw over a matrix row in class-id order; one uniform variate
/// per call keeps the stream layout fixed.
fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (j, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return j;
        }
    }
    row.len() - 1
}

/// Resamples every observed label from the matrix row of its clean class.
/// Features and clean labels are untouched.
pub fn inject(
    dataset: &LabeledDataset,
    matrix: &TransitionMatrix,
    seed: u64,
) -> Result<LabeledDataset, NoiseError> {
    if matrix.class_count != dataset.class_count {
        return param_err(format!(
            "matrix has {} classes, dataset has {}",
            matrix.class_count, dataset.class_count
        ));
    }
    matrix.validate()?;
    let mut rng = seed_stream(seed, TAG_NOISE, 0);
    let mut out = dataset.clone();
    for (i, &clean) in dataset.clean_labels.iter().enumerate() {
        let observed = sample_row(matrix.row(clean), &mut rng);
        out.noisy_labels[i] = onehot(observed, dataset.class_count);
    }
    Ok(out)
}

/// Flips a uniformly chosen fraction `eta` of samples by sampling from the
/// weak model's predictive distribution with the true class removed and the
/// remainder renormalised. A flipped sample therefore never keeps its clean
/// label.
pub fn inject_semantic(
    dataset: &LabeledDataset,
    weak_model: &ModelParams,
    eta: f64,
    seed: u64,
) -> Result<LabeledDataset, NoiseError> {
    if !(0.0..=1.0).contains(&eta) {
        return param_err(format!("eta {eta} outside [0,1]"));
    }
    if weak_model.class_count != dataset.class_count {
        return param_err(format!(
            "weak model has {} classes, dataset has {}",
            weak_model.class_count, dataset.class_count
        ));
    }
    let n = dataset.sample_count();
    let flip_count = ((eta * n as f64).round() as usize).min(n);
    let mut rng = seed_stream(seed, TAG_NOISE, 1);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates; the first flip_count entries form the flipped set.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut flip = vec![false; n];
    for &i in order.iter().take(flip_count) {
        flip[i] = true;
    }

    let predictions = parallel::map_collect(&dataset.features, |x| {
        forward(weak_model, x).map(|t| t.probs)
    });

    let mut out = dataset.clone();
    for i in 0..n {
        if !flip[i] {
            continue;
        }
        let probs = predictions[i].as_ref().map_err(|e| {
            NoiseError::Parameter(format!("weak model failed on sample {i}: {e}"))
        })?;
        let clean = dataset.clean_labels[i];
        let mut row = probs.clone();
        row[clean] = 0.0;
        let mass: f64 = row.iter().sum();
        if mass < 1e-12 {
            // weak model put ~all mass on the true class; fall back to uniform
            let u = 1.0 / (dataset.class_count as f64 - 1.0);
            for (c, v) in row.iter_mut().enumerate() {
                *v = if c == clean { 0.0 } else { u };
            }
        } else {
            for v in &mut row {
                *v /= mass;
            }
        }
        let observed = sample_row(&row, &mut rng);
        debug_assert_ne!(observed, clean);
        out.noisy_labels[i] = onehot(observed, dataset.class_count);
    }
    Ok(out)
}

/// Row-normalised confusion counts between clean and observed class ids.
/// Rows with no samples become identity rows.
pub fn empirical_transition(
    clean_labels: &[usize],
    noisy_labels: &[usize],
    class_count: usize,
) -> TransitionMatrix {
    assert_eq!(
        clean_labels.len(),
        noisy_labels.len(),
        "label slices must have equal length"
    );
    let mut counts = vec![0.0f64; class_count * class_count];
    for (&c, &j) in clean_labels.iter().zip(noisy_labels) {
        counts[c * class_count + j] += 1.0;
    }
    for c in 0..class_count {
        let row = &mut counts[c * class_count..(c + 1) * class_count];
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row[c] = 1.0;
        } else {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    TransitionMatrix {
        class_count,
        entries: counts,
    }
}

/// Index of the nearest other-class centroid for each sample; used to verify
/// that semantic flips concentrate on geometrically adjacent classes.
pub fn nearest_other_center(dataset: &LabeledDataset) -> Vec<usize> {
    let dim = dataset.dim();
    let mut centers = vec![vec![0.0; dim]; dataset.class_count];
    let mut counts = vec![0usize; dataset.class_count];
    for (x, &c) in dataset.features.iter().zip(&dataset.clean_labels) {
        for (acc, v) in centers[c].iter_mut().zip(x) {
            *acc += v;
        }
        counts[c] += 1;
    }
    for (center, &count) in centers.iter_mut().zip(&counts) {
        if count > 0 {
            for v in center.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    dataset
        .features
        .iter()
        .zip(&dataset.clean_labels)
        .map(|(x, &own)| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                if c == own {
                    continue;
                }
                let d = squared_distance(x, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}
