//! Desk-scale dataset generation, CSV ingestion and stochastic augmentation.
//!
//! Datasets are low-dimensional real vectors with a hidden clean label per
//! sample (kept for noise injection and evaluation only) and an observed
//! one-hot label that noise processes overwrite. Augmentation maps the
//! geometric/visual transformations used on images to their vector analogues:
//! additive Gaussian noise, a global scale jitter and optional per-axis sign
//! flips.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{seed_stream, TAG_DATA};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn param_err<T>(msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Parameter(msg.into()))
}

/// Returns the one-hot vector for `class` over `count` classes.
pub fn onehot(class: usize, count: usize) -> Vec<f64> {
    let mut v = vec![0.0; count];
    v[class] = 1.0;
    v
}

/// Argmax with ties broken toward the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Feature vectors with hidden clean labels and observed noisy one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub clean_labels: Vec<usize>,
    pub noisy_labels: Vec<Vec<f64>>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn sample_count(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Observed class id of sample `i` (argmax of its one-hot label).
    pub fn noisy_class(&self, i: usize) -> usize {
        argmax(&self.noisy_labels[i])
    }

    /// Whether the observed label of sample `i` still equals its clean label.
    pub fn is_truly_clean(&self, i: usize) -> bool {
        self.noisy_class(i) == self.clean_labels[i]
    }

    /// Checks every structural invariant, returning a parameter error on the
    /// first violation.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.features.len();
        if self.clean_labels.len() != n || self.noisy_labels.len() != n {
            return param_err("features, clean_labels and noisy_labels must have equal length");
        }
        if n == 0 {
            return param_err("dataset is empty");
        }
        let dim = self.features[0].len();
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != dim {
                return param_err(format!("sample {i} has dimension {} != {dim}", f.len()));
            }
        }
        for (i, &c) in self.clean_labels.iter().enumerate() {
            if c >= self.class_count {
                return param_err(format!("clean label {c} of sample {i} out of range"));
            }
        }
        for (i, y) in self.noisy_labels.iter().enumerate() {
            if y.len() != self.class_count {
                return param_err(format!("noisy label of sample {i} has wrong arity"));
            }
            let mut ones = 0usize;
            for &v in y {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return param_err(format!("noisy label of sample {i} is not one-hot"));
                }
            }
            if ones != 1 {
                return param_err(format!("noisy label of sample {i} must have exactly one 1"));
            }
        }
        Ok(())
    }
}

/// Stochastic augmentation policy: additive noise, global scale jitter and
/// optional per-axis sign flips.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub additive_noise_sigma: f64,
    /// Inclusive jitter interval; must contain 1.
    pub scale_jitter: (f64, f64),
    /// Axes eligible for a random sign flip. Empty means no flips.
    pub flip_axes: Vec<bool>,
}

impl AugmentationPolicy {
    /// The identity policy: no noise, unit jitter, no flips.
    pub fn identity() -> Self {
        AugmentationPolicy {
            additive_noise_sigma: 0.0,
            scale_jitter: (1.0, 1.0),
            flip_axes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.additive_noise_sigma < 0.0 {
            return param_err("additive_noise_sigma must be >= 0");
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0) {
            return param_err("scale jitter lower bound must be > 0");
        }
        if lo > 1.0 || hi < 1.0 {
            return param_err("scale jitter interval must contain 1");
        }
        Ok(())
    }
}

/// Applies `policy` to `x`: additive noise, then one global scale factor,
/// then sign flips on eligible axes. Draw order is fixed so equal rng states
/// give equal outputs.
pub fn augment<R: Rng>(x: &[f64], policy: &AugmentationPolicy, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    if policy.additive_noise_sigma > 0.0 {
        for v in &mut out {
            let z: f64 = rng.sample(StandardNormal);
            *v += policy.additive_noise_sigma * z;
        }
    }
    let (lo, hi) = policy.scale_jitter;
    if lo < hi {
        let s = rng.gen_range(lo..=hi);
        for v in &mut out {
            *v *= s;
        }
    }
    for (k, &flip) in policy.flip_axes.iter().enumerate().take(out.len()) {
        if flip && rng.gen::<bool>() {
            out[k] = -out[k];
        }
    }
    out
}

/// Cluster centres for `class_count` isotropic blobs: evenly spaced on a
/// circle in the first two feature axes, radius scaled with the spread so the
/// clusters stay separated.
fn blob_centers(class_count: usize, dim: usize, spread: f64) -> Vec<Vec<f64>> {
    let radius = 4.0 * spread * (class_count as f64).sqrt();
    (0..class_count)
        .map(|c| {
            let mut center = vec![0.0; dim];
            if dim == 1 {
                center[0] = c as f64 * 6.0 * spread;
            } else {
                let angle = std::f64::consts::TAU * c as f64 / class_count as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

/// Generates one isotropic Gaussian cluster per class. Noisy labels start
/// equal to the clean one-hot labels.
pub fn generate_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if class_count < 2 {
        return param_err("class_count must be >= 2");
    }
    if per_class < 1 {
        return param_err("per_class must be >= 1");
    }
    if dim < 1 {
        return param_err("dim must be >= 1");
    }
    if !(spread > 0.0) {
        return param_err("spread must be > 0");
    }
    let centers = blob_centers(class_count, dim, spread);
    let mut rng = seed_stream(seed, TAG_DATA, 0);
    let n = class_count * per_class;
    let mut features = Vec::with_capacity(n);
    let mut clean_labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i / per_class;
        let mut x = centers[class].clone();
        for v in &mut x {
            let z: f64 = rng.sample(StandardNormal);
            *v += spread * z;
        }
        features.push(x);
        clean_labels.push(class);
    }
    let noisy_labels = clean_labels.iter().map(|&c| onehot(c, class_count)).collect();
    Ok(LabeledDataset {
        features,
        clean_labels,
        noisy_labels,
        class_count,
    })
}

/// Generates concentric annuli, one per class, at radii
/// `radius_step, 2*radius_step, ...` in two dimensions.
pub fn generate_rings(
    class_count: usize,
    per_class: usize,
    radius_step: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if class_count < 2 {
        return param_err("class_count must be >= 2");
    }
    if per_class < 1 {
        return param_err("per_class must be >= 1");
    }
    if !(radius_step > 0.0) {
        return param_err("radius_step must be > 0");
    }
    if noise_sigma < 0.0 {
        return param_err("noise_sigma must be >= 0");
    }
    let mut rng = seed_stream(seed, TAG_DATA, 0);
    let n = class_count * per_class;
    let mut features = Vec::with_capacity(n);
    let mut clean_labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i / per_class;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut radius = (class as f64 + 1.0) * radius_step;
        if noise_sigma > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            radius += noise_sigma * z;
        }
        features.push(vec![radius * angle.cos(), radius * angle.sin()]);
        clean_labels.push(class);
    }
    let noisy_labels = clean_labels.iter().map(|&c| onehot(c, class_count)).collect();
    Ok(LabeledDataset {
        features,
        clean_labels,
        noisy_labels,
        class_count,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a dataset from CSV. Expects a header `f0,...,f{d-1},label` with an
/// optional trailing `noisy_label` column (as written by the noise CLI).
/// Class count is inferred as `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_noisy = cols.last() == Some(&"noisy_label");
    let label_cols = if has_noisy { 2 } else { 1 };
    if cols.len() < label_cols + 1 {
        return Err(DataError::Parse {
            line: 1,
            message: "header must list at least one feature column and `label`".into(),
        });
    }
    let dim = cols.len() - label_cols;
    for (k, name) in cols.iter().take(dim).enumerate() {
        if *name != format!("f{k}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("expected feature column `f{k}`, found `{name}`"),
            });
        }
    }
    if cols[dim] != "label" {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected column `label`, found `{}`", cols[dim]),
        });
    }

    let mut features = Vec::new();
    let mut clean_labels = Vec::new();
    let mut noisy_classes = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let mut x = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("invalid float `{f}`"),
            })?;
            x.push(v);
        }
        let label: usize = fields[dim].parse().map_err(|_| DataError::Parse {
            line: lineno,
            message: format!("invalid label `{}`", fields[dim]),
        })?;
        if has_noisy {
            let noisy: usize = fields[dim + 1].parse().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("invalid noisy_label `{}`", fields[dim + 1]),
            })?;
            noisy_classes.push(noisy);
        }
        features.push(x);
        clean_labels.push(label);
    }
    if features.is_empty() {
        return Err(DataError::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let max_label = clean_labels.iter().copied().max().unwrap_or(0);
    let max_noisy = noisy_classes.iter().copied().max().unwrap_or(0);
    let class_count = (max_label.max(max_noisy) + 1).max(2);
    for (i, &c) in noisy_classes.iter().enumerate() {
        if c >= class_count {
            return param_err(format!("noisy label {c} of row {i} out of range"));
        }
    }
    let noisy_labels = if has_noisy {
        noisy_classes.iter().map(|&c| onehot(c, class_count)).collect()
    } else {
        clean_labels.iter().map(|&c| onehot(c, class_count)).collect()
    };
    let ds = LabeledDataset {
        features,
        clean_labels,
        noisy_labels,
        class_count,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset as CSV. With `include_noisy` the observed class is
/// appended as a `noisy_label` column. Floats are written in shortest
/// round-trip form, so save→load reproduces them bit-exactly.
pub fn save_csv(
    ds: &LabeledDataset,
    path: impl AsRef<Path>,
    include_noisy: bool,
) -> Result<(), DataError> {
    let path = path.as_ref();
    let dim = ds.dim();
    let mut out = String::new();
    for k in 0..dim {
        let _ = write!(out, "f{k},");
    }
    out.push_str("label");
    if include_noisy {
        out.push_str(",noisy_label");
    }
    out.push('\n');
    for i in 0..ds.sample_count() {
        for v in &ds.features[i] {
            let _ = write!(out, "{v},");
        }
        let _ = write!(out, "{}", ds.clean_labels[i]);
        if include_noisy {
            let _ = write!(out, ",{}", ds.noisy_class(i));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
