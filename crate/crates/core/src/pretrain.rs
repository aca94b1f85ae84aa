//! Label-free contrastive pre-training and exact nearest-neighbour mining.
//!
//! Pre-training never reads labels: each sample contributes two augmented
//! views, their normalised projections are pulled together and pushed away
//! from every other view in the batch (normalised temperature-scaled
//! cross-entropy), and only encoder and projection parameters are updated.
//! The resulting features feed an exact Euclidean K-nearest-neighbour search
//! whose output drives the clustering loss for the rest of training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::datagen::{augment, AugmentationPolicy, LabeledDataset};
use crate::linalg::{dot, squared_distance};
use crate::net::{
    backward_embed, forward, forward_embed, sgd_step, GradientBundle, ModelParams, SgdState,
};
use crate::parallel;
use crate::rng::{seed_stream, TAG_PRETRAIN};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model error: {0}")]
    Net(#[from] crate::net::NetError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn param_err<T>(msg: impl Into<String>) -> Result<T, PretrainError> {
    Err(PretrainError::Parameter(msg.into()))
}

/// Contrastive pre-training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            epochs: 100,
            batch_size: 128,
            embedding_dim: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.temperature > 0.0) {
            return param_err("temperature must be > 0");
        }
        if self.batch_size < 2 {
            return param_err("batch_size must be >= 2");
        }
        if !(self.lr >= 0.0) {
            return param_err("lr must be >= 0");
        }
        Ok(())
    }
}

/// Per-sample K-nearest-neighbour id sets over pre-trained features.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    neighbor_ids: Vec<Vec<u32>>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sample_count(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbor_ids[i]
    }

    /// Every list holds exactly `k` distinct ids, none of them the sample
    /// itself, all within range.
    pub fn validate(&self) -> Result<(), PretrainError> {
        let n = self.neighbor_ids.len();
        for (i, ids) in self.neighbor_ids.iter().enumerate() {
            if ids.len() != self.k {
                return param_err(format!("sample {i} lists {} neighbours, expected {}", ids.len(), self.k));
            }
            let mut seen = vec![false; n];
            for &j in ids {
                let j = j as usize;
                if j >= n {
                    return param_err(format!("sample {i} lists out-of-range neighbour {j}"));
                }
                if j == i {
                    return param_err(format!("sample {i} lists itself"));
                }
                if seen[j] {
                    return param_err(format!("sample {i} lists neighbour {j} twice"));
                }
                seen[j] = true;
            }
        }
        Ok(())
    }

    /// Writes one row of comma-separated neighbour ids per sample.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), PretrainError> {
        let path = path.as_ref();
        let mut out = String::new();
        for ids in &self.neighbor_ids {
            let mut first = true;
            for id in ids {
                if !first {
                    out.push(',');
                }
                let _ = write!(out, "{id}");
                first = false;
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| PretrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, PretrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PretrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut neighbor_ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ids: Result<Vec<u32>, _> = line.split(',').map(|f| f.trim().parse()).collect();
            let ids = ids.map_err(|_| PretrainError::Io {
                path: path.display().to_string(),
                message: format!("invalid neighbour id on line {}", lineno + 1),
            })?;
            neighbor_ids.push(ids);
        }
        let k = neighbor_ids.first().map_or(0, Vec::len);
        let index = NeighborIndex { k, neighbor_ids };
        index.validate()?;
        Ok(index)
    }
}

/// NT-Xent loss value and its gradient w.r.t. each embedding.
#[derive(Clone, Debug)]
pub struct NtxentOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Normalised temperature-scaled cross-entropy over `2B` embeddings arranged
/// as view pairs `(2i, 2i+1)`. Each embedding serves as an anchor whose
/// positive is its pair partner and whose negatives are every other view in
/// the batch; the loss is averaged over all `2B` anchors.
pub fn ntxent_loss(embeddings: &[Vec<f64>], temperature: f64) -> Result<NtxentOutput, PretrainError> {
    let m = embeddings.len();
    if m < 4 || m % 2 != 0 {
        return param_err("need an even number >= 4 of paired embeddings");
    }
    if !(temperature > 0.0) {
        return param_err("temperature must be > 0");
    }
    for (i, e) in embeddings.iter().enumerate() {
        let norm = crate::linalg::l2_norm(e);
        if (norm - 1.0).abs() > 1e-6 {
            return param_err(format!("embedding {i} has norm {norm}, expected 1"));
        }
    }

    // sim[a][b] = e_a . e_b
    let sims: Vec<Vec<f64>> =
        parallel::map_collect(embeddings, |ea| embeddings.iter().map(|eb| dot(ea, eb)).collect());

    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; embeddings[0].len()]; m];
    let scale = 1.0 / m as f64;
    for a in 0..m {
        let pos = a ^ 1;
        // stabilised log-sum-exp over all candidates b != a
        let mut max_logit = f64::NEG_INFINITY;
        for b in 0..m {
            if b != a {
                max_logit = max_logit.max(sims[a][b] / temperature);
            }
        }
        let mut z = 0.0;
        for b in 0..m {
            if b != a {
                z += ((sims[a][b] / temperature) - max_logit).exp();
            }
        }
        let log_z = max_logit + z.ln();
        loss += scale * (log_z - sims[a][pos] / temperature);

        // d/d e_a = (sum_b s_b e_b - e_pos) / T; d/d e_b += (s_b - [b==pos]) e_a / T
        for b in 0..m {
            if b == a {
                continue;
            }
            let s = ((sims[a][b] / temperature) - log_z).exp();
            let indicator = if b == pos { 1.0 } else { 0.0 };
            let coeff = scale * (s - indicator) / temperature;
            for (g, e) in grads[a].iter_mut().zip(&embeddings[b]) {
                *g += coeff * e;
            }
            for (g, e) in grads[b].iter_mut().zip(&embeddings[a]) {
                *g += coeff * e;
            }
        }
    }
    Ok(NtxentOutput { loss, grads })
}

/// Contrastive pre-training: updates encoder and projection, leaves the head
/// untouched, never reads labels.
pub fn pretrain(
    dataset: &LabeledDataset,
    params: &ModelParams,
    policy: &AugmentationPolicy,
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<ModelParams, PretrainError> {
    config.validate()?;
    policy
        .validate()
        .map_err(|e| PretrainError::Parameter(e.to_string()))?;
    let n = dataset.sample_count();
    let mut params = params.clone();
    // the head takes no part in pre-training; restored afterwards so not even
    // weight decay touches it
    let head_snapshot = params.head.clone();
    let mut state = SgdState::zeros_like(&params);
    for epoch in 0..config.epochs {
        let mut rng = seed_stream(seed, TAG_PRETRAIN, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            // two augmented views per sample, drawn on one stream in batch order
            let mut views = Vec::with_capacity(batch.len() * 2);
            for &i in batch {
                views.push(augment(&dataset.features[i], policy, &mut rng));
                views.push(augment(&dataset.features[i], policy, &mut rng));
            }
            let traces = parallel::map_collect(&views, |v| forward_embed(&params, v));
            let mut embeddings = Vec::with_capacity(views.len());
            for t in &traces {
                match t {
                    Ok(t) => embeddings.push(t.embedding.clone()),
                    Err(e) => return Err(PretrainError::Parameter(e.to_string())),
                }
            }
            let out = ntxent_loss(&embeddings, config.temperature)?;
            let per_view: Vec<GradientBundle> = parallel::map_indexed(views.len(), |v| {
                backward_embed(&params, traces[v].as_ref().unwrap(), &out.grads[v])
            });
            let mut total = GradientBundle::zeros_like(&params);
            for g in &per_view {
                total.add_assign(g);
            }
            sgd_step(
                &mut params,
                &total,
                &mut state,
                config.lr,
                config.momentum,
                config.weight_decay,
            );
        }
    }
    params.head = head_snapshot;
    Ok(params)
}

/// Encoder features `f_phi(x)` for every sample.
pub fn encoder_features(
    params: &ModelParams,
    dataset: &LabeledDataset,
) -> Result<Vec<Vec<f64>>, PretrainError> {
    let traces = parallel::map_collect(&dataset.features, |x| forward(params, x));
    let mut out = Vec::with_capacity(traces.len());
    for t in traces {
        out.push(t?.features);
    }
    Ok(out)
}

/// Exact Euclidean K-nearest neighbours for every sample, self excluded,
/// distance ties broken toward the smaller sample id.
pub fn mine_knn(features: &[Vec<f64>], k: usize) -> Result<NeighborIndex, PretrainError> {
    let n = features.len();
    if k == 0 {
        return param_err("k must be >= 1");
    }
    if k >= n {
        return param_err(format!("k = {k} must be < sample count {n}"));
    }
    let neighbor_ids = parallel::map_indexed(n, |i| {
        let mut candidates: Vec<(f64, u32)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(&features[i], &features[j]), j as u32))
            .collect();
        candidates.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        candidates.truncate(k);
        candidates.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        candidates.into_iter().map(|(_, j)| j).collect()
    });
    let index = NeighborIndex { k, neighbor_ids };
    debug_assert!(index.validate().is_ok());
    Ok(index)
}
