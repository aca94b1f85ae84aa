//! Training objectives: the semi-supervised classification loss over mixed
//! batches, the neighbour-consistency clustering loss with its latent pair
//! assignment, and the warm-up cross-entropy.
//!
//! The clustering side works purely on predictions and the neighbour index;
//! it never reads observed labels. Pair weights `q` are binary: a neighbour
//! pair is active exactly when both samples share the same argmax prediction,
//! re-estimated from the previous parameters at the start of each epoch.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::datagen::{argmax, augment, AugmentationPolicy, LabeledDataset};
use crate::linalg::dot;
use crate::net::{backward, clamped_ln, forward, GradientBundle, ModelParams, PROB_CLAMP};
use crate::parallel;
use crate::pretrain::NeighborIndex;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("model error: {0}")]
    Net(#[from] crate::net::NetError),
}

fn param_err<T>(msg: impl Into<String>) -> Result<T, LossError> {
    Err(LossError::Parameter(msg.into()))
}

/// MixMatch construction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixConfig {
    /// Beta distribution parameter for the MixUp coefficient.
    pub alpha: f64,
    /// Weight of the noisy-set loss.
    pub lambda_u: f64,
    /// Weight of the mean-prediction regulariser.
    pub lambda_r: f64,
    /// Sharpening temperature applied to guessed/refined targets.
    pub sharpen_t: f64,
    /// Augmented views per sample.
    pub num_augments: usize,
    /// Uniform prior over classes, entries all `1/|Y|`.
    pub uniform_prior: Vec<f64>,
}

impl MixConfig {
    pub fn new(class_count: usize) -> Self {
        MixConfig {
            alpha: 4.0,
            lambda_u: 25.0,
            lambda_r: 1.0,
            sharpen_t: 0.5,
            num_augments: 2,
            uniform_prior: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.uniform_prior.len()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) {
            return param_err("alpha must be > 0");
        }
        if self.lambda_u < 0.0 || self.lambda_r < 0.0 {
            return param_err("lambda_u and lambda_r must be >= 0");
        }
        if !(self.sharpen_t > 0.0) {
            return param_err("sharpen_t must be > 0");
        }
        if self.num_augments < 1 {
            return param_err("num_augments must be >= 1");
        }
        let c = self.uniform_prior.len();
        if c < 2 {
            return param_err("uniform prior needs at least 2 classes");
        }
        for &v in &self.uniform_prior {
            if (v - 1.0 / c as f64).abs() > 1e-12 {
                return param_err("uniform prior entries must all equal 1/|Y|");
            }
        }
        Ok(())
    }
}

/// Clustering loss parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    /// Weight of the entropy term.
    pub lambda_e: f64,
    /// Floor applied to prediction inner products before the logarithm.
    pub prob_clamp: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            lambda_e: 2.0,
            prob_clamp: PROB_CLAMP,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_e < 0.0 {
            return param_err("lambda_e must be >= 0");
        }
        if !(self.prob_clamp > 0.0) {
            return param_err("prob_clamp must be > 0");
        }
        Ok(())
    }
}

/// Sparse binary pair assignment: `agreed(i)` lists the neighbours of `i`
/// whose argmax prediction matches; absent pairs mean `q = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QAssignment {
    agreed: Vec<Vec<u32>>,
}

impl QAssignment {
    pub fn agreed(&self, i: usize) -> &[u32] {
        &self.agreed[i]
    }

    pub fn sample_count(&self) -> usize {
        self.agreed.len()
    }

    pub fn pair_count(&self) -> usize {
        self.agreed.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.agreed[i].contains(&(j as u32))
    }
}

/// Marks each neighbour pair whose argmax predictions agree. Argmax ties
/// break toward the smaller class id.
pub fn estimate_q(predictions: &[Vec<f64>], knn: &NeighborIndex) -> QAssignment {
    assert_eq!(
        predictions.len(),
        knn.sample_count(),
        "predictions must cover all samples"
    );
    let classes: Vec<usize> = predictions.iter().map(|p| argmax(p)).collect();
    let agreed = parallel::map_indexed(predictions.len(), |i| {
        knn.neighbors(i)
            .iter()
            .copied()
            .filter(|&j| classes[j as usize] == classes[i])
            .collect()
    });
    QAssignment { agreed }
}

/// One element of a divided set fed to MixMatch: the input, its current
/// label (observed one-hot for clean samples) and its clean posterior.
#[derive(Clone, Debug)]
pub struct DividedItem {
    pub input: Vec<f64>,
    pub label: Vec<f64>,
    pub p_clean: f64,
}

/// A mixed input/target pair.
#[derive(Clone, Debug)]
pub struct MixItem {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// MixMatch output: clean-anchored and noisy-anchored mixed sets.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub x_prime: Vec<MixItem>,
    pub u_prime: Vec<MixItem>,
    /// Set when the clean side was empty and the most-confident noisy
    /// samples were promoted instead.
    pub fallback_used: bool,
}

/// Temperature sharpening: `p_c^(1/t)`, renormalised.
pub fn sharpen(p: &[f64], t: f64) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&v| v.max(0.0).powf(1.0 / t)).collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for v in &mut out {
            *v /= sum;
        }
    }
    out
}

/// Convex combination of two input/target pairs with coefficient
/// `lam_prime` on the anchor; `lam_prime >= 0.5` keeps the anchor dominant.
pub fn mixup(
    anchor_input: &[f64],
    anchor_target: &[f64],
    partner_input: &[f64],
    partner_target: &[f64],
    lam_prime: f64,
) -> MixItem {
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| lam_prime * x + (1.0 - lam_prime) * y)
            .collect()
    };
    MixItem {
        input: mix(anchor_input, partner_input),
        target: mix(anchor_target, partner_target),
    }
}

fn mean_augmented_prediction<R: Rng>(
    params: &ModelParams,
    input: &[f64],
    policy: &AugmentationPolicy,
    m: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), LossError> {
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        views.push(augment(input, policy, rng));
    }
    let mut mean = vec![0.0; params.class_count];
    for view in &views {
        let trace = forward(params, view)?;
        for (acc, p) in mean.iter_mut().zip(&trace.probs) {
            *acc += p / m as f64;
        }
    }
    Ok((views, mean))
}

/// Builds the mixed sets: augmentation, label co-refinement on the clean
/// side, label guessing on the noisy side, temperature sharpening, then
/// MixUp against a shuffled union with the anchor kept dominant.
pub fn mixmatch<R: Rng>(
    clean: &[DividedItem],
    noisy: &[DividedItem],
    params: &ModelParams,
    policy: &AugmentationPolicy,
    config: &MixConfig,
    rng: &mut R,
) -> Result<MixedBatch, LossError> {
    config.validate()?;
    policy
        .validate()
        .map_err(|e| LossError::Parameter(e.to_string()))?;
    if clean.is_empty() && noisy.is_empty() {
        return param_err("both divided sets are empty");
    }

    // Empty clean set: promote the most-confident noisy samples (one per
    // class) so the supervised term stays defined.
    let mut promoted: Vec<DividedItem> = Vec::new();
    let mut remaining: Vec<&DividedItem> = Vec::new();
    let fallback_used = clean.is_empty();
    let (clean_view, noisy_view): (Vec<&DividedItem>, Vec<&DividedItem>) = if fallback_used {
        let mut order: Vec<usize> = (0..noisy.len()).collect();
        order.sort_by(|&a, &b| {
            noisy[b]
                .p_clean
                .partial_cmp(&noisy[a].p_clean)
                .unwrap()
                .then(a.cmp(&b))
        });
        let take = config.class_count().min(noisy.len());
        for (rank, &idx) in order.iter().enumerate() {
            if rank < take {
                promoted.push(noisy[idx].clone());
            } else {
                remaining.push(&noisy[idx]);
            }
        }
        (promoted.iter().collect(), remaining.clone())
    } else {
        (clean.iter().collect(), noisy.iter().collect())
    };

    let m = config.num_augments;
    let t = config.sharpen_t;
    let mut anchors_clean: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(clean_view.len() * m);
    for item in &clean_view {
        let (views, mean) = mean_augmented_prediction(params, &item.input, policy, m, rng)?;
        let w = item.p_clean;
        let refined: Vec<f64> = item
            .label
            .iter()
            .zip(&mean)
            .map(|(y, p)| w * y + (1.0 - w) * p)
            .collect();
        let target = sharpen(&refined, t);
        for view in views {
            anchors_clean.push((view, target.clone()));
        }
    }
    let mut anchors_noisy: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(noisy_view.len() * m);
    for item in &noisy_view {
        let (views, mean) = mean_augmented_prediction(params, &item.input, policy, m, rng)?;
        let target = sharpen(&mean, t);
        for view in views {
            anchors_noisy.push((view, target.clone()));
        }
    }

    let nc = anchors_clean.len();
    let all: Vec<&(Vec<f64>, Vec<f64>)> =
        anchors_clean.iter().chain(anchors_noisy.iter()).collect();
    let mut perm: Vec<usize> = (0..all.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let beta = Beta::new(config.alpha, config.alpha)
        .map_err(|e| LossError::Parameter(format!("invalid alpha: {e}")))?;

    let mut x_prime = Vec::with_capacity(nc);
    let mut u_prime = Vec::with_capacity(all.len() - nc);
    for (k, anchor) in all.iter().enumerate() {
        let partner = all[perm[k]];
        let lam: f64 = beta.sample(rng);
        let lam_prime = lam.max(1.0 - lam);
        let item = mixup(&anchor.0, &anchor.1, &partner.0, &partner.1, lam_prime);
        if k < nc {
            x_prime.push(item);
        } else {
            u_prime.push(item);
        }
    }
    Ok(MixedBatch {
        x_prime,
        u_prime,
        fallback_used,
    })
}

/// Semi-supervised loss value with its three components.
#[derive(Clone, Debug)]
pub struct MleOutput {
    pub total: f64,
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_r: f64,
    pub grads: GradientBundle,
}

/// `loss_x + lambda_u * loss_u + lambda_r * loss_r` over a mixed batch:
/// cross-entropy on the clean-anchored set, squared error on the
/// noisy-anchored set, and the KL of the uniform prior against the mean
/// prediction over both sets.
pub fn loss_mle(
    params: &ModelParams,
    batch: &MixedBatch,
    config: &MixConfig,
) -> Result<MleOutput, LossError> {
    config.validate()?;
    let nx = batch.x_prime.len();
    let nu = batch.u_prime.len();
    if nx == 0 && nu == 0 {
        return param_err("mixed batch is empty");
    }
    let n_total = nx + nu;
    let c = config.class_count();

    let items: Vec<&MixItem> = batch.x_prime.iter().chain(batch.u_prime.iter()).collect();
    let traces = {
        let params = &params;
        parallel::map_collect(&items, move |item| forward(params, &item.input))
    };
    let mut probs = Vec::with_capacity(n_total);
    for t in &traces {
        match t {
            Ok(t) => probs.push(&t.probs),
            Err(e) => return Err(LossError::Net(crate::net::NetError::ShapeMismatch(e.to_string()))),
        }
    }

    let mut mean_pred = vec![0.0; c];
    for p in &probs {
        for (acc, v) in mean_pred.iter_mut().zip(p.iter()) {
            *acc += v / n_total as f64;
        }
    }

    let mut loss_x = 0.0;
    let mut loss_u = 0.0;
    for (k, item) in items.iter().enumerate() {
        if k < nx {
            for (t, p) in item.target.iter().zip(probs[k]) {
                if *t != 0.0 {
                    loss_x -= t * clamped_ln(*p).0;
                }
            }
        } else {
            for (t, p) in item.target.iter().zip(probs[k]) {
                let d = t - p;
                loss_u += d * d;
            }
        }
    }
    if nx > 0 {
        loss_x /= nx as f64;
    }
    if nu > 0 {
        loss_u /= nu as f64;
    }
    let mut loss_r = 0.0;
    let mut d_mean = vec![0.0; c];
    for (pi, (pc, dm)) in config
        .uniform_prior
        .iter()
        .zip(mean_pred.iter().zip(d_mean.iter_mut()))
    {
        let (ln_pc, dln) = clamped_ln(*pc);
        loss_r += pi * (pi.ln() - ln_pc);
        *dm = -pi * dln;
    }
    let total = loss_x + config.lambda_u * loss_u + config.lambda_r * loss_r;

    // Upstream gradient per item: its own term plus the shared mean-prediction
    // path of the regulariser.
    let upstreams: Vec<Vec<f64>> = items
        .iter()
        .enumerate()
        .map(|(k, item)| {
            let mut up = vec![0.0; c];
            if k < nx {
                for ((u, t), p) in up.iter_mut().zip(&item.target).zip(probs[k]) {
                    if *t != 0.0 {
                        *u -= t * clamped_ln(*p).1 / nx as f64;
                    }
                }
            } else {
                for ((u, t), p) in up.iter_mut().zip(&item.target).zip(probs[k]) {
                    *u += config.lambda_u * 2.0 * (p - t) / nu as f64;
                }
            }
            for (u, dm) in up.iter_mut().zip(&d_mean) {
                *u += config.lambda_r * dm / n_total as f64;
            }
            up
        })
        .collect();

    let bundles = parallel::map_indexed(n_total, |k| {
        backward(params, traces[k].as_ref().unwrap(), Some(&upstreams[k]), None)
    });
    let mut grads = GradientBundle::zeros_like(params);
    for b in &bundles {
        grads.add_assign(b);
    }
    Ok(MleOutput {
        total,
        loss_x,
        loss_u,
        loss_r,
        grads,
    })
}

/// Clustering loss value with its two components.
#[derive(Clone, Debug)]
pub struct ScanOutput {
    pub total: f64,
    pub loss_n: f64,
    pub loss_e: f64,
    pub grads: GradientBundle,
}

/// Clustering loss over the whole dataset: see [`loss_scan_anchors`].
pub fn loss_scan(
    params: &ModelParams,
    dataset: &LabeledDataset,
    knn: &NeighborIndex,
    q: &QAssignment,
    config: &ScanConfig,
) -> Result<ScanOutput, LossError> {
    let anchors: Vec<usize> = (0..dataset.sample_count()).collect();
    loss_scan_anchors(params, dataset, knn, q, config, &anchors)
}

/// Neighbour-consistency plus entropy loss over a set of anchor samples.
///
/// `loss_n` sums `-log(p_i . p_j)` over active pairs, averaged over the
/// anchors, with the inner product floored at `prob_clamp`; gradients flow
/// through both factors, including neighbours outside the anchor set.
/// `loss_e` is the negative entropy of the anchor-mean prediction: adding it
/// with positive weight and minimising maximises the entropy.
pub fn loss_scan_anchors(
    params: &ModelParams,
    dataset: &LabeledDataset,
    knn: &NeighborIndex,
    q: &QAssignment,
    config: &ScanConfig,
    anchors: &[usize],
) -> Result<ScanOutput, LossError> {
    config.validate()?;
    if q.sample_count() != knn.sample_count() {
        return param_err("pair assignment does not match neighbour index");
    }
    if anchors.is_empty() {
        return param_err("anchor set is empty");
    }
    let n = dataset.sample_count();
    let n_a = anchors.len() as f64;

    // involved = anchors plus their active neighbours, in ascending id order
    let mut involved_mask = vec![false; n];
    for &i in anchors {
        involved_mask[i] = true;
        for &j in q.agreed(i) {
            involved_mask[j as usize] = true;
        }
    }
    let involved: Vec<usize> = (0..n).filter(|&i| involved_mask[i]).collect();
    let mut slot_of = vec![usize::MAX; n];
    for (slot, &i) in involved.iter().enumerate() {
        slot_of[i] = slot;
    }

    let traces = parallel::map_collect(&involved, |&i| forward(params, &dataset.features[i]));
    let mut probs: Vec<&[f64]> = Vec::with_capacity(involved.len());
    for t in &traces {
        match t {
            Ok(t) => probs.push(&t.probs),
            Err(e) => return Err(LossError::Net(crate::net::NetError::ShapeMismatch(e.to_string()))),
        }
    }

    let c = params.class_count;
    let mut mean_pred = vec![0.0; c];
    for &i in anchors {
        for (acc, v) in mean_pred.iter_mut().zip(probs[slot_of[i]]) {
            *acc += v / n_a;
        }
    }

    let mut upstreams = vec![vec![0.0; c]; involved.len()];
    let mut loss_n = 0.0;
    for &i in anchors {
        let si = slot_of[i];
        for &j in q.agreed(i) {
            let sj = slot_of[j as usize];
            let s = dot(probs[si], probs[sj]);
            if s > 1.0 + 1e-9 {
                return Err(LossError::Numeric(format!(
                    "prediction inner product {s} exceeds 1"
                )));
            }
            if s >= config.prob_clamp {
                loss_n -= s.ln() / n_a;
                let coeff = -1.0 / (s * n_a);
                for (u, p) in upstreams[si].iter_mut().zip(probs[sj]) {
                    *u += coeff * p;
                }
                for (u, p) in upstreams[sj].iter_mut().zip(probs[si]) {
                    *u += coeff * p;
                }
            } else {
                loss_n -= config.prob_clamp.ln() / n_a;
            }
        }
    }

    let mut loss_e = 0.0;
    let mut d_mean = vec![0.0; c];
    for (pc, dm) in mean_pred.iter().zip(d_mean.iter_mut()) {
        if *pc > 0.0 {
            let (ln_pc, dln) = clamped_ln(*pc);
            loss_e += pc * ln_pc;
            *dm = ln_pc + pc * dln; // = ln p + 1 away from the clamp
        }
    }
    for &i in anchors {
        let si = slot_of[i];
        for (u, dm) in upstreams[si].iter_mut().zip(&d_mean) {
            *u += config.lambda_e * dm / n_a;
        }
    }

    let total = loss_n + config.lambda_e * loss_e;
    let bundles = parallel::map_indexed(involved.len(), |slot| {
        backward(params, traces[slot].as_ref().unwrap(), Some(&upstreams[slot]), None)
    });
    let mut grads = GradientBundle::zeros_like(params);
    for b in &bundles {
        grads.add_assign(b);
    }
    Ok(ScanOutput {
        total,
        loss_n,
        loss_e,
        grads,
    })
}

/// Mean cross-entropy against the observed noisy labels over the whole set.
pub fn warmup_loss(
    params: &ModelParams,
    dataset: &LabeledDataset,
) -> Result<(f64, GradientBundle), LossError> {
    let ids: Vec<usize> = (0..dataset.sample_count()).collect();
    warmup_loss_batch(params, dataset, &ids)
}

/// Mean cross-entropy against the observed noisy labels over `ids`.
pub fn warmup_loss_batch(
    params: &ModelParams,
    dataset: &LabeledDataset,
    ids: &[usize],
) -> Result<(f64, GradientBundle), LossError> {
    if ids.is_empty() {
        return param_err("empty batch");
    }
    let n = ids.len() as f64;
    let traces = parallel::map_collect(ids, |&i| forward(params, &dataset.features[i]));
    let mut loss = 0.0;
    let mut bundles = Vec::with_capacity(ids.len());
    for (k, t) in traces.iter().enumerate() {
        let trace = match t {
            Ok(t) => t,
            Err(e) => return Err(LossError::Net(crate::net::NetError::ShapeMismatch(e.to_string()))),
        };
        let target = &dataset.noisy_labels[ids[k]];
        let mut upstream = vec![0.0; params.class_count];
        for ((u, y), p) in upstream.iter_mut().zip(target).zip(&trace.probs) {
            if *y != 0.0 {
                let (ln_p, dln) = clamped_ln(*p);
                loss -= y * ln_p / n;
                *u = -y * dln / n;
            }
        }
        bundles.push((trace, upstream));
    }
    let per_sample = parallel::map_collect(&bundles, |(trace, upstream)| {
        backward(params, trace, Some(upstream), None)
    });
    let mut grads = GradientBundle::zeros_like(params);
    for b in &per_sample {
        grads.add_assign(b);
    }
    Ok((loss, grads))
}
