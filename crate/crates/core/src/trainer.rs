//! Training orchestration: warm-up, the per-epoch EM loop, baseline modes and
//! evaluation.
//!
//! Each epoch of the full procedure runs: per-sample losses -> GMM fit ->
//! clean/noisy split -> latent pair assignment from the pre-update
//! predictions -> a pass of semi-supervised mini-batches -> a pass of
//! clustering mini-batches whose learning rate is gated by the predicted
//! noise rate. Baseline modes drop stages: `ce_only` trains on the observed
//! labels throughout, `ssl_only` skips pre-training and clustering,
//! `pretrain_ssl` keeps pre-training but skips clustering.
//!
//! Randomness is drawn from per-epoch streams, so a run restarted from a
//! checkpoint reproduces the remaining epochs exactly.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;

use crate::datagen::{argmax, onehot, AugmentationPolicy, LabeledDataset};
use crate::divide::{
    clean_posterior, fit_gmm_1d, normalize_losses, per_sample_losses, split, DivideError,
};
use crate::losses::{
    estimate_q, loss_mle, loss_scan_anchors, mixmatch, warmup_loss_batch, DividedItem, LossError,
    MixConfig, ScanConfig,
};
use crate::net::{forward, sgd_step, ModelParams, NetConfig, SgdState};
use crate::parallel;
use crate::pretrain::{
    encoder_features, mine_knn, pretrain, ContrastiveConfig, NeighborIndex, PretrainError,
};
use crate::rng::{seed_stream, TAG_CLUSTER, TAG_MLE, TAG_WARMUP};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite loss at epoch {epoch} ({context})")]
    NonFinite { epoch: usize, context: String },
    #[error("data error: {0}")]
    Data(#[from] crate::datagen::DataError),
    #[error("model error: {0}")]
    Net(#[from] crate::net::NetError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("divide error: {0}")]
    Divide(#[from] DivideError),
    #[error("pretrain error: {0}")]
    Pretrain(#[from] PretrainError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn param_err<T>(msg: impl Into<String>) -> Result<T, TrainError> {
    Err(TrainError::Parameter(msg.into()))
}

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    ScanMix,
    CeOnly,
    SslOnly,
    PretrainSsl,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::ScanMix => "scanmix",
            TrainMode::CeOnly => "ce_only",
            TrainMode::SslOnly => "ssl_only",
            TrainMode::PretrainSsl => "pretrain_ssl",
        }
    }

    pub fn needs_pretrain(&self) -> bool {
        matches!(self, TrainMode::ScanMix | TrainMode::PretrainSsl)
    }

    pub fn uses_clustering(&self) -> bool {
        matches!(self, TrainMode::ScanMix)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scanmix" => Ok(TrainMode::ScanMix),
            "ce_only" => Ok(TrainMode::CeOnly),
            "ssl_only" => Ok(TrainMode::SslOnly),
            "pretrain_ssl" => Ok(TrainMode::PretrainSsl),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// The three named seeds every run is driven by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub training: u64,
}

/// Full training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Clean posterior threshold.
    pub tau: f64,
    /// Neighbours mined per sample.
    pub k: usize,
    /// Clustering learning rate above the noise-rate gate.
    pub lr_high: f64,
    /// Clustering learning rate at or below the gate.
    pub lr_low: f64,
    pub noise_rate_gate: f64,
    /// Classification learning rate; reduced tenfold halfway through.
    pub class_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub scan_batch_size: usize,
    /// Noisy-set weight above / at-or-below the gate.
    pub lambda_u_high: f64,
    pub lambda_u_low: f64,
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub alpha: f64,
    pub sharpen_t: f64,
    pub num_augments: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub policy: AugmentationPolicy,
    pub pretrain: ContrastiveConfig,
    pub seeds: Seeds,
    /// Write a training checkpoint every N epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-epoch divider dump directory (sample_id, loss, p_clean,
    /// is_truly_clean).
    pub dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            epochs: 60,
            warmup_epochs: 5,
            tau: 0.5,
            k: 20,
            lr_high: 0.001,
            lr_low: 0.00001,
            noise_rate_gate: 0.6,
            class_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            scan_batch_size: 128,
            lambda_u_high: 25.0,
            lambda_u_low: 0.0,
            lambda_r: 1.0,
            lambda_e: 2.0,
            alpha: 4.0,
            sharpen_t: 0.5,
            num_augments: 2,
            hidden_dims: vec![64],
            feature_dim: 16,
            embedding_dim: 32,
            policy: AugmentationPolicy {
                additive_noise_sigma: 0.1,
                scale_jitter: (0.9, 1.1),
                flip_axes: Vec::new(),
            },
            pretrain: ContrastiveConfig::default(),
            seeds: Seeds {
                data: 1,
                model: 2,
                training: 3,
            },
            checkpoint_every: 0,
            checkpoint_dir: None,
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < self.warmup_epochs {
            return param_err("epochs must be >= warmup_epochs");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return param_err(format!("tau {} outside (0,1)", self.tau));
        }
        if !(self.noise_rate_gate > 0.0 && self.noise_rate_gate < 1.0) {
            return param_err(format!(
                "noise_rate_gate {} outside (0,1)",
                self.noise_rate_gate
            ));
        }
        if self.k == 0 {
            return param_err("k must be >= 1");
        }
        if self.batch_size < 2 || self.scan_batch_size < 1 {
            return param_err("batch sizes must be >= 2 (classification) and >= 1 (clustering)");
        }
        for (name, v) in [
            ("class_lr", self.class_lr),
            ("lr_high", self.lr_high),
            ("lr_low", self.lr_low),
            ("lambda_u_high", self.lambda_u_high),
            ("lambda_u_low", self.lambda_u_low),
            ("lambda_r", self.lambda_r),
            ("lambda_e", self.lambda_e),
        ] {
            if v < 0.0 {
                return param_err(format!("{name} must be >= 0"));
            }
        }
        if !(self.alpha > 0.0) {
            return param_err("alpha must be > 0");
        }
        if !(self.sharpen_t > 0.0) {
            return param_err("sharpen_t must be > 0");
        }
        if self.num_augments < 1 {
            return param_err("num_augments must be >= 1");
        }
        self.policy
            .validate()
            .map_err(|e| TrainError::Parameter(e.to_string()))?;
        self.pretrain
            .validate()
            .map_err(|e| TrainError::Parameter(e.to_string()))?;
        Ok(())
    }

    fn net_config(&self, dataset: &LabeledDataset) -> NetConfig {
        NetConfig {
            input_dim: dataset.dim(),
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            class_count: dataset.class_count,
            embedding_dim: self.embedding_dim,
        }
    }

    fn mix_config(&self, class_count: usize, lambda_u: f64) -> MixConfig {
        MixConfig {
            alpha: self.alpha,
            lambda_u,
            lambda_r: self.lambda_r,
            sharpen_t: self.sharpen_t,
            num_augments: self.num_augments,
            uniform_prior: vec![1.0 / class_count as f64; class_count],
        }
    }

    fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            lambda_e: self.lambda_e,
            ..ScanConfig::default()
        }
    }
}

/// One record per epoch; serialised as a JSON line by the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub predicted_noise_rate: f64,
    pub divider_auc: f64,
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_r: f64,
    pub loss_n: f64,
    pub loss_e: f64,
    pub cluster_lr: f64,
    pub fallback_clean: bool,
    pub gmm_degenerate: bool,
}

/// Pre-training artifacts consumed by the EM loop.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    pub knn: NeighborIndex,
}

/// Final model plus the per-epoch metric trajectory.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub best_accuracy: f64,
    pub last10_mean_accuracy: f64,
    pub final_accuracy: f64,
}

/// Accuracy plus per-class accuracy on a clean-labelled set.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Argmax-prediction accuracy against clean labels.
pub fn evaluate(params: &ModelParams, test_set: &LabeledDataset) -> Result<EvalResult, TrainError> {
    if test_set.class_count != params.class_count {
        return param_err("test set class count does not match the model");
    }
    let predictions = parallel::map_collect(&test_set.features, |x| {
        forward(params, x).map(|t| argmax(&t.probs))
    });
    let mut correct = vec![0usize; test_set.class_count];
    let mut total = vec![0usize; test_set.class_count];
    let mut hits = 0usize;
    for (i, p) in predictions.into_iter().enumerate() {
        let p = p?;
        let truth = test_set.clean_labels[i];
        total[truth] += 1;
        if p == truth {
            correct[truth] += 1;
            hits += 1;
        }
    }
    let per_class = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalResult {
        accuracy: hits as f64 / test_set.sample_count() as f64,
        per_class,
    })
}

/// Tracks the best test accuracy and the trailing-10-epoch mean.
#[derive(Clone, Debug, Default)]
pub struct EvalTracker {
    best: f64,
    window: VecDeque<f64>,
}

impl EvalTracker {
    pub fn update(&mut self, accuracy: f64) {
        self.best = self.best.max(accuracy);
        self.window.push_back(accuracy);
        if self.window.len() > 10 {
            self.window.pop_front();
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn last10_mean(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }
}

/// Clustering learning rate gated by the predicted noise rate (strictly
/// above the gate selects the high rate).
pub fn select_cluster_lr(predicted_noise_rate: f64, config: &TrainConfig) -> f64 {
    if predicted_noise_rate > config.noise_rate_gate {
        config.lr_high
    } else {
        config.lr_low
    }
}

/// Area under the ROC curve of `scores` against boolean ground truth, using
/// average ranks for ties. Degenerate label sets give 0.5.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank of their block
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Cross-entropy warm-up on the observed noisy labels.
pub fn warmup(
    params: ModelParams,
    dataset: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ModelParams, TrainError> {
    let mut params = params;
    let mut state = SgdState::zeros_like(&params);
    for epoch in 0..epochs {
        let mut rng = seed_stream(seed, TAG_WARMUP, epoch as u64);
        let order = shuffled(dataset.sample_count(), &mut rng);
        for batch in order.chunks(batch_size) {
            let (loss, grads) = warmup_loss_batch(&params, dataset, batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    context: "warmup".into(),
                });
            }
            sgd_step(&mut params, &grads, &mut state, lr, 0.9, 5e-4);
        }
    }
    Ok(params)
}

/// Weak classifier for semantic noise: fresh initialisation, then one
/// head-only cross-entropy epoch on the clean labels.
pub fn train_weak_model(dataset: &LabeledDataset, seed: u64) -> Result<ModelParams, TrainError> {
    let cfg = NetConfig::new(dataset.dim(), dataset.class_count);
    let mut params = ModelParams::init(&cfg, seed);
    let mut clean_ds = dataset.clone();
    for (y, &c) in clean_ds.noisy_labels.iter_mut().zip(&clean_ds.clean_labels) {
        *y = onehot(c, clean_ds.class_count);
    }
    let encoder_snapshot = params.encoder.clone();
    let projection_snapshot = params.projection.clone();
    let mut state = SgdState::zeros_like(&params);
    let mut rng = seed_stream(seed, TAG_WARMUP, u64::MAX);
    let order = shuffled(clean_ds.sample_count(), &mut rng);
    for batch in order.chunks(64) {
        let (_, mut grads) = warmup_loss_batch(&params, &clean_ds, batch)?;
        // head-only: the encoder stays at its random initialisation
        for layer in grads.encoder.iter_mut().chain(grads.projection.iter_mut()) {
            layer.weight.scale(0.0);
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.9, 5e-4);
    }
    params.encoder = encoder_snapshot;
    params.projection = projection_snapshot;
    Ok(params)
}

struct EpochState {
    params: ModelParams,
    mle_state: SgdState,
    clu_state: SgdState,
}

struct DivideOutcome {
    clean_ids: Vec<usize>,
    noisy_ids: Vec<usize>,
    p_clean: Vec<f64>,
    predicted_noise_rate: f64,
    divider_auc: f64,
    degenerate: bool,
}

fn divide_epoch(
    params: &ModelParams,
    dataset: &LabeledDataset,
    tau: f64,
    dump: Option<&Path>,
    epoch: usize,
) -> Result<DivideOutcome, TrainError> {
    let raw = per_sample_losses(params, dataset);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite {
            epoch,
            context: "per-sample losses".into(),
        });
    }
    let n = dataset.sample_count();
    match normalize_losses(&raw).and_then(|norm| fit_gmm_1d(&norm, 100, 1e-6)) {
        Ok(fit) => {
            let posterior = clean_posterior(params, dataset, &fit.params, tau)?;
            let divided = split(dataset, params, &fit.params, tau)?;
            let truly_clean: Vec<bool> = (0..n).map(|i| dataset.is_truly_clean(i)).collect();
            let divider_auc = auc(&posterior.p_clean, &truly_clean);
            if let Some(dir) = dump {
                dump_posterior(dir, epoch, &posterior.losses, &posterior.p_clean, &truly_clean)?;
            }
            Ok(DivideOutcome {
                clean_ids: divided.clean_ids,
                noisy_ids: divided.noisy_ids,
                p_clean: posterior.p_clean,
                predicted_noise_rate: divided.predicted_noise_rate,
                divider_auc,
                degenerate: false,
            })
        }
        Err(DivideError::Degenerate(_)) => Ok(DivideOutcome {
            clean_ids: (0..n).collect(),
            noisy_ids: Vec::new(),
            p_clean: vec![1.0; n],
            predicted_noise_rate: 0.0,
            divider_auc: 0.5,
            degenerate: true,
        }),
        Err(e) => Err(e.into()),
    }
}

fn dump_posterior(
    dir: &Path,
    epoch: usize,
    losses: &[f64],
    p_clean: &[f64],
    truly_clean: &[bool],
) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = String::from("sample_id,loss,p_clean,is_truly_clean\n");
    for i in 0..losses.len() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            losses[i],
            p_clean[i],
            if truly_clean[i] { 1 } else { 0 }
        ));
    }
    let path = dir.join(format!("divide_epoch_{epoch:04}.csv"));
    fs::write(&path, out).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Runs the configured training mode. Pre-trained artifacts are used when
/// given; modes that need them run pre-training and KNN mining themselves
/// otherwise.
pub fn train(
    dataset: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    pretrained: Option<Pretrained>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    dataset.validate()?;
    let (params, knn) = prepare(dataset, config, pretrained)?;
    let params = warmup(
        params,
        dataset,
        config.warmup_epochs,
        config.class_lr,
        config.batch_size,
        config.seeds.training,
    )?;
    let state = EpochState {
        mle_state: SgdState::zeros_like(&params),
        clu_state: SgdState::zeros_like(&params),
        params,
    };
    run_epochs(dataset, test_set, config, knn, state, 0)
}

/// Resumes from a training checkpoint written during a previous run.
/// Epochs `stored + 1 ..` are reproduced exactly, since all per-epoch
/// randomness is derived from `(seed, stage, epoch)`.
pub fn resume_train(
    dataset: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    pretrained: Option<Pretrained>,
    checkpoint: impl AsRef<Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    dataset.validate()?;
    let (_, knn) = prepare(dataset, config, pretrained)?;
    let (params, vel_mle, vel_clu, epoch) = crate::net::load_train_checkpoint(checkpoint)?;
    let state = EpochState {
        mle_state: SgdState { velocity: vel_mle },
        clu_state: SgdState { velocity: vel_clu },
        params,
    };
    run_epochs(dataset, test_set, config, knn, state, epoch + 1)
}

fn prepare(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    pretrained: Option<Pretrained>,
) -> Result<(ModelParams, Option<NeighborIndex>), TrainError> {
    let net_cfg = config.net_config(dataset);
    let fresh = ModelParams::init(&net_cfg, config.seeds.model);
    if !config.mode.needs_pretrain() {
        return Ok((fresh, None));
    }
    match pretrained {
        Some(p) => {
            if p.knn.sample_count() != dataset.sample_count() {
                return param_err("neighbour index does not cover the dataset");
            }
            Ok((p.params, Some(p.knn)))
        }
        None => {
            let mut pre_cfg = config.pretrain.clone();
            pre_cfg.embedding_dim = config.embedding_dim;
            let params = pretrain(
                dataset,
                &fresh,
                &config.policy,
                &pre_cfg,
                config.seeds.training,
            )?;
            let features = encoder_features(&params, dataset)?;
            let knn = mine_knn(&features, config.k)?;
            Ok((params, Some(knn)))
        }
    }
}

fn run_epochs(
    dataset: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    knn: Option<NeighborIndex>,
    mut state: EpochState,
    start_epoch: usize,
) -> Result<TrainOutcome, TrainError> {
    if config.mode.uses_clustering() && knn.is_none() {
        return param_err("clustering mode requires a neighbour index");
    }
    let mut metrics = Vec::with_capacity(config.epochs.saturating_sub(start_epoch));
    let mut tracker = EvalTracker::default();
    for epoch in start_epoch..config.epochs {
        let record = match config.mode {
            TrainMode::CeOnly => run_ce_epoch(dataset, config, &mut state, epoch)?,
            _ => run_em_epoch(dataset, config, knn.as_ref(), &mut state, epoch)?,
        };
        let eval = evaluate(&state.params, test_set)?;
        tracker.update(eval.accuracy);
        metrics.push(EpochMetrics {
            epoch,
            test_accuracy: eval.accuracy,
            ..record
        });
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                fs::create_dir_all(dir).map_err(|e| TrainError::Io {
                    path: dir.display().to_string(),
                    message: e.to_string(),
                })?;
                let path = dir.join(format!("checkpoint_{:04}.bin", epoch + 1));
                crate::net::save_train_checkpoint(
                    &state.params,
                    &state.mle_state.velocity,
                    &state.clu_state.velocity,
                    epoch,
                    path,
                )?;
            }
        }
    }
    let final_accuracy = metrics.last().map_or(0.0, |m| m.test_accuracy);
    Ok(TrainOutcome {
        params: state.params,
        metrics,
        best_accuracy: tracker.best(),
        last10_mean_accuracy: tracker.last10_mean(),
        final_accuracy,
    })
}

fn class_lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    // tenfold reduction halfway through the run
    if epoch * 2 >= config.epochs {
        config.class_lr * 0.1
    } else {
        config.class_lr
    }
}

fn blank_metrics() -> EpochMetrics {
    EpochMetrics {
        epoch: 0,
        test_accuracy: 0.0,
        predicted_noise_rate: 0.0,
        divider_auc: 0.5,
        loss_x: 0.0,
        loss_u: 0.0,
        loss_r: 0.0,
        loss_n: 0.0,
        loss_e: 0.0,
        cluster_lr: 0.0,
        fallback_clean: false,
        gmm_degenerate: false,
    }
}

fn run_ce_epoch(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    state: &mut EpochState,
    epoch: usize,
) -> Result<EpochMetrics, TrainError> {
    let lr = class_lr_at(config, epoch);
    let mut rng = seed_stream(config.seeds.training, TAG_MLE, epoch as u64);
    let order = shuffled(dataset.sample_count(), &mut rng);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for batch in order.chunks(config.batch_size) {
        let (loss, grads) = warmup_loss_batch(&state.params, dataset, batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                context: "cross-entropy batch".into(),
            });
        }
        sgd_step(
            &mut state.params,
            &grads,
            &mut state.mle_state,
            lr,
            config.momentum,
            config.weight_decay,
        );
        loss_sum += loss;
        batches += 1;
    }
    let mut record = blank_metrics();
    record.loss_x = loss_sum / batches.max(1) as f64;
    Ok(record)
}

fn run_em_epoch(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    knn: Option<&NeighborIndex>,
    state: &mut EpochState,
    epoch: usize,
) -> Result<EpochMetrics, TrainError> {
    let n = dataset.sample_count();
    let class_count = dataset.class_count;

    // E-step inputs from the pre-update parameters: the divide and, in
    // clustering mode, the latent pair assignment.
    let divided = divide_epoch(
        &state.params,
        dataset,
        config.tau,
        config.dump_dir.as_deref(),
        epoch,
    )?;
    let q = match (config.mode.uses_clustering(), knn) {
        (true, Some(knn)) => {
            let predictions = predictions(&state.params, dataset)?;
            Some(estimate_q(&predictions, knn))
        }
        _ => None,
    };

    let cluster_lr = select_cluster_lr(divided.predicted_noise_rate, config);
    let lambda_u = if divided.predicted_noise_rate > config.noise_rate_gate {
        config.lambda_u_high
    } else {
        config.lambda_u_low
    };
    let mix_cfg = config.mix_config(class_count, lambda_u);
    let class_lr = class_lr_at(config, epoch);

    // M-step part 1: semi-supervised mini-batches over the divided sets.
    let mut rng = seed_stream(config.seeds.training, TAG_MLE, epoch as u64);
    let clean_order: Vec<usize> = {
        let perm = shuffled(divided.clean_ids.len(), &mut rng);
        perm.into_iter().map(|i| divided.clean_ids[i]).collect()
    };
    let noisy_order: Vec<usize> = {
        let perm = shuffled(divided.noisy_ids.len(), &mut rng);
        perm.into_iter().map(|i| divided.noisy_ids[i]).collect()
    };
    let half = (config.batch_size / 2).max(1);
    let batches = n.div_ceil(config.batch_size);
    let item_at = |ids: &[usize], slot: usize| -> DividedItem {
        let i = ids[slot % ids.len()];
        DividedItem {
            input: dataset.features[i].clone(),
            label: dataset.noisy_labels[i].clone(),
            p_clean: divided.p_clean[i],
        }
    };
    let mut sums = (0.0, 0.0, 0.0); // loss_x, loss_u, loss_r
    let mut fallback_seen = false;
    let mut mle_batches = 0usize;
    for b in 0..batches {
        let clean_items: Vec<DividedItem> = if clean_order.is_empty() {
            Vec::new()
        } else {
            (0..half).map(|t| item_at(&clean_order, b * half + t)).collect()
        };
        let noisy_items: Vec<DividedItem> = if noisy_order.is_empty() {
            Vec::new()
        } else {
            (0..half).map(|t| item_at(&noisy_order, b * half + t)).collect()
        };
        if clean_items.is_empty() && noisy_items.is_empty() {
            break;
        }
        let batch = mixmatch(
            &clean_items,
            &noisy_items,
            &state.params,
            &config.policy,
            &mix_cfg,
            &mut rng,
        )?;
        fallback_seen |= batch.fallback_used;
        let out = loss_mle(&state.params, &batch, &mix_cfg)?;
        if !out.total.is_finite() || !out.grads.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                context: format!("mixed batch {b}"),
            });
        }
        sgd_step(
            &mut state.params,
            &out.grads,
            &mut state.mle_state,
            class_lr,
            config.momentum,
            config.weight_decay,
        );
        sums.0 += out.loss_x;
        sums.1 += out.loss_u;
        sums.2 += out.loss_r;
        mle_batches += 1;
    }

    // M-step part 2: clustering mini-batches with the gated learning rate.
    let mut scan_sums = (0.0, 0.0); // loss_n, loss_e
    let mut scan_batches = 0usize;
    if let (Some(q), Some(knn)) = (&q, knn) {
        let scan_cfg = config.scan_config();
        let mut rng = seed_stream(config.seeds.training, TAG_CLUSTER, epoch as u64);
        let anchor_order = shuffled(n, &mut rng);
        for chunk in anchor_order.chunks(config.scan_batch_size) {
            let out = loss_scan_anchors(&state.params, dataset, knn, q, &scan_cfg, chunk)?;
            if !out.total.is_finite() || !out.grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    context: "clustering batch".into(),
                });
            }
            sgd_step(
                &mut state.params,
                &out.grads,
                &mut state.clu_state,
                cluster_lr,
                config.momentum,
                config.weight_decay,
            );
            scan_sums.0 += out.loss_n;
            scan_sums.1 += out.loss_e;
            scan_batches += 1;
        }
    }

    let mut record = blank_metrics();
    record.predicted_noise_rate = divided.predicted_noise_rate;
    record.divider_auc = divided.divider_auc;
    record.loss_x = sums.0 / mle_batches.max(1) as f64;
    record.loss_u = sums.1 / mle_batches.max(1) as f64;
    record.loss_r = sums.2 / mle_batches.max(1) as f64;
    record.loss_n = scan_sums.0 / scan_batches.max(1) as f64;
    record.loss_e = scan_sums.1 / scan_batches.max(1) as f64;
    record.cluster_lr = if config.mode.uses_clustering() {
        cluster_lr
    } else {
        0.0
    };
    record.fallback_clean = fallback_seen;
    record.gmm_degenerate = divided.degenerate;
    Ok(record)
}

/// Softmax predictions for every sample.
pub fn predictions(
    params: &ModelParams,
    dataset: &LabeledDataset,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let traces = parallel::map_collect(&dataset.features, |x| forward(params, x));
    let mut out = Vec::with_capacity(traces.len());
    for t in traces {
        out.push(t?.probs);
    }
    Ok(out)
}
