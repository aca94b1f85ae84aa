//! The end-to-end run: data generation or loading, label corruption,
//! pre-training, training, evaluation, and a manifest tying every artifact
//! together.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scanmix_core::datagen::{generate_blobs, generate_rings, load_csv, save_csv, LabeledDataset};
use scanmix_core::net::{save_checkpoint, ModelParams, NetConfig};
use scanmix_core::noise::{asymmetric_matrix, inject, inject_semantic, symmetric_matrix};
use scanmix_core::pretrain::{encoder_features, mine_knn, pretrain};
use scanmix_core::trainer::{
    train, train_weak_model, EpochMetrics, Pretrained, Seeds, TrainOutcome,
};

use crate::config::{DataKind, NoiseKindOpt, RunConfig};
use crate::{runtime, CliError};

/// Everything needed to reproduce and locate a finished run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub mode: String,
    pub seeds: Seeds,
    pub config: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub duration_seconds: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub last10_mean_accuracy: f64,
}

/// Offset mixed into the data seed for the held-out test split, so train and
/// test draw from independent streams of the same generator.
const TEST_SEED_OFFSET: u64 = 0x7e57;

pub fn build_datasets(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    match cfg.data_kind {
        DataKind::Blobs => {
            let train = generate_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.spread, cfg.seeds.data)
                .map_err(runtime)?;
            let test = generate_blobs(
                cfg.classes,
                cfg.test_per_class,
                cfg.dim,
                cfg.spread,
                cfg.seeds.data.wrapping_add(TEST_SEED_OFFSET),
            )
            .map_err(runtime)?;
            Ok((train, test))
        }
        DataKind::Rings => {
            let train = generate_rings(
                cfg.classes,
                cfg.per_class,
                cfg.radius_step,
                cfg.ring_sigma,
                cfg.seeds.data,
            )
            .map_err(runtime)?;
            let test = generate_rings(
                cfg.classes,
                cfg.test_per_class,
                cfg.radius_step,
                cfg.ring_sigma,
                cfg.seeds.data.wrapping_add(TEST_SEED_OFFSET),
            )
            .map_err(runtime)?;
            Ok((train, test))
        }
        DataKind::Csv => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| CliError::Validation("data.path is required".into()))?;
            let train = load_csv(path).map_err(runtime)?;
            let test_path = cfg.test_path.as_ref().ok_or_else(|| {
                CliError::Validation("data.test_path is required when data.kind=csv".into())
            })?;
            let test = load_csv(test_path).map_err(runtime)?;
            Ok((train, test))
        }
    }
}

pub fn apply_noise(cfg: &RunConfig, dataset: &LabeledDataset) -> Result<LabeledDataset, CliError> {
    match cfg.noise_kind {
        NoiseKindOpt::None => Ok(dataset.clone()),
        NoiseKindOpt::Symmetric => {
            let m = symmetric_matrix(dataset.class_count, cfg.noise_rate).map_err(runtime)?;
            inject(dataset, &m, cfg.seeds.data).map_err(runtime)
        }
        NoiseKindOpt::Asymmetric => {
            let m = asymmetric_matrix(dataset.class_count, cfg.noise_rate, &cfg.noise_pairs)
                .map_err(runtime)?;
            inject(dataset, &m, cfg.seeds.data).map_err(runtime)
        }
        NoiseKindOpt::Semantic => {
            let weak = train_weak_model(dataset, cfg.seeds.model).map_err(runtime)?;
            inject_semantic(dataset, &weak, cfg.noise_rate, cfg.seeds.data).map_err(runtime)
        }
    }
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<(), CliError> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).map_err(runtime)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(runtime)
}

fn check_artifacts(artifacts: &BTreeMap<String, String>) -> Result<(), CliError> {
    for (name, path) in artifacts {
        if !Path::new(path).exists() {
            return Err(CliError::Runtime(format!(
                "artifact `{name}` missing at {path}"
            )));
        }
    }
    Ok(())
}

/// Runs the full pipeline described by `cfg` into `cfg.out_dir` and writes
/// `manifest.json` last.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(runtime)?;
    let mut artifacts: BTreeMap<String, String> = BTreeMap::new();
    let mut record = |name: &str, path: &Path| -> String {
        let s = path.display().to_string();
        artifacts.insert(name.to_string(), s.clone());
        s
    };

    let (clean_train, test) = build_datasets(cfg)?;
    let train_set = apply_noise(cfg, &clean_train)?;
    let dataset_path = out_dir.join("dataset.csv");
    save_csv(&train_set, &dataset_path, true).map_err(runtime)?;
    record("dataset", &dataset_path);
    let test_path = out_dir.join("test.csv");
    save_csv(&test, &test_path, false).map_err(runtime)?;
    record("test_set", &test_path);

    let mut train_cfg = cfg.train_config();
    if cfg.dump_divider {
        let dump_dir = out_dir.join("divider");
        train_cfg.dump_dir = Some(dump_dir.clone());
    }
    if cfg.checkpoint_every > 0 {
        train_cfg.checkpoint_dir = Some(out_dir.join("checkpoints"));
    }

    let pretrained = if train_cfg.mode.needs_pretrain() {
        let net_cfg = NetConfig {
            input_dim: train_set.dim(),
            hidden_dims: cfg.hidden_dims.clone(),
            feature_dim: cfg.feature_dim,
            class_count: train_set.class_count,
            embedding_dim: cfg.embedding_dim,
        };
        let init = ModelParams::init(&net_cfg, cfg.seeds.model);
        let encoder = pretrain(
            &train_set,
            &init,
            &train_cfg.policy,
            &train_cfg.pretrain,
            cfg.seeds.training,
        )
        .map_err(runtime)?;
        let model_path = out_dir.join("pretrained.bin");
        save_checkpoint(&encoder, &model_path).map_err(runtime)?;
        record("pretrained_model", &model_path);
        let features = encoder_features(&encoder, &train_set).map_err(runtime)?;
        let knn = mine_knn(&features, cfg.k).map_err(runtime)?;
        let knn_path = out_dir.join("knn.csv");
        knn.save_csv(&knn_path).map_err(runtime)?;
        record("neighbor_index", &knn_path);
        Some(Pretrained {
            params: encoder,
            knn,
        })
    } else {
        None
    };

    let outcome: TrainOutcome =
        train(&train_set, &test, &train_cfg, pretrained).map_err(runtime)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    write_metrics(&metrics_path, &outcome.metrics)?;
    record("metrics", &metrics_path);
    let model_path = out_dir.join("model.bin");
    save_checkpoint(&outcome.params, &model_path).map_err(runtime)?;
    record("model", &model_path);
    if let Some(dump_dir) = &train_cfg.dump_dir {
        record("divider_dumps", dump_dir);
    }

    check_artifacts(&artifacts)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: cfg.mode.as_str().to_string(),
        seeds: cfg.seeds,
        config: cfg.snapshot(),
        artifacts,
        duration_seconds: started.elapsed().as_secs_f64(),
        final_accuracy: outcome.final_accuracy,
        best_accuracy: outcome.best_accuracy,
        last10_mean_accuracy: outcome.last10_mean_accuracy,
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(runtime)?,
    )
    .map_err(runtime)?;
    Ok(manifest)
}
