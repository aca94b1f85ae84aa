use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scanmix_cli::config::RunConfig;
use scanmix_cli::hist::{export_histogram, write_histogram_csv};
use scanmix_cli::pipeline::run_pipeline;
use scanmix_cli::CliError;
use scanmix_core::datagen::{generate_blobs, generate_rings, load_csv, save_csv};
use scanmix_core::net::{load_checkpoint, save_checkpoint, ModelParams, NetConfig};
use scanmix_core::noise::{asymmetric_matrix, inject, inject_semantic, symmetric_matrix};
use scanmix_core::pretrain::{encoder_features, mine_knn, pretrain, NeighborIndex};
use scanmix_core::trainer::{evaluate, resume_train, train, train_weak_model, Pretrained};

#[derive(Parser)]
#[command(name = "scanmix", version, about = "Noisy-label training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Datagen {
        #[command(subcommand)]
        kind: DatagenKind,
    },
    /// Corrupt dataset labels
    Noise {
        #[command(subcommand)]
        action: NoiseAction,
    },
    /// Contrastive pre-training and neighbour mining
    Pretrain(PretrainArgs),
    /// Train on an existing dataset using a run configuration
    Train(TrainArgs),
    /// Evaluate a saved model on a clean-labelled CSV
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Bin a divider dump into clean/noisy loss histograms
    ExportHist {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: data, noise, pre-training, training, evaluation
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override out.dir from the config file
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatagenKind {
    /// Isotropic Gaussian clusters, one per class
    Blobs {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concentric annuli, one per class
    Rings {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 500)]
        per_class: usize,
        #[arg(long = "radius-step", default_value_t = 1.0)]
        radius_step: f64,
        #[arg(long = "noise-sigma", default_value_t = 0.05)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum NoiseAction {
    /// Resample observed labels through a noise process
    Inject {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Asymmetric class pairs, e.g. 9:1,2:0
        #[arg(long)]
        pairs: Option<String>,
        /// Initialisation seed of the semantic weak model
        #[arg(long = "weak-seed", default_value_t = 2)]
        weak_seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long = "model-seed", default_value_t = 2)]
    model_seed: u64,
    #[arg(long = "batch-size", default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long = "hidden-dim", default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long = "feature-dim", default_value_t = 16)]
    feature_dim: usize,
    #[arg(long = "embedding-dim", default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long = "jitter-lo", default_value_t = 0.9)]
    jitter_lo: f64,
    #[arg(long = "jitter-hi", default_value_t = 1.1)]
    jitter_hi: f64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out-model")]
    out_model: PathBuf,
    #[arg(long = "out-knn")]
    out_knn: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Pre-trained encoder checkpoint (modes scanmix / pretrain_ssl)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Neighbour index CSV (mode scanmix)
    #[arg(long)]
    knn: Option<PathBuf>,
    /// Resume from a training checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Datagen { kind } => match kind {
            DatagenKind::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
                out,
            } => {
                let ds = generate_blobs(classes, per_class, dim, spread, seed).map_err(validation)?;
                save_csv(&ds, &out, false).map_err(runtime)?;
                println!("wrote {} samples to {}", ds.sample_count(), out.display());
                Ok(())
            }
            DatagenKind::Rings {
                classes,
                per_class,
                radius_step,
                noise_sigma,
                seed,
                out,
            } => {
                let ds = generate_rings(classes, per_class, radius_step, noise_sigma, seed)
                    .map_err(validation)?;
                save_csv(&ds, &out, false).map_err(runtime)?;
                println!("wrote {} samples to {}", ds.sample_count(), out.display());
                Ok(())
            }
        },
        Command::Noise { action } => match action {
            NoiseAction::Inject {
                kind,
                rate,
                seed,
                pairs,
                weak_seed,
                input,
                out,
            } => {
                let ds = load_csv(&input).map_err(runtime)?;
                let noisy = match kind.as_str() {
                    "symmetric" => {
                        let m = symmetric_matrix(ds.class_count, rate).map_err(validation)?;
                        inject(&ds, &m, seed).map_err(runtime)?
                    }
                    "asymmetric" => {
                        let pairs = pairs.ok_or_else(|| {
                            CliError::Validation("--pairs is required for asymmetric noise".into())
                        })?;
                        let parsed = parse_pairs(&pairs)?;
                        let m = asymmetric_matrix(ds.class_count, rate, &parsed)
                            .map_err(validation)?;
                        inject(&ds, &m, seed).map_err(runtime)?
                    }
                    "semantic" => {
                        let weak = train_weak_model(&ds, weak_seed).map_err(runtime)?;
                        inject_semantic(&ds, &weak, rate, seed).map_err(validation)?
                    }
                    other => {
                        return Err(CliError::Validation(format!("unknown noise kind `{other}`")))
                    }
                };
                save_csv(&noisy, &out, true).map_err(runtime)?;
                let flipped = (0..noisy.sample_count())
                    .filter(|&i| !noisy.is_truly_clean(i))
                    .count();
                println!(
                    "flipped {flipped}/{} labels, wrote {}",
                    noisy.sample_count(),
                    out.display()
                );
                Ok(())
            }
        },
        Command::Pretrain(args) => {
            let ds = load_csv(&args.input).map_err(runtime)?;
            let net_cfg = NetConfig {
                input_dim: ds.dim(),
                hidden_dims: vec![args.hidden_dim],
                feature_dim: args.feature_dim,
                class_count: ds.class_count,
                embedding_dim: args.embedding_dim,
            };
            let init = ModelParams::init(&net_cfg, args.model_seed);
            let policy = scanmix_core::datagen::AugmentationPolicy {
                additive_noise_sigma: args.sigma,
                scale_jitter: (args.jitter_lo, args.jitter_hi),
                flip_axes: Vec::new(),
            };
            let cfg = scanmix_core::pretrain::ContrastiveConfig {
                temperature: args.temperature,
                epochs: args.epochs,
                batch_size: args.batch_size,
                embedding_dim: args.embedding_dim,
                lr: args.lr,
                ..scanmix_core::pretrain::ContrastiveConfig::default()
            };
            let params = pretrain(&ds, &init, &policy, &cfg, args.seed).map_err(validation)?;
            save_checkpoint(&params, &args.out_model).map_err(runtime)?;
            let features = encoder_features(&params, &ds).map_err(runtime)?;
            let knn = mine_knn(&features, args.k).map_err(validation)?;
            knn.save_csv(&args.out_knn).map_err(runtime)?;
            println!(
                "wrote encoder to {} and {}-NN index to {}",
                args.out_model.display(),
                args.k,
                args.out_knn.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let run_cfg = RunConfig::from_file(&args.config)?;
            let ds = load_csv(&args.data).map_err(runtime)?;
            let test = load_csv(&args.test).map_err(runtime)?;
            let mut train_cfg = run_cfg.train_config();
            std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;
            if run_cfg.dump_divider {
                train_cfg.dump_dir = Some(args.out_dir.join("divider"));
            }
            if run_cfg.checkpoint_every > 0 {
                train_cfg.checkpoint_dir = Some(args.out_dir.join("checkpoints"));
            }
            let pretrained = match (&args.model, &args.knn) {
                (Some(model), Some(knn)) => Some(Pretrained {
                    params: load_checkpoint(model).map_err(runtime)?,
                    knn: NeighborIndex::load_csv(knn).map_err(runtime)?,
                }),
                (None, None) => None,
                _ => {
                    return Err(CliError::Validation(
                        "--model and --knn must be given together".into(),
                    ))
                }
            };
            let outcome = match &args.resume {
                Some(ckpt) => resume_train(&ds, &test, &train_cfg, pretrained, ckpt)
                    .map_err(runtime)?,
                None => train(&ds, &test, &train_cfg, pretrained).map_err(runtime)?,
            };
            let metrics_path = args.out_dir.join("metrics.jsonl");
            let mut text = String::new();
            for m in &outcome.metrics {
                text.push_str(&serde_json::to_string(m).map_err(runtime)?);
                text.push('\n');
            }
            std::fs::write(&metrics_path, text).map_err(runtime)?;
            let model_path = args.out_dir.join("model.bin");
            save_checkpoint(&outcome.params, &model_path).map_err(runtime)?;
            println!(
                "final accuracy {:.4} (best {:.4}, last-10 mean {:.4}); metrics at {}",
                outcome.final_accuracy,
                outcome.best_accuracy,
                outcome.last10_mean_accuracy,
                metrics_path.display()
            );
            Ok(())
        }
        Command::Eval { model, data } => {
            let params = load_checkpoint(&model).map_err(runtime)?;
            let test = load_csv(&data).map_err(runtime)?;
            let eval = evaluate(&params, &test).map_err(validation)?;
            println!(
                "{}",
                serde_json::json!({
                    "accuracy": eval.accuracy,
                    "per_class": eval.per_class,
                })
            );
            Ok(())
        }
        Command::ExportHist { input, bins, out } => {
            let table = export_histogram(&input, bins)?;
            write_histogram_csv(&table, &out)?;
            println!(
                "wrote {} bins to {} (overlap coefficient {:.4})",
                table.bins.len(),
                out.display(),
                table.overlap_coefficient()
            );
            Ok(())
        }
        Command::Run { config, out_dir } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let manifest = run_pipeline(&cfg)?;
            println!(
                "run complete: final accuracy {:.4}, manifest at {}",
                manifest.final_accuracy,
                cfg.out_dir.join("manifest.json").display()
            );
            Ok(())
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>, CliError> {
    text.split(',')
        .map(|pair| {
            let mut it = pair.split(':');
            let from = it
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Validation(format!("bad pair `{pair}`")))?;
            let to = it
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Validation(format!("bad pair `{pair}`")))?;
            Ok((from, to))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
