//! Diagnostic sweep of divider quality and end-to-end accuracy across noise
//! rates. Useful for mapping the symmetric-noise inversion point
//! eta = (|Y|-1)/|Y|, past which the observed labels stop carrying a
//! recoverable majority signal per class. Run with `--release`:
//!
//! ```text
//! cargo run --release -p scanmix-core --example noise_regimes divider
//! cargo run --release -p scanmix-core --example noise_regimes e2e 0.9 4 3 30
//! ```

use scanmix_core::datagen::generate_blobs;
use scanmix_core::divide::{clean_posterior, fit_gmm_1d, normalize_losses, per_sample_losses};
use scanmix_core::noise::{inject, symmetric_matrix};
use scanmix_core::pretrain::{encoder_features, mine_knn, pretrain};
use scanmix_core::trainer::{auc, train, warmup, Pretrained, Seeds, TrainConfig, TrainMode};
use scanmix_core::net::ModelParams;

fn overlap_coefficient(losses: &[f64], truly_clean: &[bool], bins: usize) -> f64 {
    let mut clean_hist = vec![0.0; bins];
    let mut noisy_hist = vec![0.0; bins];
    for (&l, &c) in losses.iter().zip(truly_clean) {
        let b = ((l * bins as f64) as usize).min(bins - 1);
        if c {
            clean_hist[b] += 1.0;
        } else {
            noisy_hist[b] += 1.0;
        }
    }
    let cs: f64 = clean_hist.iter().sum();
    let ns: f64 = noisy_hist.iter().sum();
    (0..bins)
        .map(|b| (clean_hist[b] / cs.max(1.0)).min(noisy_hist[b] / ns.max(1.0)))
        .sum()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(String::as_str).unwrap_or("divider");

    if stage == "divider" {
        println!("== divider quality after pretrain+warmup ==");
        for &classes in &[4usize, 10] {
            for &eta in &[0.2, 0.5, 0.8, 0.9] {
                let per_class = 2000 / classes;
                let ds = generate_blobs(classes, per_class, 2, 0.5, 1).unwrap();
                let m = symmetric_matrix(classes, eta).unwrap();
                let noisy = inject(&ds, &m, 11).unwrap();
                let cfg = TrainConfig::new(TrainMode::ScanMix);
                let net_cfg = scanmix_core::net::NetConfig::new(2, classes);
                let params = ModelParams::init(&net_cfg, 2);
                let mut pre_cfg = cfg.pretrain.clone();
                pre_cfg.epochs = 100;
                let params = pretrain(&noisy, &params, &cfg.policy, &pre_cfg, 3).unwrap();
                let params = warmup(params, &noisy, 5, 0.02, 64, 3).unwrap();
                let raw = per_sample_losses(&params, &noisy);
                let norm = normalize_losses(&raw).unwrap();
                let fit = fit_gmm_1d(&norm, 100, 1e-6).unwrap();
                let posterior = clean_posterior(&params, &noisy, &fit.params, 0.5).unwrap();
                let truly: Vec<bool> = (0..noisy.sample_count())
                    .map(|i| noisy.is_truly_clean(i))
                    .collect();
                let a = auc(&posterior.p_clean, &truly);
                let ov = overlap_coefficient(&posterior.losses, &truly, 20);
                println!("C={classes:2} eta={eta}: auc={a:.3} overlap={ov:.3}");
            }
        }
        return;
    }

    if stage == "e2e" {
        let eta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.8);
        let classes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
        let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);
        let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(60);
        println!("== e2e eta={eta} classes={classes} seed={seed} ==");
        let per_class = 2000 / classes;
        let ds = generate_blobs(classes, per_class, 2, 0.5, 1).unwrap();
        let test = generate_blobs(classes, 250, 2, 0.5, 99).unwrap();
        let m = symmetric_matrix(classes, eta).unwrap();
        let noisy = inject(&ds, &m, 11).unwrap();

        // shared pretraining for the modes that use it
        let mut cfg = TrainConfig::new(TrainMode::ScanMix);
        cfg.seeds = Seeds { data: 1, model: 2, training: seed };
        let net_cfg = scanmix_core::net::NetConfig::new(2, classes);
        let init = ModelParams::init(&net_cfg, cfg.seeds.model);
        let t0 = std::time::Instant::now();
        let pre = pretrain(&noisy, &init, &cfg.policy, &cfg.pretrain, cfg.seeds.training).unwrap();
        let feats = encoder_features(&pre, &noisy).unwrap();
        let knn = mine_knn(&feats, cfg.k).unwrap();
        println!("pretrain: {:.1?}", t0.elapsed());

        for mode in [TrainMode::ScanMix, TrainMode::SslOnly, TrainMode::CeOnly] {
            let mut cfg = TrainConfig::new(mode);
            cfg.epochs = epochs;
            cfg.seeds = Seeds { data: 1, model: 2, training: seed };
            let pretrained = if mode.needs_pretrain() {
                Some(Pretrained { params: pre.clone(), knn: knn.clone() })
            } else {
                None
            };
            let t = std::time::Instant::now();
            let out = train(&noisy, &test, &cfg, pretrained).unwrap();
            let aucs: Vec<f64> = out.metrics.iter().map(|m| m.divider_auc).collect();
            println!(
                "{:<12} final={:.3} best={:.3} last10={:.3}  auc[0]={:.2} auc[mid]={:.2} auc[last]={:.2}  ({:.1?})",
                mode.as_str(),
                out.final_accuracy,
                out.best_accuracy,
                out.last10_mean_accuracy,
                aucs.first().unwrap_or(&0.5),
                aucs.get(aucs.len() / 2).unwrap_or(&0.5),
                aucs.last().unwrap_or(&0.5),
                t.elapsed()
            );
            for &e in &[0usize, epochs / 4, epochs / 2, epochs - 1] {
                if let Some(m) = out.metrics.get(e) {
                    println!("    {}", serde_json::to_string(m).unwrap());
                }
            }
        }
    }
}
