//! Clean/noisy division through a two-component GMM over per-sample losses.
//!
//! Each epoch the cross-entropy of every sample against its observed label is
//! min-max normalised to [0,1] and a bi-modal Gaussian mixture is fitted by
//! EM. The component with the smaller mean is taken as the clean one; samples
//! whose posterior under it reaches the threshold keep their labels, the rest
//! have their labels replaced by the current model prediction.

use thiserror::Error;

use crate::datagen::LabeledDataset;
use crate::net::{clamped_ln, forward, ModelParams};
use crate::parallel;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DivideError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("model error: {0}")]
    Net(#[from] crate::net::NetError),
}

/// Two-component 1-D Gaussian mixture, components ordered so
/// `means[0] <= means[1]` (component 0 is the clean one).
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
}

/// EM fit result with the log-likelihood trajectory (one entry per
/// iteration, non-decreasing).
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub params: GmmParams,
    pub log_likelihood: Vec<f64>,
}

/// Cross-entropy of every sample against its observed noisy label
/// (pre-normalisation).
pub fn per_sample_losses(params: &ModelParams, dataset: &LabeledDataset) -> Vec<f64> {
    parallel::map_indexed(dataset.sample_count(), |i| {
        let trace = forward(params, &dataset.features[i]).expect("forward failed");
        let mut loss = 0.0;
        for (t, p) in dataset.noisy_labels[i].iter().zip(&trace.probs) {
            if *t != 0.0 {
                loss -= t * clamped_ln(*p).0;
            }
        }
        loss
    })
}

/// Min-max normalisation to [0,1]. A constant vector cannot inform a split
/// and is reported as degenerate.
pub fn normalize_losses(losses: &[f64]) -> Result<Vec<f64>, DivideError> {
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(DivideError::Numeric("non-finite loss".into()));
    }
    let span = max - min;
    if span < 1e-12 {
        return Err(DivideError::Degenerate(
            "all per-sample losses are identical".into(),
        ));
    }
    Ok(losses.iter().map(|&v| (v - min) / span).collect())
}

fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / variance) - 0.5 * variance.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Fits the mixture by EM. Initialisation: means at the 10th/90th
/// percentiles, equal weights, variances at a quarter of the sample variance.
pub fn fit_gmm_1d(values: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit, DivideError> {
    if values.len() < 4 {
        return Err(DivideError::Parameter("need at least 4 values".into()));
    }
    let n = values.len() as f64;
    let mean: f64 = values.iter().sum::<f64>() / n;
    let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-24 {
        return Err(DivideError::Degenerate("all values are identical".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut means = [percentile(&sorted, 0.1), percentile(&sorted, 0.9)];
    if means[0] == means[1] {
        // heavy ties at the percentiles; fall back to the extremes
        means = [sorted[0], sorted[sorted.len() - 1]];
    }
    let mut variances = [(var / 4.0).max(VARIANCE_FLOOR); 2];
    let mut weights: [f64; 2] = [0.5, 0.5];

    let mut history: Vec<f64> = Vec::with_capacity(max_iters);
    let mut resp = vec![0.0f64; values.len()]; // responsibility of component 0
    for _ in 0..max_iters {
        // E-step and log-likelihood in one sweep (log-space for stability)
        let mut loglik: f64 = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let l0 = weights[0].ln() + log_normal_pdf(x, means[0], variances[0]);
            let l1 = weights[1].ln() + log_normal_pdf(x, means[1], variances[1]);
            let max = l0.max(l1);
            let z = (l0 - max).exp() + (l1 - max).exp();
            loglik += max + z.ln();
            resp[i] = (l0 - max).exp() / z;
        }
        if let Some(&prev) = history.last() {
            if loglik < prev - 1e-7 {
                return Err(DivideError::Numeric(format!(
                    "log-likelihood decreased from {prev} to {loglik}"
                )));
            }
            if (loglik - prev).abs() < tol {
                history.push(loglik);
                break;
            }
        }
        history.push(loglik);

        // M-step
        let r0: f64 = resp.iter().sum();
        let r1 = n - r0;
        let w0 = (r0 / n).clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
        weights = [w0, 1.0 - w0];
        let mut m = [0.0f64; 2];
        for (&x, &r) in values.iter().zip(resp.iter()) {
            m[0] += r * x;
            m[1] += (1.0 - r) * x;
        }
        means = [m[0] / r0.max(1e-12), m[1] / r1.max(1e-12)];
        let mut v = [0.0f64; 2];
        for (&x, &r) in values.iter().zip(resp.iter()) {
            let d0 = x - means[0];
            let d1 = x - means[1];
            v[0] += r * d0 * d0;
            v[1] += (1.0 - r) * d1 * d1;
        }
        variances = [
            (v[0] / r0.max(1e-12)).max(VARIANCE_FLOOR),
            (v[1] / r1.max(1e-12)).max(VARIANCE_FLOOR),
        ];
    }

    let mut params = GmmParams {
        means,
        variances,
        weights,
    };
    if params.means[1] < params.means[0] {
        params.means.swap(0, 1);
        params.variances.swap(0, 1);
        params.weights.swap(0, 1);
    }
    Ok(GmmFit {
        params,
        log_likelihood: history,
    })
}

/// Log-likelihood of `values` under an arbitrary mixture; shared by the EM
/// fit's trajectory and the grid-search oracle in the tests.
pub fn gmm_log_likelihood(values: &[f64], params: &GmmParams) -> f64 {
    values
        .iter()
        .map(|&x| {
            let l0 = params.weights[0].ln() + log_normal_pdf(x, params.means[0], params.variances[0]);
            let l1 = params.weights[1].ln() + log_normal_pdf(x, params.means[1], params.variances[1]);
            let max = l0.max(l1);
            max + ((l0 - max).exp() + (l1 - max).exp()).ln()
        })
        .sum()
}

/// Bayes posterior of the smaller-mean (clean) component at a loss value,
/// computed in log space so extreme inputs stay finite.
pub fn posterior_clean(loss_value: f64, gmm: &GmmParams) -> f64 {
    let l0 = gmm.weights[0].ln() + log_normal_pdf(loss_value, gmm.means[0], gmm.variances[0]);
    let l1 = gmm.weights[1].ln() + log_normal_pdf(loss_value, gmm.means[1], gmm.variances[1]);
    1.0 / (1.0 + (l1 - l0).exp())
}

/// Per-sample normalised losses, clean posteriors and the decision threshold.
#[derive(Clone, Debug)]
pub struct CleanPosterior {
    pub losses: Vec<f64>,
    pub p_clean: Vec<f64>,
    pub threshold: f64,
}

/// Recomputes normalised per-sample losses and their clean posteriors under
/// a fitted mixture.
pub fn clean_posterior(
    params: &ModelParams,
    dataset: &LabeledDataset,
    gmm: &GmmParams,
    tau: f64,
) -> Result<CleanPosterior, DivideError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DivideError::Parameter(format!("tau {tau} outside (0,1)")));
    }
    let losses = normalize_losses(&per_sample_losses(params, dataset))?;
    let p_clean = losses.iter().map(|&l| posterior_clean(l, gmm)).collect();
    Ok(CleanPosterior {
        losses,
        p_clean,
        threshold: tau,
    })
}

/// Clean set (labels kept) and noisy set (labels replaced by the current
/// model prediction `y*`).
#[derive(Clone, Debug)]
pub struct DividedData {
    pub clean_ids: Vec<usize>,
    pub noisy_ids: Vec<usize>,
    /// Replacement soft labels, aligned with `noisy_ids`.
    pub y_star: Vec<Vec<f64>>,
    pub predicted_noise_rate: f64,
}

impl DividedData {
    /// Every id appears exactly once across the two sets.
    pub fn validate(&self, sample_count: usize) -> Result<(), DivideError> {
        let mut seen = vec![false; sample_count];
        for &i in self.clean_ids.iter().chain(&self.noisy_ids) {
            if i >= sample_count {
                return Err(DivideError::Parameter(format!("id {i} out of range")));
            }
            if seen[i] {
                return Err(DivideError::Parameter(format!("id {i} appears twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(DivideError::Parameter("some samples missing".into()));
        }
        if self.y_star.len() != self.noisy_ids.len() {
            return Err(DivideError::Parameter("y_star misaligned".into()));
        }
        Ok(())
    }
}

/// Splits the dataset at posterior threshold `tau`.
pub fn split(
    dataset: &LabeledDataset,
    params: &ModelParams,
    gmm: &GmmParams,
    tau: f64,
) -> Result<DividedData, DivideError> {
    let posterior = clean_posterior(params, dataset, gmm, tau)?;
    let mut clean_ids = Vec::new();
    let mut noisy_ids = Vec::new();
    for (i, &p) in posterior.p_clean.iter().enumerate() {
        if p >= tau {
            clean_ids.push(i);
        } else {
            noisy_ids.push(i);
        }
    }
    let y_star = parallel::map_collect(&noisy_ids, |&i| {
        forward(params, &dataset.features[i])
            .expect("forward failed")
            .probs
    });
    let predicted_noise_rate = noisy_ids.len() as f64 / dataset.sample_count() as f64;
    let divided = DividedData {
        clean_ids,
        noisy_ids,
        y_star,
        predicted_noise_rate,
    };
    debug_assert!(divided.validate(dataset.sample_count()).is_ok());
    Ok(divided)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_blobs, onehot};
    use crate::linalg::Matrix;
    use crate::net::{Layer, ModelParams, NetConfig};
    use crate::rng::seed_stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn zero_params(input_dim: usize, class_count: usize) -> ModelParams {
        let params = ModelParams::init(&NetConfig::new(input_dim, class_count), 0);
        let zeros = vec![0.0; params.param_count()];
        params.with_flat(&zeros)
    }

    /// Net whose softmax output equals `probs` for every input: zero weights
    /// and head bias = ln(probs).
    fn constant_prob_net(input_dim: usize, probs: &[f64]) -> ModelParams {
        let mut params = zero_params(input_dim, probs.len());
        let feature_dim = params.feature_dim;
        let mut head = Layer::zeros(probs.len(), feature_dim);
        head.weight = Matrix::zeros(probs.len(), feature_dim);
        head.bias = probs.iter().map(|p| p.ln()).collect();
        params.head = vec![head];
        params
    }

    #[test]
    fn loss_zero_when_prediction_matches_label() {
        let mut ds = generate_blobs(2, 3, 2, 0.5, 1).unwrap();
        for y in &mut ds.noisy_labels {
            *y = onehot(0, 2);
        }
        let params = constant_prob_net(2, &[1.0 - 1e-9, 1e-9]);
        let losses = per_sample_losses(&params, &ds);
        for l in losses {
            assert!(l <= 1e-7, "loss {l}");
        }
    }

    #[test]
    fn loss_log_c_under_uniform_prediction() {
        let ds = generate_blobs(4, 5, 2, 0.5, 2).unwrap();
        let params = zero_params(2, 4);
        for l in per_sample_losses(&params, &ds) {
            assert!((l - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_hand_computed_values() {
        let probs = [0.7, 0.2, 0.1];
        let params = constant_prob_net(2, &probs);
        let mut ds = generate_blobs(3, 1, 2, 0.5, 3).unwrap();
        ds.noisy_labels = vec![onehot(0, 3), onehot(1, 3), onehot(2, 3)];
        let losses = per_sample_losses(&params, &ds);
        for (l, p) in losses.iter().zip(&probs) {
            assert!((l - (-p.ln())).abs() < 1e-9, "{l} vs {}", -p.ln());
        }
    }

    #[test]
    fn normalize_rejects_constant_losses() {
        assert!(matches!(
            normalize_losses(&[0.3, 0.3, 0.3, 0.3]),
            Err(DivideError::Degenerate(_))
        ));
        let out = normalize_losses(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn gmm_recovers_known_mixture() {
        let mut rng = seed_stream(17, 0, 0);
        let mut values = Vec::with_capacity(1000);
        for i in 0..1000 {
            let z: f64 = rng.sample(StandardNormal);
            let v = if i % 2 == 0 {
                0.1 + 0.02 * z
            } else {
                0.8 + 0.02 * z
            };
            values.push(v);
        }
        let fit = fit_gmm_1d(&values, 100, 1e-6).unwrap();
        assert!((fit.params.means[0] - 0.1).abs() < 0.02, "{:?}", fit.params);
        assert!((fit.params.means[1] - 0.8).abs() < 0.02, "{:?}", fit.params);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {w:?}");
        }
    }

    #[test]
    fn gmm_single_gaussian_stays_monotone() {
        let mut rng = seed_stream(19, 0, 0);
        let values: Vec<f64> = (0..500)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                0.5 + 0.1 * z
            })
            .collect();
        let fit = fit_gmm_1d(&values, 100, 1e-6).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(fit.params.means[0] <= fit.params.means[1]);
    }

    #[test]
    fn gmm_rejects_degenerate_input() {
        assert!(fit_gmm_1d(&[0.5; 10], 100, 1e-6).is_err());
        assert!(fit_gmm_1d(&[0.1, 0.9], 100, 1e-6).is_err());
    }

    #[test]
    fn posterior_well_separated_components() {
        let gmm = GmmParams {
            means: [0.1, 0.9],
            variances: [0.01, 0.01],
            weights: [0.5, 0.5],
        };
        assert!(posterior_clean(0.1, &gmm) > 0.99);
        assert!(posterior_clean(0.9, &gmm) < 0.01);
    }

    #[test]
    fn posterior_symmetric_components_give_half() {
        let gmm = GmmParams {
            means: [0.5, 0.5],
            variances: [0.02, 0.02],
            weights: [0.5, 0.5],
        };
        for x in [0.0, 0.3, 0.5, 1.0] {
            assert!((posterior_clean(x, &gmm) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_monotone_under_equal_variances() {
        let gmm = GmmParams {
            means: [0.2, 0.7],
            variances: [0.05, 0.05],
            weights: [0.4, 0.6],
        };
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let x = step as f64 / 100.0;
            let p = posterior_clean(x, &gmm);
            assert!(p <= prev + 1e-12);
            prev = p;
        }
    }

    #[test]
    fn posterior_finite_at_extremes() {
        let gmm = GmmParams {
            means: [0.1, 0.9],
            variances: [VARIANCE_FLOOR, VARIANCE_FLOOR],
            weights: [0.5, 0.5],
        };
        for x in [-1e6, 0.0, 0.5, 1.0, 1e6] {
            let p = posterior_clean(x, &gmm);
            assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn split_boundary_thresholds() {
        let ds = generate_blobs(3, 10, 2, 0.5, 4).unwrap();
        let params = ModelParams::init(&NetConfig::new(2, 3), 9);
        // moderately separated components keep every posterior strictly
        // inside (0,1), so the threshold limits are observable
        let gmm = GmmParams {
            means: [0.3, 0.7],
            variances: [0.05, 0.05],
            weights: [0.5, 0.5],
        };

        let all_clean = split(&ds, &params, &gmm, 1e-9).unwrap();
        assert_eq!(all_clean.clean_ids.len(), ds.sample_count());
        assert_eq!(all_clean.predicted_noise_rate, 0.0);

        let all_noisy = split(&ds, &params, &gmm, 1.0 - 1e-12).unwrap();
        assert_eq!(all_noisy.noisy_ids.len(), ds.sample_count());
        assert_eq!(all_noisy.predicted_noise_rate, 1.0);
        for y in &all_noisy.y_star {
            let sum: f64 = y.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn split_partitions_exactly() {
        let ds = generate_blobs(4, 25, 2, 0.5, 5).unwrap();
        let params = ModelParams::init(&NetConfig::new(2, 4), 3);
        let losses = normalize_losses(&per_sample_losses(&params, &ds)).unwrap();
        let fit = fit_gmm_1d(&losses, 100, 1e-6).unwrap();
        let divided = split(&ds, &params, &fit.params, 0.5).unwrap();
        divided.validate(ds.sample_count()).unwrap();
        let rate = divided.noisy_ids.len() as f64 / ds.sample_count() as f64;
        assert_eq!(rate, divided.predicted_noise_rate);
    }

    #[test]
    fn gmm_weight_floor_respected() {
        // strongly unimodal data tends to collapse one weight; it must stay
        // within the floor
        let mut rng = seed_stream(23, 0, 0);
        let values: Vec<f64> = (0..200)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                0.2 + 0.01 * z
            })
            .collect();
        let fit = fit_gmm_1d(&values, 200, 1e-9).unwrap();
        for w in fit.params.weights {
            assert!((WEIGHT_FLOOR..=1.0 - WEIGHT_FLOOR).contains(&w));
        }
        for v in fit.params.variances {
            assert!(v >= VARIANCE_FLOOR);
        }
    }
}
