//! Desk-scale laboratory for training classifiers on noisily labelled data.
//!
//! The crate implements the full scanmix training procedure on small
//! real-vector datasets: label-free contrastive pre-training of an encoder,
//! exact K-nearest-neighbour mining in feature space, per-epoch clean/noisy
//! division through a two-component GMM over per-sample losses, MixMatch-style
//! semi-supervised losses on the divided sets, and a neighbour-consistency
//! clustering loss driven by an EM-style latent pair assignment.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`datagen`] — synthetic blob/ring datasets, CSV ingestion, stochastic
//!   augmentation.
//! * [`noise`] — symmetric/asymmetric/semantic label corruption and its
//!   statistical verification.
//! * [`net`] — a small MLP encoder/head/projection with hand-derived
//!   gradients and a finite-difference checking harness.
//! * [`pretrain`] — NT-Xent contrastive pre-training and exact KNN mining.
//! * [`divide`] — 1-D GMM fitting over per-sample losses and the clean/noisy
//!   split.
//! * [`losses`] — the semi-supervised objective, the clustering objective and
//!   the latent pair assignment.
//! * [`trainer`] — warm-up, the per-epoch EM loop, baselines and evaluation.
//!
//! All randomness flows through explicit seeds; with the `parallel` feature
//! disabled every computation is single-threaded and bit-reproducible. With
//! it enabled (the default), data-parallel maps run on rayon but reductions
//! keep a fixed order, so results are identical in both modes.

pub mod datagen;
pub mod divide;
pub mod linalg;
pub mod losses;
pub mod net;
pub mod noise;
pub mod parallel;
pub mod pretrain;
pub mod rng;
pub mod trainer;
