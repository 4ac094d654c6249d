//! Feature-based registration of vessel-tree images.
//!
//! The pipeline detects vessel crossovers and bifurcations from per-class
//! confidence heatmaps, describes them with dense per-pixel descriptors
//! learned by a small convolutional network under multi-positive
//! multi-negative contrastive losses, matches descriptors bidirectionally
//! within each keypoint class, and estimates a projective transform with
//! RANSAC. An evaluation kit computes success-ratio curves, their AUC and
//! the variable top-keypoint score, and a synthetic vessel-tree generator
//! provides ground-truth cases for end-to-end verification at desk scale.
//!
//! Modules:
//! - [`geometry`]: points, homographies, normalized DLT, RANSAC.
//! - [`keypoints`]: Gaussian target heatmaps and peak extraction.
//! - [`descriptors`]: descriptor blocks, sampling, cosine matching.
//! - [`contrastive`]: SupCon, multi-positive InfoNCE and triplet losses
//!   with analytic gradients.
//! - [`descnet`]: dense convolutional descriptor network, augmentation,
//!   training loop.
//! - [`evalkit`]: registration score curves, category aggregation, VTKRS.
//! - [`synth`]: synthetic vessel trees with exact ground truth.

pub mod blockio;
pub mod contrastive;
pub mod descnet;
pub mod descriptors;
pub mod evalkit;
pub mod geometry;
pub mod imagebuf;
pub mod keypoints;
pub mod rng;
pub mod synth;
