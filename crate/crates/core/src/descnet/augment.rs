//! Multiview batch construction: sampled affine + photometric views of a
//! training image, with keypoints kept aligned across every view.
//!
//! Keypoints are detected on the original image only; each augmented view
//! transforms their locations with the view's geometry and any keypoint
//! that leaves the bounds of *any* view is dropped from all of them, so
//! every view contributes exactly the same K rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{ConvDescriptorNet, NetError};
use crate::contrastive::MultiviewBatch;
use crate::descriptors::sample_descriptors;
use crate::geometry::{AffineTransform2D, Point2};
use crate::imagebuf::{shift_hsv, Image};
use crate::keypoints::{KeypointClass, KeypointSet};
use crate::rng::substream;

/// Ranges for the random view augmentations. Geometric and color jitter
/// apply to every augmented view; Gaussian noise fires per view with the
/// given probability.
#[derive(Debug, Clone, Copy)]
pub struct AugmentationSpec {
    pub rotation_deg: f64,
    pub translation_frac: f64,
    pub scale_range: (f64, f64),
    pub shear_deg: f64,
    pub hsv_jitter: (f64, f64, f64),
    pub noise_std: f64,
    pub noise_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 60.0,
            translation_frac: 0.25,
            scale_range: (0.75, 1.25),
            shear_deg: 30.0,
            hsv_jitter: (0.02, 0.1, 0.1),
            noise_std: 0.05,
            noise_prob: 0.25,
        }
    }
}

impl AugmentationSpec {
    /// Degenerate spec producing views identical to the original.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_frac: 0.0,
            scale_range: (1.0, 1.0),
            shear_deg: 0.0,
            hsv_jitter: (0.0, 0.0, 0.0),
            noise_std: 0.0,
            noise_prob: 0.0,
        }
    }

    /// Gentler geometry for small images, keeping more keypoints in bounds.
    pub fn mild() -> Self {
        Self {
            rotation_deg: 25.0,
            translation_frac: 0.08,
            scale_range: (0.9, 1.1),
            shear_deg: 10.0,
            ..Self::default()
        }
    }

    fn sample_transform(&self, rng: &mut ChaCha8Rng, center: Point2) -> AffineTransform2D {
        let range = |rng: &mut ChaCha8Rng, lim: f64| {
            if lim == 0.0 {
                0.0
            } else {
                rng.random_range(-lim..lim)
            }
        };
        AffineTransform2D {
            rotation_deg: range(rng, self.rotation_deg),
            translation_frac: (
                range(rng, self.translation_frac),
                range(rng, self.translation_frac),
            ),
            scale: if self.scale_range.0 == self.scale_range.1 {
                self.scale_range.0
            } else {
                rng.random_range(self.scale_range.0..self.scale_range.1)
            },
            shear_deg: range(rng, self.shear_deg),
            center,
        }
    }
}

/// The raw material of one training step: aligned view images and the pixel
/// of every surviving keypoint in every view.
#[derive(Debug, Clone)]
pub struct MultiviewInputs {
    /// `1 + N` images; view 0 is the original.
    pub views: Vec<Image>,
    /// Per view, the K keypoint pixels in row alignment.
    pub pixels: Vec<Vec<(usize, usize)>>,
    /// Class of each of the K keypoints.
    pub classes: Vec<KeypointClass>,
    /// Original (view 0) location of each keypoint.
    pub locations: Vec<Point2>,
}

impl MultiviewInputs {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn keypoints(&self) -> usize {
        self.classes.len()
    }
}

/// Samples `n_views` augmentations of `image`, transforms the keypoints per
/// view (rounded to the nearest pixel), and drops any keypoint that exits
/// the bounds of some view. Deterministic per seed.
pub fn build_multiview_inputs(
    image: &Image,
    keypoints: &KeypointSet,
    spec: &AugmentationSpec,
    n_views: usize,
    seed: u64,
) -> Result<MultiviewInputs, NetError> {
    assert!(n_views >= 1, "need at least one augmented view");
    let (w, h) = (image.width(), image.height());
    let center = Point2::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let fill = vec![0.0; image.channels()];

    let mut views = Vec::with_capacity(n_views + 1);
    let mut per_view_pixels: Vec<Vec<Option<(usize, usize)>>> = Vec::with_capacity(n_views + 1);

    let round_in_bounds = |p: Point2| -> Option<(usize, usize)> {
        let x = p.x.round();
        let y = p.y.round();
        (x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64).then_some((x as usize, y as usize))
    };

    views.push(image.clone());
    per_view_pixels.push(
        keypoints
            .iter()
            .map(|k| round_in_bounds(k.location))
            .collect(),
    );

    for v in 1..=n_views {
        let mut rng = substream(seed, "augment", v as u64);
        let affine = spec.sample_transform(&mut rng, center);
        let forward = affine.expand((w as f64, h as f64));
        let inverse = forward.inverse().expect("affine transforms are invertible");
        let mut img = image.warp(&inverse, w, h, &fill);

        let (dh, ds, dv) = spec.hsv_jitter;
        let jh = if dh == 0.0 {
            0.0
        } else {
            rng.random_range(-dh..dh)
        };
        let js = if ds == 0.0 {
            0.0
        } else {
            rng.random_range(-ds..ds)
        };
        let jv = if dv == 0.0 {
            0.0
        } else {
            rng.random_range(-dv..dv)
        };
        if img.channels() == 3 && (jh != 0.0 || js != 0.0 || jv != 0.0) {
            shift_hsv(&mut img, jh, js, jv);
        }
        if spec.noise_prob > 0.0 && rng.random_range(0.0..1.0) < spec.noise_prob {
            let normal = Normal::new(0.0, spec.noise_std).expect("positive std");
            for px in img.data_mut() {
                *px = (*px + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        img.clamp01();
        views.push(img);

        let pixels = keypoints
            .iter()
            .map(|k| forward.apply(k.location).ok().and_then(round_in_bounds))
            .collect();
        per_view_pixels.push(pixels);
    }

    // keep keypoints surviving in every view
    let keep: Vec<usize> = (0..keypoints.len())
        .filter(|&k| per_view_pixels.iter().all(|view| view[k].is_some()))
        .collect();
    if keep.len() < 2 {
        return Err(NetError::TooFewSurvivors(keep.len()));
    }

    let pixels: Vec<Vec<(usize, usize)>> = per_view_pixels
        .iter()
        .map(|view| keep.iter().map(|&k| view[k].unwrap()).collect())
        .collect();
    let classes = keep.iter().map(|&k| keypoints.points[k].class).collect();
    let locations = keep.iter().map(|&k| keypoints.points[k].location).collect();

    Ok(MultiviewInputs {
        views,
        pixels,
        classes,
        locations,
    })
}

/// Runs the network over every view and gathers the aligned descriptors.
pub fn batch_from_inputs(
    net: &ConvDescriptorNet,
    inputs: &MultiviewInputs,
) -> Result<MultiviewBatch, NetError> {
    let blocks: Vec<_> = inputs
        .views
        .par_iter()
        .map(|img| net.forward_dense(img))
        .collect::<Result<_, _>>()?;
    let mut sets = Vec::with_capacity(blocks.len());
    for (block, pixels) in blocks.iter().zip(&inputs.pixels) {
        let kps = KeypointSet::new(
            pixels
                .iter()
                .zip(&inputs.classes)
                .map(|(&(x, y), &class)| crate::keypoints::Keypoint {
                    location: Point2::new(x as f64, y as f64),
                    class,
                    score: 1.0,
                })
                .collect(),
        );
        sets.push(sample_descriptors(block, &kps)?);
    }
    Ok(MultiviewBatch::from_descriptor_sets(&sets)?)
}

/// Convenience composition of [`build_multiview_inputs`] and
/// [`batch_from_inputs`].
pub fn build_multiview_batch(
    net: &ConvDescriptorNet,
    image: &Image,
    keypoints: &KeypointSet,
    spec: &AugmentationSpec,
    n_views: usize,
    seed: u64,
) -> Result<MultiviewBatch, NetError> {
    let inputs = build_multiview_inputs(image, keypoints, spec, n_views, seed)?;
    batch_from_inputs(net, &inputs)
}
