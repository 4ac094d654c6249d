//! Training loop for the descriptor network and matching-precision
//! evaluation.
//!
//! A step builds the loss over one multiview batch, back-propagates through
//! normalization and the convolution stack, and applies one optimizer
//! update. View forward/backward passes run in parallel; per-view gradients
//! are accumulated in view order, so results are bitwise independent of the
//! thread schedule.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::augment::{build_multiview_inputs, AugmentationSpec, MultiviewInputs};
use super::{ConvDescriptorNet, NetError, ParamGrads};
use crate::contrastive::{
    mp_infonce_loss, supcon_loss, triplet_loss, LossConfig, LossOutput, MultiviewBatch,
    TripletMining,
};
use crate::descriptors::{mutual_match_classwise, sample_descriptors, DescriptorBlock};
use crate::geometry::Homography;
use crate::imagebuf::Image;
use crate::keypoints::{extract_keypoints, Heatmap, KeypointSet, PeakConfig};

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Supcon,
    MpInfonce,
    Triplet,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Supcon => write!(f, "supcon"),
            LossKind::MpInfonce => write!(f, "mp_infonce"),
            LossKind::Triplet => write!(f, "triplet"),
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supcon" => Ok(LossKind::Supcon),
            "mp_infonce" => Ok(LossKind::MpInfonce),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(format!(
                "unknown loss '{other}' (expected supcon|mp_infonce|triplet)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer '{other}' (expected sgd|adam)")),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub n_views: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub loss_cfg: LossConfig,
    pub augmentation: AugmentationSpec,
    pub mining: TripletMining,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::MpInfonce,
            n_views: 9,
            learning_rate: 1e-4,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            loss_cfg: LossConfig::default(),
            augmentation: AugmentationSpec::default(),
            mining: TripletMining::Hardest,
        }
    }
}

/// Per-epoch training record plus an optional held-out matching precision.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_precision: Option<f64>,
}

impl TrainReport {
    /// CSV with header `epoch,loss`; the held-out precision, when present,
    /// is appended as a final `precision,<value>` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i, loss));
        }
        if let Some(p) = self.final_precision {
            out.push_str(&format!("precision,{}\n", p));
        }
        out
    }
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    mb: Vec<Vec<f64>>,
    vb: Vec<Vec<f64>>,
}

/// Owns the network and optimizer state across steps.
pub struct Trainer {
    net: ConvDescriptorNet,
    cfg: TrainConfig,
    adam: Option<AdamState>,
    step: usize,
}

impl Trainer {
    pub fn new(net: ConvDescriptorNet, cfg: TrainConfig) -> Self {
        let adam = matches!(cfg.optimizer, OptimizerKind::Adam).then(|| AdamState {
            m: net.weights().iter().map(|w| vec![0.0; w.len()]).collect(),
            v: net.weights().iter().map(|w| vec![0.0; w.len()]).collect(),
            mb: net.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
            vb: net.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        });
        Self {
            net,
            cfg,
            adam,
            step: 0,
        }
    }

    pub fn net(&self) -> &ConvDescriptorNet {
        &self.net
    }

    pub fn into_net(self) -> ConvDescriptorNet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Computes the batch loss and its parameter gradient without updating.
    pub fn loss_and_grads(&self, inputs: &MultiviewInputs) -> Result<(f64, ParamGrads), NetError> {
        let traces: Vec<_> = inputs
            .views
            .par_iter()
            .map(|img| self.net.forward_trace(img))
            .collect::<Result<_, _>>()?;
        let mut sets = Vec::with_capacity(traces.len());
        for (trace, pixels) in traces.iter().zip(&inputs.pixels) {
            let block = trace.normalized_block()?;
            let kps = KeypointSet::new(
                pixels
                    .iter()
                    .zip(&inputs.classes)
                    .map(|(&(x, y), &class)| crate::keypoints::Keypoint {
                        location: crate::geometry::Point2::new(x as f64, y as f64),
                        class,
                        score: 1.0,
                    })
                    .collect(),
            );
            sets.push(sample_descriptors(&block, &kps)?);
        }
        let batch = MultiviewBatch::from_descriptor_sets(&sets)?;
        let LossOutput { value, grad } = match self.cfg.loss {
            LossKind::Supcon => supcon_loss(&batch, &self.cfg.loss_cfg)?,
            LossKind::MpInfonce => mp_infonce_loss(&batch, &self.cfg.loss_cfg)?,
            LossKind::Triplet => triplet_loss(&batch, &self.cfg.loss_cfg, self.cfg.mining)?,
        };
        if !value.is_finite() {
            return Err(NetError::NonFiniteLoss(value));
        }

        let per_view: Vec<ParamGrads> = traces
            .par_iter()
            .enumerate()
            .map(|(v, trace)| {
                let z_grads: Vec<((usize, usize), Vec<f64>)> = inputs.pixels[v]
                    .iter()
                    .enumerate()
                    .map(|(k, &(x, y))| ((x, y), grad.get(v, k).to_vec()))
                    .collect();
                self.net.backward_from_descriptor_grads(trace, &z_grads)
            })
            .collect();
        let mut total = ParamGrads::zeros_like(&self.net);
        for g in &per_view {
            total.add_assign(g);
        }
        if !total.is_finite() {
            return Err(NetError::NonFiniteLoss(value));
        }
        Ok((value, total))
    }

    /// One optimizer step over the batch; returns the loss *before* the
    /// update. On a non-finite loss the parameters stay untouched.
    pub fn train_step(&mut self, inputs: &MultiviewInputs) -> Result<f64, NetError> {
        let (value, grads) = self.loss_and_grads(inputs)?;
        self.step += 1;
        let lr = self.cfg.learning_rate;
        match &mut self.adam {
            None => {
                apply_sgd(&mut self.net, &grads, lr);
            }
            Some(state) => {
                apply_adam(&mut self.net, &grads, state, self.step, lr);
            }
        }
        Ok(value)
    }
}

fn apply_sgd(net: &mut ConvDescriptorNet, grads: &ParamGrads, lr: f64) {
    let layers = net.num_layers();
    for l in 0..layers {
        let w = &mut net.weights_mut()[l];
        for (p, g) in w.iter_mut().zip(&grads.weights[l]) {
            *p -= lr * g;
        }
        let b = &mut net.biases_mut()[l];
        for (p, g) in b.iter_mut().zip(&grads.biases[l]) {
            *p -= lr * g;
        }
    }
}

fn apply_adam(
    net: &mut ConvDescriptorNet,
    grads: &ParamGrads,
    state: &mut AdamState,
    step: usize,
    lr: f64,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let bc1 = 1.0 - B1.powi(step as i32);
    let bc2 = 1.0 - B2.powi(step as i32);
    let layers = net.num_layers();
    for l in 0..layers {
        {
            let w = &mut net.weights_mut()[l];
            for (((p, g), m), v) in w
                .iter_mut()
                .zip(&grads.weights[l])
                .zip(state.m[l].iter_mut())
                .zip(state.v[l].iter_mut())
            {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            }
        }
        {
            let b = &mut net.biases_mut()[l];
            for (((p, g), m), v) in b
                .iter_mut()
                .zip(&grads.biases[l])
                .zip(state.mb[l].iter_mut())
                .zip(state.vb[l].iter_mut())
            {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            }
        }
    }
}

/// Trains over a set of images: one multiview batch per image per epoch,
/// with per-(epoch, image) augmentation substreams. Images whose keypoints
/// do not survive augmentation are skipped for that epoch.
pub fn train_on_images(
    trainer: &mut Trainer,
    images: &[(Image, KeypointSet)],
    max_steps: Option<usize>,
) -> Result<TrainReport, NetError> {
    let mut report = TrainReport::default();
    let cfg = *trainer.config();
    let mut steps = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for (i, (image, keypoints)) in images.iter().enumerate() {
            let stream = cfg.seed
                ^ (epoch as u64).wrapping_mul(0x9e37_79b9)
                ^ (i as u64).wrapping_mul(0x85eb_ca6b_0000_0001);
            let inputs = match build_multiview_inputs(
                image,
                keypoints,
                &cfg.augmentation,
                cfg.n_views,
                stream,
            ) {
                Ok(inputs) => inputs,
                Err(NetError::TooFewSurvivors(_)) => continue,
                Err(e) => return Err(e),
            };
            epoch_loss += trainer.train_step(&inputs)?;
            counted += 1;
            steps += 1;
            if let Some(max) = max_steps {
                if steps >= max {
                    if counted > 0 {
                        report.epoch_losses.push(epoch_loss / counted as f64);
                    }
                    break 'outer;
                }
            }
        }
        if counted > 0 {
            report.epoch_losses.push(epoch_loss / counted as f64);
        }
    }
    Ok(report)
}

/// One evaluation pair: two images with their keypoint heatmaps and the
/// ground-truth transform mapping moving coordinates onto fixed ones.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub image_fixed: Image,
    pub image_moving: Image,
    pub heatmap_fixed: Heatmap,
    pub heatmap_moving: Heatmap,
    pub gt_homography: Homography,
}

/// Counts mutual matches whose moving endpoint, mapped by the ground-truth
/// transform, lands within `tol_px` of the fixed endpoint.
pub fn matching_precision_from_blocks(
    block_fixed: &DescriptorBlock,
    block_moving: &DescriptorBlock,
    kps_fixed: &KeypointSet,
    kps_moving: &KeypointSet,
    gt: &Homography,
    tol_px: f64,
) -> Result<(usize, usize), NetError> {
    let set_f = sample_descriptors(block_fixed, kps_fixed)?;
    let set_m = sample_descriptors(block_moving, kps_moving)?;
    let (matches, _) = mutual_match_classwise(&set_f, &set_m)?;
    let mut correct = 0usize;
    for m in &matches.pairs {
        let moving = kps_moving.points[m.moving_index].location;
        let fixed = kps_fixed.points[m.fixed_index].location;
        if let Ok(mapped) = gt.apply(moving) {
            if mapped.distance(&fixed) <= tol_px {
                correct += 1;
            }
        }
    }
    Ok((correct, matches.len()))
}

/// Fraction of mutual matches consistent with the ground-truth transform,
/// pooled over all pairs. Keypoints are extracted from the pair heatmaps
/// with `peak`; descriptors come from the network.
pub fn evaluate_matching_precision(
    net: &ConvDescriptorNet,
    pairs: &[EvalPair],
    peak: &PeakConfig,
    tol_px: f64,
) -> Result<f64, NetError> {
    assert!(!pairs.is_empty(), "need at least one evaluation pair");
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let kf = extract_keypoints(&pair.heatmap_fixed, peak);
        let km = extract_keypoints(&pair.heatmap_moving, peak);
        if kf.is_empty() || km.is_empty() {
            continue;
        }
        let bf = net.forward_dense(&pair.image_fixed)?;
        let bm = net.forward_dense(&pair.image_moving)?;
        let (c, t) =
            matching_precision_from_blocks(&bf, &bm, &kf, &km, &pair.gt_homography, tol_px)?;
        correct += c;
        total += t;
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descnet::{random_image, NetConfig};
    use crate::geometry::Point2;
    use crate::keypoints::{Keypoint, KeypointClass, TargetConfig};
    use crate::rng::substream;

    fn tiny_net(seed: u64) -> ConvDescriptorNet {
        let cfg = NetConfig {
            input_channels: 3,
            hidden_channels: vec![4],
            descriptor_dim: 4,
        };
        ConvDescriptorNet::init(&cfg, seed)
    }

    fn random_unit(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn spread_keypoints(w: usize, h: usize, n: usize) -> KeypointSet {
        let mut pts = Vec::new();
        for i in 0..n {
            let x = 3 + (i * (w - 6)) / n.max(1);
            let y = 3 + ((i * 7919) % (h - 6));
            pts.push(Keypoint {
                location: Point2::new(x as f64, y as f64),
                class: if i % 2 == 0 {
                    KeypointClass::Crossover
                } else {
                    KeypointClass::Bifurcation
                },
                score: 1.0,
            });
        }
        KeypointSet::new(pts)
    }

    fn fixed_inputs(seed: u64, size: usize, k: usize, n_views: usize) -> MultiviewInputs {
        let mut rng = substream(seed, "test-train-img", 0);
        let img = random_image(size, size, 3, &mut rng);
        let kps = spread_keypoints(size, size, k);
        build_multiview_inputs(&img, &kps, &AugmentationSpec::mild(), n_views, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let net = tiny_net(1);
        let before = net.params_flat();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            n_views: 1,
            ..Default::default()
        };
        let mut trainer = Trainer::new(net, cfg);
        let inputs = fixed_inputs(12, 16, 4, 1);
        let loss = trainer.train_step(&inputs).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(trainer.net().params_flat(), before);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // 2 conv layers, D = 4, K = 3, N = 1
        let cfg_net = NetConfig {
            input_channels: 3,
            hidden_channels: vec![3],
            descriptor_dim: 4,
        };
        let net = ConvDescriptorNet::init(&cfg_net, 21);
        let cfg = TrainConfig {
            loss: LossKind::MpInfonce,
            n_views: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let inputs = fixed_inputs(5, 10, 3, 1);
        let trainer = Trainer::new(net.clone(), cfg);
        let (_, grads) = trainer.loss_and_grads(&inputs).unwrap();
        let mut flat_analytic = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            flat_analytic.extend_from_slice(w);
            flat_analytic.extend_from_slice(b);
        }

        let h = 1e-5;
        let base = net.params_flat();
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe_net = net.clone();
        for i in 0..base.len() {
            let mut params = base.clone();
            params[i] = base[i] + h;
            probe_net.set_params_flat(&params);
            let plus = Trainer::new(probe_net.clone(), cfg)
                .loss_and_grads(&inputs)
                .unwrap()
                .0;
            params[i] = base[i] - h;
            probe_net.set_params_flat(&params);
            let minus = Trainer::new(probe_net.clone(), cfg)
                .loss_and_grads(&inputs)
                .unwrap()
                .0;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let max_err = flat_analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
            .fold(0.0, f64::max);
        assert!(max_err < 1e-3, "max relative error {max_err}");
    }

    #[test]
    fn loss_descends_on_fixed_image() {
        let net = tiny_net(3);
        let cfg = TrainConfig {
            loss: LossKind::MpInfonce,
            n_views: 3,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut trainer = Trainer::new(net, cfg);
        let inputs = fixed_inputs(33, 16, 5, 3);
        let first = trainer.train_step(&inputs).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = trainer.train_step(&inputs).unwrap();
        }
        assert!(
            last < first,
            "loss should descend: first {first}, step-200 {last}"
        );
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let mut rng = substream(71, "test-repro-img", 0);
        let images: Vec<(Image, KeypointSet)> = (0..2)
            .map(|_| {
                (
                    random_image(24, 24, 3, &mut rng),
                    spread_keypoints(24, 24, 6),
                )
            })
            .collect();
        let run = || {
            let net = tiny_net(8);
            let cfg = TrainConfig {
                loss: LossKind::Supcon,
                n_views: 2,
                learning_rate: 1e-3,
                epochs: 4,
                seed: 31,
                ..Default::default()
            };
            let mut trainer = Trainer::new(net, cfg);
            let report = train_on_images(&mut trainer, &images, None).unwrap();
            (trainer.into_net().params_flat(), report.epoch_losses)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2, "parameters must be bitwise reproducible");
        assert_eq!(l1, l2);
    }

    #[test]
    fn non_finite_forward_aborts_without_update() {
        let mut net = tiny_net(12);
        net.weights_mut()[0][0] = 1e308;
        net.weights_mut()[0][1] = 1e308;
        let before = net.params_flat();
        let cfg = TrainConfig {
            n_views: 1,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut trainer = Trainer::new(net, cfg);
        let inputs = fixed_inputs(3, 16, 4, 1);
        assert!(
            trainer.train_step(&inputs).is_err(),
            "overflowing activations must abort"
        );
        assert_eq!(
            trainer.net().params_flat(),
            before,
            "parameters must stay untouched"
        );
    }

    #[test]
    fn sgd_and_adam_both_step() {
        for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let net = tiny_net(4);
            let before = net.params_flat();
            let cfg = TrainConfig {
                optimizer: opt,
                learning_rate: 1e-3,
                n_views: 1,
                ..Default::default()
            };
            let mut trainer = Trainer::new(net, cfg);
            let inputs = fixed_inputs(44, 16, 4, 1);
            trainer.train_step(&inputs).unwrap();
            assert_ne!(trainer.net().params_flat(), before);
        }
    }

    #[test]
    fn identity_pairs_have_full_precision() {
        let net = tiny_net(6);
        let mut rng = substream(61, "test-prec", 0);
        let img = random_image(32, 32, 3, &mut rng);
        let kps = spread_keypoints(32, 32, 8);
        let cross: Vec<(usize, usize)> = kps
            .iter()
            .filter(|k| k.class == KeypointClass::Crossover)
            .map(|k| (k.location.x as usize, k.location.y as usize))
            .collect();
        let bif: Vec<(usize, usize)> = kps
            .iter()
            .filter(|k| k.class == KeypointClass::Bifurcation)
            .map(|k| (k.location.x as usize, k.location.y as usize))
            .collect();
        let heat = crate::keypoints::make_target_heatmaps(
            &crate::keypoints::BinaryMap::from_points(32, 32, &cross),
            &crate::keypoints::BinaryMap::from_points(32, 32, &bif),
            &TargetConfig::default(),
        )
        .unwrap();
        let pair = EvalPair {
            image_fixed: img.clone(),
            image_moving: img,
            heatmap_fixed: heat.clone(),
            heatmap_moving: heat,
            gt_homography: Homography::identity(),
        };
        let p = evaluate_matching_precision(&net, &[pair], &PeakConfig::default(), 1.0).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn random_descriptors_match_at_chance_level() {
        // per-pixel random unit descriptors: a mutual match lands on the
        // true partner with probability ~ 1/K per class
        let mut rng = substream(62, "test-chance", 0);
        let k_per_class = 8usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for _ in 0..40 {
            let dim = 8;
            let mut data_f = Vec::new();
            let mut data_m = Vec::new();
            for _ in 0..32 * 32 {
                data_f.extend(random_unit(&mut rng, dim));
                data_m.extend(random_unit(&mut rng, dim));
            }
            let bf = DescriptorBlock::from_unnormalized(32, 32, dim, data_f).unwrap();
            let bm = DescriptorBlock::from_unnormalized(32, 32, dim, data_m).unwrap();
            let kps = spread_keypoints(32, 32, 2 * k_per_class);
            let (c, t) =
                matching_precision_from_blocks(&bf, &bm, &kps, &kps, &Homography::identity(), 0.5)
                    .unwrap();
            correct += c;
            total += t;
        }
        let p = correct as f64 / total as f64;
        let chance = 1.0 / k_per_class as f64;
        assert!(
            p < 3.5 * chance,
            "random descriptors should match near chance {chance}, got {p}"
        );
    }
}
