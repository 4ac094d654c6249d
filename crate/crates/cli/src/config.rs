//! Line-oriented `key = value` pipeline configuration.
//!
//! Every knob has a documented default; unknown keys are rejected so typos
//! fail loudly. The effective configuration (defaults, then file, then
//! command-line overrides) is echoed before a command runs, which makes any
//! run reproducible from its captured output.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vesselreg::contrastive::{LossConfig, TripletMining};
use vesselreg::descnet::{AugmentationSpec, LossKind, NetConfig, OptimizerKind, TrainConfig};
use vesselreg::geometry::RansacConfig;
use vesselreg::keypoints::{PeakConfig, TargetConfig};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    // keypoint extraction
    pub peak_threshold: f64,
    pub peak_window_radius: usize,
    // target heatmaps
    pub target_sigma: f64,
    // losses
    pub loss_temperature: f64,
    pub loss_margin: f64,
    // training
    pub train_loss: LossKind,
    pub train_views: usize,
    pub train_learning_rate: f64,
    pub train_epochs: usize,
    pub train_optimizer: OptimizerKind,
    pub train_mining: String, // "hardest" or "random"
    // network
    pub net_hidden: Vec<usize>,
    pub net_dim: usize,
    // augmentation
    pub aug_rotation_deg: f64,
    pub aug_translation_frac: f64,
    pub aug_scale_min: f64,
    pub aug_scale_max: f64,
    pub aug_shear_deg: f64,
    pub aug_hsv_h: f64,
    pub aug_hsv_s: f64,
    pub aug_hsv_v: f64,
    pub aug_noise_std: f64,
    pub aug_noise_prob: f64,
    // robust fitting
    pub ransac_max_iterations: usize,
    pub ransac_inlier_threshold_px: f64,
    pub ransac_min_inliers: usize,
    pub ransac_exhaustive: bool,
    // synthesis
    pub synth_size: usize,
    pub synth_branches: usize,
    pub synth_crossovers: usize,
    pub synth_bifurcations: usize,
    pub synth_train_images: usize,
    // evaluation / registration
    pub eval_tol_px: f64,
    pub register_scale_x: f64,
    pub register_scale_y: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            peak_threshold: 0.35,
            peak_window_radius: 2,
            target_sigma: 2.0,
            loss_temperature: 0.1,
            loss_margin: 0.05,
            train_loss: LossKind::MpInfonce,
            train_views: 9,
            train_learning_rate: 1e-4,
            train_epochs: 50,
            train_optimizer: OptimizerKind::Adam,
            train_mining: "hardest".into(),
            net_hidden: vec![16, 16],
            net_dim: 16,
            aug_rotation_deg: 60.0,
            aug_translation_frac: 0.25,
            aug_scale_min: 0.75,
            aug_scale_max: 1.25,
            aug_shear_deg: 30.0,
            aug_hsv_h: 0.02,
            aug_hsv_s: 0.1,
            aug_hsv_v: 0.1,
            aug_noise_std: 0.05,
            aug_noise_prob: 0.25,
            ransac_max_iterations: 1000,
            ransac_inlier_threshold_px: 3.0,
            ransac_min_inliers: 4,
            ransac_exhaustive: false,
            synth_size: 64,
            synth_branches: 3,
            synth_crossovers: 6,
            synth_bifurcations: 6,
            synth_train_images: 5,
            eval_tol_px: 3.0,
            register_scale_x: 1.0,
            register_scale_y: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key = value", path.display(), i + 1);
            };
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_threshold > 0.0 && self.peak_threshold < 1.0) {
            bail!("peak.threshold must lie in (0, 1)");
        }
        if self.peak_window_radius < 1 {
            bail!("peak.window_radius must be at least 1");
        }
        if self.target_sigma <= 0.0 {
            bail!("target.sigma must be positive");
        }
        if self.loss_temperature <= 0.0 {
            bail!("loss.temperature must be positive");
        }
        if self.loss_margin < 0.0 {
            bail!("loss.margin must be non-negative");
        }
        if self.train_views < 1 {
            bail!("train.views must be at least 1");
        }
        if self.train_learning_rate <= 0.0 {
            bail!("train.learning_rate must be positive");
        }
        if self.ransac_inlier_threshold_px <= 0.0 {
            bail!("ransac.inlier_threshold_px must be positive");
        }
        if self.ransac_max_iterations < 1 {
            bail!("ransac.max_iterations must be at least 1");
        }
        if self.aug_scale_min > self.aug_scale_max || self.aug_scale_min <= 0.0 {
            bail!("aug.scale_min..aug.scale_max must be a positive range");
        }
        if self.synth_size < 32 {
            bail!("synth.size must be at least 32");
        }
        if self.train_mining != "hardest" && self.train_mining != "random" {
            bail!("train.mining must be 'hardest' or 'random'");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            ($t:ty) => {
                value
                    .parse::<$t>()
                    .with_context(|| format!("bad value '{value}' for {key}"))?
            };
        }
        match key {
            "seed" => self.seed = parse!(u64),
            "peak.threshold" => self.peak_threshold = parse!(f64),
            "peak.window_radius" => self.peak_window_radius = parse!(usize),
            "target.sigma" => self.target_sigma = parse!(f64),
            "loss.temperature" => self.loss_temperature = parse!(f64),
            "loss.margin" => self.loss_margin = parse!(f64),
            "train.loss" => {
                self.train_loss = value.parse().map_err(|e: String| anyhow::anyhow!(e))?
            }
            "train.views" => self.train_views = parse!(usize),
            "train.learning_rate" => self.train_learning_rate = parse!(f64),
            "train.epochs" => self.train_epochs = parse!(usize),
            "train.optimizer" => {
                self.train_optimizer = value.parse().map_err(|e: String| anyhow::anyhow!(e))?
            }
            "train.mining" => self.train_mining = value.to_string(),
            "net.hidden" => {
                self.net_hidden = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("bad value '{value}' for net.hidden"))?
            }
            "net.dim" => self.net_dim = parse!(usize),
            "aug.rotation_deg" => self.aug_rotation_deg = parse!(f64),
            "aug.translation_frac" => self.aug_translation_frac = parse!(f64),
            "aug.scale_min" => self.aug_scale_min = parse!(f64),
            "aug.scale_max" => self.aug_scale_max = parse!(f64),
            "aug.shear_deg" => self.aug_shear_deg = parse!(f64),
            "aug.hsv_h" => self.aug_hsv_h = parse!(f64),
            "aug.hsv_s" => self.aug_hsv_s = parse!(f64),
            "aug.hsv_v" => self.aug_hsv_v = parse!(f64),
            "aug.noise_std" => self.aug_noise_std = parse!(f64),
            "aug.noise_prob" => self.aug_noise_prob = parse!(f64),
            "ransac.max_iterations" => self.ransac_max_iterations = parse!(usize),
            "ransac.inlier_threshold_px" => self.ransac_inlier_threshold_px = parse!(f64),
            "ransac.min_inliers" => self.ransac_min_inliers = parse!(usize),
            "ransac.exhaustive" => self.ransac_exhaustive = parse!(bool),
            "synth.size" => self.synth_size = parse!(usize),
            "synth.branches" => self.synth_branches = parse!(usize),
            "synth.crossovers" => self.synth_crossovers = parse!(usize),
            "synth.bifurcations" => self.synth_bifurcations = parse!(usize),
            "synth.train_images" => self.synth_train_images = parse!(usize),
            "eval.tol_px" => self.eval_tol_px = parse!(f64),
            "register.scale_x" => self.register_scale_x = parse!(f64),
            "register.scale_y" => self.register_scale_y = parse!(f64),
            other => bail!("unknown configuration key '{other}'"),
        }
        Ok(())
    }

    /// The effective configuration as `key = value` lines.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("peak.threshold", self.peak_threshold.to_string());
        kv("peak.window_radius", self.peak_window_radius.to_string());
        kv("target.sigma", self.target_sigma.to_string());
        kv("loss.temperature", self.loss_temperature.to_string());
        kv("loss.margin", self.loss_margin.to_string());
        kv("train.loss", self.train_loss.to_string());
        kv("train.views", self.train_views.to_string());
        kv("train.learning_rate", self.train_learning_rate.to_string());
        kv("train.epochs", self.train_epochs.to_string());
        kv(
            "train.optimizer",
            match self.train_optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
        );
        kv("train.mining", self.train_mining.clone());
        kv(
            "net.hidden",
            self.net_hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("net.dim", self.net_dim.to_string());
        kv("aug.rotation_deg", self.aug_rotation_deg.to_string());
        kv(
            "aug.translation_frac",
            self.aug_translation_frac.to_string(),
        );
        kv("aug.scale_min", self.aug_scale_min.to_string());
        kv("aug.scale_max", self.aug_scale_max.to_string());
        kv("aug.shear_deg", self.aug_shear_deg.to_string());
        kv("aug.hsv_h", self.aug_hsv_h.to_string());
        kv("aug.hsv_s", self.aug_hsv_s.to_string());
        kv("aug.hsv_v", self.aug_hsv_v.to_string());
        kv("aug.noise_std", self.aug_noise_std.to_string());
        kv("aug.noise_prob", self.aug_noise_prob.to_string());
        kv(
            "ransac.max_iterations",
            self.ransac_max_iterations.to_string(),
        );
        kv(
            "ransac.inlier_threshold_px",
            self.ransac_inlier_threshold_px.to_string(),
        );
        kv("ransac.min_inliers", self.ransac_min_inliers.to_string());
        kv("ransac.exhaustive", self.ransac_exhaustive.to_string());
        kv("synth.size", self.synth_size.to_string());
        kv("synth.branches", self.synth_branches.to_string());
        kv("synth.crossovers", self.synth_crossovers.to_string());
        kv("synth.bifurcations", self.synth_bifurcations.to_string());
        kv("synth.train_images", self.synth_train_images.to_string());
        kv("eval.tol_px", self.eval_tol_px.to_string());
        kv("register.scale_x", self.register_scale_x.to_string());
        kv("register.scale_y", self.register_scale_y.to_string());
        s
    }

    // typed views for the library layers

    pub fn peak(&self) -> PeakConfig {
        PeakConfig {
            intensity_threshold: self.peak_threshold,
            window_radius: self.peak_window_radius,
        }
    }

    pub fn target(&self) -> TargetConfig {
        TargetConfig::with_sigma(self.target_sigma)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.loss_temperature,
            margin: self.loss_margin,
        }
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac_max_iterations,
            inlier_threshold_px: self.ransac_inlier_threshold_px,
            min_inliers: self.ransac_min_inliers,
            seed: self.seed,
            exhaustive: self.ransac_exhaustive,
        }
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            rotation_deg: self.aug_rotation_deg,
            translation_frac: self.aug_translation_frac,
            scale_range: (self.aug_scale_min, self.aug_scale_max),
            shear_deg: self.aug_shear_deg,
            hsv_jitter: (self.aug_hsv_h, self.aug_hsv_s, self.aug_hsv_v),
            noise_std: self.aug_noise_std,
            noise_prob: self.aug_noise_prob,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            input_channels: 3,
            hidden_channels: self.net_hidden.clone(),
            descriptor_dim: self.net_dim,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            loss: self.train_loss,
            n_views: self.train_views,
            learning_rate: self.train_learning_rate,
            epochs: self.train_epochs,
            seed: self.seed,
            optimizer: self.train_optimizer,
            loss_cfg: self.loss(),
            augmentation: self.augmentation(),
            mining: if self.train_mining == "random" {
                TripletMining::Random { seed: self.seed }
            } else {
                TripletMining::Hardest
            },
        }
    }
}
