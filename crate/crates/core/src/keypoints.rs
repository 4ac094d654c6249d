//! Keypoint heatmaps: Gaussian target generation from binary ground truth
//! and discrete peak extraction from predicted heatmaps.
//!
//! Heatmaps carry three channels: crossovers, bifurcations, and a combined
//! channel holding the pixelwise maximum of the two. Extraction reads the
//! two class channels independently; the combined channel exists for
//! detector training targets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::blockio;
use crate::geometry::{apply_homography, GeometryError, Homography, Point2};
use crate::imagebuf::Image;

pub const CROSSOVER_CHANNEL: usize = 0;
pub const BIFURCATION_CHANNEL: usize = 1;
pub const COMBINED_CHANNEL: usize = 2;
pub const HEATMAP_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("binary maps have mismatched dimensions: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("heatmap data length {got} does not match {width}x{height}x3")]
    BadLength {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("heatmap values must lie in [0, 1]")]
    ValueOutOfRange,
    #[error("heatmap container must have 3 channels, found {0}")]
    BadChannelCount(usize),
    #[error("unknown keypoint class '{0}'")]
    UnknownClass(String),
    #[error("keypoint file malformed at line {0}")]
    MalformedLine(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Block(#[from] blockio::BlockIoError),
    #[error("image error: {0}")]
    Image(String),
}

/// Vessel keypoint classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeypointClass {
    Crossover,
    Bifurcation,
}

impl KeypointClass {
    pub const ALL: [KeypointClass; 2] = [KeypointClass::Crossover, KeypointClass::Bifurcation];

    pub fn channel(self) -> usize {
        match self {
            KeypointClass::Crossover => CROSSOVER_CHANNEL,
            KeypointClass::Bifurcation => BIFURCATION_CHANNEL,
        }
    }
}

impl fmt::Display for KeypointClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeypointClass::Crossover => write!(f, "crossover"),
            KeypointClass::Bifurcation => write!(f, "bifurcation"),
        }
    }
}

impl FromStr for KeypointClass {
    type Err = KeypointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "crossover" => Ok(KeypointClass::Crossover),
            "bifurcation" => Ok(KeypointClass::Bifurcation),
            other => Err(KeypointError::UnknownClass(other.to_string())),
        }
    }
}

/// Three-channel confidence map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * HEATMAP_CHANNELS],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, KeypointError> {
        if data.len() != width * height * HEATMAP_CHANNELS {
            return Err(KeypointError::BadLength {
                width,
                height,
                got: data.len(),
            });
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(KeypointError::ValueOutOfRange);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * HEATMAP_CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * HEATMAP_CHANNELS + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stores either as the raw float block (`.ckdb`) or an 8-bit 3-channel
    /// image (any other extension, via PNG).
    pub fn save(&self, path: &Path) -> Result<(), KeypointError> {
        if path.extension().and_then(|e| e.to_str()) == Some("ckdb") {
            blockio::write_block(path, self.width, self.height, HEATMAP_CHANNELS, &self.data)?;
            Ok(())
        } else {
            let img = Image::from_data(self.width, self.height, 3, self.data.clone())
                .expect("heatmap layout matches image layout");
            img.save_png(path)
                .map_err(|e| KeypointError::Image(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Heatmap, KeypointError> {
        if path.extension().and_then(|e| e.to_str()) == Some("ckdb") {
            let block = blockio::read_block(path)?;
            if block.channels != HEATMAP_CHANNELS {
                return Err(KeypointError::BadChannelCount(block.channels));
            }
            let clamped = block.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Heatmap::from_data(block.width, block.height, clamped)
        } else {
            let img = Image::load_png(path).map_err(|e| KeypointError::Image(e.to_string()))?;
            Heatmap::from_data(img.width(), img.height(), img.data().to_vec())
        }
    }
}

/// Binary ground-truth map for one keypoint class.
#[derive(Debug, Clone)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_points(width: usize, height: usize, points: &[(usize, usize)]) -> Self {
        let mut map = Self::new(width, height);
        for &(x, y) in points {
            map.set(x, y, true);
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
}

/// Peak-extraction settings: minimum intensity and local-maximum window.
#[derive(Debug, Clone, Copy)]
pub struct PeakConfig {
    pub intensity_threshold: f64,
    pub window_radius: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            intensity_threshold: 0.35,
            window_radius: 2,
        }
    }
}

/// Gaussian target settings. The kernel radius defaults to `ceil(3*sigma)`.
#[derive(Debug, Clone, Copy)]
pub struct TargetConfig {
    pub sigma: f64,
    pub kernel_radius: usize,
}

impl TargetConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        Self {
            sigma,
            kernel_radius: (3.0 * sigma).ceil() as usize,
        }
    }
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self::with_sigma(2.0)
    }
}

/// One detected or ground-truth keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub location: Point2,
    pub class: KeypointClass,
    pub score: f64,
}

/// An ordered collection of keypoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint> {
        self.points.iter()
    }

    pub fn count_class(&self, class: KeypointClass) -> usize {
        self.points.iter().filter(|k| k.class == class).count()
    }

    /// Writes the CSV format: header `x,y,class,score`, one row per point.
    pub fn write_csv(&self, path: &Path) -> Result<(), KeypointError> {
        let mut out = String::from("x,y,class,score\n");
        for k in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                k.location.x, k.location.y, k.class, k.score
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<KeypointSet, KeypointError> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(KeypointError::MalformedLine(lineno + 1));
            }
            let x: f64 = fields[0]
                .trim()
                .parse()
                .map_err(|_| KeypointError::MalformedLine(lineno + 1))?;
            let y: f64 = fields[1]
                .trim()
                .parse()
                .map_err(|_| KeypointError::MalformedLine(lineno + 1))?;
            let class: KeypointClass = fields[2].parse()?;
            let score: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| KeypointError::MalformedLine(lineno + 1))?;
            if !(x.is_finite() && y.is_finite() && score.is_finite()) {
                return Err(KeypointError::MalformedLine(lineno + 1));
            }
            points.push(Keypoint {
                location: Point2::new(x, y),
                class,
                score,
            });
        }
        Ok(KeypointSet::new(points))
    }
}

/// Renders per-class Gaussian target heatmaps from binary ground truth.
///
/// Each class channel is the binary map convolved with a unit-peak Gaussian
/// (kernel truncated at `cfg.kernel_radius`), clamped to 1 where bumps
/// overlap. The combined channel is the pixelwise maximum of the two class
/// channels.
pub fn make_target_heatmaps(
    crossovers: &BinaryMap,
    bifurcations: &BinaryMap,
    cfg: &TargetConfig,
) -> Result<Heatmap, KeypointError> {
    if crossovers.width() != bifurcations.width() || crossovers.height() != bifurcations.height() {
        return Err(KeypointError::DimensionMismatch(
            crossovers.width(),
            crossovers.height(),
            bifurcations.width(),
            bifurcations.height(),
        ));
    }
    let (w, h) = (crossovers.width(), crossovers.height());
    let mut heatmap = Heatmap::new(w, h);
    let r = cfg.kernel_radius as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma * cfg.sigma);

    for (map, channel) in [
        (crossovers, CROSSOVER_CHANNEL),
        (bifurcations, BIFURCATION_CHANNEL),
    ] {
        for y in 0..h {
            for x in 0..w {
                if !map.get(x, y) {
                    continue;
                }
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let g = (-((dx * dx + dy * dy) as f64) * inv_two_sigma_sq).exp();
                        let (ux, uy) = (xx as usize, yy as usize);
                        let v = (heatmap.get(ux, uy, channel) + g).min(1.0);
                        heatmap.set(ux, uy, channel, v);
                    }
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let combined =
                heatmap
                    .get(x, y, CROSSOVER_CHANNEL)
                    .max(heatmap.get(x, y, BIFURCATION_CHANNEL));
            heatmap.set(x, y, COMBINED_CHANNEL, combined);
        }
    }
    Ok(heatmap)
}

/// Extracts discrete keypoints from the two class channels.
///
/// A pixel is a keypoint iff its value reaches the intensity threshold and
/// it is the maximum of its `(2r+1)^2` window; on exactly tied plateaus the
/// lexicographically smallest `(y, x)` wins, so extraction is deterministic.
pub fn extract_keypoints(h: &Heatmap, cfg: &PeakConfig) -> KeypointSet {
    debug_assert!(cfg.window_radius >= 1, "window radius must be at least 1");
    debug_assert!(
        cfg.intensity_threshold > 0.0 && cfg.intensity_threshold < 1.0,
        "threshold must lie in (0,1)"
    );
    let r = cfg.window_radius as isize;
    let (w, hgt) = (h.width(), h.height());
    let mut points = Vec::new();
    for class in KeypointClass::ALL {
        let channel = class.channel();
        for y in 0..hgt {
            for x in 0..w {
                let v = h.get(x, y, channel);
                if v < cfg.intensity_threshold {
                    continue;
                }
                let mut is_peak = true;
                'window: for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= hgt as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let nv = h.get(xx as usize, yy as usize, channel);
                        if nv > v || (nv == v && (yy, xx) < (y as isize, x as isize)) {
                            is_peak = false;
                            break 'window;
                        }
                    }
                }
                if is_peak {
                    points.push(Keypoint {
                        location: Point2::new(x as f64, y as f64),
                        class,
                        score: v,
                    });
                }
            }
        }
    }
    KeypointSet::new(points)
}

/// A transformed keypoint set together with, for each surviving point, the
/// index of its source keypoint.
#[derive(Debug, Clone)]
pub struct TransformedKeypoints {
    pub keypoints: KeypointSet,
    pub source_indices: Vec<usize>,
}

/// Maps keypoint locations through `h`, dropping points that land outside
/// `[0, w-1] x [0, h-1]`. Classes and scores are preserved.
pub fn transform_keypoints(
    k: &KeypointSet,
    h: &Homography,
    bounds: (usize, usize),
) -> Result<TransformedKeypoints, KeypointError> {
    let (w, hgt) = (bounds.0 as f64, bounds.1 as f64);
    let mut keypoints = Vec::new();
    let mut source_indices = Vec::new();
    for (i, kp) in k.points.iter().enumerate() {
        let p = apply_homography(h, kp.location)?;
        if p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= hgt - 1.0 {
            keypoints.push(Keypoint {
                location: p,
                class: kp.class,
                score: kp.score,
            });
            source_indices.push(i);
        }
    }
    Ok(TransformedKeypoints {
        keypoints: KeypointSet::new(keypoints),
        source_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AffineTransform2D;
    use proptest::prelude::*;

    fn bump_heatmap(w: usize, h: usize, x: usize, y: usize, peak: f64, channel: usize) -> Heatmap {
        let mut map = Heatmap::new(w, h);
        let sigma = 1.5f64;
        for yy in 0..h {
            for xx in 0..w {
                let d2 = ((xx as f64 - x as f64).powi(2) + (yy as f64 - y as f64).powi(2))
                    / (2.0 * sigma * sigma);
                let v = peak * (-d2).exp();
                if v > map.get(xx, yy, channel) {
                    map.set(xx, yy, channel, v);
                }
            }
        }
        map
    }

    #[test]
    fn target_all_zero() {
        let z = BinaryMap::new(16, 16);
        let h = make_target_heatmaps(&z, &z, &TargetConfig::default()).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_single_crossover_gaussian_values() {
        let gt = BinaryMap::from_points(32, 32, &[(10, 12)]);
        let empty = BinaryMap::new(32, 32);
        let h = make_target_heatmaps(&gt, &empty, &TargetConfig::with_sigma(2.0)).unwrap();
        assert!((h.get(10, 12, CROSSOVER_CHANNEL) - 1.0).abs() < 1e-12);
        let expected = (-1.0f64 / (2.0 * 4.0)).exp(); // ~0.8825
        assert!((h.get(11, 12, CROSSOVER_CHANNEL) - expected).abs() < 1e-12);
        assert_eq!(h.get(10, 12, BIFURCATION_CHANNEL), 0.0);
        assert_eq!(h.get(10, 12, COMBINED_CHANNEL), 1.0);
    }

    #[test]
    fn target_clamps_overlapping_bumps() {
        let gt = BinaryMap::from_points(32, 32, &[(10, 10), (11, 10)]);
        let empty = BinaryMap::new(32, 32);
        let h = make_target_heatmaps(&gt, &empty, &TargetConfig::default()).unwrap();
        assert!(h.data().iter().all(|&v| v <= 1.0));
        assert_eq!(h.get(10, 10, CROSSOVER_CHANNEL), 1.0);
    }

    #[test]
    fn target_dimension_mismatch() {
        let a = BinaryMap::new(8, 8);
        let b = BinaryMap::new(9, 8);
        assert!(matches!(
            make_target_heatmaps(&a, &b, &TargetConfig::default()),
            Err(KeypointError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn extract_single_bump() {
        let h = bump_heatmap(32, 32, 10, 12, 0.9, CROSSOVER_CHANNEL);
        let kps = extract_keypoints(&h, &PeakConfig::default());
        assert_eq!(kps.len(), 1);
        let k = &kps.points[0];
        assert_eq!(k.location, Point2::new(10.0, 12.0));
        assert_eq!(k.class, KeypointClass::Crossover);
        assert!((k.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn extract_rejects_below_threshold() {
        let h = bump_heatmap(32, 32, 10, 12, 0.30, BIFURCATION_CHANNEL);
        let kps = extract_keypoints(&h, &PeakConfig::default());
        assert!(kps.is_empty(), "0.30 < 0.35 must be rejected");
    }

    #[test]
    fn extract_empty_heatmap() {
        let kps = extract_keypoints(&Heatmap::new(16, 16), &PeakConfig::default());
        assert!(kps.is_empty());
    }

    #[test]
    fn extract_plateau_keeps_smallest_yx() {
        let mut h = Heatmap::new(16, 16);
        for &(x, y) in &[(5, 5), (6, 5), (5, 6), (6, 6)] {
            h.set(x, y, CROSSOVER_CHANNEL, 0.8);
        }
        let kps = extract_keypoints(&h, &PeakConfig::default());
        assert_eq!(kps.len(), 1);
        assert_eq!(kps.points[0].location, Point2::new(5.0, 5.0));
    }

    #[test]
    fn round_trip_well_separated_points() {
        let cross = [(5usize, 6usize), (20, 6), (12, 20)];
        let bif = [(26, 26), (5, 26)];
        let gt_c = BinaryMap::from_points(32, 32, &cross);
        let gt_b = BinaryMap::from_points(32, 32, &bif);
        let h = make_target_heatmaps(&gt_c, &gt_b, &TargetConfig::default()).unwrap();
        let kps = extract_keypoints(&h, &PeakConfig::default());
        assert_eq!(kps.count_class(KeypointClass::Crossover), cross.len());
        assert_eq!(kps.count_class(KeypointClass::Bifurcation), bif.len());
        for &(x, y) in &cross {
            assert!(kps
                .points
                .iter()
                .any(|k| k.class == KeypointClass::Crossover
                    && k.location == Point2::new(x as f64, y as f64)));
        }
    }

    #[test]
    fn transform_identity_full_index_map() {
        let kps = KeypointSet::new(vec![
            Keypoint {
                location: Point2::new(3.0, 4.0),
                class: KeypointClass::Crossover,
                score: 0.9,
            },
            Keypoint {
                location: Point2::new(9.0, 2.0),
                class: KeypointClass::Bifurcation,
                score: 0.7,
            },
        ]);
        let t = transform_keypoints(&kps, &Homography::identity(), (16, 16)).unwrap();
        assert_eq!(t.keypoints, kps);
        assert_eq!(t.source_indices, vec![0, 1]);
    }

    #[test]
    fn transform_drops_out_of_bounds() {
        let kps = KeypointSet::new(vec![
            Keypoint {
                location: Point2::new(3.0, 4.0),
                class: KeypointClass::Crossover,
                score: 0.9,
            },
            Keypoint {
                location: Point2::new(14.0, 2.0),
                class: KeypointClass::Crossover,
                score: 0.8,
            },
        ]);
        let shift =
            Homography::from_rows([[1.0, 0.0, 4.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let t = transform_keypoints(&kps, &shift, (16, 16)).unwrap();
        assert_eq!(t.keypoints.len(), 1);
        assert_eq!(t.source_indices, vec![0]);
        assert_eq!(t.keypoints.points[0].location, Point2::new(7.0, 4.0));
    }

    #[test]
    fn transform_rotation_matches_per_point_oracle() {
        let kps = KeypointSet::new(
            [(10.0, 10.0), (40.0, 12.0), (25.0, 40.0), (12.0, 30.0)]
                .iter()
                .map(|&(x, y)| Keypoint {
                    location: Point2::new(x, y),
                    class: KeypointClass::Crossover,
                    score: 1.0,
                })
                .collect(),
        );
        let rot = AffineTransform2D {
            rotation_deg: 45.0,
            translation_frac: (0.0, 0.0),
            scale: 1.0,
            shear_deg: 0.0,
            center: Point2::new(25.0, 25.0),
        }
        .expand((50.0, 50.0));
        let t = transform_keypoints(&kps, &rot, (50, 50)).unwrap();
        for (out, &src) in t.keypoints.points.iter().zip(&t.source_indices) {
            let expect = rot.apply(kps.points[src].location).unwrap();
            assert!(out.location.distance(&expect) < 1e-9);
        }
    }

    #[test]
    fn heatmap_file_round_trips() {
        let dir = std::env::temp_dir().join("vesselreg-heatmap-rt");
        std::fs::create_dir_all(&dir).unwrap();
        let gt = BinaryMap::from_points(24, 20, &[(6, 7), (15, 12)]);
        let empty = BinaryMap::new(24, 20);
        let h = make_target_heatmaps(&gt, &empty, &TargetConfig::default()).unwrap();

        let ckdb = dir.join("h.ckdb");
        h.save(&ckdb).unwrap();
        let back = Heatmap::load(&ckdb).unwrap();
        for (a, b) in h.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6, "f32 block storage");
        }

        let png = dir.join("h.png");
        h.save(&png).unwrap();
        let back = Heatmap::load(&png).unwrap();
        for (a, b) in h.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9, "8-bit quantization");
        }
        // quantization must not move the peaks
        let kps = extract_keypoints(&back, &PeakConfig::default());
        assert_eq!(kps.len(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("vesselreg-kps");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("kps.csv");
        let kps = KeypointSet::new(vec![
            Keypoint {
                location: Point2::new(3.5, 4.25),
                class: KeypointClass::Crossover,
                score: 0.91,
            },
            Keypoint {
                location: Point2::new(9.0, 2.0),
                class: KeypointClass::Bifurcation,
                score: 0.49,
            },
        ]);
        kps.write_csv(&path).unwrap();
        let back = KeypointSet::read_csv(&path).unwrap();
        assert_eq!(kps, back);
    }

    proptest! {
        // Raising the threshold can only remove keypoints.
        #[test]
        fn count_monotone_in_threshold(seed in 0u64..500, t1 in 0.05..0.9f64, dt in 0.0..0.5f64) {
            let mut rng = crate::rng::substream(seed, "test-thresh", 0);
            use rand::Rng;
            let mut h = Heatmap::new(24, 24);
            for _ in 0..6 {
                let x = rng.random_range(2..22);
                let y = rng.random_range(2..22);
                let v: f64 = rng.random_range(0.1..1.0);
                let cur = h.get(x, y, CROSSOVER_CHANNEL);
                h.set(x, y, CROSSOVER_CHANNEL, cur.max(v));
            }
            let t2 = (t1 + dt).min(0.99);
            let lo = extract_keypoints(&h, &PeakConfig { intensity_threshold: t1, window_radius: 2 });
            let hi = extract_keypoints(&h, &PeakConfig { intensity_threshold: t2, window_radius: 2 });
            prop_assert!(hi.len() <= lo.len());
        }

        // Extracting from a translated heatmap equals translating the
        // extracted keypoints, for interior-safe integer shifts.
        #[test]
        fn extraction_translation_equivariance(dx in 0usize..5, dy in 0usize..5) {
            let base = [(6usize, 7usize), (14, 9), (9, 15)];
            let gt = BinaryMap::from_points(32, 32, &base);
            let empty = BinaryMap::new(32, 32);
            let cfg = TargetConfig::default();
            let h0 = make_target_heatmaps(&gt, &empty, &cfg).unwrap();
            let shifted: Vec<(usize, usize)> = base.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            let gt2 = BinaryMap::from_points(32, 32, &shifted);
            let h1 = make_target_heatmaps(&gt2, &empty, &cfg).unwrap();
            let k0 = extract_keypoints(&h0, &PeakConfig::default());
            let k1 = extract_keypoints(&h1, &PeakConfig::default());
            prop_assert_eq!(k0.len(), k1.len());
            for (a, b) in k0.points.iter().zip(&k1.points) {
                prop_assert_eq!(a.location.x + dx as f64, b.location.x);
                prop_assert_eq!(a.location.y + dy as f64, b.location.y);
            }
        }
    }
}
