//! Synthetic vessel-tree images with exactly known crossovers,
//! bifurcations and ground-truth homographies.
//!
//! Branches are quadratic Bezier strips drawn dark on a shaded disc.
//! Crossed and branching structures are *constructed through* their
//! keypoint: both arms of a crossover pass through the recorded pixel and
//! all three segments of a bifurcation end there, so the ground truth is
//! exact by construction rather than detected afterwards. Case ground
//! truth uses the registration convention: the stored homography maps
//! moving coordinates onto fixed ones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::descnet::EvalPair;
use crate::evalkit::{Category, ControlPointPair};
use crate::geometry::{AffineTransform2D, GeometryError, Homography, Point2};
use crate::imagebuf::{shift_hsv, Image, ImageError};
use crate::keypoints::{
    make_target_heatmaps, transform_keypoints, BinaryMap, Heatmap, Keypoint, KeypointClass,
    KeypointError, KeypointSet, TargetConfig,
};
use crate::rng::substream;

/// Minimum center-to-center spacing between constructed keypoints. Large
/// enough that Gaussian target bumps (sigma 2) keep strict, unclipped peaks.
const MIN_SEPARATION: f64 = 7.0;
/// Placement attempts per structure before giving up.
const MAX_ATTEMPTS: usize = 400;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error("image error: {0}")]
    Image(#[from] ImageError),
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of one synthetic vessel-tree image.
#[derive(Debug, Clone, Copy)]
pub struct VesselTreeSpec {
    pub image_size: (usize, usize),
    /// Decorative branches without recorded keypoints.
    pub n_branches: usize,
    pub vessel_width: (f64, f64),
    pub n_crossovers: usize,
    pub n_bifurcations: usize,
    pub seed: u64,
}

impl VesselTreeSpec {
    pub fn desk(size: usize, seed: u64) -> Self {
        assert!(size >= 32, "image size must be at least 32");
        Self {
            image_size: (size, size),
            n_branches: 3,
            vessel_width: (1.2, 2.2),
            n_crossovers: 9,
            n_bifurcations: 9,
            seed,
        }
    }
}

/// Category analog of a synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryAnalog {
    HighOverlap,
    LowOverlap,
    AppearanceChange,
}

impl CategoryAnalog {
    pub const ALL: [CategoryAnalog; 3] = [
        CategoryAnalog::HighOverlap,
        CategoryAnalog::LowOverlap,
        CategoryAnalog::AppearanceChange,
    ];

    /// The evaluation category this analog stands in for.
    pub fn category(self) -> Category {
        match self {
            CategoryAnalog::HighOverlap => Category::S,
            CategoryAnalog::LowOverlap => Category::P,
            CategoryAnalog::AppearanceChange => Category::A,
        }
    }

    pub fn from_category(cat: Category) -> Self {
        match cat {
            Category::S => CategoryAnalog::HighOverlap,
            Category::P => CategoryAnalog::LowOverlap,
            Category::A => CategoryAnalog::AppearanceChange,
        }
    }
}

impl fmt::Display for CategoryAnalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CategoryAnalog::HighOverlap => write!(f, "high_overlap"),
            CategoryAnalog::LowOverlap => write!(f, "low_overlap"),
            CategoryAnalog::AppearanceChange => write!(f, "appearance_change"),
        }
    }
}

impl FromStr for CategoryAnalog {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "high_overlap" => Ok(CategoryAnalog::HighOverlap),
            "low_overlap" => Ok(CategoryAnalog::LowOverlap),
            "appearance_change" => Ok(CategoryAnalog::AppearanceChange),
            other => Err(SynthError::SpecInfeasible(format!(
                "unknown category analog '{other}'"
            ))),
        }
    }
}

/// A registration pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub id: String,
    pub category: CategoryAnalog,
    pub image_fixed: Image,
    pub image_moving: Image,
    /// Maps moving coordinates onto fixed coordinates.
    pub gt_homography: Homography,
    pub gt_keypoints_fixed: KeypointSet,
    pub gt_keypoints_moving: KeypointSet,
    pub control_points: Vec<ControlPointPair>,
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Quad {
    p0: (f64, f64),
    c: (f64, f64),
    p1: (f64, f64),
}

impl Quad {
    fn eval(&self, t: f64) -> (f64, f64) {
        let u = 1.0 - t;
        (
            u * u * self.p0.0 + 2.0 * u * t * self.c.0 + t * t * self.p1.0,
            u * u * self.p0.1 + 2.0 * u * t * self.c.1 + t * t * self.p1.1,
        )
    }

    fn rough_length(&self) -> f64 {
        let mut len = 0.0;
        let mut prev = self.eval(0.0);
        for i in 1..=16 {
            let p = self.eval(i as f64 / 16.0);
            len += (p.0 - prev.0).hypot(p.1 - prev.1);
            prev = p;
        }
        len
    }
}

fn stroke_quad(img: &mut Image, quad: &Quad, width: f64, color: &[f64; 3]) {
    let (w, h) = (img.width(), img.height());
    let mut alpha = vec![0.0f64; w * h];
    let steps = (quad.rough_length() / 0.25).ceil().max(2.0) as usize;
    let r = width / 2.0;
    let reach = (r + 1.5).ceil() as isize;
    for i in 0..=steps {
        let (cx, cy) = quad.eval(i as f64 / steps as f64);
        let (px, py) = (cx.round() as isize, cy.round() as isize);
        for dy in -reach..=reach {
            let y = py + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = px + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                let idx = y as usize * w + x as usize;
                if a > alpha[idx] {
                    alpha[idx] = a;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let a = alpha[y * w + x];
            if a > 0.0 {
                let px = img.pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

fn shaded_disc_background(w: usize, h: usize) -> Image {
    let mut img = Image::new(w, h, 3);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let radius = 0.48 * w.min(h) as f64;
    let base = [0.82, 0.52, 0.24];
    let outside = [0.04, 0.04, 0.04];
    for y in 0..h {
        for x in 0..w {
            let r = (x as f64 - cx).hypot(y as f64 - cy) / radius;
            let px = img.pixel_mut(x, y);
            if r > 1.0 {
                px.copy_from_slice(&outside);
            } else {
                let shade = 1.0 - 0.35 * r * r;
                for c in 0..3 {
                    px[c] = base[c] * shade;
                }
            }
        }
    }
    img
}

fn rotate(v: (f64, f64), rad: f64) -> (f64, f64) {
    let (s, c) = rad.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

/// A curve through `p` at its midpoint: endpoints `p +/- len*dir + bow*n`,
/// control point compensated so the t=0.5 point is exactly `p`.
fn arm_through(p: (f64, f64), dir: (f64, f64), len: f64, bow: f64) -> Quad {
    let n = (-dir.1, dir.0);
    let p0 = (p.0 - len * dir.0 + bow * n.0, p.1 - len * dir.1 + bow * n.1);
    let p1 = (p.0 + len * dir.0 + bow * n.0, p.1 + len * dir.1 + bow * n.1);
    let c = (
        2.0 * p.0 - (p0.0 + p1.0) / 2.0,
        2.0 * p.1 - (p0.1 + p1.1) / 2.0,
    );
    Quad { p0, c, p1 }
}

/// A curve from `p` outward along `dir`, with a sideways bow.
fn arm_from(p: (f64, f64), dir: (f64, f64), len: f64, bow: f64) -> Quad {
    let n = (-dir.1, dir.0);
    let p1 = (p.0 + len * dir.0, p.1 + len * dir.1);
    let c = (
        p.0 + 0.5 * len * dir.0 + bow * n.0,
        p.1 + 0.5 * len * dir.1 + bow * n.1,
    );
    Quad { p0: p, c, p1 }
}

struct Placement {
    points: Vec<(f64, f64)>,
}

impl Placement {
    fn place(
        &mut self,
        rng: &mut ChaCha8Rng,
        center: (f64, f64),
        radius: f64,
    ) -> Option<(f64, f64)> {
        for _ in 0..MAX_ATTEMPTS {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = radius * rng.random_range(0.0..1.0f64).sqrt();
            let cand = (
                (center.0 + rad * ang.cos()).round(),
                (center.1 + rad * ang.sin()).round(),
            );
            if self
                .points
                .iter()
                .all(|p| (p.0 - cand.0).hypot(p.1 - cand.1) >= MIN_SEPARATION)
            {
                self.points.push(cand);
                return Some(cand);
            }
        }
        None
    }
}

/// Renders one vessel tree; the returned keypoints are the constructed
/// crossover and bifurcation pixels, byte-deterministic per seed.
pub fn generate_tree(spec: &VesselTreeSpec) -> Result<(Image, KeypointSet), SynthError> {
    let (w, h) = spec.image_size;
    assert!(w >= 32 && h >= 32, "image size must be at least 32");
    let mut rng = substream(spec.seed, "synth-tree", 0);
    let mut img = shaded_disc_background(w, h);
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let keep_in = 0.48 * w.min(h) as f64 - 7.0;

    let mut placement = Placement { points: Vec::new() };
    let mut keypoints = Vec::new();

    let vessel_color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            0.36 + rng.random_range(-0.05..0.05),
            0.10 + rng.random_range(-0.02..0.02),
            0.08,
        ]
    };

    for _ in 0..spec.n_crossovers {
        let p = placement.place(&mut rng, center, keep_in).ok_or_else(|| {
            SynthError::SpecInfeasible(format!(
                "cannot place {} crossovers + {} bifurcations at {}x{}",
                spec.n_crossovers, spec.n_bifurcations, w, h
            ))
        })?;
        let a0 = rng.random_range(0.0..std::f64::consts::PI);
        let delta = rng.random_range(0.9..2.2); // 52..126 degrees
        let len = rng.random_range(6.0..11.0);
        let width = rng.random_range(spec.vessel_width.0..spec.vessel_width.1);
        let color = vessel_color(&mut rng);
        for dir_angle in [a0, a0 + delta] {
            let dir = (dir_angle.cos(), dir_angle.sin());
            let bow = rng.random_range(-1.5..1.5);
            stroke_quad(&mut img, &arm_through(p, dir, len, bow), width, &color);
        }
        keypoints.push(Keypoint {
            location: Point2::new(p.0, p.1),
            class: KeypointClass::Crossover,
            score: 1.0,
        });
    }

    for _ in 0..spec.n_bifurcations {
        let p = placement.place(&mut rng, center, keep_in).ok_or_else(|| {
            SynthError::SpecInfeasible(format!(
                "cannot place {} crossovers + {} bifurcations at {}x{}",
                spec.n_crossovers, spec.n_bifurcations, w, h
            ))
        })?;
        let a0 = rng.random_range(0.0..std::f64::consts::TAU);
        let parent = (a0.cos(), a0.sin());
        let len = rng.random_range(6.0..11.0);
        let width = rng.random_range(spec.vessel_width.0..spec.vessel_width.1);
        let color = vessel_color(&mut rng);
        // parent arrives at p; children leave at diverging angles
        stroke_quad(
            &mut img,
            &arm_from(p, (-parent.0, -parent.1), len, rng.random_range(-1.0..1.0)),
            width,
            &color,
        );
        for sign in [-1.0, 1.0] {
            let theta = sign * rng.random_range(0.45..0.95); // 26..54 degrees
            let dir = rotate(parent, theta);
            stroke_quad(
                &mut img,
                &arm_from(
                    p,
                    dir,
                    rng.random_range(5.0..9.0),
                    rng.random_range(-1.0..1.0),
                ),
                width * rng.random_range(0.75..0.95),
                &color,
            );
        }
        keypoints.push(Keypoint {
            location: Point2::new(p.0, p.1),
            class: KeypointClass::Bifurcation,
            score: 1.0,
        });
    }

    // decorative branches, kept away from the recorded keypoints
    'branches: for _ in 0..spec.n_branches {
        for _ in 0..MAX_ATTEMPTS {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = keep_in * rng.random_range(0.0..1.0f64).sqrt();
            let p0 = (center.0 + rad * ang.cos(), center.1 + rad * ang.sin());
            let dir_a = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(10.0..20.0);
            let quad = arm_from(
                p0,
                (dir_a.cos(), dir_a.sin()),
                len,
                rng.random_range(-3.0..3.0),
            );
            let clear = (0..=12).all(|i| {
                let q = quad.eval(i as f64 / 12.0);
                placement
                    .points
                    .iter()
                    .all(|kp| (kp.0 - q.0).hypot(kp.1 - q.1) >= MIN_SEPARATION * 0.7)
            });
            if clear {
                let width = rng.random_range(spec.vessel_width.0..spec.vessel_width.1);
                let color = vessel_color(&mut rng);
                stroke_quad(&mut img, &quad, width, &color);
                continue 'branches;
            }
        }
        // could not fit this decorative branch; skip it
    }

    img.clamp01();
    Ok((img, KeypointSet::new(keypoints)))
}

// ---------------------------------------------------------------------------
// case assembly
// ---------------------------------------------------------------------------

fn sample_case_map(
    category: CategoryAnalog,
    rng: &mut ChaCha8Rng,
    size: (usize, usize),
) -> Homography {
    let center = Point2::new((size.0 as f64 - 1.0) / 2.0, (size.1 as f64 - 1.0) / 2.0);
    let aff = match category {
        CategoryAnalog::HighOverlap | CategoryAnalog::AppearanceChange => AffineTransform2D {
            rotation_deg: rng.random_range(-10.0..10.0),
            translation_frac: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            scale: rng.random_range(0.96..1.04),
            shear_deg: rng.random_range(-3.0..3.0),
            center,
        },
        CategoryAnalog::LowOverlap => {
            let main = rng.random_range(0.42..0.5)
                * if rng.random_range(0..2) == 0 {
                    1.0
                } else {
                    -1.0
                };
            let minor = rng.random_range(0.15..0.28)
                * if rng.random_range(0..2) == 0 {
                    1.0
                } else {
                    -1.0
                };
            let (tx, ty) = if rng.random_range(0..2) == 0 {
                (main, minor)
            } else {
                (minor, main)
            };
            AffineTransform2D {
                rotation_deg: rng.random_range(-5.0..5.0),
                translation_frac: (tx, ty),
                scale: rng.random_range(0.97..1.03),
                shear_deg: 0.0,
                center,
            }
        }
    };
    aff.expand((size.0 as f64, size.1 as f64))
}

/// Fraction of moving pixels whose ground-truth image lies inside the fixed
/// bounds; the mask-overlap measure used to classify low-overlap cases.
pub fn shared_area_fraction(case: &SyntheticCase) -> f64 {
    let (w, h) = (case.image_moving.width(), case.image_moving.height());
    let mut inside = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Ok(p) = case.gt_homography.apply(Point2::new(x as f64, y as f64)) {
                if p.x >= 0.0 && p.y >= 0.0 && p.x <= w as f64 - 1.0 && p.y <= h as f64 - 1.0 {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (w * h) as f64
}

fn assemble_case(
    id: String,
    category: CategoryAnalog,
    image_fixed: Image,
    kps_fixed: KeypointSet,
    gt: Homography,
    rng: &mut ChaCha8Rng,
    photometric: bool,
) -> Result<SyntheticCase, SynthError> {
    let (w, h) = (image_fixed.width(), image_fixed.height());
    // moving pixel x samples the fixed image at gt(x)
    let mut image_moving = image_fixed.warp(&gt, w, h, &[0.04, 0.04, 0.04]);
    let mut kps_moving = transform_keypoints(&kps_fixed, &gt.inverse()?, (w, h))?.keypoints;

    // every moving image carries mild illumination jitter, as photographs
    // do; appearance-change cases add strong shifts and structure removal
    if photometric {
        let base_dh = rng.random_range(-0.03..0.03);
        let base_ds = rng.random_range(-0.15..0.15);
        let base_dv = rng.random_range(-0.12..0.12);
        shift_hsv(&mut image_moving, base_dh, base_ds, base_dv);
        image_moving.clamp01();
    }

    if category == CategoryAnalog::AppearanceChange {
        let wiggle = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let mag = rng.random_range(lo..hi);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        };
        let dh = wiggle(rng, 0.04, 0.09);
        let ds = wiggle(rng, 0.15, 0.3);
        let dv = wiggle(rng, 0.12, 0.22);
        shift_hsv(&mut image_moving, dh, ds, dv);
        image_moving.clamp01();

        // erase up to 20% of the visible structures from the moving image
        let visible = kps_moving.len();
        if visible >= 2 {
            let n_remove = ((visible as f64 * rng.random_range(0.1..0.2)).ceil() as usize)
                .clamp(1, visible - 1);
            let mut removed: Vec<usize> = Vec::new();
            while removed.len() < n_remove {
                let i = rng.random_range(0..visible);
                if !removed.contains(&i) {
                    removed.push(i);
                }
            }
            for &i in &removed {
                erase_structure(&mut image_moving, kps_moving.points[i].location, 5.5);
            }
            removed.sort_unstable();
            let mut kept = Vec::new();
            for (i, kp) in kps_moving.points.iter().enumerate() {
                if !removed.contains(&i) {
                    kept.push(*kp);
                }
            }
            kps_moving = KeypointSet::new(kept);
        }
    }

    // control points sampled uniformly over the shared region
    let mut control_points = Vec::new();
    let mut attempts = 0;
    while control_points.len() < 10 && attempts < 4000 {
        attempts += 1;
        let m = Point2::new(
            rng.random_range(1.0..w as f64 - 1.0),
            rng.random_range(1.0..h as f64 - 1.0),
        );
        if let Ok(f) = gt.apply(m) {
            if f.x >= 1.0 && f.y >= 1.0 && f.x <= w as f64 - 2.0 && f.y <= h as f64 - 2.0 {
                control_points.push(ControlPointPair {
                    fixed: f,
                    moving: m,
                });
            }
        }
    }
    if control_points.len() < 10 {
        return Err(SynthError::SpecInfeasible(
            "no shared region for control points".into(),
        ));
    }

    Ok(SyntheticCase {
        id,
        category,
        image_fixed,
        image_moving,
        gt_homography: gt,
        gt_keypoints_fixed: kps_fixed,
        gt_keypoints_moving: kps_moving,
        control_points,
    })
}

/// Paints the shaded background color over a disc, removing the local
/// vessel structure.
fn erase_structure(img: &mut Image, at: Point2, radius: f64) {
    let (w, h) = (img.width(), img.height());
    let bg = shaded_disc_background(w, h);
    let reach = radius.ceil() as isize;
    let (cx, cy) = (at.x.round() as isize, at.y.round() as isize);
    for dy in -reach..=reach {
        let y = cy + dy;
        if y < 0 || y >= h as isize {
            continue;
        }
        for dx in -reach..=reach {
            let x = cx + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            let d = (dx * dx + dy * dy) as f64;
            if d <= radius * radius {
                let (ux, uy) = (x as usize, y as usize);
                let src = bg.pixel(ux, uy).to_vec();
                img.pixel_mut(ux, uy).copy_from_slice(&src);
            }
        }
    }
}

/// Generates a full registration case of the given category analog.
pub fn generate_case(
    spec: &VesselTreeSpec,
    category: CategoryAnalog,
    seed: u64,
) -> Result<SyntheticCase, SynthError> {
    let tree_spec = VesselTreeSpec {
        seed: seed ^ 0x7265_6e64,
        ..*spec
    };
    let (image_fixed, kps_fixed) = generate_tree(&tree_spec)?;
    let mut rng = substream(seed, "synth-case", 0);
    let id = format!("{category}_{seed:08x}");

    for attempt in 0..20 {
        let gt = sample_case_map(category, &mut rng, spec.image_size);
        let case = assemble_case(
            id.clone(),
            category,
            image_fixed.clone(),
            kps_fixed.clone(),
            gt,
            &mut rng,
            true,
        )?;
        let shared = shared_area_fraction(&case);
        let ok = match category {
            CategoryAnalog::LowOverlap => shared < 0.5,
            _ => shared > 0.7,
        };
        if ok && case.gt_keypoints_moving.len() >= 2 {
            return Ok(case);
        }
        if attempt == 19 {
            return Err(SynthError::SpecInfeasible(format!(
                "could not sample a {category} transform with the required overlap"
            )));
        }
    }
    unreachable!("loop returns or errors");
}

/// A high-overlap case with the identity transform: fixed and moving images
/// are equal and every control point has zero error.
pub fn identity_case(spec: &VesselTreeSpec, seed: u64) -> Result<SyntheticCase, SynthError> {
    let tree_spec = VesselTreeSpec {
        seed: seed ^ 0x7265_6e64,
        ..*spec
    };
    let (image_fixed, kps_fixed) = generate_tree(&tree_spec)?;
    let mut rng = substream(seed, "synth-case", 0);
    assemble_case(
        format!("identity_{seed:08x}"),
        CategoryAnalog::HighOverlap,
        image_fixed,
        kps_fixed,
        Homography::identity(),
        &mut rng,
        false,
    )
}

/// Renders the oracle detector output: Gaussian target heatmaps around the
/// ground-truth keypoints (rounded to their integer pixel).
pub fn oracle_heatmap(
    kps: &KeypointSet,
    size: (usize, usize),
    cfg: &TargetConfig,
) -> Result<Heatmap, SynthError> {
    let (w, h) = size;
    let mut cross = Vec::new();
    let mut bif = Vec::new();
    for kp in kps.iter() {
        let x = kp.location.x.round();
        let y = kp.location.y.round();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        match kp.class {
            KeypointClass::Crossover => cross.push((x as usize, y as usize)),
            KeypointClass::Bifurcation => bif.push((x as usize, y as usize)),
        }
    }
    Ok(make_target_heatmaps(
        &BinaryMap::from_points(w, h, &cross),
        &BinaryMap::from_points(w, h, &bif),
        cfg,
    )?)
}

/// Packages a case for matching-precision evaluation, with oracle heatmaps
/// standing in for the detector.
pub fn eval_pair(case: &SyntheticCase, cfg: &TargetConfig) -> Result<EvalPair, SynthError> {
    let size = (case.image_fixed.width(), case.image_fixed.height());
    Ok(EvalPair {
        image_fixed: case.image_fixed.clone(),
        image_moving: case.image_moving.clone(),
        heatmap_fixed: oracle_heatmap(&case.gt_keypoints_fixed, size, cfg)?,
        heatmap_moving: oracle_heatmap(&case.gt_keypoints_moving, size, cfg)?,
        gt_homography: case.gt_homography,
    })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

/// Writes the case directory: `fixed.png`, `moving.png`, `homography.txt`,
/// `keypoints_fixed.csv`, `keypoints_moving.csv`, `control_points.txt`.
pub fn save_case(case: &SyntheticCase, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    case.image_fixed.save_png(&dir.join("fixed.png"))?;
    case.image_moving.save_png(&dir.join("moving.png"))?;
    case.gt_homography.write_text(&dir.join("homography.txt"))?;
    case.gt_keypoints_fixed
        .write_csv(&dir.join("keypoints_fixed.csv"))?;
    case.gt_keypoints_moving
        .write_csv(&dir.join("keypoints_moving.csv"))?;
    crate::evalkit::write_control_points(&dir.join("control_points.txt"), &case.control_points)
        .map_err(|e| SynthError::SpecInfeasible(e.to_string()))?;
    Ok(())
}

/// Reads back a case directory written by [`save_case`].
pub fn load_case(
    dir: &Path,
    id: &str,
    category: CategoryAnalog,
) -> Result<SyntheticCase, SynthError> {
    let image_fixed = Image::load_png(&dir.join("fixed.png"))?;
    let image_moving = Image::load_png(&dir.join("moving.png"))?;
    let gt_homography = Homography::read_text(&dir.join("homography.txt"))?;
    let gt_keypoints_fixed = KeypointSet::read_csv(&dir.join("keypoints_fixed.csv"))?;
    let gt_keypoints_moving = KeypointSet::read_csv(&dir.join("keypoints_moving.csv"))?;
    let control_points = crate::evalkit::read_control_points(&dir.join("control_points.txt"))
        .map_err(|e| SynthError::SpecInfeasible(e.to_string()))?;
    Ok(SyntheticCase {
        id: id.to_string(),
        category,
        image_fixed,
        image_moving,
        gt_homography,
        gt_keypoints_fixed,
        gt_keypoints_moving,
        control_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{case_error, RegistrationCase};

    #[test]
    fn empty_spec_gives_plain_background() {
        let spec = VesselTreeSpec {
            image_size: (48, 48),
            n_branches: 0,
            vessel_width: (1.0, 2.0),
            n_crossovers: 0,
            n_bifurcations: 0,
            seed: 1,
        };
        let (img, kps) = generate_tree(&spec).unwrap();
        assert!(kps.is_empty());
        let bg = shaded_disc_background(48, 48);
        assert_eq!(img, bg);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = VesselTreeSpec::desk(64, 9);
        let (a, ka) = generate_tree(&spec).unwrap();
        let (b, kb) = generate_tree(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ka, kb);
    }

    #[test]
    fn requested_counts_are_exact() {
        let spec = VesselTreeSpec {
            image_size: (128, 128),
            n_branches: 2,
            vessel_width: (1.2, 2.2),
            n_crossovers: 10,
            n_bifurcations: 15,
            seed: 4,
        };
        let (_, kps) = generate_tree(&spec).unwrap();
        assert_eq!(kps.count_class(KeypointClass::Crossover), 10);
        assert_eq!(kps.count_class(KeypointClass::Bifurcation), 15);
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let spec = VesselTreeSpec {
            image_size: (48, 48),
            n_branches: 0,
            vessel_width: (1.0, 2.0),
            n_crossovers: 150,
            n_bifurcations: 150,
            seed: 2,
        };
        assert!(matches!(
            generate_tree(&spec),
            Err(SynthError::SpecInfeasible(_))
        ));
    }

    #[test]
    fn identity_case_is_self_identical() {
        let case = identity_case(&VesselTreeSpec::desk(64, 3), 3).unwrap();
        assert_eq!(case.image_fixed, case.image_moving);
        let reg = RegistrationCase {
            id: case.id.clone(),
            category: Category::S,
            control_points: case.control_points.clone(),
            excluded_indices: vec![],
        };
        assert_eq!(case_error(&reg, &case.gt_homography).unwrap(), 0.0);
    }

    #[test]
    fn cases_are_self_consistent() {
        for (i, cat) in CategoryAnalog::ALL.iter().enumerate() {
            let case = generate_case(&VesselTreeSpec::desk(64, 0), *cat, 40 + i as u64).unwrap();
            let reg = RegistrationCase {
                id: case.id.clone(),
                category: cat.category(),
                control_points: case.control_points.clone(),
                excluded_indices: vec![],
            };
            let err = case_error(&reg, &case.gt_homography).unwrap();
            assert!(
                err < 1e-9,
                "{cat}: ground truth must be self-consistent, err {err}"
            );

            // moving keypoints are the bounded transform of the fixed ones
            for kp in case.gt_keypoints_moving.iter() {
                let back = case.gt_homography.apply(kp.location).unwrap();
                assert!(case
                    .gt_keypoints_fixed
                    .iter()
                    .any(|f| f.class == kp.class && f.location.distance(&back) < 1e-6));
            }
        }
    }

    #[test]
    fn low_overlap_shares_less_than_half() {
        for seed in 0..5 {
            let case = generate_case(
                &VesselTreeSpec::desk(64, 0),
                CategoryAnalog::LowOverlap,
                90 + seed,
            )
            .unwrap();
            let shared = shared_area_fraction(&case);
            assert!(shared < 0.5, "seed {seed}: shared fraction {shared}");
        }
    }

    #[test]
    fn appearance_change_strictly_drops_keypoints() {
        for seed in 0..5 {
            let case = generate_case(
                &VesselTreeSpec::desk(64, 0),
                CategoryAnalog::AppearanceChange,
                70 + seed,
            )
            .unwrap();
            let warped = transform_keypoints(
                &case.gt_keypoints_fixed,
                &case.gt_homography.inverse().unwrap(),
                (64, 64),
            )
            .unwrap()
            .keypoints;
            assert!(
                case.gt_keypoints_moving.len() < warped.len(),
                "seed {seed}: moving set must be a strict subset"
            );
            for kp in case.gt_keypoints_moving.iter() {
                assert!(warped
                    .iter()
                    .any(|w| w.class == kp.class && w.location.distance(&kp.location) < 1e-9));
            }
        }
    }

    #[test]
    fn oracle_heatmap_extraction_recovers_gt() {
        let spec = VesselTreeSpec::desk(64, 17);
        let (_, kps) = generate_tree(&spec).unwrap();
        let heat = oracle_heatmap(&kps, (64, 64), &TargetConfig::default()).unwrap();
        let extracted =
            crate::keypoints::extract_keypoints(&heat, &crate::keypoints::PeakConfig::default());
        assert_eq!(extracted.len(), kps.len());
        for kp in kps.iter() {
            assert!(extracted
                .iter()
                .any(|e| e.class == kp.class && e.location.distance(&kp.location) < 1e-9));
        }
    }

    #[test]
    fn case_round_trips_through_directory() {
        let dir = std::env::temp_dir().join("vesselreg-case-rt");
        let _ = std::fs::remove_dir_all(&dir);
        let case = generate_case(
            &VesselTreeSpec::desk(64, 0),
            CategoryAnalog::HighOverlap,
            123,
        )
        .unwrap();
        save_case(&case, &dir).unwrap();
        let back = load_case(&dir, &case.id, case.category).unwrap();
        assert_eq!(back.gt_keypoints_fixed, case.gt_keypoints_fixed);
        assert_eq!(back.control_points.len(), case.control_points.len());
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (back.gt_homography.rows()[r][c] - case.gt_homography.rows()[r][c]).abs()
                        < 1e-12
                );
            }
        }
        // images round-trip through 8-bit quantization
        for (a, b) in back.image_fixed.data().iter().zip(case.image_fixed.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
