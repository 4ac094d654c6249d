//! Planar points, projective transforms, normalized DLT estimation and
//! RANSAC robust fitting.
//!
//! Homographies here map *moving* image coordinates to *fixed* image
//! coordinates, which is the convention used by the whole pipeline: the
//! registration output warps the moving image into the fixed frame.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::rng::substream;

/// Magnitude below which a homogeneous `w` coordinate counts as infinite.
const EPS_W: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point maps to infinity under the projective transform")]
    DegeneratePoint,
    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientPoints(usize),
    #[error("no consensus: best inlier count {best} is below the minimum {min}")]
    NoConsensus { best: usize, min: usize },
    #[error("scale factors must be positive, got ({0}, {1})")]
    NonPositiveScale(f64, f64),
    #[error("matrix is not invertible (|det| = {0:.3e})")]
    NotInvertible(f64),
    #[error("expected 9 matrix entries, found {0}")]
    BadMatrixText(usize),
    #[error("matrix entries must be finite")]
    NonFiniteEntries,
}

/// A 2D point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// 3x3 projective transform, canonicalized so that `m[2][2] == 1` whenever
/// that entry is nonzero (otherwise unit Frobenius norm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Builds a homography from row-major entries, canonicalizing scale and
    /// rejecting singular matrices.
    pub fn from_rows(m: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteEntries);
        }
        let mut m = m;
        let scale = if m[2][2].abs() > EPS_W {
            m[2][2]
        } else {
            let fro = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            if fro <= EPS_W {
                return Err(GeometryError::NotInvertible(0.0));
            }
            fro
        };
        for row in &mut m {
            for v in row.iter_mut() {
                *v /= scale;
            }
        }
        let h = Self { m };
        let det = h.det();
        if det.abs() <= EPS_W {
            return Err(GeometryError::NotInvertible(det.abs()));
        }
        Ok(h)
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Applies the transform to a point. Errors if the point maps to the
    /// line at infinity.
    pub fn apply(&self, p: Point2) -> Result<Point2, GeometryError> {
        apply_homography(self, p)
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let m = Matrix3::from_fn(|r, c| self.m[r][c]);
        let inv = m
            .try_inverse()
            .ok_or(GeometryError::NotInvertible(self.det().abs()))?;
        Homography::from_rows([
            [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
            [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
            [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
        ])
    }

    /// Returns `self ∘ other`: the transform applying `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography, GeometryError> {
        let a = Matrix3::from_fn(|r, c| self.m[r][c]);
        let b = Matrix3::from_fn(|r, c| other.m[r][c]);
        let p = a * b;
        Homography::from_rows([
            [p[(0, 0)], p[(0, 1)], p[(0, 2)]],
            [p[(1, 0)], p[(1, 1)], p[(1, 2)]],
            [p[(2, 0)], p[(2, 1)], p[(2, 2)]],
        ])
    }

    /// Serializes as 9 whitespace-separated decimal floats, row-major.
    pub fn to_text(&self) -> String {
        let f = self
            .m
            .iter()
            .flatten()
            .map(|v| v.to_string())
            .collect::<Vec<_>>();
        f.join(" ")
    }

    /// Parses the text format produced by [`Homography::to_text`].
    pub fn from_text(text: &str) -> Result<Self, GeometryError> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GeometryError::NonFiniteEntries)
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 9 {
            return Err(GeometryError::BadMatrixText(vals.len()));
        }
        Homography::from_rows([
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ])
    }

    pub fn write_text(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text() + "\n")
    }

    pub fn read_text(path: &std::path::Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|_| GeometryError::NonFiniteEntries)?;
        Self::from_text(&text)
    }
}

/// Affine transform parameterized as rotation/translation/scale/shear about
/// a center point. Translation is a fraction of the image size per axis.
#[derive(Debug, Clone, Copy)]
pub struct AffineTransform2D {
    pub rotation_deg: f64,
    pub translation_frac: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
    pub center: Point2,
}

impl AffineTransform2D {
    pub fn identity(center: Point2) -> Self {
        Self {
            rotation_deg: 0.0,
            translation_frac: (0.0, 0.0),
            scale: 1.0,
            shear_deg: 0.0,
            center,
        }
    }

    /// Expands to a homography acting on pixel coordinates of an image of
    /// the given size: rotate/shear/scale about `center`, then translate by
    /// `translation_frac * image_size`.
    pub fn expand(&self, image_size: (f64, f64)) -> Homography {
        assert!(self.scale != 0.0, "affine scale must be nonzero");
        let th = self.rotation_deg.to_radians();
        let sh = self.shear_deg.to_radians().tan();
        let (s, c) = (th.sin(), th.cos());
        // linear part: R * Shear * Scale
        let l00 = self.scale * c;
        let l01 = self.scale * (c * sh - s);
        let l10 = self.scale * s;
        let l11 = self.scale * (s * sh + c);
        let tx = self.translation_frac.0 * image_size.0;
        let ty = self.translation_frac.1 * image_size.1;
        let (cx, cy) = (self.center.x, self.center.y);
        // p -> L (p - c) + c + t
        Homography::from_rows([
            [l00, l01, cx + tx - l00 * cx - l01 * cy],
            [l10, l11, cy + ty - l10 * cx - l11 * cy],
            [0.0, 0.0, 1.0],
        ])
        .expect("affine transform with nonzero scale is invertible")
    }
}

/// A matched point pair: the model should map `moving` onto `fixed`.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub fixed: Point2,
    pub moving: Point2,
}

/// Point correspondences, optionally with per-pair match scores.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub scores: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn from_pairs(pairs: Vec<(Point2, Point2)>) -> Self {
        Self {
            pairs: pairs
                .into_iter()
                .map(|(fixed, moving)| Correspondence { fixed, moving })
                .collect(),
            scores: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// RANSAC settings.
///
/// `exhaustive` replaces random sampling with enumeration of every 4-subset,
/// which makes the budget a function of the number of correspondences.
#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
    pub exhaustive: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold_px: 3.0,
            min_inliers: 4,
            seed: 0,
            exhaustive: false,
        }
    }
}

/// Applies `h` to `p`, dividing by the homogeneous coordinate.
pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2, GeometryError> {
    let m = h.rows();
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if w.abs() <= EPS_W {
        return Err(GeometryError::DegeneratePoint);
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// Multiplies each coordinate by the per-axis factor.
pub fn scale_points(pts: &[Point2], factor: (f64, f64)) -> Result<Vec<Point2>, GeometryError> {
    let (sx, sy) = factor;
    if sx <= 0.0 || sy <= 0.0 {
        return Err(GeometryError::NonPositiveScale(sx, sy));
    }
    Ok(pts
        .iter()
        .map(|p| Point2::new(p.x * sx, p.y * sy))
        .collect())
}

/// Similarity transform moving the centroid to the origin and the mean
/// distance from it to sqrt(2). Conditioning step for the DLT solve.
fn hartley_normalization(points: impl Iterator<Item = Point2> + Clone) -> Option<Matrix3<f64>> {
    let mut n = 0usize;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in points.clone() {
        cx += p.x;
        cy += p.y;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    cx /= n as f64;
    cy /= n as f64;
    let mean_dist = points.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n as f64;
    if mean_dist <= EPS_W {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

fn apply_mat(m: &Matrix3<f64>, p: Point2) -> Point2 {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Normalized direct linear transform over moving -> fixed pairs.
///
/// Least-squares for more than four pairs; exact for a non-degenerate
/// minimal sample. Errors when the design matrix is rank-deficient (for
/// example three collinear points in either set).
pub fn estimate_homography(c: &CorrespondenceSet) -> Result<Homography, GeometryError> {
    let n = c.len();
    if n < 4 {
        return Err(GeometryError::InsufficientPoints(n));
    }
    let t_fixed = hartley_normalization(c.pairs.iter().map(|p| p.fixed)).ok_or(
        GeometryError::DegenerateConfiguration("coincident fixed points"),
    )?;
    let t_moving = hartley_normalization(c.pairs.iter().map(|p| p.moving)).ok_or(
        GeometryError::DegenerateConfiguration("coincident moving points"),
    )?;

    // Design matrix, padded with zero rows up to 9 so the SVD exposes the
    // full right-singular basis.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, pair) in c.pairs.iter().enumerate() {
        let m = apply_mat(&t_moving, pair.moving);
        let f = apply_mat(&t_fixed, pair.fixed);
        let r = 2 * i;
        a[(r, 0)] = m.x;
        a[(r, 1)] = m.y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -f.x * m.x;
        a[(r, 7)] = -f.x * m.y;
        a[(r, 8)] = -f.x;
        a[(r + 1, 3)] = m.x;
        a[(r + 1, 4)] = m.y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -f.y * m.x;
        a[(r + 1, 7)] = -f.y * m.y;
        a[(r + 1, 8)] = -f.y;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap());
    let (smallest, second) = (order[0], order[1]);
    let largest = *order.last().unwrap();
    // Nullspace of dimension >= 2 means the sample does not determine a
    // unique homography.
    if sv[largest] <= EPS_W || sv[second] <= 1e-9 * sv[largest] {
        return Err(GeometryError::DegenerateConfiguration(
            "rank-deficient design matrix",
        ));
    }
    let h_norm = Matrix3::new(
        v_t[(smallest, 0)],
        v_t[(smallest, 1)],
        v_t[(smallest, 2)],
        v_t[(smallest, 3)],
        v_t[(smallest, 4)],
        v_t[(smallest, 5)],
        v_t[(smallest, 6)],
        v_t[(smallest, 7)],
        v_t[(smallest, 8)],
    );
    let t_fixed_inv = t_fixed
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration(
            "normalization not invertible",
        ))?;
    let h = t_fixed_inv * h_norm * t_moving;
    Homography::from_rows([
        [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
        [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
        [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
    ])
    .map_err(|_| GeometryError::DegenerateConfiguration("estimated matrix is singular"))
}

fn reprojection_error(h: &Homography, pair: &Correspondence) -> f64 {
    match apply_homography(h, pair.moving) {
        Ok(p) => p.distance(&pair.fixed),
        Err(_) => f64::INFINITY,
    }
}

/// Iterator over all `C(n, 4)` index quadruples in lexicographic order.
struct Quads {
    n: usize,
    next: Option<[usize; 4]>,
}

impl Quads {
    fn new(n: usize) -> Self {
        let next = (n >= 4).then_some([0, 1, 2, 3]);
        Self { n, next }
    }
}

impl Iterator for Quads {
    type Item = [usize; 4];

    fn next(&mut self) -> Option<[usize; 4]> {
        let current = self.next?;
        let mut idx = current;
        let mut i = 3usize;
        loop {
            if idx[i] < self.n - (4 - i) {
                idx[i] += 1;
                for j in i + 1..4 {
                    idx[j] = idx[j - 1] + 1;
                }
                self.next = Some(idx);
                break;
            }
            if i == 0 {
                self.next = None;
                break;
            }
            i -= 1;
        }
        Some(current)
    }
}

#[derive(Clone)]
struct Consensus {
    model: Homography,
    mask: Vec<bool>,
    count: usize,
    mean_error: f64,
}

fn score_model(h: &Homography, c: &CorrespondenceSet, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; c.len()];
    let mut count = 0usize;
    let mut err_sum = 0.0;
    for (i, pair) in c.pairs.iter().enumerate() {
        let e = reprojection_error(h, pair);
        if e < threshold {
            mask[i] = true;
            count += 1;
            err_sum += e;
        }
    }
    let mean = if count > 0 {
        err_sum / count as f64
    } else {
        f64::INFINITY
    };
    (mask, count, mean)
}

/// Robust homography fit.
///
/// Hypotheses come from random 4-subsets (seeded, deterministic) or from
/// exhaustive enumeration of all 4-subsets when `cfg.exhaustive` is set.
/// The best consensus (most inliers, ties broken by lower mean reprojection
/// error) is refit on all of its inliers; the returned mask is that
/// consensus set.
pub fn ransac_homography(
    c: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>), GeometryError> {
    let n = c.len();
    if n < 4 {
        return Err(GeometryError::InsufficientPoints(n));
    }
    assert!(
        cfg.inlier_threshold_px > 0.0,
        "inlier threshold must be positive"
    );
    assert!(
        cfg.max_iterations >= 1,
        "iteration budget must be at least 1"
    );

    let mut best: Option<Consensus> = None;
    let consider = |sample: [usize; 4], best: &mut Option<Consensus>| {
        let sub = CorrespondenceSet {
            pairs: sample.iter().map(|&i| c.pairs[i]).collect(),
            scores: None,
        };
        let Ok(model) = estimate_homography(&sub) else {
            return;
        };
        let (mask, count, mean_error) = score_model(&model, c, cfg.inlier_threshold_px);
        let better = match best {
            None => true,
            Some(b) => count > b.count || (count == b.count && mean_error < b.mean_error),
        };
        if better {
            *best = Some(Consensus {
                model,
                mask,
                count,
                mean_error,
            });
        }
    };

    if cfg.exhaustive {
        for quad in Quads::new(n) {
            consider(quad, &mut best);
        }
    } else {
        let mut rng = substream(cfg.seed, "ransac", 0);
        for _ in 0..cfg.max_iterations {
            let mut sample = [0usize; 4];
            let chosen = rand::seq::index::sample(&mut rng, n, 4);
            for (slot, idx) in sample.iter_mut().zip(chosen.iter()) {
                *slot = idx;
            }
            sample.sort_unstable();
            consider(sample, &mut best);
        }
    }

    let best = best.ok_or(GeometryError::NoConsensus {
        best: 0,
        min: cfg.min_inliers.max(4),
    })?;
    let min_required = cfg.min_inliers.max(4);
    if best.count < min_required {
        return Err(GeometryError::NoConsensus {
            best: best.count,
            min: min_required,
        });
    }

    let inlier_set = CorrespondenceSet {
        pairs: c
            .pairs
            .iter()
            .zip(&best.mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect(),
        scores: None,
    };
    let refined = estimate_homography(&inlier_set).unwrap_or(best.model);
    Ok((refined, best.mask))
}
