//! Registration quality metrics: per-case control-point error, success
//! curves over an integer 1..25 pixel threshold grid with their AUC,
//! per-category aggregation, and the variable top-keypoint score (VTKRS).
//!
//! The threshold grid is inclusive (`error <= t` succeeds) and the AUC is
//! the arithmetic mean of the 25 success ratios, so a pooled AUC equals the
//! case-count weighted average of per-category AUCs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::descriptors::{top_n_matches, MatchSet};
use crate::geometry::{
    apply_homography, ransac_homography, CorrespondenceSet, GeometryError, Homography, Point2,
    RansacConfig,
};
use crate::keypoints::KeypointSet;

/// Error-threshold grid in pixels (inclusive bounds).
pub const THRESHOLD_MIN: u32 = 1;
pub const THRESHOLD_MAX: u32 = 25;
/// Per-class top-N sweep of the VTKRS protocol.
pub const VTKRS_N_MIN: usize = 3;
pub const VTKRS_N_MAX: usize = 25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: no cases to score")]
    EmptyInput,
    #[error("case '{0}' has no usable control points")]
    NoControlPoints(String),
    #[error("mask length {0} does not match error count {1}")]
    MaskLength(usize, usize),
    #[error("unknown category '{0}' (expected S, P or A)")]
    UnknownCategory(String),
    #[error("malformed line {line} in {path}")]
    Malformed { path: PathBuf, line: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset category: high overlap (S), low overlap (P), or high overlap
/// with appearance change between the pair (A).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    S,
    P,
    A,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::S, Category::P, Category::A];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::S => write!(f, "S"),
            Category::P => write!(f, "P"),
            Category::A => write!(f, "A"),
        }
    }
}

impl FromStr for Category {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "S" | "s" => Ok(Category::S),
            "P" | "p" => Ok(Category::P),
            "A" | "a" => Ok(Category::A),
            other => Err(EvalError::UnknownCategory(other.to_string())),
        }
    }
}

/// One annotated control-point correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPointPair {
    pub fixed: Point2,
    pub moving: Point2,
}

/// A labeled registration case: control points plus optional indices to
/// discard (mislabeled annotations).
#[derive(Debug, Clone)]
pub struct RegistrationCase {
    pub id: String,
    pub category: Category,
    pub control_points: Vec<ControlPointPair>,
    pub excluded_indices: Vec<usize>,
}

impl RegistrationCase {
    pub fn usable_points(&self) -> impl Iterator<Item = &ControlPointPair> {
        self.control_points
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.excluded_indices.contains(i))
            .map(|(_, p)| p)
    }
}

/// Mean Euclidean distance between mapped moving control points and their
/// fixed partners, over the non-excluded pairs.
pub fn case_error(case: &RegistrationCase, h: &Homography) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for pair in case.usable_points() {
        let mapped = apply_homography(h, pair.moving)?;
        sum += mapped.distance(&pair.fixed);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoControlPoints(case.id.clone()));
    }
    Ok(sum / n as f64)
}

/// Success-ratio curve over the integer threshold grid and its AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCurve {
    pub thresholds: Vec<u32>,
    pub success_ratio: Vec<f64>,
    pub auc: f64,
}

impl ScoreCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,success_ratio\n");
        for (t, r) in self.thresholds.iter().zip(&self.success_ratio) {
            out.push_str(&format!("{},{}\n", t, r));
        }
        out
    }
}

/// Builds the success curve for a list of per-case errors. Failed cases are
/// represented by infinite (or any > 25) error and never succeed.
pub fn registration_score(errors: &[f64]) -> Result<ScoreCurve, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let thresholds: Vec<u32> = (THRESHOLD_MIN..=THRESHOLD_MAX).collect();
    let n = errors.len() as f64;
    let success_ratio: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= f64::from(t)).count() as f64 / n)
        .collect();
    let auc = success_ratio.iter().sum::<f64>() / success_ratio.len() as f64;
    Ok(ScoreCurve {
        thresholds,
        success_ratio,
        auc,
    })
}

/// [`registration_score`] over the subset selected by `mask`.
pub fn registration_score_masked(errors: &[f64], mask: &[bool]) -> Result<ScoreCurve, EvalError> {
    if mask.len() != errors.len() {
        return Err(EvalError::MaskLength(mask.len(), errors.len()));
    }
    let selected: Vec<f64> = errors
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&e, _)| e)
        .collect();
    registration_score(&selected)
}

/// Per-category AUC summary with plain and case-count weighted averages.
///
/// `auc_overall` equals the weighted average: with a shared threshold grid,
/// the pooled success ratio at each threshold is the count-weighted mean of
/// the per-category ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub auc_overall: f64,
    pub auc_s: f64,
    pub auc_p: f64,
    pub auc_a: f64,
    pub avg: f64,
    pub weighted_avg: f64,
}

impl CategoryReport {
    pub fn to_csv(&self, counts: (usize, usize, usize)) -> String {
        let (n_a, n_p, n_s) = counts;
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("auc_overall,{}\n", self.auc_overall));
        out.push_str(&format!("auc_A,{}\n", self.auc_a));
        out.push_str(&format!("auc_P,{}\n", self.auc_p));
        out.push_str(&format!("auc_S,{}\n", self.auc_s));
        out.push_str(&format!("avg,{}\n", self.avg));
        out.push_str(&format!("weighted_avg,{}\n", self.weighted_avg));
        out.push_str(&format!("n_A,{n_a}\nn_P,{n_p}\nn_S,{n_s}\n"));
        out
    }
}

/// Combines per-category AUCs into the averaged summary, weighting the
/// weighted average by the per-category case counts `(n_a, n_p, n_s)`.
pub fn aggregate(
    auc_a: f64,
    auc_p: f64,
    auc_s: f64,
    counts: (usize, usize, usize),
) -> CategoryReport {
    let (n_a, n_p, n_s) = counts;
    assert!(
        n_a > 0 && n_p > 0 && n_s > 0,
        "category counts must be positive"
    );
    let avg = (auc_a + auc_p + auc_s) / 3.0;
    let total = (n_a + n_p + n_s) as f64;
    let weighted_avg = (n_a as f64 * auc_a + n_p as f64 * auc_p + n_s as f64 * auc_s) / total;
    CategoryReport {
        auc_overall: weighted_avg,
        auc_s,
        auc_p,
        auc_a,
        avg,
        weighted_avg,
    }
}

/// Input for the VTKRS sweep: a case's control points, the keypoints on
/// both sides, and the ranked mutual matches between them.
#[derive(Debug, Clone)]
pub struct VtkrsCase {
    pub case: RegistrationCase,
    pub keypoints_fixed: KeypointSet,
    pub keypoints_moving: KeypointSet,
    pub matches: MatchSet,
}

/// VTKRS sweep result: one registration-score AUC per top-N value and the
/// mean over the sweep.
#[derive(Debug, Clone)]
pub struct VtkrsOutcome {
    pub n_grid: Vec<usize>,
    pub auc_per_n: Vec<f64>,
    pub score: f64,
    /// `(case id, n)` pairs where fewer than 4 matched pairs were available;
    /// those cases count as failures at every threshold for that n.
    pub skipped: Vec<(String, usize)>,
}

impl VtkrsOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_per_class,auc\n");
        for (n, auc) in self.n_grid.iter().zip(&self.auc_per_n) {
            out.push_str(&format!("{},{}\n", n, auc));
        }
        out.push_str(&format!("vtkrs,{}\n", self.score));
        out
    }
}

/// Variable top-keypoint registration score.
///
/// For each n in 3..=25, registration runs on the top-n matches per class
/// with an exhaustive RANSAC budget (every 4-subset), the per-case errors
/// feed a registration-score curve, and VTKRS is the mean of the 23 AUCs.
/// The exhaustive budget is forced regardless of `ransac.exhaustive`.
pub fn vtkrs(cases: &[VtkrsCase], ransac: &RansacConfig) -> Result<VtkrsOutcome, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let cfg = RansacConfig {
        exhaustive: true,
        ..*ransac
    };
    let n_grid: Vec<usize> = (VTKRS_N_MIN..=VTKRS_N_MAX).collect();
    let mut auc_per_n = Vec::with_capacity(n_grid.len());
    let mut skipped = Vec::new();

    // per-case cache of the previous subset size and its error, reused when
    // growing n no longer adds matches
    let mut last: Vec<Option<(usize, f64)>> = vec![None; cases.len()];

    for &n in &n_grid {
        let mut errors = Vec::with_capacity(cases.len());
        for (ci, input) in cases.iter().enumerate() {
            let subset = top_n_matches(&input.matches, n);
            if subset.len() < 4 {
                skipped.push((input.case.id.clone(), n));
                errors.push(f64::INFINITY);
                last[ci] = Some((subset.len(), f64::INFINITY));
                continue;
            }
            if let Some((prev_len, prev_err)) = last[ci] {
                if prev_len == subset.len() {
                    errors.push(prev_err);
                    continue;
                }
            }
            let pairs = CorrespondenceSet {
                pairs: subset
                    .pairs
                    .iter()
                    .map(|m| crate::geometry::Correspondence {
                        fixed: input.keypoints_fixed.points[m.fixed_index].location,
                        moving: input.keypoints_moving.points[m.moving_index].location,
                    })
                    .collect(),
                scores: Some(subset.pairs.iter().map(|m| m.similarity).collect()),
            };
            let err = match ransac_homography(&pairs, &cfg) {
                Ok((h, _)) => case_error(&input.case, &h).unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            };
            errors.push(err);
            last[ci] = Some((subset.len(), err));
        }
        auc_per_n.push(registration_score(&errors)?.auc);
    }
    let score = auc_per_n.iter().sum::<f64>() / auc_per_n.len() as f64;
    Ok(VtkrsOutcome {
        n_grid,
        auc_per_n,
        score,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

/// Reads a control-point file: one `x_fixed y_fixed x_moving y_moving` line
/// per pair, whitespace separated.
pub fn read_control_points(path: &Path) -> Result<Vec<ControlPointPair>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
        out.push(ControlPointPair {
            fixed: Point2::new(vals[0], vals[1]),
            moving: Point2::new(vals[2], vals[3]),
        });
    }
    Ok(out)
}

pub fn write_control_points(path: &Path, pairs: &[ControlPointPair]) -> Result<(), EvalError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{} {} {} {}\n",
            p.fixed.x, p.fixed.y, p.moving.x, p.moving.y
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One manifest row: `id,category,control_points_path[,excluded_indices]`,
/// where `excluded_indices` is a `;`-separated index list.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub category: Category,
    pub control_points_path: PathBuf,
    pub excluded_indices: Vec<usize>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(EvalError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
        let excluded_indices = if fields.len() == 4 && !fields[3].trim().is_empty() {
            fields[3]
                .split(';')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| EvalError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                })?
        } else {
            Vec::new()
        };
        rows.push(ManifestRow {
            id: fields[0].trim().to_string(),
            category: fields[1].parse()?,
            control_points_path: PathBuf::from(fields[2].trim()),
            excluded_indices,
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), EvalError> {
    let mut out = String::from("id,category,control_points_path,excluded_indices\n");
    for r in rows {
        let excl = r
            .excluded_indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.id,
            r.category,
            r.control_points_path.display(),
            excl
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Splits per-case errors by category and assembles the full report with
/// one curve per populated category.
pub fn report_from_errors(
    errors: &[(Category, f64)],
) -> Result<(CategoryReport, BTreeMap<Category, ScoreCurve>), EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut curves = BTreeMap::new();
    let mut aucs = BTreeMap::new();
    for cat in Category::ALL {
        let of_cat: Vec<f64> = errors
            .iter()
            .filter(|(c, _)| *c == cat)
            .map(|(_, e)| *e)
            .collect();
        if of_cat.is_empty() {
            continue;
        }
        let curve = registration_score(&of_cat)?;
        aucs.insert(cat, curve.auc);
        curves.insert(cat, curve);
    }
    let count = |cat| errors.iter().filter(|(c, _)| *c == cat).count();
    let (n_a, n_p, n_s) = (count(Category::A), count(Category::P), count(Category::S));
    let report = if n_a > 0 && n_p > 0 && n_s > 0 {
        aggregate(
            aucs[&Category::A],
            aucs[&Category::P],
            aucs[&Category::S],
            (n_a, n_p, n_s),
        )
    } else {
        // degenerate splits: fall back to the pooled curve for every field
        let all: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
        let auc = registration_score(&all)?.auc;
        CategoryReport {
            auc_overall: auc,
            auc_s: *aucs.get(&Category::S).unwrap_or(&auc),
            auc_p: *aucs.get(&Category::P).unwrap_or(&auc),
            auc_a: *aucs.get(&Category::A).unwrap_or(&auc),
            avg: auc,
            weighted_avg: auc,
        }
    };
    Ok((report, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::Match;
    use crate::keypoints::{Keypoint, KeypointClass};
    use proptest::prelude::*;
    use rand::Rng;

    fn case_with_points(pairs: Vec<ControlPointPair>, excluded: Vec<usize>) -> RegistrationCase {
        RegistrationCase {
            id: "case".into(),
            category: Category::S,
            control_points: pairs,
            excluded_indices: excluded,
        }
    }

    #[test]
    fn case_error_zero_for_identity() {
        let pairs = (0..5)
            .map(|i| {
                let p = Point2::new(i as f64 * 3.0, i as f64);
                ControlPointPair {
                    fixed: p,
                    moving: p,
                }
            })
            .collect();
        let e = case_error(&case_with_points(pairs, vec![]), &Homography::identity()).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn case_error_zero_under_construction_homography() {
        let mut rng = crate::rng::substream(2, "test-case-err", 0);
        let h = crate::geometry::AffineTransform2D {
            rotation_deg: 20.0,
            translation_frac: (0.1, -0.05),
            scale: 1.1,
            shear_deg: 5.0,
            center: Point2::new(32.0, 32.0),
        }
        .expand((64.0, 64.0));
        let pairs: Vec<ControlPointPair> = (0..8)
            .map(|_| {
                let m = Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                ControlPointPair {
                    fixed: h.apply(m).unwrap(),
                    moving: m,
                }
            })
            .collect();
        let e = case_error(&case_with_points(pairs, vec![]), &h).unwrap();
        assert!(e < 1e-9);
    }

    #[test]
    fn case_error_honors_exclusions() {
        let good = ControlPointPair {
            fixed: Point2::new(1.0, 1.0),
            moving: Point2::new(1.0, 1.0),
        };
        let bad = ControlPointPair {
            fixed: Point2::new(500.0, 500.0),
            moving: Point2::new(0.0, 0.0),
        };
        let e = case_error(
            &case_with_points(vec![good, bad], vec![1]),
            &Homography::identity(),
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn score_all_zero_errors() {
        let curve = registration_score(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert!(curve.success_ratio.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn score_all_beyond_grid() {
        let curve = registration_score(&[26.0, 400.0, f64::INFINITY]).unwrap();
        assert_eq!(curve.auc, 0.0);
    }

    #[test]
    fn score_single_error_thirteen() {
        let curve = registration_score(&[13.0]).unwrap();
        assert!((curve.auc - 0.52).abs() < 1e-12, "13/25 thresholds succeed");
    }

    #[test]
    fn score_empty_is_error() {
        assert!(matches!(
            registration_score(&[]),
            Err(EvalError::EmptyInput)
        ));
    }

    #[test]
    fn masked_score_selects_subset() {
        let errors = [2.0, 100.0, 3.0, 100.0];
        let mask = [true, false, true, false];
        let curve = registration_score_masked(&errors, &mask).unwrap();
        assert_eq!(curve.auc, registration_score(&[2.0, 3.0]).unwrap().auc);
        assert!(matches!(
            registration_score_masked(&errors, &[true]),
            Err(EvalError::MaskLength(1, 4))
        ));
        assert!(matches!(
            registration_score_masked(&errors, &[false; 4]),
            Err(EvalError::EmptyInput)
        ));
    }

    #[test]
    fn auc_strictly_drops_when_error_crosses_threshold() {
        let mut errors = vec![4.0, 9.0, 12.5, 20.0];
        let before = registration_score(&errors).unwrap().auc;
        errors[1] = 10.5; // crosses the t = 10 boundary
        let after = registration_score(&errors).unwrap().auc;
        assert!(after < before, "{after} must drop below {before}");
    }

    #[test]
    fn aggregate_reproduces_published_rows() {
        // (A, P, S) per-category AUCs -> (avg, weighted avg) at counts
        // (14, 49, 71); every self-consistent summary-table row
        type Row = ((f64, f64, f64), (f64, f64));
        let rows: Vec<Row> = vec![
            ((0.683, 0.349, 0.939), (0.657, 0.697)),
            ((0.743, 0.469, 0.942), (0.718, 0.748)),
            ((0.760, 0.477, 0.946), (0.728, 0.755)),
            ((0.757, 0.477, 0.944), (0.726, 0.753)),
            ((0.613, 0.231, 0.857), (0.567, 0.603)),
            ((0.685, 0.368, 0.849), (0.634, 0.656)),
            ((0.749, 0.489, 0.945), (0.728, 0.758)),
            ((0.692, 0.362, 0.852), (0.635, 0.656)),
        ];
        for ((a, p, s), (avg, wavg)) in rows {
            let rep = aggregate(a, p, s, (14, 49, 71));
            assert!(
                (rep.avg - avg).abs() <= 0.001 + 1e-12,
                "avg {} vs {}",
                rep.avg,
                avg
            );
            assert!(
                (rep.weighted_avg - wavg).abs() <= 0.001 + 1e-12,
                "wavg {} vs {}",
                rep.weighted_avg,
                wavg
            );
        }
    }

    #[test]
    fn aggregate_equal_scores_collapse() {
        let rep = aggregate(0.4, 0.4, 0.4, (14, 49, 71));
        assert!((rep.avg - 0.4).abs() < 1e-12);
        assert!((rep.weighted_avg - 0.4).abs() < 1e-12);
    }

    fn oracle_vtkrs_cases(n_cases: usize, seed: u64) -> (Vec<VtkrsCase>, Homography) {
        let mut rng = crate::rng::substream(seed, "test-vtkrs", 0);
        let h = crate::geometry::AffineTransform2D {
            rotation_deg: 8.0,
            translation_frac: (0.05, 0.02),
            scale: 1.05,
            shear_deg: 2.0,
            center: Point2::new(32.0, 32.0),
        }
        .expand((64.0, 64.0));
        let hinv = h.inverse().unwrap();
        let mut cases = Vec::new();
        for ci in 0..n_cases {
            let mut fixed_pts = Vec::new();
            let mut moving_pts = Vec::new();
            let mut matches = Vec::new();
            let k = 6usize; // per class
            for class_idx in 0..2 {
                let class = if class_idx == 0 {
                    KeypointClass::Crossover
                } else {
                    KeypointClass::Bifurcation
                };
                for j in 0..k {
                    let f = Point2::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0));
                    let m = hinv.apply(f).unwrap();
                    let idx = fixed_pts.len();
                    fixed_pts.push(Keypoint {
                        location: f,
                        class,
                        score: 1.0,
                    });
                    moving_pts.push(Keypoint {
                        location: m,
                        class,
                        score: 1.0,
                    });
                    matches.push(Match {
                        fixed_index: idx,
                        moving_index: idx,
                        similarity: 1.0 - (j as f64) * 0.01,
                        class,
                    });
                }
            }
            let control_points = (0..10)
                .map(|_| {
                    let m = Point2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                    ControlPointPair {
                        fixed: h.apply(m).unwrap(),
                        moving: m,
                    }
                })
                .collect();
            cases.push(VtkrsCase {
                case: RegistrationCase {
                    id: format!("case{ci}"),
                    category: Category::S,
                    control_points,
                    excluded_indices: vec![],
                },
                keypoints_fixed: KeypointSet::new(fixed_pts),
                keypoints_moving: KeypointSet::new(moving_pts),
                matches: MatchSet { pairs: matches },
            });
        }
        (cases, h)
    }

    #[test]
    fn vtkrs_oracle_matches_full_auc() {
        let (cases, _) = oracle_vtkrs_cases(6, 3);
        let cfg = RansacConfig {
            inlier_threshold_px: 2.0,
            ..Default::default()
        };
        let out = vtkrs(&cases, &cfg).unwrap();
        assert_eq!(out.n_grid, (3..=25).collect::<Vec<_>>());
        // full-keypoint registration: all matches, no top-n restriction
        let full_errors: Vec<f64> = cases
            .iter()
            .map(|c| {
                let pairs = CorrespondenceSet {
                    pairs: c
                        .matches
                        .pairs
                        .iter()
                        .map(|m| crate::geometry::Correspondence {
                            fixed: c.keypoints_fixed.points[m.fixed_index].location,
                            moving: c.keypoints_moving.points[m.moving_index].location,
                        })
                        .collect(),
                    scores: None,
                };
                let (hh, _) = ransac_homography(&pairs, &cfg).unwrap();
                case_error(&c.case, &hh).unwrap()
            })
            .collect();
        let full_auc = registration_score(&full_errors).unwrap().auc;
        assert!(
            (out.score - full_auc).abs() <= 0.02,
            "vtkrs {} vs full {}",
            out.score,
            full_auc
        );
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn vtkrs_random_matches_score_near_zero() {
        // matches produced by mutually matching random unit descriptors:
        // the structureless version of the oracle construction
        let (mut cases, _) = oracle_vtkrs_cases(30, 7);
        let mut rng = crate::rng::substream(8, "test-vtkrs-rand", 0);
        let random_unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0f64)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        for c in &mut cases {
            let k = c.keypoints_fixed.len();
            let classes: Vec<KeypointClass> = c.keypoints_fixed.iter().map(|p| p.class).collect();
            let locs: Vec<Point2> = (0..k).map(|i| Point2::new(i as f64, 0.0)).collect();
            let vf: Vec<f64> = (0..k).flat_map(|_| random_unit(&mut rng)).collect();
            let vm: Vec<f64> = (0..k).flat_map(|_| random_unit(&mut rng)).collect();
            let sf = crate::descriptors::DescriptorSet::new(8, vf, classes.clone(), locs.clone())
                .unwrap();
            let sm = crate::descriptors::DescriptorSet::new(8, vm, classes, locs).unwrap();
            let (matches, _) = crate::descriptors::mutual_match_classwise(&sf, &sm).unwrap();
            c.matches = matches;
        }
        let cfg = RansacConfig {
            inlier_threshold_px: 2.0,
            ..Default::default()
        };
        let out = vtkrs(&cases, &cfg).unwrap();
        assert!(
            out.score < 0.05,
            "random matches must not register, got {}",
            out.score
        );
    }

    #[test]
    fn vtkrs_records_skipped_small_cases() {
        let (mut cases, _) = oracle_vtkrs_cases(2, 11);
        // leave only 3 matches in case 0
        cases[0].matches.pairs.truncate(3);
        let cfg = RansacConfig {
            inlier_threshold_px: 2.0,
            ..Default::default()
        };
        let out = vtkrs(&cases, &cfg).unwrap();
        assert!(out.skipped.iter().all(|(id, _)| id == "case0"));
        assert_eq!(out.skipped.len(), 23, "skipped at every n");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join("vesselreg-manifest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        let rows = vec![
            ManifestRow {
                id: "a01".into(),
                category: Category::A,
                control_points_path: PathBuf::from("cases/a01/control_points.txt"),
                excluded_indices: vec![2, 5],
            },
            ManifestRow {
                id: "s01".into(),
                category: Category::S,
                control_points_path: PathBuf::from("cases/s01/control_points.txt"),
                excluded_indices: vec![],
            },
        ];
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "a01");
        assert_eq!(back[0].category, Category::A);
        assert_eq!(back[0].excluded_indices, vec![2, 5]);
        assert_eq!(back[1].excluded_indices, Vec::<usize>::new());
    }

    #[test]
    fn control_points_round_trip() {
        let dir = std::env::temp_dir().join("vesselreg-cps");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cps.txt");
        let pairs = vec![
            ControlPointPair {
                fixed: Point2::new(1.5, 2.0),
                moving: Point2::new(3.0, 4.25),
            },
            ControlPointPair {
                fixed: Point2::new(-1.0, 0.0),
                moving: Point2::new(9.0, 8.0),
            },
        ];
        write_control_points(&path, &pairs).unwrap();
        let back = read_control_points(&path).unwrap();
        assert_eq!(pairs, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn success_curve_is_monotone(errors in prop::collection::vec(0.0f64..40.0, 1..60)) {
            let curve = registration_score(&errors).unwrap();
            for w in curve.success_ratio.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert!((curve.auc - curve.success_ratio.iter().sum::<f64>() / 25.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_case_permutation(errors in prop::collection::vec(0.0f64..40.0, 2..40)) {
            let a = registration_score(&errors).unwrap().auc;
            let mut rev = errors.clone();
            rev.reverse();
            let b = registration_score(&rev).unwrap().auc;
            prop_assert_eq!(a, b);
        }
    }
}
