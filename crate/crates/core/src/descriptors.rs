//! Dense descriptor blocks, keypoint descriptor sampling, cosine similarity
//! and class-wise bidirectional matching.
//!
//! Descriptors are unit-norm, so cosine similarity is a plain dot product.
//! Matching runs independently per keypoint class (crossovers against
//! crossovers, bifurcations against bifurcations) and keeps a pair only if
//! each side is the other's nearest neighbor.

use std::path::Path;

use thiserror::Error;

use crate::blockio;
use crate::geometry::Point2;
use crate::keypoints::{KeypointClass, KeypointSet};

/// Tolerance on the unit-norm invariant of stored descriptors.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("descriptor vector {index} has norm {norm} outside 1 +/- {NORM_TOLERANCE}")]
    NotUnitNorm { index: usize, norm: f64 },
    #[error("descriptor data length {got} does not match expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("keypoint {index} at ({x}, {y}) is outside the {width}x{height} block")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("descriptor values must be finite")]
    NonFinite,
    #[error(transparent)]
    Block(#[from] blockio::BlockIoError),
}

fn check_unit_rows(vectors: &[f64], dim: usize) -> Result<(), DescriptorError> {
    for (i, row) in vectors.chunks(dim).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(DescriptorError::NotUnitNorm { index: i, norm });
        }
    }
    Ok(())
}

/// Dense per-pixel descriptor field; every pixel holds a unit-norm
/// `dim`-vector. Layout is row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBlock {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorBlock {
    /// Builds a block, validating the unit-norm invariant of every pixel.
    pub fn new(
        width: usize,
        height: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        if data.len() != width * height * dim {
            return Err(DescriptorError::BadLength {
                expected: width * height * dim,
                got: data.len(),
            });
        }
        check_unit_rows(&data, dim)?;
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    /// Builds a block from raw vectors, normalizing each pixel. Vectors with
    /// norm below 1e-12 become the first basis vector so the unit-norm
    /// invariant holds for any finite input.
    pub fn from_unnormalized(
        width: usize,
        height: usize,
        dim: usize,
        mut data: Vec<f64>,
    ) -> Result<Self, DescriptorError> {
        if data.len() != width * height * dim {
            return Err(DescriptorError::BadLength {
                expected: width * height * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite);
        }
        for row in data.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                row.fill(0.0);
                row[0] = 1.0;
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn save_ckdb(&self, path: &Path) -> Result<(), DescriptorError> {
        blockio::write_block(path, self.width, self.height, self.dim, &self.data)?;
        Ok(())
    }

    /// Loads a block; values are re-normalized to absorb the f32 storage
    /// rounding before the unit-norm check.
    pub fn load_ckdb(path: &Path) -> Result<Self, DescriptorError> {
        let block = blockio::read_block(path)?;
        Self::from_unnormalized(block.width, block.height, block.channels, block.values)
    }
}

/// Descriptors gathered at keypoint locations, with class labels and the
/// source locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    vectors: Vec<f64>,
    classes: Vec<KeypointClass>,
    locations: Vec<Point2>,
}

impl DescriptorSet {
    pub fn new(
        dim: usize,
        vectors: Vec<f64>,
        classes: Vec<KeypointClass>,
        locations: Vec<Point2>,
    ) -> Result<Self, DescriptorError> {
        let k = classes.len();
        if vectors.len() != k * dim || locations.len() != k {
            return Err(DescriptorError::BadLength {
                expected: k * dim,
                got: vectors.len(),
            });
        }
        check_unit_rows(&vectors, dim)?;
        Ok(Self {
            dim,
            vectors,
            classes,
            locations,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            classes: Vec::new(),
            locations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class(&self, i: usize) -> KeypointClass {
        self.classes[i]
    }

    pub fn location(&self, i: usize) -> Point2 {
        self.locations[i]
    }

    pub fn classes(&self) -> &[KeypointClass] {
        &self.classes
    }
}

/// Gathers block descriptors at the integer pixel of each keypoint.
pub fn sample_descriptors(
    block: &DescriptorBlock,
    keypoints: &KeypointSet,
) -> Result<DescriptorSet, DescriptorError> {
    let mut vectors = Vec::with_capacity(keypoints.len() * block.dim());
    let mut classes = Vec::with_capacity(keypoints.len());
    let mut locations = Vec::with_capacity(keypoints.len());
    for (i, kp) in keypoints.iter().enumerate() {
        let x = kp.location.x.round();
        let y = kp.location.y.round();
        if x < 0.0 || y < 0.0 || x >= block.width() as f64 || y >= block.height() as f64 {
            return Err(DescriptorError::OutOfBounds {
                index: i,
                x: kp.location.x,
                y: kp.location.y,
                width: block.width(),
                height: block.height(),
            });
        }
        vectors.extend_from_slice(block.pixel(x as usize, y as usize));
        classes.push(kp.class);
        locations.push(kp.location);
    }
    DescriptorSet::new(block.dim(), vectors, classes, locations)
}

/// Dense Ka x Kb similarity matrix.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarities between every pair of rows; for unit-norm
/// descriptors this is exactly the dot product.
pub fn cosine_similarity_matrix(
    a: &DescriptorSet,
    b: &DescriptorSet,
) -> Result<SimilarityMatrix, DescriptorError> {
    if a.dim() != b.dim() {
        return Err(DescriptorError::DimMismatch(a.dim(), b.dim()));
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            data.push(dot(a.row(i), b.row(j)));
        }
    }
    Ok(SimilarityMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    })
}

/// One mutual match between a fixed-image and a moving-image keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub fixed_index: usize,
    pub moving_index: usize,
    pub similarity: f64,
    pub class: KeypointClass,
}

/// Ranked list of mutual matches (descending similarity).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Similarity-evaluation accounting for the matching stage, per class.
#[derive(Debug, Clone, Default)]
pub struct MatchStats {
    pub evaluations: Vec<(KeypointClass, usize)>,
}

impl MatchStats {
    pub fn total(&self) -> usize {
        self.evaluations.iter().map(|(_, n)| n).sum()
    }
}

/// Bidirectional nearest-neighbor matching within each keypoint class.
///
/// A pair `(i, j)` survives iff `j` is the most similar moving descriptor
/// to `i` and `i` is the most similar fixed descriptor to `j`; exact ties
/// resolve to the smallest index. Matching a class with `Ka` and `Kb`
/// descriptors costs exactly `Ka*Kb` similarity evaluations, reported in
/// the returned stats.
pub fn mutual_match_classwise(
    a: &DescriptorSet,
    b: &DescriptorSet,
) -> Result<(MatchSet, MatchStats), DescriptorError> {
    if a.dim() != b.dim() {
        return Err(DescriptorError::DimMismatch(a.dim(), b.dim()));
    }
    let mut pairs = Vec::new();
    let mut stats = MatchStats::default();
    for class in KeypointClass::ALL {
        let ia: Vec<usize> = (0..a.len()).filter(|&i| a.class(i) == class).collect();
        let ib: Vec<usize> = (0..b.len()).filter(|&j| b.class(j) == class).collect();
        stats.evaluations.push((class, ia.len() * ib.len()));
        if ia.is_empty() || ib.is_empty() {
            continue;
        }
        let mut sim = vec![0.0f64; ia.len() * ib.len()];
        for (ra, &i) in ia.iter().enumerate() {
            for (rb, &j) in ib.iter().enumerate() {
                sim[ra * ib.len() + rb] = dot(a.row(i), b.row(j));
            }
        }
        // argmax per row and per column, ties to the smallest index
        let best_for_a: Vec<usize> = (0..ia.len())
            .map(|ra| {
                (0..ib.len())
                    .max_by(|&x, &y| {
                        sim[ra * ib.len() + x]
                            .partial_cmp(&sim[ra * ib.len() + y])
                            .unwrap()
                            .then(y.cmp(&x))
                    })
                    .unwrap()
            })
            .collect();
        let best_for_b: Vec<usize> = (0..ib.len())
            .map(|rb| {
                (0..ia.len())
                    .max_by(|&x, &y| {
                        sim[x * ib.len() + rb]
                            .partial_cmp(&sim[y * ib.len() + rb])
                            .unwrap()
                            .then(y.cmp(&x))
                    })
                    .unwrap()
            })
            .collect();
        for (ra, &rb) in best_for_a.iter().enumerate() {
            if best_for_b[rb] == ra {
                pairs.push(Match {
                    fixed_index: ia[ra],
                    moving_index: ib[rb],
                    similarity: sim[ra * ib.len() + rb],
                    class,
                });
            }
        }
    }
    pairs.sort_by(|p, q| {
        q.similarity
            .partial_cmp(&p.similarity)
            .unwrap()
            .then(p.fixed_index.cmp(&q.fixed_index))
            .then(p.moving_index.cmp(&q.moving_index))
    });
    Ok((MatchSet { pairs }, stats))
}

/// Keeps at most the `n_per_class` highest-similarity pairs of each class.
/// Classes with fewer matched pairs contribute what they have.
pub fn top_n_matches(m: &MatchSet, n_per_class: usize) -> MatchSet {
    assert!(n_per_class >= 1, "n_per_class must be at least 1");
    let mut by_class: Vec<Match> = Vec::new();
    for class in KeypointClass::ALL {
        let mut of_class: Vec<Match> = m
            .pairs
            .iter()
            .copied()
            .filter(|p| p.class == class)
            .collect();
        of_class.sort_by(|p, q| {
            q.similarity
                .partial_cmp(&p.similarity)
                .unwrap()
                .then(p.fixed_index.cmp(&q.fixed_index))
        });
        of_class.truncate(n_per_class);
        by_class.extend(of_class);
    }
    by_class.sort_by(|p, q| {
        q.similarity
            .partial_cmp(&p.similarity)
            .unwrap()
            .then(p.fixed_index.cmp(&q.fixed_index))
            .then(p.moving_index.cmp(&q.moving_index))
    });
    MatchSet { pairs: by_class }
}
