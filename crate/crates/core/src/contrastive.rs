//! Multi-positive multi-negative contrastive losses over a multiview
//! descriptor batch, with analytic gradients.
//!
//! A batch holds `1 + N` views of the same image (the original plus `N`
//! augmentations), each contributing one unit-norm descriptor per keypoint,
//! aligned by keypoint index. For an anchor descriptor `z[i][k]` the other
//! views supply `N` positives (same `k`) and every other keypoint in every
//! view supplies a negative, `(K-1)(N+1)` in total.
//!
//! Two multi-positive objectives are provided, differing in denominator
//! scope and normalization, plus a single-positive single-negative triplet
//! baseline. All gradients are taken with respect to the unit-norm
//! descriptors themselves; backpropagation through the normalization layer
//! is the descriptor network's job.

use rand::Rng;
use thiserror::Error;

use crate::descriptors::DescriptorSet;
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("margin must be non-negative, got {0}")]
    InvalidMargin(f64),
    #[error("view index {0} out of range for {1} views")]
    ViewOutOfRange(usize, usize),
    #[error("keypoint index {0} out of range for {1} keypoints")]
    KeypointOutOfRange(usize, usize),
}

/// Loss hyperparameters: softmax temperature and triplet margin.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            margin: 0.05,
        }
    }
}

/// Negative-selection mode for the triplet baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMining {
    /// Hardest positive (lowest similarity) and hardest negative (highest
    /// similarity) per anchor.
    Hardest,
    /// Uniformly random positive and negative per anchor, derived from the
    /// given seed so the loss stays a pure function.
    Random { seed: u64 },
}

/// `(1 + N) x K x D` batch of aligned unit-norm descriptors. Row `k` of
/// every view corresponds to the same source keypoint.
#[derive(Debug, Clone)]
pub struct MultiviewBatch {
    n_views: usize,
    k: usize,
    dim: usize,
    data: Vec<f64>,
}

impl MultiviewBatch {
    /// Assembles a batch from per-view descriptor sets (view 0 first).
    pub fn from_descriptor_sets(views: &[DescriptorSet]) -> Result<Self, LossError> {
        if views.len() < 2 {
            return Err(LossError::DegenerateBatch("need at least 2 views"));
        }
        let k = views[0].len();
        let dim = views[0].dim();
        if k < 2 {
            return Err(LossError::DegenerateBatch("need at least 2 keypoints"));
        }
        let mut data = Vec::with_capacity(views.len() * k * dim);
        for v in views {
            if v.len() != k || v.dim() != dim {
                return Err(LossError::DegenerateBatch("views must share K and D"));
            }
            for i in 0..k {
                data.extend_from_slice(v.row(i));
            }
        }
        Ok(Self {
            n_views: views.len(),
            k,
            dim,
            data,
        })
    }

    /// Assembles a batch from raw rows, validating shape, finiteness and
    /// the unit-norm invariant.
    pub fn from_vectors(views: Vec<Vec<Vec<f64>>>) -> Result<Self, LossError> {
        if views.len() < 2 {
            return Err(LossError::DegenerateBatch("need at least 2 views"));
        }
        let k = views[0].len();
        if k < 2 {
            return Err(LossError::DegenerateBatch("need at least 2 keypoints"));
        }
        let dim = views[0][0].len();
        let mut data = Vec::with_capacity(views.len() * k * dim);
        for view in &views {
            if view.len() != k {
                return Err(LossError::DegenerateBatch("views must share K"));
            }
            for row in view {
                if row.len() != dim {
                    return Err(LossError::DegenerateBatch("rows must share D"));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(LossError::DegenerateBatch("descriptors must be finite"));
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > crate::descriptors::NORM_TOLERANCE {
                    return Err(LossError::DegenerateBatch("descriptors must be unit-norm"));
                }
                data.extend_from_slice(row);
            }
        }
        Ok(Self {
            n_views: views.len(),
            k,
            dim,
            data,
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    /// Number of augmented views (`n_views - 1`).
    pub fn n_augmented(&self) -> usize {
        self.n_views - 1
    }

    pub fn keypoints(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn z(&self, view: usize, k: usize) -> &[f64] {
        let i = (view * self.k + k) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Clone with one coordinate shifted by `delta`, skipping revalidation.
    /// Intended for finite-difference gradient checks, where the probe must
    /// evaluate the loss at points slightly off the unit sphere.
    pub fn perturbed(&self, view: usize, k: usize, d: usize, delta: f64) -> MultiviewBatch {
        let mut out = self.clone();
        out.data[(view * self.k + k) * self.dim + d] += delta;
        out
    }
}

/// Gradient of a loss with respect to every descriptor in the batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    n_views: usize,
    k: usize,
    dim: usize,
    data: Vec<f64>,
}

impl BatchGrad {
    fn zeros(b: &MultiviewBatch) -> Self {
        Self {
            n_views: b.n_views,
            k: b.k,
            dim: b.dim,
            data: vec![0.0; b.data.len()],
        }
    }

    #[inline]
    pub fn get(&self, view: usize, k: usize) -> &[f64] {
        let i = (view * self.k + k) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    fn row_mut(&mut self, view: usize, k: usize) -> &mut [f64] {
        let i = (view * self.k + k) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn keypoints(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    fn axpy(&mut self, view: usize, k: usize, coeff: f64, src: &[f64]) {
        for (g, &s) in self.row_mut(view, k).iter_mut().zip(src) {
            *g += coeff * s;
        }
    }
}

/// Loss value and its gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: BatchGrad,
}

fn check_batch(b: &MultiviewBatch) -> Result<(), LossError> {
    if b.k < 2 {
        return Err(LossError::DegenerateBatch("need at least 2 keypoints"));
    }
    if b.n_views < 2 {
        return Err(LossError::DegenerateBatch("need at least 1 augmented view"));
    }
    Ok(())
}

fn check_temperature(cfg: &LossConfig) -> Result<(), LossError> {
    if cfg.temperature <= 0.0 {
        return Err(LossError::NonPositiveTemperature(cfg.temperature));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Denominator index set of the broad contrastive objective for anchor
/// `(i, k)`: every other keypoint of the anchor's own view plus every
/// keypoint of every other view. That is `(K-1) + N*K` entries, of which
/// `N` are the positives, leaving `(K-1)(N+1)` negatives.
fn broad_denominator_indices(b: &MultiviewBatch, i: usize, k: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(b.k - 1 + b.n_augmented() * b.k);
    for c in 0..b.k {
        if c != k {
            idx.push((i, c));
        }
    }
    for l in 0..b.n_views {
        if l == i {
            continue;
        }
        for c in 0..b.k {
            idx.push((l, c));
        }
    }
    idx
}

/// Denominator index set of the pairwise objective for anchor `(i, k)`
/// against view `j`: the anchor view's other keypoints plus all keypoints
/// of view `j` (`2K - 1` entries, one of them the positive).
fn pairwise_denominator_indices(
    b: &MultiviewBatch,
    i: usize,
    j: usize,
    k: usize,
) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(2 * b.k - 1);
    for c in 0..b.k {
        if c != k {
            idx.push((i, c));
        }
    }
    for c in 0..b.k {
        idx.push((j, c));
    }
    idx
}

/// Stable log-sum-exp over the denominator logits; returns the log and the
/// softmax weights in index order.
fn log_sum_exp(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (max + sum.ln(), weights)
}

fn term_value(
    b: &MultiviewBatch,
    tau: f64,
    i: usize,
    j: usize,
    k: usize,
    den: &[(usize, usize)],
) -> f64 {
    let anchor = b.z(i, k);
    let logits: Vec<f64> = den
        .iter()
        .map(|&(l, c)| dot(anchor, b.z(l, c)) / tau)
        .collect();
    let (log_den, _) = log_sum_exp(&logits);
    -dot(anchor, b.z(j, k)) / tau + log_den
}

fn validate_indices(b: &MultiviewBatch, i: usize, j: usize, k: usize) -> Result<(), LossError> {
    if i >= b.n_views {
        return Err(LossError::ViewOutOfRange(i, b.n_views));
    }
    if j >= b.n_views {
        return Err(LossError::ViewOutOfRange(j, b.n_views));
    }
    if i == j {
        return Err(LossError::DegenerateBatch(
            "term requires two distinct views",
        ));
    }
    if k >= b.k {
        return Err(LossError::KeypointOutOfRange(k, b.k));
    }
    Ok(())
}

/// One summand of the broad multi-positive objective: the `-log` softmax
/// term for anchor `(i, k)` paired with view `j`, before the leading `1/N`.
pub fn supcon_term(
    b: &MultiviewBatch,
    cfg: &LossConfig,
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64, LossError> {
    check_batch(b)?;
    check_temperature(cfg)?;
    validate_indices(b, i, j, k)?;
    let den = broad_denominator_indices(b, i, k);
    Ok(term_value(b, cfg.temperature, i, j, k, &den))
}

/// One summand of the pairwise multi-positive objective, before the leading
/// `1 / (C(N+1, 2) * K)` normalization. The anchor is `(i, k)`.
pub fn mp_infonce_term(
    b: &MultiviewBatch,
    cfg: &LossConfig,
    i: usize,
    j: usize,
    k: usize,
) -> Result<f64, LossError> {
    check_batch(b)?;
    check_temperature(cfg)?;
    validate_indices(b, i, j, k)?;
    let den = pairwise_denominator_indices(b, i, j, k);
    Ok(term_value(b, cfg.temperature, i, j, k, &den))
}

/// Supervised-contrastive objective over the multiview batch.
///
/// For every ordered view pair `(i, j)` and keypoint `k`, the anchor
/// `z[i][k]` is pulled toward `z[j][k]` against a denominator spanning the
/// anchor's own-view negatives and every keypoint of every other view
/// (positives included). The sum is scaled by `1/N`.
pub fn supcon_loss(b: &MultiviewBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_batch(b)?;
    check_temperature(cfg)?;
    let tau = cfg.temperature;
    let n = b.n_augmented() as f64;
    let mut value = 0.0;
    let mut grad = BatchGrad::zeros(b);

    for i in 0..b.n_views {
        for k in 0..b.k {
            let anchor = b.z(i, k).to_vec();
            let den = broad_denominator_indices(b, i, k);
            let logits: Vec<f64> = den
                .iter()
                .map(|&(l, c)| dot(&anchor, b.z(l, c)) / tau)
                .collect();
            let (log_den, weights) = log_sum_exp(&logits);

            // The denominator is shared by the N terms (one per positive
            // view j != i); the numerator contributes once per j.
            for j in 0..b.n_views {
                if j == i {
                    continue;
                }
                value += -dot(&anchor, b.z(j, k)) / tau + log_den;
                // d/d anchor of the numerator part, and d/d z[j][k]
                grad.axpy(i, k, -1.0 / tau, b.z(j, k));
                grad.axpy(j, k, -1.0 / tau, &anchor);
            }
            // denominator gradients, weighted by softmax, once per the N terms
            for (&(l, c), &w) in den.iter().zip(&weights) {
                let coeff = n * w / tau;
                grad.axpy(i, k, coeff, b.z(l, c));
                grad.axpy(l, c, coeff, &anchor);
            }
        }
    }
    value /= n;
    grad.scale(1.0 / n);
    Ok(LossOutput { value, grad })
}

/// Pairwise multi-positive InfoNCE objective.
///
/// For every unordered view pair `i < j` and keypoint `k`, the anchor
/// `z[i][k]` contrasts against its own-view negatives and all keypoints of
/// view `j` only. The sum is scaled by `1 / (C(N+1, 2) * K)`.
pub fn mp_infonce_loss(b: &MultiviewBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    check_batch(b)?;
    check_temperature(cfg)?;
    let tau = cfg.temperature;
    let v = b.n_views;
    let pairs = (v * (v - 1) / 2) as f64;
    let norm = 1.0 / (pairs * b.k as f64);
    let mut value = 0.0;
    let mut grad = BatchGrad::zeros(b);

    for i in 0..v {
        for j in i + 1..v {
            for k in 0..b.k {
                let anchor = b.z(i, k).to_vec();
                let den = pairwise_denominator_indices(b, i, j, k);
                let logits: Vec<f64> = den
                    .iter()
                    .map(|&(l, c)| dot(&anchor, b.z(l, c)) / tau)
                    .collect();
                let (log_den, weights) = log_sum_exp(&logits);
                value += -dot(&anchor, b.z(j, k)) / tau + log_den;

                grad.axpy(i, k, -1.0 / tau, b.z(j, k));
                grad.axpy(j, k, -1.0 / tau, &anchor);
                for (&(l, c), &w) in den.iter().zip(&weights) {
                    let coeff = w / tau;
                    grad.axpy(i, k, coeff, b.z(l, c));
                    grad.axpy(l, c, coeff, &anchor);
                }
            }
        }
    }
    value *= norm;
    grad.scale(norm);
    Ok(LossOutput { value, grad })
}

/// Triplet baseline with cosine distance `d = 1 - z_a . z_b`.
///
/// Every `(view, keypoint)` pair anchors one hinge term
/// `max(0, d(a,p) - d(a,n) + margin)`; the loss is the mean over anchors.
pub fn triplet_loss(
    b: &MultiviewBatch,
    cfg: &LossConfig,
    mining: TripletMining,
) -> Result<LossOutput, LossError> {
    check_batch(b)?;
    if cfg.margin < 0.0 {
        return Err(LossError::InvalidMargin(cfg.margin));
    }
    let mut rng = match mining {
        TripletMining::Random { seed } => Some(substream(seed, "triplet-mining", 0)),
        TripletMining::Hardest => None,
    };
    let anchors = b.n_views * b.k;
    let mut value = 0.0;
    let mut grad = BatchGrad::zeros(b);

    for i in 0..b.n_views {
        for k in 0..b.k {
            let anchor = b.z(i, k).to_vec();
            // candidate positives: same keypoint in any other view
            let positives: Vec<usize> = (0..b.n_views).filter(|&j| j != i).collect();
            // candidate negatives: any other keypoint in any view
            let (pos_view, neg) = match &mut rng {
                Some(rng) => {
                    let pv = positives[rng.random_range(0..positives.len())];
                    let nv = rng.random_range(0..b.n_views);
                    let mut nk = rng.random_range(0..b.k - 1);
                    if nk >= k {
                        nk += 1;
                    }
                    (pv, (nv, nk))
                }
                None => {
                    // hardest positive: least similar same-keypoint view
                    let pv = positives
                        .iter()
                        .copied()
                        .min_by(|&x, &y| {
                            dot(&anchor, b.z(x, k))
                                .partial_cmp(&dot(&anchor, b.z(y, k)))
                                .unwrap()
                        })
                        .unwrap();
                    // hardest negative: most similar other keypoint
                    let mut best = (0usize, 0usize);
                    let mut best_sim = f64::NEG_INFINITY;
                    for l in 0..b.n_views {
                        for c in 0..b.k {
                            if c == k {
                                continue;
                            }
                            let s = dot(&anchor, b.z(l, c));
                            if s > best_sim {
                                best_sim = s;
                                best = (l, c);
                            }
                        }
                    }
                    (pv, best)
                }
            };
            let sim_p = dot(&anchor, b.z(pos_view, k));
            let sim_n = dot(&anchor, b.z(neg.0, neg.1));
            // d(a,p) - d(a,n) + margin with d = 1 - sim
            let term = sim_n - sim_p + cfg.margin;
            if term > 0.0 {
                value += term;
                // d term / d anchor = n - p ; d/dp = -a ; d/dn = a
                grad.axpy(i, k, 1.0, b.z(neg.0, neg.1));
                grad.axpy(i, k, -1.0, b.z(pos_view, k));
                grad.axpy(pos_view, k, -1.0, &anchor);
                grad.axpy(neg.0, neg.1, 1.0, &anchor);
            }
        }
    }
    value /= anchors as f64;
    grad.scale(1.0 / anchors as f64);
    Ok(LossOutput { value, grad })
}
