//! Dense convolutional descriptor network with reverse-mode gradients.
//!
//! The network is a stack of 3x3 stride-1 same-padded convolutions with a
//! rectifier after every layer except the last, followed by a per-pixel L2
//! normalization, so the output block has the same spatial size as the
//! input and unit-norm descriptors everywhere. Gradients are computed by
//! hand: the losses differentiate with respect to the unit-norm descriptors
//! and this module chains through the normalization
//! (`d(v/|v|) = (I - zz^T)/|v|`) and the convolution stack down to the
//! parameters.

mod augment;
mod train;

pub use augment::{
    batch_from_inputs, build_multiview_batch, build_multiview_inputs, AugmentationSpec,
    MultiviewInputs,
};
pub use train::{
    evaluate_matching_precision, matching_precision_from_blocks, train_on_images, EvalPair,
    LossKind, OptimizerKind, TrainConfig, TrainReport, Trainer,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::contrastive::LossError;
use crate::descriptors::{DescriptorBlock, DescriptorError};
use crate::imagebuf::Image;
use crate::keypoints::KeypointError;
use crate::rng::substream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKDN";

/// Norm floor below which a pre-normalization vector is replaced by the
/// first basis vector (with zero gradient through the substitution).
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} channels, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("only {0} keypoints survive in all views, need at least 2")]
    TooFewSurvivors(usize),
    #[error("loss is not finite ({0}); parameters left unchanged")]
    NonFiniteLoss(f64),
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic, expected CKDN")]
    BadMagic,
    #[error("checkpoint layer table is invalid")]
    BadLayerTable,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
}

/// Layer widths for the descriptor network. Every layer is a 3x3 stride-1
/// same-padded convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub descriptor_dim: usize,
}

impl NetConfig {
    /// Desk-scale default: three layers, channels [16, 16, 16].
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            hidden_channels: vec![16, 16],
            descriptor_dim: 16,
        }
    }

    /// Wide configuration with 128-dimensional descriptors.
    pub fn wide() -> Self {
        Self {
            input_channels: 3,
            hidden_channels: vec![16, 16],
            descriptor_dim: 128,
        }
    }

    /// `(in, out)` channel pairs per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_channels.len() + 1);
        let mut prev = self.input_channels;
        for &h in &self.hidden_channels {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.descriptor_dim));
        dims
    }
}

/// The descriptor network: per-layer 3x3 kernels and biases.
///
/// Weight layout per layer: `[out][in][ky][kx]` flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDescriptorNet {
    layer_dims: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ConvDescriptorNet {
    /// He-normal initialization, deterministic per seed.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let layer_dims = cfg.layer_dims();
        let mut weights = Vec::with_capacity(layer_dims.len());
        let mut biases = Vec::with_capacity(layer_dims.len());
        for (l, &(in_c, out_c)) in layer_dims.iter().enumerate() {
            let mut rng = substream(seed, "net-init", l as u64);
            let std = (2.0 / (9.0 * in_c as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive");
            let w: Vec<f64> = (0..out_c * in_c * 9)
                .map(|_| normal.sample(&mut rng))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; out_c]);
        }
        Self {
            layer_dims,
            weights,
            biases,
        }
    }

    pub fn from_parts(
        layer_dims: Vec<(usize, usize)>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Self {
        assert_eq!(layer_dims.len(), weights.len());
        assert_eq!(layer_dims.len(), biases.len());
        for (&(in_c, out_c), (w, b)) in layer_dims.iter().zip(weights.iter().zip(&biases)) {
            assert_eq!(w.len(), out_c * in_c * 9);
            assert_eq!(b.len(), out_c);
        }
        Self {
            layer_dims,
            weights,
            biases,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn descriptor_dim(&self) -> usize {
        self.layer_dims.last().unwrap().1
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// Total parameter count: `sum_l (9 * in_l * out_l + out_l)`.
    pub fn parameter_count(&self) -> usize {
        self.layer_dims.iter().map(|&(i, o)| 9 * i * o + o).sum()
    }

    /// Receptive-field radius in pixels: one per 3x3 stride-1 layer.
    pub fn receptive_field_radius(&self) -> usize {
        self.layer_dims.len()
    }

    /// All parameters as one flat vector (weights then bias, per layer).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count());
        let mut at = 0usize;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wlen = w.len();
            w.copy_from_slice(&params[at..at + wlen]);
            at += wlen;
            let blen = b.len();
            b.copy_from_slice(&params[at..at + blen]);
            at += blen;
        }
    }

    fn conv_layer(&self, l: usize, input: &Image) -> Image {
        let (in_c, out_c) = self.layer_dims[l];
        debug_assert_eq!(input.channels(), in_c);
        let (wd, ht) = (input.width(), input.height());
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = Image::new(wd, ht, out_c);
        for y in 0..ht {
            for x in 0..wd {
                let dst = out.pixel_mut(x, y);
                dst.copy_from_slice(&b[..out_c]);
                for ky in 0..3usize {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= ht as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= wd as isize {
                            continue;
                        }
                        let px = input.pixel(xx as usize, yy as usize);
                        let koff = ky * 3 + kx;
                        for (oc, d) in dst.iter_mut().enumerate() {
                            let wrow = (oc * in_c) * 9 + koff;
                            let mut acc = 0.0;
                            for (ic, &v) in px.iter().enumerate() {
                                acc += w[wrow + ic * 9] * v;
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Runs the stack and returns the cached activations needed by
    /// [`ConvDescriptorNet::backward_from_descriptor_grads`].
    pub fn forward_trace(&self, image: &Image) -> Result<ForwardTrace, NetError> {
        if image.channels() != self.input_channels() {
            return Err(NetError::ShapeMismatch {
                expected: self.input_channels(),
                got: image.channels(),
            });
        }
        let layers = self.num_layers();
        let mut layer_inputs = Vec::with_capacity(layers);
        layer_inputs.push(image.clone());
        for l in 0..layers - 1 {
            let mut out = self.conv_layer(l, layer_inputs.last().unwrap());
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            layer_inputs.push(out);
        }
        let pre_norm = self.conv_layer(layers - 1, layer_inputs.last().unwrap());
        Ok(ForwardTrace {
            layer_inputs,
            pre_norm,
        })
    }

    /// Dense forward pass: unit-norm descriptor per input pixel.
    pub fn forward_dense(&self, image: &Image) -> Result<DescriptorBlock, NetError> {
        let trace = self.forward_trace(image)?;
        Ok(trace.normalized_block()?)
    }

    /// Back-propagates descriptor gradients (given at selected pixels, with
    /// respect to the *normalized* descriptors) down to parameter space.
    pub fn backward_from_descriptor_grads(
        &self,
        trace: &ForwardTrace,
        z_grads: &[((usize, usize), Vec<f64>)],
    ) -> ParamGrads {
        let dim = self.descriptor_dim();
        let (wd, ht) = (trace.pre_norm.width(), trace.pre_norm.height());
        let mut d_out = Image::new(wd, ht, dim);
        for ((x, y), gz) in z_grads {
            debug_assert_eq!(gz.len(), dim);
            let v = trace.pre_norm.pixel(*x, *y);
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dst = d_out.pixel_mut(*x, *y);
            if norm <= NORM_EPS {
                // constant substitute descriptor: zero gradient
                continue;
            }
            let inv = 1.0 / norm;
            let dot: f64 = gz.iter().zip(v).map(|(g, a)| g * a * inv).sum();
            for c in 0..dim {
                dst[c] += (gz[c] - dot * v[c] * inv) * inv;
            }
        }
        self.backward_conv_stack(trace, d_out)
    }

    fn backward_conv_stack(&self, trace: &ForwardTrace, mut d_out: Image) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(self);
        for l in (0..self.num_layers()).rev() {
            let (in_c, _) = self.layer_dims[l];
            let input = &trace.layer_inputs[l];
            let (wd, ht) = (input.width(), input.height());
            let w = &self.weights[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            let mut d_in = Image::new(wd, ht, in_c);
            for y in 0..ht {
                for x in 0..wd {
                    let g_out = d_out.pixel(x, y);
                    for (oc, &g) in g_out.iter().enumerate() {
                        gb[oc] += g;
                    }
                    for ky in 0..3usize {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= ht as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let (ux, uy) = (xx as usize, yy as usize);
                            let px = input.pixel(ux, uy);
                            let koff = ky * 3 + kx;
                            let d_px = d_in.pixel_mut(ux, uy);
                            for (oc, &g) in g_out.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                let wrow = (oc * in_c) * 9 + koff;
                                for ic in 0..in_c {
                                    gw[wrow + ic * 9] += g * px[ic];
                                    d_px[ic] += g * w[wrow + ic * 9];
                                }
                            }
                        }
                    }
                }
            }
            if l > 0 {
                // gate by the rectifier of the previous layer's output
                for (d, &a) in d_in.data_mut().iter_mut().zip(trace.layer_inputs[l].data()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                d_out = d_in;
            }
        }
        grads
    }

    /// Checkpoint: magic `CKDN`, `u32` layer count, per-layer `u32` in/out
    /// channels, then all parameters as little-endian `f32` in declaration
    /// order (layer weights, then layer biases).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NetError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.num_layers() as u32).to_le_bytes())?;
        for &(in_c, out_c) in &self.layer_dims {
            w.write_all(&(in_c as u32).to_le_bytes())?;
            w.write_all(&(out_c as u32).to_le_bytes())?;
        }
        for (weights, biases) in self.weights.iter().zip(&self.biases) {
            for &v in weights.iter().chain(biases.iter()) {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, NetError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let layers = u32::from_le_bytes(u32buf) as usize;
        if layers == 0 || layers > 64 {
            return Err(NetError::BadLayerTable);
        }
        let mut layer_dims = Vec::with_capacity(layers);
        for _ in 0..layers {
            r.read_exact(&mut u32buf)?;
            let in_c = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let out_c = u32::from_le_bytes(u32buf) as usize;
            if in_c == 0 || out_c == 0 {
                return Err(NetError::BadLayerTable);
            }
            layer_dims.push((in_c, out_c));
        }
        for win in layer_dims.windows(2) {
            if win[0].1 != win[1].0 {
                return Err(NetError::BadLayerTable);
            }
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for &(in_c, out_c) in &layer_dims {
            let mut w = Vec::with_capacity(out_c * in_c * 9);
            for _ in 0..out_c * in_c * 9 {
                r.read_exact(&mut u32buf)?;
                w.push(f64::from(f32::from_le_bytes(u32buf)));
            }
            let mut b = Vec::with_capacity(out_c);
            for _ in 0..out_c {
                r.read_exact(&mut u32buf)?;
                b.push(f64::from(f32::from_le_bytes(u32buf)));
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer: the image, then each post-rectifier activation.
    layer_inputs: Vec<Image>,
    /// Output of the last convolution, before normalization.
    pre_norm: Image,
}

impl ForwardTrace {
    pub fn pre_norm(&self) -> &Image {
        &self.pre_norm
    }

    /// Normalizes the final activations into a descriptor block; fails when
    /// the activations overflowed to non-finite values.
    pub fn normalized_block(&self) -> Result<DescriptorBlock, DescriptorError> {
        DescriptorBlock::from_unnormalized(
            self.pre_norm.width(),
            self.pre_norm.height(),
            self.pre_norm.channels(),
            self.pre_norm.data().to_vec(),
        )
    }
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &ConvDescriptorNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten())
            .all(|v| v.is_finite())
    }
}

/// Fills an image with uniform noise in `[0, 1)`; test helper for random
/// inputs that is also used by the synthetic generator.
pub fn random_image(width: usize, height: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let data = (0..width * height * channels)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    Image::from_data(width, height, channels, data).expect("length matches")
}
