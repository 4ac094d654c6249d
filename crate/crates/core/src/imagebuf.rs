//! Float image buffers with bilinear warping, HSV color jitter and PNG I/O.
//!
//! Pixel values live in `[0, 1]`; layout is row-major with channels
//! innermost, matching the raw block container in [`crate::blockio`].

use std::path::Path;

use thiserror::Error;

use crate::geometry::{Homography, Point2};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    BadLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("image i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec failed: {0}")]
    Codec(String),
}

/// Row-major float image, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::BadLength {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.idx(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y) + c;
        self.data[i] = v;
    }

    pub fn fill(&mut self, color: &[f64]) {
        assert_eq!(color.len(), self.channels);
        for px in self.data.chunks_mut(self.channels) {
            px.copy_from_slice(color);
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at a float location; `None` outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        if !(x.is_finite() && y.is_finite()) {
            return false;
        }
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return false;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (p00, p10, p01, p11) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        for c in 0..self.channels {
            out[c] = p00[c] * (1.0 - fx) * (1.0 - fy)
                + p10[c] * fx * (1.0 - fy)
                + p01[c] * (1.0 - fx) * fy
                + p11[c] * fx * fy;
        }
        true
    }

    /// Resamples this image through `map`, where `map` sends *output* pixel
    /// coordinates to *source* coordinates. Pixels mapping outside the
    /// source take `fill`.
    pub fn warp(
        &self,
        map: &Homography,
        out_width: usize,
        out_height: usize,
        fill: &[f64],
    ) -> Image {
        assert_eq!(fill.len(), self.channels);
        let mut out = Image::new(out_width, out_height, self.channels);
        let mut px = vec![0.0; self.channels];
        for y in 0..out_height {
            for x in 0..out_width {
                let src = map.apply(Point2::new(x as f64, y as f64));
                let dst = out.pixel_mut(x, y);
                match src {
                    Ok(p) if self.sample_bilinear(p.x, p.y, &mut px) => dst.copy_from_slice(&px),
                    _ => dst.copy_from_slice(fill),
                }
            }
        }
        out
    }

    /// Saves as an 8-bit PNG (values quantized as `round(255*v)`).
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        if self.channels != 3 {
            return Err(ImageError::ChannelMismatch {
                expected: 3,
                got: self.channels,
            });
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked");
        img.save(path).map_err(|e| ImageError::Codec(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let img = image::open(path)
            .map_err(|e| ImageError::Codec(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        Image::from_data(w, h, 3, data)
    }
}

/// RGB -> HSV, all components in `[0, 1]` (hue wraps).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 1e-12 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 1e-12 { 0.0 } else { delta / max };
    (h, s, max)
}

/// HSV -> RGB, inverse of [`rgb_to_hsv`].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

/// Shifts hue/saturation/value of every pixel by the given deltas,
/// wrapping hue and clamping the rest.
pub fn shift_hsv(img: &mut Image, dh: f64, ds: f64, dv: f64) {
    assert_eq!(img.channels(), 3);
    for px in img.data_mut().chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(
            (h + dh).rem_euclid(1.0),
            (s + ds).clamp(0.0, 1.0),
            (v + dv).clamp(0.0, 1.0),
        );
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
}
