//! 8-bit image sets and the resizing used by the preprocessing protocol.

use crate::error::{DtaError, Result};

/// `N` images of shape `C×H×W`, row-major planes, 8-bit intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<u8>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(DtaError::invalid(format!(
                "{} pixels do not divide into images of shape {shape:?}",
                pixels.len()
            )));
        }
        Ok(ImageSet { shape, pixels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            shape: self.shape,
            pixels,
        }
    }

    /// Bilinear resize of every plane (half-pixel centres, edge clamping).
    pub fn resize(&self, height: usize, width: usize) -> ImageSet {
        let [c, h, w] = self.shape;
        if (h, w) == (height, width) {
            return self.clone();
        }
        let taps_y = bilinear_taps(h, height);
        let taps_x = bilinear_taps(w, width);
        let mut pixels = Vec::with_capacity(self.len() * c * height * width);
        for plane in self.pixels.chunks(h * w) {
            for &(y0, y1, fy) in &taps_y {
                for &(x0, x1, fx) in &taps_x {
                    let at = |y: usize, x: usize| f64::from(plane[y * w + x]);
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    pixels.push(round_u8(top * (1.0 - fy) + bottom * fy));
                }
            }
        }
        ImageSet {
            shape: [c, height, width],
            pixels,
        }
    }

    /// Block-average downscale by an integer factor.
    pub fn downscale(&self, factor: usize) -> Result<ImageSet> {
        let [c, h, w] = self.shape;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(DtaError::invalid(format!("cannot downscale {h}×{w} by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let area = (factor * factor) as f64;
        let mut pixels = Vec::with_capacity(self.len() * c * oh * ow);
        for plane in self.pixels.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0u32;
                    for y in oy * factor..(oy + 1) * factor {
                        for x in ox * factor..(ox + 1) * factor {
                            sum += u32::from(plane[y * w + x]);
                        }
                    }
                    pixels.push(round_u8(f64::from(sum) / area));
                }
            }
        }
        Ok(ImageSet {
            shape: [c, oh, ow],
            pixels,
        })
    }

    /// Grayscale to `channels` identical planes.
    pub fn replicate_channels(&self, channels: usize) -> Result<ImageSet> {
        let [c, h, w] = self.shape;
        if c != 1 {
            return Err(DtaError::invalid(format!("channel replication needs 1 channel, got {c}")));
        }
        let mut pixels = Vec::with_capacity(self.pixels.len() * channels);
        for img in self.pixels.chunks(h * w) {
            for _ in 0..channels {
                pixels.extend_from_slice(img);
            }
        }
        Ok(ImageSet {
            shape: [channels, h, w],
            pixels,
        })
    }
}

fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
