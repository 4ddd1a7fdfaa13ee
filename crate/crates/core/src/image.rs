//! 8-bit RGB frames and the float-image filters shared by rendering and
//! augmentation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major interleaved RGB, one byte per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    /// Quantizes values in `[0, 1]` (clamped) to bytes.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|v| quantize(*v)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    /// Per-channel mean in `[0, 1]`.
    pub fn channel_mean(&self) -> [f64; 3] {
        let mut s = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height) as f64 * 255.0;
        [s[0] as f64 / n, s[1] as f64 / n, s[2] as f64 / n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(vec![self.height, self.width, 3], |i| {
            self.pixels[i] as f64 / 255.0
        })
        .expect("frame shape is consistent")
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian blur of an interleaved `h×w×c` buffer with clamped
/// borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(data: &mut [f64], h: usize, w: usize, c: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += t * data[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += t * tmp[(yy * w + x) * c + ch];
                }
                data[(y * w + x) * c + ch] = acc;
            }
        }
    }
}

/// Mirrors an `h×w×c` tensor left to right.
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&d[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_clamps_and_rounds() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(128.0 / 255.0), 128);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let mut d = vec![0.3; 10 * 12 * 3];
        gaussian_blur(&mut d, 10, 12, 3, 1.2);
        assert!(d.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut spike = vec![0.0; 21 * 21];
        spike[10 * 21 + 10] = 1.0;
        gaussian_blur(&mut spike, 21, 21, 1, 1.0);
        assert!((spike.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(spike[10 * 21 + 10] < 0.2);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::from_fn(vec![3, 4, 2], |i| i as f64).unwrap();
        let f = flip_horizontal(&t).unwrap();
        assert!(!f.bit_eq(&t));
        assert!(flip_horizontal(&f).unwrap().bit_eq(&t));
    }

    #[test]
    fn frame_rejects_wrong_length() {
        assert!(Frame::new(2, 2, vec![0; 11]).is_err());
    }
}
