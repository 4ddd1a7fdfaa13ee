//! Boxes, overlap and context cropping.
//!
//! Pixel `(i, j)` covers `[j, j+1) × [i, i+1)` in continuous frame
//! coordinates, so its center sits at `(j + 0.5, i + 0.5)`.

use crate::error::{Error, Result};
use crate::image::Frame;
use crate::tensor::Tensor;

/// Axis-aligned box: top-left corner plus size, in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
    }

    /// True when the box overlaps the `width×height` frame.
    pub fn intersects_frame(&self, width: usize, height: usize) -> bool {
        self.intersection(&BBox::new(0.0, 0.0, width as f64, height as f64)) > 0.0
    }
}

/// Side of the square exemplar context around a `w×h` target:
/// `√((w+2p)(h+2p))` with `p = (w+h)/4`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let p = (w + h) / 4.0;
    ((w + 2.0 * p) * (h + 2.0 * p)).sqrt()
}

/// Exemplar/search crop sizes of a matcher. A search crop covers
/// `search/exemplar` times the exemplar context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRule {
    pub exemplar_size: usize,
    pub search_size: usize,
}

impl CropRule {
    pub fn exemplar_side(&self, w: f64, h: f64) -> f64 {
        context_side(w, h)
    }

    pub fn search_side(&self, w: f64, h: f64) -> f64 {
        context_side(w, h) * self.search_size as f64 / self.exemplar_size as f64
    }

    pub fn exemplar(&self, frame: &Frame, b: &BBox) -> Result<Tensor> {
        let (cx, cy) = b.center();
        crop(
            frame,
            cx,
            cy,
            self.exemplar_side(b.w, b.h),
            self.exemplar_size,
        )
    }

    /// Search crop centered at `(cx, cy)` for a `w×h` target, enlarged by
    /// `scale`.
    pub fn search(
        &self,
        frame: &Frame,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        scale: f64,
    ) -> Result<Tensor> {
        crop(
            frame,
            cx,
            cy,
            self.search_side(w, h) * scale,
            self.search_size,
        )
    }
}

/// Square crop of side `side` centered at `(cx, cy)`, bilinearly resampled
/// to `out×out`. Samples outside the frame take the frame's channel mean.
pub fn crop(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Result<Tensor> {
    crop_with_mean(frame, cx, cy, side, out, frame.channel_mean())
}

pub fn crop_with_mean(
    frame: &Frame,
    cx: f64,
    cy: f64,
    side: f64,
    out: usize,
    mean: [f64; 3],
) -> Result<Tensor> {
    if !(side.is_finite() && side > 0.0) || out == 0 || !cx.is_finite() || !cy.is_finite() {
        return Err(Error::geometry(
            "crop",
            format!("side {side} at ({cx}, {cy}) into {out}px"),
        ));
    }
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let step = side / out as f64;
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let mut data = vec![0.0; out * out * 3];
    let px = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            mean[c]
        } else {
            frame.at(x as usize, y as usize, c)
        }
    };
    for i in 0..out {
        let sy = y0 + (i as f64 + 0.5) * step - 0.5;
        let iy = sy.floor();
        let ty = sy - iy;
        let iy = iy as i64;
        for j in 0..out {
            let sx = x0 + (j as f64 + 0.5) * step - 0.5;
            let ix = sx.floor();
            let tx = sx - ix;
            let ix = ix as i64;
            let o = &mut data[(i * out + j) * 3..][..3];
            for (c, v) in o.iter_mut().enumerate() {
                let top = if tx == 0.0 {
                    px(ix, iy, c)
                } else {
                    px(ix, iy, c) * (1.0 - tx) + px(ix + 1, iy, c) * tx
                };
                *v = if ty == 0.0 {
                    top
                } else {
                    let bottom = if tx == 0.0 {
                        px(ix, iy + 1, c)
                    } else {
                        px(ix, iy + 1, c) * (1.0 - tx) + px(ix + 1, iy + 1, c) * tx
                    };
                    top * (1.0 - ty) + bottom * ty
                };
            }
        }
    }
    Tensor::new(vec![out, out, 3], data)
}
