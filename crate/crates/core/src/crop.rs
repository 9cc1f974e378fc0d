//! Square crops between frame and patch coordinates.

use crate::backbone::PatchGeometry;
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, BinaryMask, RotatedBox};
use crate::io::Image;
use crate::tensor::Tensor;

/// Side of the context region around a `w x h` target: `sqrt((w+p)(h+p))` with `p = (w+h)/2`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Maps between a square frame region of side `side` centered at `center` and an `size x size` patch.
///
/// Both sides use continuous coordinates in which pixel `i` spans `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub center: (f64, f64),
    pub side: f64,
    pub size: usize,
}

impl CropTransform {
    pub fn new(center: (f64, f64), side: f64, size: usize) -> Result<Self> {
        if !(side > 0.0) || size == 0 || !center.0.is_finite() || !center.1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "crop side {side} at {center:?} into {size} pixels"
            )));
        }
        Ok(Self { center, side, size })
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            center: self.center,
            side: self.side,
        }
    }

    /// Frame pixels per patch pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.size as f64
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        (
            self.center.0 + (u - half) * self.scale(),
            self.center.1 + (v - half) * self.scale(),
        )
    }

    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        (
            (x - self.center.0) / self.scale() + half,
            (y - self.center.1) / self.scale() + half,
        )
    }

    pub fn box_to_patch(&self, b: &AxisBox) -> AxisBox {
        let (x0, y0) = self.to_patch(b.x0, b.y0);
        let (x1, y1) = self.to_patch(b.x1, b.y1);
        AxisBox { x0, y0, x1, y1 }
    }

    pub fn box_to_frame(&self, b: &AxisBox) -> AxisBox {
        let (x0, y0) = self.to_frame(b.x0, b.y0);
        let (x1, y1) = self.to_frame(b.x1, b.y1);
        AxisBox { x0, y0, x1, y1 }
    }

    pub fn rotated_to_patch(&self, b: &RotatedBox) -> RotatedBox {
        let (cx, cy) = self.to_patch(b.cx, b.cy);
        let s = self.scale();
        RotatedBox {
            cx,
            cy,
            w: b.w / s,
            h: b.h / s,
            angle: b.angle,
        }
    }

    /// Bilinear resample to `[3, size, size]` in `[0, 1]`; taps outside the
    /// frame read the frame's per-channel mean.
    pub fn crop_image(&self, img: &Image) -> Tensor {
        let n = self.size;
        let mean = img.channel_means();
        let (w, h) = (img.width() as isize, img.height() as isize);
        let data = img.data();
        let mut out = vec![0f32; 3 * n * n];
        for v in 0..n {
            for u in 0..n {
                let (x, y) = self.to_frame(u as f64 + 0.5, v as f64 + 0.5);
                let (fx, fy) = (x - 0.5, y - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut acc = [0f64; 3];
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let wt = wx * wy;
                        if wt == 0.0 {
                            continue;
                        }
                        let (sx, sy) = (x0 + dx, y0 + dy);
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            for c in 0..3 {
                                acc[c] += wt * mean[c];
                            }
                        } else {
                            let i = ((sy * w + sx) * 3) as usize;
                            for c in 0..3 {
                                acc[c] += wt * data[i + c] as f64;
                            }
                        }
                    }
                }
                for c in 0..3 {
                    out[(c * n + v) * n + u] = (acc[c] / 255.0) as f32;
                }
            }
        }
        Tensor::new(&[3, n, n], out).expect("crop dims")
    }

    /// Nearest-neighbour resample of a frame mask; outside the frame is unset.
    pub fn crop_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let n = self.size;
        BinaryMask::from_fn(n, n, |u, v| {
            let (x, y) = self.to_frame(u as f64 + 0.5, v as f64 + 0.5);
            let (px, py) = (x.floor(), y.floor());
            px >= 0.0 && py >= 0.0 && (px as usize) < mask.width() && (py as usize) < mask.height() && mask.get(px as usize, py as usize)
        })
        .expect("crop dims")
    }

    /// Bilinear resample of patch values `[size*size]` into a `width x height`
    /// frame raster; pixels mapping outside the patch get `fill`.
    pub fn paste_to_frame(&self, patch: &[f32], width: usize, height: usize, fill: f32) -> Vec<f32> {
        let n = self.size;
        let mut out = vec![fill; width * height];
        let b = self.box_to_frame(&AxisBox {
            x0: 0.0,
            y0: 0.0,
            x1: n as f64,
            y1: n as f64,
        });
        let xs = b.x0.floor().max(0.0) as usize;
        let ys = b.y0.floor().max(0.0) as usize;
        let xe = (b.x1.ceil().max(0.0) as usize).min(width);
        let ye = (b.y1.ceil().max(0.0) as usize).min(height);
        for y in ys..ye {
            for x in xs..xe {
                let (u, v) = self.to_patch(x as f64 + 0.5, y as f64 + 0.5);
                if u < 0.0 || v < 0.0 || u >= n as f64 || v >= n as f64 {
                    continue;
                }
                let (fu, fv) = ((u - 0.5).clamp(0.0, (n - 1) as f64), (v - 0.5).clamp(0.0, (n - 1) as f64));
                let (u0, v0) = (fu.floor() as usize, fv.floor() as usize);
                let (u1, v1) = ((u0 + 1).min(n - 1), (v0 + 1).min(n - 1));
                let (au, av) = ((fu - u0 as f64) as f32, (fv - v0 as f64) as f32);
                let at = |uu: usize, vv: usize| patch[vv * n + uu];
                out[y * width + x] = (1.0 - av) * ((1.0 - au) * at(u0, v0) + au * at(u1, v0))
                    + av * ((1.0 - au) * at(u0, v1) + au * at(u1, v1));
            }
        }
        out
    }
}
