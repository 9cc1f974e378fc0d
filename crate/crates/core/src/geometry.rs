//! Binary masks and the three box strategies (Min-max, MBR, Opt), plus
//! rotated-rectangle IoU.
//!
//! Pixel `(x, y)` covers the unit square `[x, x+1) x [y, y+1)`; its center is
//! `(x + 0.5, y + 0.5)`. All geometry is in `f64`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::from_bits(width, height, vec![false; width * height])
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask {width}x{height} cannot hold {} bits",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    /// Mask of `(x, y)` for which `f(x, y)` holds.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::from_bits(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    /// The 8-connected component with the most pixels; ties go to the one whose
    /// first pixel comes first in row-major order. Empty masks come back unchanged.
    pub fn largest_component(&self) -> BinaryMask {
        let (w, h) = (self.width, self.height);
        let mut label = vec![0u32; w * h];
        let mut best = (0usize, 0u32);
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !self.bits[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            stack.push(start);
            let mut size = 0;
            while let Some(i) = stack.pop() {
                size += 1;
                let (x, y) = (i % w, i / w);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = ny * w + nx;
                        if self.bits[j] && label[j] == 0 {
                            label[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
            if size > best.0 {
                best = (size, next);
            }
        }
        BinaryMask {
            width: w,
            height: h,
            bits: label.iter().map(|&l| l != 0 && l == best.1).collect(),
        }
    }

    /// Set pixels with at least one unset (or out-of-bounds) 4-neighbour.
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        if !self.get(x, y) {
            return false;
        }
        x == 0
            || y == 0
            || x + 1 == self.width
            || y + 1 == self.height
            || !self.get(x - 1, y)
            || !self.get(x + 1, y)
            || !self.get(x, y - 1)
            || !self.get(x, y + 1)
    }
}

/// `bit = value > threshold` over a `[1, H, W]` or `[H, W]` tensor.
pub fn binarize(prob: &Tensor, threshold: f32) -> Result<BinaryMask> {
    let (h, w) = match prob.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape("binarize", format!("expected [1,H,W] or [H,W], got {s:?}"))),
    };
    BinaryMask::from_bits(w, h, prob.data().iter().map(|&v| v > threshold).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl AxisBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn iou(&self, other: &AxisBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn to_rotated(&self) -> RotatedBox {
        let (cx, cy) = self.center();
        RotatedBox {
            cx,
            cy,
            w: self.width(),
            h: self.height(),
            angle: 0.0,
        }
    }
}

/// Rectangle with side `w` along `(cos a, sin a)` and side `h` along `(-sin a, cos a)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Radians in `[-pi/2, pi/2)`.
    pub angle: f64,
}

/// Maps an angle to the equivalent rectangle orientation in `[-pi/2, pi/2)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if r >= FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() || !angle.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid rotated box c=({cx}, {cy}) size {w}x{h} angle {angle}"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            angle: normalize_angle(angle),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn axes(&self) -> ((f64, f64), (f64, f64)) {
        let (s, c) = self.angle.sin_cos();
        ((c, s), (-s, c))
    }

    /// Corners with positive shoelace area.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let ((ux, uy), (vx, vy)) = self.axes();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let p = |a: f64, b: f64| (self.cx + a * hw * ux + b * hh * vx, self.cy + a * hw * uy + b * hh * vy);
        [p(-1.0, -1.0), p(1.0, -1.0), p(1.0, 1.0), p(-1.0, 1.0)]
    }

    /// Inverse of [`RotatedBox::corners`] for any rectangle given in corner order.
    pub fn from_corners(c: &[(f64, f64); 4]) -> Result<Self> {
        let cx = c.iter().map(|p| p.0).sum::<f64>() / 4.0;
        let cy = c.iter().map(|p| p.1).sum::<f64>() / 4.0;
        let w = (c[1].0 - c[0].0).hypot(c[1].1 - c[0].1);
        let h = (c[2].0 - c[1].0).hypot(c[2].1 - c[1].1);
        let angle = (c[1].1 - c[0].1).atan2(c[1].0 - c[0].0);
        Self::new(cx, cy, w, h, angle)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let ((ux, uy), (vx, vy)) = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * ux + dy * uy).abs() <= self.w / 2.0 && (dx * vx + dy * vy).abs() <= self.h / 2.0
    }

    /// Tightest axis-aligned box around the corners.
    pub fn bounds(&self) -> AxisBox {
        let c = self.corners();
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| c.iter().map(sel).fold(init, f);
        AxisBox {
            x0: fold(f64::min, f64::INFINITY, |p| p.0),
            y0: fold(f64::min, f64::INFINITY, |p| p.1),
            x1: fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            y1: fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        }
    }

    /// Pixels whose centers fall inside the box.
    pub fn rasterize(&self, width: usize, height: usize) -> Result<BinaryMask> {
        let mut m = BinaryMask::new(width, height)?;
        let b = self.bounds();
        let xs = (b.x0 - 0.5).floor().max(0.0) as usize;
        let ys = (b.y0 - 0.5).floor().max(0.0) as usize;
        let xe = ((b.x1 - 0.5).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
        let ye = ((b.y1 - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
        for y in ys..ye {
            for x in xs..xe {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }
}

/// Tightest pixel-extent box around the set pixels; one pixel gives a unit box.
pub fn min_max_box(mask: &BinaryMask) -> Result<AxisBox> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for (x, y) in mask.set_pixels() {
        ext = Some(match ext {
            None => (x, y, x, y),
            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
        });
    }
    let (x0, y0, x1, y1) = ext.ok_or(Error::EmptyMask)?;
    Ok(AxisBox {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: (x1 + 1) as f64,
        y1: (y1 + 1) as f64,
    })
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (monotone chain) with positive orientation and no collinear points.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Shoelace area, positive for counter-clockwise (in x-right, y-up terms) order.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland-Hodgman clipping of `subject` by the convex, positively oriented `clip`.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    if a == b && a.area() > 0.0 {
        return 1.0;
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Centers of the set boundary pixels; their hull equals the hull of all set pixels.
fn boundary_centers(mask: &BinaryMask) -> Vec<(f64, f64)> {
    mask.set_pixels()
        .filter(|&(x, y)| mask.is_boundary(x, y))
        .map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5))
        .collect()
}

/// Rectangle at `angle` around `points`, grown by `pad` on every side.
fn rect_at(points: &[(f64, f64)], angle: f64, pad: f64) -> RotatedBox {
    let (s, c) = angle.sin_cos();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        let u = x * c + y * s;
        let v = -x * s + y * c;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
    RotatedBox {
        cx: uc * c - vc * s,
        cy: uc * s + vc * c,
        w: umax - umin + 2.0 * pad,
        h: vmax - vmin + 2.0 * pad,
        angle: normalize_angle(angle),
    }
}

/// Minimum-area rotated rectangle over the set pixel centers.
///
/// Candidate orientations are the hull edges (rotating calipers) plus 0; the
/// rectangle is padded by half a pixel per side, so at angle 0 it coincides
/// with [`min_max_box`] and `area(mbr) <= area(min_max)` holds exactly.
pub fn mbr_box(mask: &BinaryMask) -> Result<RotatedBox> {
    let pts = boundary_centers(mask);
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(calipers(&convex_hull(&pts), 0.5))
}

fn calipers(hull: &[(f64, f64)], pad: f64) -> RotatedBox {
    let mut best = rect_at(hull, 0.0, pad);
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        if a == b {
            continue;
        }
        let r = rect_at(hull, (b.1 - a.1).atan2(b.0 - a.0), pad);
        if r.area() < best.area() {
            best = r;
        }
    }
    best
}

/// Minimum-area rectangle around arbitrary points (no padding); zero extents
/// come back as zero width or height.
pub fn min_area_rect(points: &[(f64, f64)]) -> Result<RotatedBox> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("min_area_rect needs at least one point".into()));
    }
    Ok(calipers(&convex_hull(points), 0.0))
}

/// Overlap fitness `|M n R| / (|R| + alpha |M \ R|)` with `alpha = 4`, `|R|` the
/// continuous area and the counts over pixel centers.
pub fn opt_objective(mask: &BinaryMask, r: &RotatedBox) -> f64 {
    let total = mask.count();
    let inside = mask
        .set_pixels()
        .filter(|&(x, y)| r.contains(x as f64 + 0.5, y as f64 + 0.5))
        .count();
    let denom = r.area() + OPT_ALPHA * (total - inside) as f64;
    if denom > 0.0 {
        inside as f64 / denom
    } else {
        0.0
    }
}

pub const OPT_ALPHA: f64 = 4.0;

/// Rectangle maximizing [`opt_objective`].
///
/// Seeds are the MBR, the Min-max box and the padded bounding rectangle at every
/// 2 degrees; the best seed is refined by coordinate descent on
/// `(cx, cy, w, h, angle)` with step halving until a sweep gains less than 1e-4
/// at the finest step.
pub fn opt_box(mask: &BinaryMask) -> Result<RotatedBox> {
    let mbr = mbr_box(mask)?;
    let mm = min_max_box(mask)?.to_rotated();
    let pts = convex_hull(&boundary_centers(mask));
    let score = |r: &RotatedBox| opt_objective(mask, r);

    let mut best = mbr;
    let mut best_f = score(&mbr);
    let consider = |r: RotatedBox, best: &mut RotatedBox, best_f: &mut f64| {
        let f = score(&r);
        if f > *best_f {
            *best = r;
            *best_f = f;
        }
    };
    consider(mm, &mut best, &mut best_f);
    for deg in (-90..90).step_by(2) {
        consider(rect_at(&pts, (deg as f64).to_radians(), 0.5), &mut best, &mut best_f);
    }

    let mut p = [best.cx, best.cy, best.w, best.h, best.angle];
    let mut step = [1.0, 1.0, 1.0, 1.0, 1f64.to_radians()];
    let min_step = [1e-2, 1e-2, 1e-2, 1e-2, 1e-2f64.to_radians()];
    let make = |p: &[f64; 5]| RotatedBox {
        cx: p[0],
        cy: p[1],
        w: p[2],
        h: p[3],
        angle: normalize_angle(p[4]),
    };
    for _ in 0..2000 {
        let before = best_f;
        for i in 0..5 {
            for dir in [1.0, -1.0] {
                let mut q = p;
                q[i] += dir * step[i];
                if q[2] <= 0.0 || q[3] <= 0.0 {
                    continue;
                }
                let f = score(&make(&q));
                if f > best_f {
                    best_f = f;
                    p = q;
                    break;
                }
            }
        }
        if best_f - before < 1e-4 {
            if step.iter().zip(&min_step).all(|(s, m)| s <= m) {
                break;
            }
            for (s, m) in step.iter_mut().zip(&min_step) {
                *s = (*s / 2.0).max(*m);
            }
        }
    }
    Ok(make(&p))
}

/// Jaccard index; two empty masks score 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "mask_iou",
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Box strategy used to turn a mask into a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoxStrategy {
    MinMax,
    Mbr,
    Opt,
}

impl BoxStrategy {
    pub fn fit(self, mask: &BinaryMask) -> Result<RotatedBox> {
        match self {
            BoxStrategy::MinMax => Ok(min_max_box(mask)?.to_rotated()),
            BoxStrategy::Mbr => mbr_box(mask),
            BoxStrategy::Opt => opt_box(mask),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BoxStrategy::MinMax => "minmax",
            BoxStrategy::Mbr => "mbr",
            BoxStrategy::Opt => "opt",
        }
    }
}

impl std::str::FromStr for BoxStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(BoxStrategy::MinMax),
            "mbr" => Ok(BoxStrategy::Mbr),
            "opt" => Ok(BoxStrategy::Opt),
            other => Err(Error::Config(format!("unknown box strategy `{other}` (minmax, mbr, opt)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        for a in [-7.0, -FRAC_PI_2, 0.0, FRAC_PI_2, PI, 3.3, 100.0] {
            let n = normalize_angle(a);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&n), "{a} -> {n}");
            assert!(((a - n) / PI - ((a - n) / PI).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn corners_round_trip() {
        let r = RotatedBox::new(10.0, -3.0, 7.0, 2.5, 0.7).unwrap();
        let back = RotatedBox::from_corners(&r.corners()).unwrap();
        assert!((back.cx - r.cx).abs() < 1e-12 && (back.w - r.w).abs() < 1e-12);
        assert!((back.angle - r.angle).abs() < 1e-12);
        assert!(polygon_area(&r.corners()) > 0.0);
    }
}
