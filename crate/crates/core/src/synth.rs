//! Synthetic video with exact ground truth, and training-pair sampling with
//! translation/scale jitter.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Patch, Stream, EXEMPLAR_SIZE, SEARCH_SIZE};
use crate::crop::{context_side, CropTransform};
use crate::error::{Error, Result};
use crate::geometry::{min_area_rect, min_max_box, AxisBox, BinaryMask, RotatedBox};
use crate::io::{Image, SequenceData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Rectangle,
    Ellipse,
    Polygon,
}

impl ShapeFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Polygon => "polygon",
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(ShapeFamily::Rectangle),
            "ellipse" => Ok(ShapeFamily::Ellipse),
            "polygon" => Ok(ShapeFamily::Polygon),
            other => Err(Error::Config(format!("unknown shape `{other}` (rectangle, ellipse, polygon)"))),
        }
    }
}

/// One synthetic scene. Every random choice (textures, colours, distractor
/// placement, polygon vertices) derives from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub shape: ShapeFamily,
    /// Initial target size `(w, h)` in pixels.
    pub size: (f64, f64),
    /// Initial center; `None` puts the target at the frame center.
    pub start: Option<(f64, f64)>,
    /// Pixels per frame; the target bounces off the frame border.
    pub velocity: (f64, f64),
    pub angle: f64,
    /// Radians per frame.
    pub angular_velocity: f64,
    /// Log-scale change per frame.
    pub scale_rate: f64,
    /// Log-amplitude of the aspect-ratio oscillation.
    pub deform: f64,
    /// Frames per aspect-ratio oscillation.
    pub deform_period: f64,
    pub distractors: usize,
    /// Distractor speed in pixels per frame.
    pub distractor_speed: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            shape: ShapeFamily::Rectangle,
            size: (48.0, 36.0),
            start: None,
            velocity: (1.0, 0.5),
            angle: 0.0,
            angular_velocity: 0.01,
            scale_rate: 0.0,
            deform: 0.0,
            deform_period: 60.0,
            distractors: 2,
            distractor_speed: 1.0,
            seed: 0,
        }
    }
}

pub const MIN_OBJECT_SIZE: f64 = 8.0;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!("frame {}x{} is too small (min 32x32)", self.width, self.height)));
        }
        let (w, h) = self.size;
        if !(w >= MIN_OBJECT_SIZE && h >= MIN_OBJECT_SIZE) {
            return Err(Error::Config(format!("object size {w}x{h} is below {MIN_OBJECT_SIZE} px")));
        }
        if w.hypot(h) * (self.deform / 2.0).exp() > self.width.min(self.height) as f64 {
            return Err(Error::Config(format!("object {w}x{h} does not fit a {}x{} frame", self.width, self.height)));
        }
        if !(self.deform_period > 0.0) || self.deform < 0.0 {
            return Err(Error::Config("deform must be >= 0 with a positive period".into()));
        }
        Ok(())
    }

    /// Randomized shape, motion and appearance drawn from `seed`.
    pub fn random(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = match rng.gen_range(0..3) {
            0 => ShapeFamily::Rectangle,
            1 => ShapeFamily::Ellipse,
            _ => ShapeFamily::Polygon,
        };
        let side = rng.gen_range(40.0..60.0);
        let ar: f64 = rng.gen_range(-0.5f64..0.5).exp();
        let speed = rng.gen_range(0.5..2.0);
        let dir = rng.gen_range(0.0..2.0 * PI);
        Self {
            width,
            height,
            shape,
            size: (side * ar.sqrt(), side / ar.sqrt()),
            start: None,
            velocity: (speed * dir.cos(), speed * dir.sin()),
            angle: rng.gen_range(-PI / 2.0..PI / 2.0),
            angular_velocity: rng.gen_range(-0.02..0.02),
            scale_rate: 0.0,
            deform: rng.gen_range(0.0..0.2),
            deform_period: rng.gen_range(40.0..120.0),
            distractors: rng.gen_range(1..4),
            distractor_speed: rng.gen_range(0.5..1.5),
            seed: rng.gen(),
        }
    }

    pub fn to_meta(&self, length: usize) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("length", length.to_string());
        put("width", self.width.to_string());
        put("height", self.height.to_string());
        put("shape", self.shape.as_str().to_string());
        put("size", format!("{},{}", self.size.0, self.size.1));
        put("velocity", format!("{},{}", self.velocity.0, self.velocity.1));
        put("angle", self.angle.to_string());
        put("angular_velocity", self.angular_velocity.to_string());
        put("scale_rate", self.scale_rate.to_string());
        put("deform", self.deform.to_string());
        put("deform_period", self.deform_period.to_string());
        put("distractors", self.distractors.to_string());
        put("distractor_speed", self.distractor_speed.to_string());
        put("seed", self.seed.to_string());
        m
    }
}

/// Smooth random field in `[0, 1]` per channel on a square lattice.
struct ValueNoise {
    spacing: f64,
    cols: usize,
    rows: usize,
    values: Vec<[f64; 3]>,
    offset: (f64, f64),
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, extent: f64, spacing: f64) -> Self {
        let cols = (extent / spacing).ceil() as usize + 3;
        let rows = cols;
        let values = (0..cols * rows).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        Self {
            spacing,
            cols,
            rows,
            values,
            offset: (extent / 2.0 + spacing, extent / 2.0 + spacing),
        }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = ((x + self.offset.0) / self.spacing).clamp(0.0, (self.cols - 2) as f64);
        let fy = ((y + self.offset.1) / self.spacing).clamp(0.0, (self.rows - 2) as f64);
        let (ix, iy) = ((fx.floor() as usize).min(self.cols - 2), (fy.floor() as usize).min(self.rows - 2));
        let (ax, ay) = (fx - ix as f64, fy - iy as f64);
        let (sx, sy) = (ax * ax * (3.0 - 2.0 * ax), ay * ay * (3.0 - 2.0 * ay));
        let v = |i: usize, j: usize| self.values[j * self.cols + i];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = v(ix, iy)[c] * (1.0 - sx) + v(ix + 1, iy)[c] * sx;
            let bot = v(ix, iy + 1)[c] * (1.0 - sx) + v(ix + 1, iy + 1)[c] * sx;
            *o = top * (1.0 - sy) + bot * sy;
        }
        out
    }
}

/// A shape in its own frame: `u` along the angle, `v` across it.
#[derive(Clone, Debug)]
struct Shape {
    family: ShapeFamily,
    /// Unit-scale convex polygon (polygon family only), inside `[-1, 1]^2`.
    vertices: Vec<(f64, f64)>,
}

impl Shape {
    fn new(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        let vertices = if family == ShapeFamily::Polygon {
            let n = rng.gen_range(5..9);
            let mut angles: Vec<f64> = (0..n)
                .map(|i| (i as f64 + rng.gen_range(0.15..0.85)) * 2.0 * PI / n as f64)
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            angles.iter().map(|t| (t.cos(), t.sin())).collect()
        } else {
            Vec::new()
        };
        Self { family, vertices }
    }

    fn contains_local(&self, u: f64, v: f64, a: f64, b: f64) -> bool {
        match self.family {
            ShapeFamily::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeFamily::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeFamily::Polygon => {
                let (pu, pv) = (u / a, v / b);
                let n = self.vertices.len();
                (0..n).all(|i| {
                    let (p, q) = (self.vertices[i], self.vertices[(i + 1) % n]);
                    (q.0 - p.0) * (pv - p.1) - (q.1 - p.1) * (pu - p.0) >= 0.0
                })
            }
        }
    }

    /// Exact minimum-area rectangle of the placed shape.
    fn analytic_box(&self, p: &Placement) -> RotatedBox {
        match self.family {
            ShapeFamily::Rectangle | ShapeFamily::Ellipse => RotatedBox {
                cx: p.cx,
                cy: p.cy,
                w: 2.0 * p.a,
                h: 2.0 * p.b,
                angle: crate::geometry::normalize_angle(p.angle),
            },
            ShapeFamily::Polygon => {
                let pts: Vec<(f64, f64)> = self.vertices.iter().map(|&(u, v)| p.local_to_frame(u * p.a, v * p.b)).collect();
                min_area_rect(&pts).expect("polygon has vertices")
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Placement {
    fn local_to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    fn frame_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn radius(&self) -> f64 {
        self.a.hypot(self.b)
    }
}

/// Position `p0 + v t` reflected into `[lo, hi]`.
fn bounce(p0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let r = (p0 - lo + v * t).rem_euclid(2.0 * span);
    lo + if r > span { 2.0 * span - r } else { r }
}

struct Actor {
    shape: Shape,
    base: [f64; 3],
    texture: ValueNoise,
    start: (f64, f64),
    velocity: (f64, f64),
    size: (f64, f64),
    angle: f64,
}

fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [128.0; 3];
    let mut best_d = -1.0;
    for _ in 0..16 {
        let c = [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)];
        let d = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if d > 150.0 {
            return c;
        }
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Renders a sequence: frames, exact masks and analytic minimum-area boxes.
pub fn gen_sequence(cfg: &SceneConfig, length: usize) -> Result<SequenceData> {
    cfg.validate()?;
    if length == 0 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let extent = fw.max(fh);
    let background = ValueNoise::new(&mut rng, extent * 2.0, 24.0);
    let bg_base = [rng.gen_range(60.0..190.0), rng.gen_range(60.0..190.0), rng.gen_range(60.0..190.0)];

    let target_color = distinct_color(&mut rng, &[bg_base]);
    let target = Actor {
        shape: Shape::new(cfg.shape, &mut rng),
        base: target_color,
        texture: ValueNoise::new(&mut rng, 4.0 * extent, 8.0),
        start: cfg.start.unwrap_or((fw / 2.0, fh / 2.0)),
        velocity: cfg.velocity,
        size: cfg.size,
        angle: cfg.angle,
    };
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        let family = match rng.gen_range(0..3) {
            0 => ShapeFamily::Rectangle,
            1 => ShapeFamily::Ellipse,
            _ => ShapeFamily::Polygon,
        };
        let shape = Shape::new(family, &mut rng);
        let base = distinct_color(&mut rng, &[bg_base, target_color]);
        let texture = ValueNoise::new(&mut rng, 4.0 * extent, 8.0);
        let side = rng.gen_range(16.0..36.0);
        let dir = rng.gen_range(0.0..2.0 * PI);
        distractors.push(Actor {
            shape,
            base,
            texture,
            start: (rng.gen_range(0.0..fw), rng.gen_range(0.0..fh)),
            velocity: (cfg.distractor_speed * dir.cos(), cfg.distractor_speed * dir.sin()),
            size: (side, side * rng.gen_range(0.6..1.4)),
            angle: rng.gen_range(-PI / 2.0..PI / 2.0),
        });
    }

    let place = |actor: &Actor, t: f64, angular: f64, scale_rate: f64, deform: f64| -> Placement {
        let aspect = (deform * (2.0 * PI * t / cfg.deform_period).sin()).exp();
        let scale = (scale_rate * t).exp();
        let a = actor.size.0 * scale * aspect.sqrt() / 2.0;
        let b = actor.size.1 * scale / aspect.sqrt() / 2.0;
        let r = (actor.size.0.hypot(actor.size.1) / 2.0) * scale * (deform / 2.0).exp();
        Placement {
            cx: bounce(actor.start.0, actor.velocity.0, t, r.min(fw / 2.0), (fw - r).max(fw / 2.0)),
            cy: bounce(actor.start.1, actor.velocity.1, t, r.min(fh / 2.0), (fh - r).max(fh / 2.0)),
            a,
            b,
            angle: actor.angle + angular * t,
        }
    };

    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    let mut boxes = Vec::with_capacity(length);
    let mut canvas = vec![[0f64; 3]; cfg.width * cfg.height];
    for (y, row) in canvas.chunks_mut(cfg.width).enumerate() {
        for (x, px) in row.iter_mut().enumerate() {
            let n = background.at(x as f64 + 0.5, y as f64 + 0.5);
            *px = [0, 1, 2].map(|c| bg_base[c] + 90.0 * (n[c] - 0.5));
        }
    }
    for t in 0..length {
        let tf = t as f64;
        let mut frame = canvas.clone();
        let mut draw = |actor: &Actor, p: &Placement, mut mask: Option<&mut BinaryMask>| {
            let r = p.radius() + 1.0;
            let x0 = (p.cx - r).floor().max(0.0) as usize;
            let y0 = (p.cy - r).floor().max(0.0) as usize;
            let x1 = ((p.cx + r).ceil().max(0.0) as usize).min(cfg.width);
            let y1 = ((p.cy + r).ceil().max(0.0) as usize).min(cfg.height);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (u, v) = p.frame_to_local(x as f64 + 0.5, y as f64 + 0.5);
                    if !actor.shape.contains_local(u, v, p.a, p.b) {
                        continue;
                    }
                    let n = actor.texture.at(u, v);
                    frame[y * cfg.width + x] = [0, 1, 2].map(|c| actor.base[c] + 70.0 * (n[c] - 0.5));
                    if let Some(m) = mask.as_deref_mut() {
                        m.set(x, y, true);
                    }
                }
            }
        };
        for d in &distractors {
            let p = place(d, tf, 0.0, 0.0, 0.0);
            draw(d, &p, None);
        }
        let p = place(&target, tf, cfg.angular_velocity, cfg.scale_rate, cfg.deform);
        let mut mask = BinaryMask::new(cfg.width, cfg.height)?;
        draw(&target, &p, Some(&mut mask));
        let data = frame
            .iter()
            .flat_map(|px| px.map(|v| v.round().clamp(0.0, 255.0) as u8))
            .collect();
        frames.push(Image::new(cfg.width, cfg.height, data)?);
        if mask.is_empty() {
            return Err(Error::Config(format!("target left the frame at t={t}")));
        }
        masks.push(mask);
        boxes.push(target.shape.analytic_box(&p));
    }
    Ok(SequenceData {
        frames,
        masks,
        boxes,
        meta: cfg.to_meta(length),
    })
}

/// Translation and scale jitter bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Max translation in patch pixels.
    pub shift: f64,
    /// Max |log2 scale| for the exemplar.
    pub exemplar_scale: f64,
    /// Max |log2 scale| for the search patch.
    pub search_scale: f64,
}

impl Jitter {
    pub const DEFAULT: Jitter = Jitter {
        shift: 8.0,
        exemplar_scale: 0.125,
        search_scale: 0.25,
    };
    pub const OFF: Jitter = Jitter {
        shift: 0.0,
        exemplar_scale: 0.0,
        search_scale: 0.0,
    };
}

/// One exemplar/search pair with ground truth in search-patch coordinates.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub z: Patch,
    pub x: Patch,
    pub gt_box: AxisBox,
    pub gt_mask: BinaryMask,
    pub search_transform: CropTransform,
    /// Applied jitter: `(shift_x, shift_y, log2 scale)` for exemplar and search.
    pub jitter: [(f64, f64, f64); 2],
}

fn draw_jitter(rng: &mut ChaCha8Rng, shift: f64, scale: f64) -> (f64, f64, f64) {
    let sx = if shift > 0.0 { rng.gen_range(-shift..=shift) } else { 0.0 };
    let sy = if shift > 0.0 { rng.gen_range(-shift..=shift) } else { 0.0 };
    let ls = if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 };
    (sx, sy, ls)
}

/// Exemplar crop transform around `b`: context side scaled by `2^log2_scale`,
/// center shifted by `(dx, dy)` patch pixels.
pub fn exemplar_transform(b: &AxisBox, j: (f64, f64, f64)) -> Result<CropTransform> {
    let side = context_side(b.width(), b.height()) * j.2.exp2();
    let s = side / EXEMPLAR_SIZE as f64;
    let (cx, cy) = b.center();
    CropTransform::new((cx + j.0 * s, cy + j.1 * s), side, EXEMPLAR_SIZE)
}

/// Search crop transform: twice the exemplar context.
pub fn search_transform(b: &AxisBox, j: (f64, f64, f64)) -> Result<CropTransform> {
    let side = 2.0 * context_side(b.width(), b.height()) * j.2.exp2();
    let s = side / SEARCH_SIZE as f64;
    let (cx, cy) = b.center();
    CropTransform::new((cx + j.0 * s, cy + j.1 * s), side, SEARCH_SIZE)
}

/// Two random frames of `seq`: the exemplar around the target in one, the
/// search patch around the target in the other.
pub fn sample_pair(seq: &SequenceData, jitter: Jitter, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
    if seq.len() < 2 || seq.masks.len() != seq.len() {
        return Err(Error::InvalidArgument("pair sampling needs >= 2 frames with masks".into()));
    }
    let tz = rng.gen_range(0..seq.len());
    let tx = rng.gen_range(0..seq.len());
    let bz = min_max_box(&seq.masks[tz])?;
    let bx = min_max_box(&seq.masks[tx])?;
    let jz = draw_jitter(rng, jitter.shift, jitter.exemplar_scale);
    let jx = draw_jitter(rng, jitter.shift, jitter.search_scale);
    let tz_t = exemplar_transform(&bz, jz)?;
    let tx_t = search_transform(&bx, jx)?;
    let z = Patch::new(Stream::Exemplar, tz_t.crop_image(&seq.frames[tz]), tz_t.geometry())?;
    let x = Patch::new(Stream::Search, tx_t.crop_image(&seq.frames[tx]), tx_t.geometry())?;
    let gt_mask = tx_t.crop_mask(&seq.masks[tx]);
    Ok(TrainingPair {
        z,
        x,
        gt_box: tx_t.box_to_patch(&bx),
        gt_mask,
        search_transform: tx_t,
        jitter: [jz, jx],
    })
}
