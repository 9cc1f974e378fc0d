//! Online inference: crop, forward, pick the best RoW, decode its mask and
//! update the reference box.

use std::sync::Arc;

use crate::anchors::{decode, generate_anchors, AnchorSet};
use crate::backbone::{exemplar_features, search_forward, RowMap, EXEMPLAR_SIZE, ROW_GRID, SEARCH_SIZE, TOTAL_STRIDE};
use crate::crop::{context_side, CropTransform};
use crate::error::{Error, Result};
use crate::geometry::{min_max_box, AxisBox, BinaryMask, BoxStrategy, RotatedBox};
use crate::heads::{box_head, refine_mask, score_head, REFINED_SIZE, ROW_CELLS};
use crate::io::Image;
use crate::metrics::OnlineTracker;
use crate::model::{Model, Variant};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Box reported per frame; the reference update does not depend on it.
    pub box_strategy: BoxStrategy,
    pub mask_threshold: f32,
    /// Weight of a Hann window blended into the score probabilities (0 = off).
    pub window_influence: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            box_strategy: BoxStrategy::Mbr,
            mask_threshold: 0.5,
            window_influence: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    /// Axis-aligned reference box in frame coordinates.
    pub reference: AxisBox,
    exemplar: Arc<Tensor>,
    pub frame_index: usize,
    pub last_score: f64,
    pub last_box: RotatedBox,
    pub variant: Variant,
}

impl TrackState {
    /// Adjusted exemplar features from the first frame.
    pub fn exemplar_features(&self) -> &Tensor {
        &self.exemplar
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub mask: BinaryMask,
    pub rbox: RotatedBox,
    pub score: f64,
    /// `(row, column)` of the selected RoW.
    pub row_cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    /// Filled initial box, standing in for the frame-0 prediction.
    pub init_mask: BinaryMask,
    pub init_box: RotatedBox,
    /// One result per frame after the first.
    pub frames: Vec<FrameResult>,
}

impl SequenceResult {
    /// Boxes for every frame including the first.
    pub fn boxes(&self) -> Vec<RotatedBox> {
        std::iter::once(self.init_box).chain(self.frames.iter().map(|f| f.rbox)).collect()
    }

    /// Masks for every frame including the first.
    pub fn masks(&self) -> Vec<BinaryMask> {
        std::iter::once(self.init_mask.clone())
            .chain(self.frames.iter().map(|f| f.mask.clone()))
            .collect()
    }
}

/// Winner of the score map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub cell: usize,
    pub anchor: usize,
    pub score: f64,
}

/// Periodic Hann window over the 17x17 grid, flattened row-major.
pub fn hann_window() -> Vec<f32> {
    let n = ROW_GRID;
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())
        .collect();
    (0..n * n).map(|c| (w[c / n] * w[c % n]) as f32).collect()
}

/// Argmax over per-anchor probabilities laid out as `a * cells + n`; ties go
/// to the lowest flat index, so to the lowest row-major cell for one anchor.
pub fn select_row(probs: &[f32], cells: usize, window_influence: f64) -> Selection {
    let window = (window_influence > 0.0).then(hann_window);
    let mut best = Selection {
        index: 0,
        cell: 0,
        anchor: 0,
        score: f64::NEG_INFINITY,
    };
    for (i, &p) in probs.iter().enumerate() {
        let mut s = p as f64;
        if let Some(w) = &window {
            s = (1.0 - window_influence) * s + window_influence * w[i % cells] as f64;
        }
        if s > best.score {
            best = Selection {
                index: i,
                cell: i % cells,
                anchor: i / cells,
                score: s,
            };
        }
    }
    best
}

/// Transform from a `side x side` mask over the candidate window of `cell` to the frame.
pub fn window_transform(search: &CropTransform, cell: usize, side: usize) -> CropTransform {
    let (i, j) = (cell / ROW_GRID, cell % ROW_GRID);
    let half = REFINED_SIZE as f64 / 2.0;
    let center = search.to_frame((j * TOTAL_STRIDE) as f64 + half, (i * TOTAL_STRIDE) as f64 + half);
    CropTransform {
        center,
        side: REFINED_SIZE as f64 * search.scale(),
        size: side,
    }
}

/// Resamples window probabilities into the frame and thresholds them (`> threshold`).
pub fn window_mask_to_frame(
    search: &CropTransform,
    cell: usize,
    probs: &[f32],
    side: usize,
    width: usize,
    height: usize,
    threshold: f32,
) -> Result<BinaryMask> {
    if probs.len() != side * side {
        return Err(Error::shape("window_mask_to_frame", format!("{} values for a {side}x{side} mask", probs.len())));
    }
    let t = window_transform(search, cell, side);
    let frame = t.paste_to_frame(probs, width, height, 0.0);
    BinaryMask::from_bits(width, height, frame.iter().map(|&v| v > threshold).collect())
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tracker<'m> {
    model: &'m Model,
    config: TrackerConfig,
    anchors: AnchorSet,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, config: TrackerConfig) -> Self {
        Self {
            model,
            config,
            anchors: generate_anchors(&model.config.anchors),
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Caches exemplar features from `frame` around `init_box`.
    pub fn init(&self, frame: &Image, init_box: &AxisBox) -> Result<TrackState> {
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        if !(init_box.x0 >= 0.0 && init_box.y0 >= 0.0 && init_box.x1 <= w && init_box.y1 <= h)
            || !(init_box.width() > 0.0 && init_box.height() > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "initial box {init_box:?} is not inside the {}x{} frame",
                frame.width(),
                frame.height()
            )));
        }
        let t = exemplar_crop(init_box)?;
        let pixels = t.crop_image(frame);
        let mut tape = Tape::<f32>::new();
        let b = self.model.params.bind(&mut tape);
        let z = tape.constant(pixels.shape(), pixels.data())?;
        let zf = exemplar_features(&mut tape, &b, &self.model.config.backbone, z)?;
        let mut feat = tape.to_tensor(zf);
        feat.set_requires_grad(false);
        Ok(TrackState {
            reference: *init_box,
            exemplar: Arc::new(feat),
            frame_index: 0,
            last_score: 1.0,
            last_box: init_box.to_rotated(),
            variant: self.model.config.variant,
        })
    }

    pub fn step(&self, state: &TrackState, frame: &Image) -> Result<(TrackState, FrameResult)> {
        let cfg = &self.model.config;
        let search = search_crop(&state.reference)?;
        let pixels = search.crop_image(frame);

        let mut tape = Tape::<f32>::new();
        let b = self.model.params.bind(&mut tape);
        let x = tape.constant(pixels.shape(), pixels.data())?;
        let zf = tape.constant(state.exemplar.shape(), state.exemplar.data())?;
        let fwd = search_forward(&mut tape, &b, &cfg.backbone, x, zf)?;
        let row = fwd.row_map;
        let scores = score_head(&mut tape, &b, row, cfg.variant)?;
        let probs = score_probabilities(tape.value(scores), cfg.variant);
        let sel = select_row(&probs, ROW_CELLS, self.config.window_influence);

        let logits = refine_mask(&mut tape, &b, &cfg.refine, row, sel.cell, &fwd.skips)?;
        let mask_probs: Vec<f32> = tape.value(logits).iter().map(|&v| sigmoid(v)).collect();
        let mask = window_mask_to_frame(
            &search,
            sel.cell,
            &mask_probs,
            REFINED_SIZE,
            frame.width(),
            frame.height(),
            self.config.mask_threshold,
        )?;
        let row_cell = (sel.cell / ROW_GRID, sel.cell % ROW_GRID);
        let frame_index = state.frame_index + 1;

        if mask.is_empty() {
            let next = TrackState {
                frame_index,
                ..state.clone()
            };
            let result = FrameResult {
                mask,
                rbox: state.last_box,
                score: sel.score,
                row_cell,
            };
            return Ok((next, result));
        }

        let object = mask.largest_component();
        let rbox = self.config.box_strategy.fit(&object)?;
        let reference = match cfg.variant {
            Variant::TwoBranch => min_max_box(&object)?,
            Variant::ThreeBranch => {
                let deltas = box_head(&mut tape, &b, row, cfg.variant)?;
                self.decode_reference(tape.value(deltas), &sel, &search)
            }
        };
        let reference = clamp_reference(&reference, frame.width() as f64, frame.height() as f64);
        let next = TrackState {
            reference,
            exemplar: Arc::clone(&state.exemplar),
            frame_index,
            last_score: sel.score,
            last_box: rbox,
            variant: state.variant,
        };
        Ok((
            next,
            FrameResult {
                mask,
                rbox,
                score: sel.score,
                row_cell,
            },
        ))
    }

    fn decode_reference(&self, deltas: &[f32], sel: &Selection, search: &CropTransform) -> AxisBox {
        let k = self.anchors.k;
        let d = [0, 1, 2, 3].map(|c| deltas[(c * k + sel.anchor) * ROW_CELLS + sel.cell] as f64);
        let a = self.anchors.get(sel.anchor, sel.cell);
        search.box_to_frame(&decode(&d, a))
    }

    /// Initializes on `frames[0]` and steps through the rest; each result only
    /// sees frames up to its own index.
    pub fn track_sequence(&self, frames: &[Image], init_box: &AxisBox) -> Result<SequenceResult> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("tracking needs at least one frame".into()))?;
        let mut state = self.init(first, init_box)?;
        let init_rot = init_box.to_rotated();
        let init_mask = init_rot.rasterize(first.width(), first.height())?;
        let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
        for f in &frames[1..] {
            let (next, r) = self.step(&state, f)?;
            state = next;
            out.push(r);
        }
        Ok(SequenceResult {
            init_mask,
            init_box: init_rot,
            frames: out,
        })
    }

    /// One independent inference per object.
    pub fn track_objects(&self, frames: &[Image], init_boxes: &[AxisBox]) -> Result<Vec<SequenceResult>> {
        init_boxes.iter().map(|b| self.track_sequence(frames, b)).collect()
    }
}

/// Adapts a [`Tracker`] over a fixed frame list to the reset protocol.
pub struct ResettableTracker<'t, 'm> {
    tracker: &'t Tracker<'m>,
    frames: &'t [Image],
    state: Option<TrackState>,
}

impl<'t, 'm> ResettableTracker<'t, 'm> {
    pub fn new(tracker: &'t Tracker<'m>, frames: &'t [Image]) -> Self {
        Self {
            tracker,
            frames,
            state: None,
        }
    }

    fn frame(&self, i: usize) -> Result<&'t Image> {
        self.frames
            .get(i)
            .ok_or_else(|| Error::Missing(format!("frame {i} of {}", self.frames.len())))
    }
}

impl OnlineTracker for ResettableTracker<'_, '_> {
    /// The rotated ground truth is reduced to its axis-aligned bounds, clipped to the frame.
    fn start(&mut self, frame: usize, init: &RotatedBox) -> Result<()> {
        let img = self.frame(frame)?;
        let b = init.bounds();
        let (w, h) = (img.width() as f64, img.height() as f64);
        let clipped = AxisBox {
            x0: b.x0.max(0.0),
            y0: b.y0.max(0.0),
            x1: b.x1.min(w),
            y1: b.y1.min(h),
        };
        self.state = Some(self.tracker.init(img, &clipped)?);
        Ok(())
    }

    fn next(&mut self, frame: usize) -> Result<RotatedBox> {
        let img = self.frame(frame)?;
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("tracker stepped before start".into()))?;
        let (next, r) = self.tracker.step(state, img)?;
        self.state = Some(next);
        Ok(r.rbox)
    }
}

/// Foreground probability per anchor (`a * cells + n`), or per cell for one channel.
pub fn score_probabilities(scores: &[f32], variant: Variant) -> Vec<f32> {
    match variant {
        Variant::TwoBranch => scores.iter().map(|&s| sigmoid(s)).collect(),
        Variant::ThreeBranch => {
            let na = scores.len() / 2;
            (0..na).map(|i| sigmoid(scores[na + i] - scores[i])).collect()
        }
    }
}

pub fn exemplar_crop(b: &AxisBox) -> Result<CropTransform> {
    let (cx, cy) = b.center();
    CropTransform::new((cx, cy), context_side(b.width(), b.height()), EXEMPLAR_SIZE)
}

pub fn search_crop(b: &AxisBox) -> Result<CropTransform> {
    let (cx, cy) = b.center();
    CropTransform::new((cx, cy), 2.0 * context_side(b.width(), b.height()), SEARCH_SIZE)
}

/// Keeps the center inside the frame and the size between 4 px and the frame size.
fn clamp_reference(b: &AxisBox, w: f64, h: f64) -> AxisBox {
    let (cx, cy) = b.center();
    let bw = b.width().clamp(4.0, w);
    let bh = b.height().clamp(4.0, h);
    let (cx, cy) = (cx.clamp(0.0, w), cy.clamp(0.0, h));
    AxisBox {
        x0: cx - bw / 2.0,
        y0: cy - bh / 2.0,
        x1: cx + bw / 2.0,
        y1: cy + bh / 2.0,
    }
}

/// Search-stream forward pass exposed for inspection and benchmarks.
pub fn search_row_map(model: &Model, state: &TrackState, frame: &Image) -> Result<Tensor> {
    let search = search_crop(&state.reference)?;
    let pixels = search.crop_image(frame);
    let mut tape = Tape::<f32>::new();
    let b = model.params.bind(&mut tape);
    let x = tape.constant(pixels.shape(), pixels.data())?;
    let zf = tape.constant(state.exemplar.shape(), state.exemplar.data())?;
    let RowMap { features } = search_forward(&mut tape, &b, &model.config.backbone, x, zf)?.row_map;
    Ok(tape.to_tensor(features))
}
