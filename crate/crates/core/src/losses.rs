//! RoW labelling and the mask, similarity, score and box losses.

use std::collections::BTreeMap;

use crate::anchors::{encode, AnchorSet};
use crate::backbone::{ROW_GRID, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, BinaryMask};
use crate::heads::REFINED_SIZE;
use crate::model::Variant;
use crate::tensor::{Real, Tape, Var};

pub const POSITIVE_IOU: f64 = 0.6;
pub const DEFAULT_RADIUS: f64 = 2.0;

/// Labels for one training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RowLabels {
    /// Cells in the grid (289 for 17x17).
    pub cells: usize,
    /// Labels per anchor (`k` per cell, index `a * cells + n`); `k = 1` for per-cell labels.
    pub k: usize,
    /// `+1` or `-1`.
    pub y: Vec<f32>,
    /// Ground-truth `m x m` masks of `+1/-1` for each positive cell.
    pub masks: BTreeMap<usize, Vec<f32>>,
    pub mask_size: usize,
    /// RPN targets, present exactly for positive anchors.
    pub box_targets: Vec<Option<[f64; 4]>>,
}

impl RowLabels {
    /// A cell is positive when any of its anchors is.
    pub fn positive_cells(&self) -> Vec<usize> {
        (0..self.cells)
            .filter(|&n| (0..self.k).any(|a| self.y[a * self.cells + n] > 0.0))
            .collect()
    }

    pub fn positive_anchors(&self) -> Vec<usize> {
        (0..self.y.len()).filter(|&i| self.y[i] > 0.0).collect()
    }

    pub fn num_positive_cells(&self) -> usize {
        self.positive_cells().len()
    }
}

/// Anchors with IoU >= 0.6 against `gt` are positive, all others negative.
pub fn label_rows_3b(anchors: &AnchorSet, gt: &AxisBox) -> Result<RowLabels> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate ground-truth box {gt:?}")));
    }
    let cells = anchors.len() / anchors.k;
    let mut y = Vec::with_capacity(anchors.len());
    let mut box_targets = Vec::with_capacity(anchors.len());
    for a in &anchors.anchors {
        if a.to_box().iou(gt) >= POSITIVE_IOU {
            y.push(1.0);
            box_targets.push(Some(encode(gt, a)));
        } else {
            y.push(-1.0);
            box_targets.push(None);
        }
    }
    Ok(RowLabels {
        cells,
        k: anchors.k,
        y,
        masks: BTreeMap::new(),
        mask_size: 0,
        box_targets,
    })
}

/// Cells within `radius` (Euclidean, in cells) of `center` are positive.
pub fn label_rows_2b(center: (usize, usize), radius: f64) -> RowLabels {
    let cells = ROW_GRID * ROW_GRID;
    let y = (0..cells)
        .map(|n| {
            let (di, dj) = ((n / ROW_GRID) as f64 - center.0 as f64, (n % ROW_GRID) as f64 - center.1 as f64);
            if (di * di + dj * dj).sqrt() <= radius {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    RowLabels {
        cells,
        k: 1,
        y,
        masks: BTreeMap::new(),
        mask_size: 0,
        box_targets: vec![None; cells],
    }
}

/// `+1/-1` target of side `size` for the candidate window of `cell`, nearest
/// resampled from a search-patch-sized mask.
///
/// The window of cell `(i, j)` is `[8j, 8j+127) x [8i, 8i+127)`.
pub fn row_window_target(patch_mask: &BinaryMask, cell: usize, size: usize) -> Vec<f32> {
    let (i, j) = (cell / ROW_GRID, cell % ROW_GRID);
    let (oy, ox) = (i * TOTAL_STRIDE, j * TOTAL_STRIDE);
    let scale = REFINED_SIZE as f64 / size as f64;
    let src = |u: usize| ((u as f64 + 0.5) * scale).floor() as usize;
    let mut out = Vec::with_capacity(size * size);
    for v in 0..size {
        for u in 0..size {
            let (x, y) = (ox + src(u), oy + src(v));
            let set = x < patch_mask.width() && y < patch_mask.height() && patch_mask.get(x, y);
            out.push(if set { 1.0 } else { -1.0 });
        }
    }
    out
}

/// Fills `c_n` for every positive cell from the search-patch ground-truth mask.
pub fn attach_row_masks(labels: &mut RowLabels, patch_mask: &BinaryMask, mask_size: usize) {
    labels.mask_size = mask_size;
    labels.masks = labels
        .positive_cells()
        .into_iter()
        .map(|n| (n, row_window_target(patch_mask, n, mask_size)))
        .collect();
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskLossMode {
    /// Sum over positive RoWs of the per-RoW mean.
    Strict,
    /// As `Strict`, further divided by the number of positive RoWs.
    #[default]
    PerPositive,
}

impl MaskLossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskLossMode::Strict => "strict",
            MaskLossMode::PerPositive => "per_positive",
        }
    }
}

impl std::str::FromStr for MaskLossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MaskLossMode::Strict),
            "per_positive" => Ok(MaskLossMode::PerPositive),
            other => Err(Error::Config(format!("unknown mask loss mode `{other}` (strict, per_positive)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub score: f64,
    pub boxes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 32.0,
            score: 1.0,
            boxes: 1.0,
        }
    }
}

fn zero_like<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.sum(x);
    tape.scale(s, 0.0)
}

/// `sum(softplus(-c * m))` over the given flat indices of `logits`.
fn logistic_sum<T: Real>(tape: &mut Tape<T>, logits: Var, index: Vec<usize>, targets: &[f32]) -> Result<Var> {
    let n = index.len();
    let g = tape.gather(logits, index)?;
    let neg: Vec<f32> = targets.iter().map(|c| -c).collect();
    let c = tape.constant(&[n], &neg)?;
    let z = tape.mul(g, c)?;
    let sp = tape.softplus(z);
    Ok(tape.sum(sp))
}

/// Logistic mask loss over positive RoWs; negative RoWs contribute exactly zero.
///
/// `logits` is either the full `[m*m, H, W]` map or `[m*m, P, 1]` holding only
/// the positive cells in ascending order.
pub fn mask_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &RowLabels, mode: MaskLossMode) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let pos = labels.positive_cells();
    if shape.len() != 3 {
        return Err(Error::shape("mask_loss", format!("expected [m*m, H, W], got {shape:?}")));
    }
    let (mm, cols) = (shape[0], shape[1] * shape[2]);
    let m = (mm as f64).sqrt().round() as usize;
    if m * m != mm {
        return Err(Error::shape("mask_loss", format!("{mm} mask channels is not a square")));
    }
    let full = cols == labels.cells;
    if !full && cols != pos.len() {
        return Err(Error::shape(
            "mask_loss",
            format!("{cols} logit columns match neither {} cells nor {} positives", labels.cells, pos.len()),
        ));
    }
    if pos.is_empty() {
        return Ok(zero_like(tape, logits));
    }
    let mut index = Vec::with_capacity(pos.len() * mm);
    let mut targets = Vec::with_capacity(pos.len() * mm);
    for (col, &n) in pos.iter().enumerate() {
        let c = labels
            .masks
            .get(&n)
            .ok_or_else(|| Error::Missing(format!("ground-truth mask for positive RoW {n}")))?;
        if c.len() != mm {
            return Err(Error::shape("mask_loss", format!("target of RoW {n} has {} values, expected {mm}", c.len())));
        }
        let col = if full { n } else { col };
        index.extend((0..mm).map(|p| p * cols + col));
        targets.extend_from_slice(c);
    }
    let s = logistic_sum(tape, logits, index, &targets)?;
    let norm = match mode {
        MaskLossMode::Strict => mm as f64,
        MaskLossMode::PerPositive => (mm * pos.len()) as f64,
    };
    Ok(tape.scale(s, 1.0 / norm))
}

/// Mean `softplus(-c * m)` of a refined mask against a `+1/-1` target.
pub fn pixel_logistic_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[f32]) -> Result<Var> {
    let n = tape.value(logits).len();
    if target.len() != n {
        return Err(Error::shape("pixel_logistic_loss", format!("{n} logits vs {} targets", target.len())));
    }
    let s = logistic_sum(tape, logits, (0..n).collect(), target)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// How per-RoW (or per-anchor) classification terms are averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreWeighting {
    /// Plain mean over all RoWs or anchors.
    #[default]
    Mean,
    /// Positives and negatives each carry half the total weight.
    Balanced,
}

impl ScoreWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreWeighting::Mean => "mean",
            ScoreWeighting::Balanced => "balanced",
        }
    }
}

impl std::str::FromStr for ScoreWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreWeighting::Mean),
            "balanced" => Ok(ScoreWeighting::Balanced),
            other => Err(Error::Config(format!("unknown score weighting `{other}` (mean, balanced)"))),
        }
    }
}

/// Per-element weights summing to 1 for labels `y`.
pub fn score_weights(y: &[f32], weighting: ScoreWeighting) -> Vec<f32> {
    let n = y.len();
    let npos = y.iter().filter(|&&v| v > 0.0).count();
    let nneg = n - npos;
    match weighting {
        ScoreWeighting::Balanced if npos > 0 && nneg > 0 => y
            .iter()
            .map(|&v| if v > 0.0 { 0.5 / npos as f32 } else { 0.5 / nneg as f32 })
            .collect(),
        _ => vec![1.0 / n as f32; n],
    }
}

/// `sum(w * softplus(-y * x))`.
fn weighted_logistic<T: Real>(tape: &mut Tape<T>, x: Var, y: &[f32], w: &[f32]) -> Result<Var> {
    let n = y.len();
    let neg: Vec<f32> = y.iter().map(|c| -c).collect();
    let c = tape.constant(&[n], &neg)?;
    let x = tape.reshape(x, &[n])?;
    let z = tape.mul(x, c)?;
    let sp = tape.softplus(z);
    let wv = tape.constant(&[n], w)?;
    let prod = tape.mul(sp, wv)?;
    Ok(tape.sum(prod))
}

/// Mean over RoWs of `softplus(-y * s)` for the single-channel score map.
pub fn sim_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &RowLabels) -> Result<Var> {
    sim_loss_with(tape, scores, labels, ScoreWeighting::Mean)
}

pub fn sim_loss_with<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    labels: &RowLabels,
    weighting: ScoreWeighting,
) -> Result<Var> {
    let n = tape.value(scores).len();
    if labels.k != 1 || n != labels.y.len() {
        return Err(Error::shape(
            "sim_loss",
            format!("{n} scores vs {} per-cell labels (k = {})", labels.y.len(), labels.k),
        ));
    }
    if weighting == ScoreWeighting::Mean {
        let s = logistic_sum(tape, scores, (0..n).collect(), &labels.y)?;
        return Ok(tape.scale(s, 1.0 / n as f64));
    }
    weighted_logistic(tape, scores, &labels.y, &score_weights(&labels.y, weighting))
}

/// Mean two-class cross-entropy per anchor over `[2k, H, W]` scores.
///
/// With logits `(bg, fg)` the cross-entropy is `softplus(-y * (fg - bg))`.
pub fn score_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &RowLabels) -> Result<Var> {
    score_loss_with(tape, scores, labels, ScoreWeighting::Mean)
}

pub fn score_loss_with<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    labels: &RowLabels,
    weighting: ScoreWeighting,
) -> Result<Var> {
    let n = tape.value(scores).len();
    let na = labels.k * labels.cells;
    if n != 2 * na || labels.y.len() != na {
        return Err(Error::shape(
            "score_loss",
            format!("{n} score logits vs {na} anchors (k = {})", labels.k),
        ));
    }
    let bg = tape.gather(scores, (0..na).collect())?;
    let fg = tape.gather(scores, (na..2 * na).collect())?;
    let d = tape.sub(fg, bg)?;
    if weighting == ScoreWeighting::Mean {
        let s = logistic_sum(tape, d, (0..na).collect(), &labels.y)?;
        return Ok(tape.scale(s, 1.0 / na as f64));
    }
    weighted_logistic(tape, d, &labels.y, &score_weights(&labels.y, weighting))
}

/// Smooth-L1 between predicted and target deltas, averaged over positive anchors.
/// Zero when there are none.
pub fn box_loss<T: Real>(tape: &mut Tape<T>, deltas: Var, labels: &RowLabels) -> Result<Var> {
    let n = tape.value(deltas).len();
    let (k, cells) = (labels.k, labels.cells);
    if n != 4 * k * cells || labels.box_targets.len() != k * cells {
        return Err(Error::shape("box_loss", format!("{n} deltas vs {} anchors", k * cells)));
    }
    let pos = labels.positive_anchors();
    if pos.is_empty() {
        return Ok(zero_like(tape, deltas));
    }
    let mut index = Vec::with_capacity(4 * pos.len());
    let mut target = Vec::with_capacity(4 * pos.len());
    for &i in &pos {
        let t = labels.box_targets[i].ok_or_else(|| Error::Missing(format!("box target for positive anchor {i}")))?;
        let (a, cell) = (i / cells, i % cells);
        for (coord, tv) in t.iter().enumerate() {
            index.push((coord * k + a) * cells + cell);
            target.push(*tv as f32);
        }
    }
    let g = tape.gather(deltas, index)?;
    let t = tape.constant(&[target.len()], &target)?;
    let d = tape.sub(g, t)?;
    let l = tape.smooth_l1(d);
    let s = tape.sum(l);
    Ok(tape.scale(s, 1.0 / pos.len() as f64))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub mask: Option<Var>,
    pub sim: Option<Var>,
    pub score: Option<Var>,
    pub boxes: Option<Var>,
}

/// `L2B = l1 * mask + l2 * sim`; `L3B = l1 * mask + l2 * score + l3 * box`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, variant: Variant, c: &LossComponents, w: &LossWeights) -> Result<Var> {
    let need = |v: Option<Var>, name: &str| v.ok_or_else(|| Error::Missing(format!("loss component `{name}`")));
    let terms: Vec<(Var, f64)> = match variant {
        Variant::TwoBranch => vec![(need(c.mask, "mask")?, w.mask), (need(c.sim, "sim")?, w.score)],
        Variant::ThreeBranch => vec![
            (need(c.mask, "mask")?, w.mask),
            (need(c.score, "score")?, w.score),
            (need(c.boxes, "box")?, w.boxes),
        ],
    };
    let mut acc: Option<Var> = None;
    for (v, lambda) in terms {
        let t = tape.scale(v, lambda);
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc.expect("at least two terms"))
}
