//! Tracking and segmentation metrics and the box-representation oracles.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{mask_iou, rotated_iou, BinaryMask, RotatedBox};
use crate::io::{format_box_line, parse_box_line};

/// Mean rotated IoU and, per threshold, the fraction of frames with IoU >= threshold.
///
/// "AP@t" is read as this per-frame success rate: a single-target tracker has
/// no detection ranking to average precision over.
pub fn miou_map(pred: &[RotatedBox], gt: &[RotatedBox], thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    let ious = frame_ious(pred, gt)?;
    Ok(summarize_ious(&ious, thresholds))
}

pub fn frame_ious(pred: &[RotatedBox], gt: &[RotatedBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| rotated_iou(p, g)).collect())
}

pub fn summarize_ious(ious: &[f64], thresholds: &[f64]) -> (f64, Vec<f64>) {
    if ious.is_empty() {
        return (0.0, vec![0.0; thresholds.len()]);
    }
    let n = ious.len() as f64;
    let miou = ious.iter().sum::<f64>() / n;
    let aps = thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect();
    (miou, aps)
}

/// A tracker that can be (re)started from a ground-truth box at any frame.
pub trait OnlineTracker {
    fn start(&mut self, frame: usize, init: &RotatedBox) -> Result<()>;
    fn next(&mut self, frame: usize) -> Result<RotatedBox>;
}

/// Replays fixed predictions; restarts are ignored.
pub struct Replay<'a>(pub &'a [RotatedBox]);

impl OnlineTracker for Replay<'_> {
    fn start(&mut self, _frame: usize, _init: &RotatedBox) -> Result<()> {
        Ok(())
    }

    fn next(&mut self, frame: usize) -> Result<RotatedBox> {
        self.0
            .get(frame)
            .copied()
            .ok_or_else(|| Error::Missing(format!("prediction for frame {frame}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResetConfig {
    /// Frames skipped after a failure before re-initialization.
    pub skip: usize,
    /// Frames after a re-initialization excluded from accuracy.
    pub burn_in: usize,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self { skip: 5, burn_in: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    /// Initialization frame (no prediction).
    Init,
    Tracked,
    /// Tracked but inside the burn-in after a re-initialization.
    BurnIn,
    /// IoU fell to zero.
    Failed,
    /// Skipped while waiting to re-initialize.
    Skipped,
}

impl FrameStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameStatus::Init => "init",
            FrameStatus::Tracked => "tracked",
            FrameStatus::BurnIn => "burn_in",
            FrameStatus::Failed => "failed",
            FrameStatus::Skipped => "skipped",
        }
    }

    /// Frames on which the tracker produced a prediction.
    pub fn predicted(self) -> bool {
        matches!(self, FrameStatus::Tracked | FrameStatus::BurnIn | FrameStatus::Failed)
    }
}

impl std::str::FromStr for FrameStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(FrameStatus::Init),
            "tracked" => Ok(FrameStatus::Tracked),
            "burn_in" => Ok(FrameStatus::BurnIn),
            "failed" => Ok(FrameStatus::Failed),
            "skipped" => Ok(FrameStatus::Skipped),
            other => Err(Error::InvalidArgument(format!("unknown frame status `{other}`"))),
        }
    }
}

/// Wraps a tracker and keeps every prediction by frame index.
pub struct Recording<T> {
    pub inner: T,
    pub boxes: Vec<Option<RotatedBox>>,
}

impl<T: OnlineTracker> Recording<T> {
    pub fn new(inner: T, frames: usize) -> Self {
        Self {
            inner,
            boxes: vec![None; frames],
        }
    }
}

impl<T: OnlineTracker> OnlineTracker for Recording<T> {
    fn start(&mut self, frame: usize, init: &RotatedBox) -> Result<()> {
        self.inner.start(frame, init)
    }

    fn next(&mut self, frame: usize) -> Result<RotatedBox> {
        let b = self.inner.next(frame)?;
        if let Some(slot) = self.boxes.get_mut(frame) {
            *slot = Some(b);
        }
        Ok(b)
    }
}

/// One line per frame: the status, then the predicted box corners on frames
/// that have a prediction.
pub fn format_reset_log(status: &[FrameStatus], boxes: &[Option<RotatedBox>]) -> String {
    status
        .iter()
        .enumerate()
        .map(|(i, s)| match boxes.get(i).copied().flatten() {
            Some(b) if s.predicted() => format!("{} {}\n", s.as_str(), format_box_line(&b)),
            _ => format!("{}\n", s.as_str()),
        })
        .collect()
}

pub fn parse_reset_log(text: &str) -> Result<Vec<(FrameStatus, Option<RotatedBox>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            let status: FrameStatus = parts.next().unwrap_or("").parse()?;
            let b = parts.next().map(parse_box_line).transpose()?;
            if status.predicted() != b.is_some() || parts.next().is_some() {
                return Err(Error::InvalidArgument(format!("reset log line {}: `{line}`", i + 1)));
            }
            Ok((status, b))
        })
        .collect()
}

/// Re-derives the protocol outcome from a logged run; the replayed statuses
/// must match the logged ones.
pub fn replay_reset_log(gt: &[RotatedBox], cfg: ResetConfig, log: &[(FrameStatus, Option<RotatedBox>)]) -> Result<ResetOutcome> {
    if log.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("reset log has {} frames, ground truth {}", log.len(), gt.len())));
    }
    let preds: Vec<RotatedBox> = log.iter().zip(gt).map(|((_, b), g)| b.unwrap_or(*g)).collect();
    let outcome = accuracy_robustness(gt, cfg, &mut Replay(&preds))?;
    if let Some(i) = (0..gt.len()).find(|&i| outcome.status[i] != log[i].0) {
        return Err(Error::InvalidArgument(format!(
            "reset log frame {i}: logged {} but the protocol gives {}",
            log[i].0.as_str(),
            outcome.status[i].as_str()
        )));
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResetOutcome {
    pub ious: Vec<f64>,
    pub status: Vec<FrameStatus>,
    pub accuracy: f64,
    pub failures: usize,
}

/// Reset-based protocol: a frame with IoU 0 is a failure; the tracker is
/// restarted from ground truth `skip` frames later and the following
/// `burn_in` frames do not count towards accuracy.
pub fn accuracy_robustness(gt: &[RotatedBox], cfg: ResetConfig, tracker: &mut impl OnlineTracker) -> Result<ResetOutcome> {
    let n = gt.len();
    let mut ious = vec![0.0; n];
    let mut status = vec![FrameStatus::Skipped; n];
    let mut failures = 0;
    if n == 0 {
        return Ok(ResetOutcome {
            ious,
            status,
            accuracy: 0.0,
            failures,
        });
    }
    tracker.start(0, &gt[0])?;
    status[0] = FrameStatus::Init;
    ious[0] = 1.0;
    let mut burn_until = 0;
    let mut t = 1;
    while t < n {
        let pred = tracker.next(t)?;
        let iou = rotated_iou(&pred, &gt[t]);
        ious[t] = iou;
        if iou <= 0.0 {
            status[t] = FrameStatus::Failed;
            failures += 1;
            let restart = t + cfg.skip.max(1);
            if restart >= n {
                break;
            }
            tracker.start(restart, &gt[restart])?;
            status[restart] = FrameStatus::Init;
            ious[restart] = 1.0;
            burn_until = restart + cfg.burn_in;
            t = restart + 1;
            continue;
        }
        status[t] = if t <= burn_until {
            FrameStatus::BurnIn
        } else {
            FrameStatus::Tracked
        };
        t += 1;
    }
    let counted: Vec<f64> = (0..n).filter(|&i| status[i] == FrameStatus::Tracked).map(|i| ious[i]).collect();
    let accuracy = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(ResetOutcome {
        ious,
        status,
        accuracy,
        failures,
    })
}

pub const EAO_LENGTHS: [usize; 4] = [25, 50, 75, 100];

/// Per-frame overlaps of a run without resets, zeroed from the first failure on.
pub fn no_reset_overlaps(ious: &[f64]) -> Vec<f64> {
    let mut failed = false;
    ious.iter()
        .map(|&v| {
            failed |= v <= 0.0;
            if failed {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Mean over `lengths` of the average overlap on the first `L` frames, averaged
/// over sequences. Lengths beyond a sequence use the whole sequence.
pub fn eao_simplified(sequences: &[Vec<f64>], lengths: &[usize]) -> f64 {
    let per_seq: Vec<f64> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let phi = no_reset_overlaps(s);
            let vals: Vec<f64> = lengths
                .iter()
                .map(|&l| {
                    let l = l.min(phi.len()).max(1);
                    phi[..l].iter().sum::<f64>() / l as f64
                })
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect();
    if per_seq.is_empty() {
        0.0
    } else {
        per_seq.iter().sum::<f64>() / per_seq.len() as f64
    }
}

/// Mean, recall (fraction above 0.5) and decay of a per-frame score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub recall: f64,
    pub decay: f64,
}

/// First-quartile mean minus last-quartile mean; the quartiles split the
/// frames as evenly as possible with the larger parts first. Zero below 4 frames.
pub fn decay(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return 0.0;
    }
    let (base, extra) = (n / 4, n % 4);
    let first_len = base + usize::from(extra > 0);
    let last_len = base;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&values[..first_len]) - mean(&values[n - last_len..])
}

pub fn stats(values: &[f64]) -> Stats {
    if values.is_empty() {
        return Stats {
            mean: 0.0,
            recall: 0.0,
            decay: 0.0,
        };
    }
    let n = values.len() as f64;
    Stats {
        mean: values.iter().sum::<f64>() / n,
        recall: values.iter().filter(|&&v| v > 0.5).count() as f64 / n,
        decay: decay(values),
    }
}

fn check_aligned(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} predicted vs {} ground-truth masks", pred.len(), gt.len())));
    }
    Ok(())
}

pub fn jaccard_per_frame(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    pred.iter().zip(gt).map(|(p, g)| mask_iou(p, g)).collect()
}

pub fn jaccard_stats(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Stats> {
    Ok(stats(&jaccard_per_frame(pred, gt)?))
}

/// `ceil(0.0075 * diagonal)`.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.0075 * (width as f64).hypot(height as f64)).ceil() as usize
}

fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    mask.set_pixels().filter(|&(x, y)| mask.is_boundary(x, y)).collect()
}

fn dilate(points: &[(usize, usize)], w: usize, h: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= ri * ri)
        .collect();
    for &(x, y) in points {
        for &(dx, dy) in &offsets {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out[ny as usize * w + nx as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure with matches allowed within a disk of radius `tolerance`.
///
/// Boundary pixels are set pixels with an unset (or out-of-frame) 4-neighbour.
/// Two empty boundaries score 1; `F = 0` when precision and recall are both 0.
pub fn f_measure(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::shape(
            "f_measure",
            format!("{}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
        ));
    }
    let (w, h) = (gt.width(), gt.height());
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let gt_zone = dilate(&bg, w, h, tolerance);
    let pred_zone = dilate(&bp, w, h, tolerance);
    let precision = bp.iter().filter(|&&(x, y)| gt_zone[y * w + x]).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|&&(x, y)| pred_zone[y * w + x]).count() as f64 / bg.len() as f64;
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

pub fn f_per_frame(pred: &[BinaryMask], gt: &[BinaryMask], tolerance: Option<usize>) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| f_measure(p, g, tolerance.unwrap_or_else(|| default_tolerance(g.width(), g.height()))))
        .collect()
}

pub fn f_measure_stats(pred: &[BinaryMask], gt: &[BinaryMask], tolerance: Option<usize>) -> Result<Stats> {
    Ok(stats(&f_per_frame(pred, gt, tolerance)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OracleKind {
    /// Axis-aligned, per-frame center and Min-max area, aspect ratio of frame 0.
    FixedAr,
    /// Axis-aligned bounds of the rotated ground truth.
    MinMax,
    /// The rotated ground truth itself.
    Mbr,
}

impl OracleKind {
    pub const ALL: [OracleKind; 3] = [OracleKind::FixedAr, OracleKind::MinMax, OracleKind::Mbr];

    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::FixedAr => "fixed_ar",
            OracleKind::MinMax => "min_max",
            OracleKind::Mbr => "mbr",
        }
    }
}

pub fn oracle_boxes(gt: &[RotatedBox], kind: OracleKind) -> Result<Vec<RotatedBox>> {
    let first = gt.first().ok_or_else(|| Error::InvalidArgument("oracle needs at least one box".into()))?;
    Ok(match kind {
        OracleKind::Mbr => gt.to_vec(),
        OracleKind::MinMax => gt.iter().map(|b| b.bounds().to_rotated()).collect(),
        OracleKind::FixedAr => {
            let b0 = first.bounds();
            let ar = b0.width() / b0.height();
            gt.iter()
                .map(|b| {
                    let bb = b.bounds();
                    let area = bb.area();
                    let (cx, cy) = bb.center();
                    RotatedBox {
                        cx,
                        cy,
                        w: (area * ar).sqrt(),
                        h: (area / ar).sqrt(),
                        angle: 0.0,
                    }
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingReport {
    pub miou: f64,
    pub map50: f64,
    pub map70: f64,
    pub accuracy: f64,
    pub failures: usize,
    /// Failures per 100 frames.
    pub robustness: f64,
    pub eao_simplified: f64,
    pub ious: Vec<f64>,
}

impl TrackingReport {
    /// Aggregates per-sequence results; `ious` are no-reset overlaps (frame 0 excluded).
    pub fn from_sequences(no_reset: &[Vec<f64>], resets: &[ResetOutcome]) -> Self {
        let all: Vec<f64> = no_reset.iter().flatten().copied().collect();
        let (miou, aps) = summarize_ious(&all, &[0.5, 0.7]);
        let failures = resets.iter().map(|r| r.failures).sum();
        let frames: usize = resets.iter().map(|r| r.ious.len()).sum();
        let tracked: Vec<f64> = resets
            .iter()
            .flat_map(|r| r.ious.iter().zip(&r.status).filter(|(_, s)| **s == FrameStatus::Tracked).map(|(v, _)| *v))
            .collect();
        Self {
            miou,
            map50: aps[0],
            map70: aps[1],
            accuracy: if tracked.is_empty() {
                0.0
            } else {
                tracked.iter().sum::<f64>() / tracked.len() as f64
            },
            failures,
            robustness: if frames == 0 { 0.0 } else { 100.0 * failures as f64 / frames as f64 },
            eao_simplified: eao_simplified(no_reset, &EAO_LENGTHS),
            ious: all,
        }
    }

    pub fn records(&self) -> Vec<(String, f64)> {
        vec![
            ("miou".into(), self.miou),
            ("map50".into(), self.map50),
            ("map70".into(), self.map70),
            ("accuracy".into(), self.accuracy),
            ("failures".into(), self.failures as f64),
            ("robustness".into(), self.robustness),
            ("eao_simplified".into(), self.eao_simplified),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VosReport {
    pub j: Stats,
    pub f: Stats,
}

impl VosReport {
    pub fn compute(pred: &[BinaryMask], gt: &[BinaryMask], tolerance: Option<usize>) -> Result<Self> {
        Ok(Self {
            j: jaccard_stats(pred, gt)?,
            f: f_measure_stats(pred, gt, tolerance)?,
        })
    }

    pub fn records(&self) -> Vec<(String, f64)> {
        vec![
            ("J_mean".into(), self.j.mean),
            ("J_recall".into(), self.j.recall),
            ("J_decay".into(), self.j.decay),
            ("F_mean".into(), self.f.mean),
            ("F_recall".into(), self.f.recall),
            ("F_decay".into(), self.f.decay),
        ]
    }
}

/// `name=value` lines with shortest round-trip formatting.
pub fn format_records(records: &[(String, f64)]) -> String {
    records.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_records(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("record line {}: `{line}`", i + 1)))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("record line {}: {e}", i + 1)))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}
