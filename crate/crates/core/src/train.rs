//! SGD training on synthetic pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchors, nearest_cell, AnchorSet};
use crate::backbone::{forward_pair, ROW_GRID, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{mask_iou, BinaryMask};
use crate::heads::{box_head, calibrate_norms, mask_head_at, refine_mask, score_head, REFINED_SIZE, ROW_CELLS};
use crate::losses::{
    attach_row_masks, box_loss, label_rows_2b, label_rows_3b, mask_loss, pixel_logistic_loss, row_window_target,
    score_loss_with, sim_loss_with, total_loss, ScoreWeighting, LossComponents, LossWeights, MaskLossMode, RowLabels, DEFAULT_RADIUS,
};
use crate::io::SequenceData;
use crate::model::{Bound, Model, ModelConfig, Variant};
use crate::synth::{gen_sequence, sample_pair, Jitter, SceneConfig, TrainingPair};
use crate::tensor::{Real, Tape, Var};
use crate::tracker::{score_probabilities, select_row};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    /// Fraction of the steps spent in the linear warmup.
    pub warmup_frac: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient-norm clip (0 = off).
    pub clip_norm: f64,
    /// Clip each tensor's gradient separately instead of the global norm.
    pub clip_per_tensor: bool,
    pub weights: LossWeights,
    /// Weight of the refined-mask term.
    pub refine_weight: f64,
    pub mask_mode: MaskLossMode,
    pub score_weighting: ScoreWeighting,
    /// Positive radius (in cells) for the two-branch labels.
    pub label_radius: f64,
    /// Learning-rate multipliers for parameters whose name starts with the prefix;
    /// the first matching prefix wins.
    pub lr_mults: Vec<(String, f64)>,
    /// Pairs used to calibrate the head normalisation.
    pub calibration_pairs: usize,
    /// Recalibrate every this many steps (0 = only before the first step).
    pub recalibrate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_start: 1e-3,
            lr_peak: 5e-3,
            lr_end: 5e-4,
            warmup_frac: 0.25,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            clip_per_tensor: true,
            weights: LossWeights::default(),
            refine_weight: 32.0,
            mask_mode: MaskLossMode::PerPositive,
            score_weighting: ScoreWeighting::Balanced,
            label_radius: DEFAULT_RADIUS,
            lr_mults: vec![("mask.conv6.".into(), 1024.0)],
            calibration_pairs: 16,
            recalibrate_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_start, self.lr_peak, self.lr_end];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(0.0..=1.0).contains(&self.warmup_frac)
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
            || self.clip_norm < 0.0
            || self.refine_weight < 0.0
            || self.label_radius < 0.0
            || self.lr_mults.iter().any(|(_, m)| !(*m >= 0.0))
        {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }

    /// Linear warmup from `lr_start` to `lr_peak`, then geometric decay to `lr_end`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.steps as f64).round() as usize;
        if step < warm {
            return self.lr_start + (self.lr_peak - self.lr_start) * step as f64 / warm as f64;
        }
        let span = self.steps.saturating_sub(warm + 1).max(1) as f64;
        let t = ((step - warm) as f64 / span).min(1.0);
        self.lr_peak * (self.lr_end / self.lr_peak).powf(t)
    }

    pub fn lr_mult(&self, name: &str) -> f64 {
        self.lr_mults
            .iter()
            .find(|(prefix, _)| name.starts_with(prefix.as_str()))
            .map_or(1.0, |(_, m)| *m)
    }
}

/// Loss values recorded for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub mask: f64,
    /// Score term: `L_sim` for two branches, `L_score` for three.
    pub score: f64,
    pub boxes: f64,
    pub refine: f64,
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,lr,total,mask,score,box,refine,grad_norm";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.total, self.mask, self.score, self.boxes, self.refine, self.grad_norm
        )
    }
}

pub fn loss_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    s
}

/// Score and mask labels for one pair.
pub fn pair_labels(config: &ModelConfig, anchors: &AnchorSet, pair: &TrainingPair, radius: f64) -> Result<RowLabels> {
    let mut labels = match config.variant {
        Variant::ThreeBranch => label_rows_3b(anchors, &pair.gt_box)?,
        Variant::TwoBranch => {
            let (cx, cy) = pair.gt_box.center();
            label_rows_2b((nearest_cell(cy), nearest_cell(cx)), radius)
        }
    };
    attach_row_masks(&mut labels, &pair.gt_mask, config.mask_size);
    Ok(labels)
}

/// Loss terms of one pair on `tape`.
pub struct PairLoss {
    pub total: Var,
    pub mask: Var,
    pub score: Var,
    pub boxes: Option<Var>,
    pub refine: Option<Var>,
}

/// Builds the training loss; `refine_cell` adds the refined-mask term for that cell.
pub fn pair_loss<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    config: &ModelConfig,
    pair: &TrainingPair,
    labels: &RowLabels,
    train: &TrainConfig,
    refine_cell: Option<usize>,
) -> Result<PairLoss> {
    let fwd = forward_pair(tape, b, &config.backbone, &pair.z, &pair.x)?;
    let row = fwd.row_map;
    let positives = labels.positive_cells();
    let mask = if positives.is_empty() {
        let s = tape.sum(row.features);
        tape.scale(s, 0.0)
    } else {
        let logits = mask_head_at(tape, b, row, &positives)?;
        mask_loss(tape, logits, labels, train.mask_mode)?
    };
    let scores = score_head(tape, b, row, config.variant)?;
    let mut c = LossComponents {
        mask: Some(mask),
        ..Default::default()
    };
    let (score, boxes) = match config.variant {
        Variant::TwoBranch => {
            let s = sim_loss_with(tape, scores, labels, train.score_weighting)?;
            c.sim = Some(s);
            (s, None)
        }
        Variant::ThreeBranch => {
            let s = score_loss_with(tape, scores, labels, train.score_weighting)?;
            let deltas = box_head(tape, b, row, config.variant)?;
            let bl = box_loss(tape, deltas, labels)?;
            c.score = Some(s);
            c.boxes = Some(bl);
            (s, Some(bl))
        }
    };
    let mut total = total_loss(tape, config.variant, &c, &train.weights)?;
    let refine = match refine_cell {
        Some(cell) => {
            let logits = refine_mask(tape, b, &config.refine, row, cell, &fwd.skips)?;
            let target = row_window_target(&pair.gt_mask, cell, REFINED_SIZE);
            let l = pixel_logistic_loss(tape, logits, &target)?;
            let w = tape.scale(l, train.refine_weight);
            total = tape.add(total, w)?;
            Some(l)
        }
        None => None,
    };
    Ok(PairLoss {
        total,
        mask,
        score,
        boxes,
        refine,
    })
}

/// SGD with momentum, weight decay and gradient-norm clipping.
pub struct Trainer<'m> {
    pub model: &'m mut Model,
    pub config: TrainConfig,
    anchors: AnchorSet,
    velocity: BTreeMap<String, Vec<f32>>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let anchors = generate_anchors(&model.config.anchors);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            anchors,
            velocity: BTreeMap::new(),
            rng,
            step: 0,
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Sets the head normalisation from the response maps of the first pairs.
    pub fn calibrate(&mut self, pairs: &[TrainingPair]) -> Result<()> {
        let n = self.config.calibration_pairs.min(pairs.len());
        if n == 0 {
            return Ok(());
        }
        let mut maps = Vec::with_capacity(n);
        for pair in &pairs[..n] {
            let mut tape = Tape::<f32>::new();
            let b = self.model.params.bind(&mut tape);
            let fwd = forward_pair(&mut tape, &b, &self.model.config.backbone, &pair.z, &pair.x)?;
            maps.push(tape.to_tensor(fwd.row_map.features));
        }
        calibrate_norms(&mut self.model.params, &maps)
    }

    /// One update on `pair`.
    pub fn step(&mut self, pair: &TrainingPair) -> Result<StepLog> {
        let step = self.step;
        let lr = self.config.learning_rate(step);
        let labels = pair_labels(&self.model.config, &self.anchors, pair, self.config.label_radius)?;
        let positives = labels.positive_cells();
        let refine_cell = (!positives.is_empty() && self.config.refine_weight > 0.0)
            .then(|| positives[self.rng.gen_range(0..positives.len())]);

        let mut tape = Tape::<f32>::new();
        let b = self.model.params.bind(&mut tape);
        let loss = pair_loss(&mut tape, &b, &self.model.config, pair, &labels, &self.config, refine_cell)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v) as f64);
        let mut log = StepLog {
            step,
            lr,
            total: value(Some(loss.total)),
            mask: value(Some(loss.mask)),
            score: value(Some(loss.score)),
            boxes: value(loss.boxes),
            refine: value(loss.refine),
            grad_norm: 0.0,
        };
        let diag = |log: &StepLog| {
            format!(
                "total={} mask={} score={} box={} refine={}",
                log.total, log.mask, log.score, log.boxes, log.refine
            )
        };
        if !log.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: diag(&log),
            });
        }
        tape.backward(loss.total)?;
        self.model.params.zero_grads();
        self.model.params.accumulate_grads(&tape, &b)?;

        let norm_sq: f64 = self
            .model
            .params
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter().map(|&v| v as f64 * v as f64))
            .sum();
        log.grad_norm = norm_sq.sqrt();
        if !log.grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {} with {}", log.grad_norm, diag(&log)),
            });
        }
        let max = self.config.clip_norm;
        let factor = |norm: f64| if max > 0.0 && norm > max { max / norm } else { 1.0 };
        let global = factor(log.grad_norm);
        let (mu, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        for (name, t) in self.model.params.iter_mut() {
            let Some(g) = t.grad().map(<[f32]>::to_vec) else { continue };
            let clip32 = if self.config.clip_per_tensor {
                factor(g.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
            } else {
                global
            } as f32;
            let lr32 = (lr * self.config.lr_mult(name)) as f32;
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + clip32 * gi + wd * *p;
                *p -= lr32 * *vi;
            }
        }
        self.step += 1;
        Ok(log)
    }

    /// Calibrates, then runs `config.steps` updates on uniformly drawn pairs.
    pub fn run(&mut self, pairs: &[TrainingPair], mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one pair".into()));
        }
        self.calibrate(pairs)?;
        let mut logs = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let every = self.config.recalibrate_every;
            if every > 0 && self.step > 0 && self.step % every == 0 {
                self.calibrate(pairs)?;
            }
            let i = self.rng.gen_range(0..pairs.len());
            let log = self.step(&pairs[i])?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Random scenes of the given size and `count` pairs drawn round-robin from them.
pub fn synth_pairs(
    scenes: usize,
    length: usize,
    count: usize,
    (width, height): (usize, usize),
    jitter: Jitter,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if scenes == 0 {
        return Err(Error::InvalidArgument("need at least one scene".into()));
    }
    let seqs = (0..scenes)
        .map(|i| gen_sequence(&SceneConfig::random(seed.wrapping_add(i as u64), width, height), length))
        .collect::<Result<Vec<_>>>()?;
    pairs_from_sequences(&seqs, count, jitter, seed)
}

/// `count` pairs drawn round-robin from `seqs`.
pub fn pairs_from_sequences(seqs: &[SequenceData], count: usize, jitter: Jitter, seed: u64) -> Result<Vec<TrainingPair>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("need at least one sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..count).map(|i| sample_pair(&seqs[i % seqs.len()], jitter, &mut rng)).collect()
}

/// Inference quality on a training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEval {
    /// Mask-head loss at the labelled positives.
    pub mask_loss: f64,
    /// IoU in the search patch of the refined mask at the selected RoW.
    pub mask_iou: f64,
    pub cell: usize,
    /// The selected RoW is a labelled positive.
    pub hit: bool,
}

/// Search-patch mask of the refined prediction for `cell`.
pub fn window_patch_mask(probs: &[f32], cell: usize, size: usize, threshold: f32) -> BinaryMask {
    let (oy, ox) = ((cell / ROW_GRID) * TOTAL_STRIDE, (cell % ROW_GRID) * TOTAL_STRIDE);
    BinaryMask::from_fn(size, size, |x, y| {
        x >= ox
            && y >= oy
            && x - ox < REFINED_SIZE
            && y - oy < REFINED_SIZE
            && probs[(y - oy) * REFINED_SIZE + (x - ox)] > threshold
    })
    .expect("patch dims")
}

pub fn evaluate_pair(model: &Model, train: &TrainConfig, pair: &TrainingPair) -> Result<PairEval> {
    let anchors = generate_anchors(&model.config.anchors);
    let labels = pair_labels(&model.config, &anchors, pair, train.label_radius)?;
    let mut tape = Tape::<f32>::new();
    let b = model.params.bind(&mut tape);
    let cfg = &model.config;
    let fwd = forward_pair(&mut tape, &b, &cfg.backbone, &pair.z, &pair.x)?;
    let positives = labels.positive_cells();
    let mask_loss = if positives.is_empty() {
        0.0
    } else {
        let logits = mask_head_at(&mut tape, &b, fwd.row_map, &positives)?;
        let l = mask_loss(&mut tape, logits, &labels, MaskLossMode::PerPositive)?;
        tape.item(l) as f64
    };
    let scores = score_head(&mut tape, &b, fwd.row_map, cfg.variant)?;
    let probs = score_probabilities(tape.value(scores), cfg.variant);
    let sel = select_row(&probs, ROW_CELLS, 0.0);
    let logits = refine_mask(&mut tape, &b, &cfg.refine, fwd.row_map, sel.cell, &fwd.skips)?;
    let p: Vec<f32> = tape.value(logits).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let pred = window_patch_mask(&p, sel.cell, pair.gt_mask.width(), 0.5);
    Ok(PairEval {
        mask_loss,
        mask_iou: mask_iou(&pred, &pair.gt_mask)?,
        cell: sel.cell,
        hit: positives.contains(&sel.cell),
    })
}
