//! Gradient-check registry: every tape operation, every loss, and the
//! end-to-end two- and three-branch objectives on one training pair.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchors, AnchorConfig};
use crate::error::Result;
use crate::geometry::BinaryMask;
use crate::losses::{
    attach_row_masks, box_loss, label_rows_2b, label_rows_3b, mask_loss, pixel_logistic_loss, score_loss_with,
    sim_loss_with, MaskLossMode, RowLabels, ScoreWeighting,
};
use crate::model::{Bound, Model, ModelConfig, Variant};
use crate::synth::{Jitter, TrainingPair};
use crate::tensor::{grad_check_with, ConvGeom, GradCheckOptions, GradCheckReport, Real, Tape, TapeFn, Tensor, UpsampleMode, Var};
use crate::train::{pair_labels, pair_loss, synth_pairs, TrainConfig, Trainer};
use crate::AxisBox;

pub const GRADCHECK_EPSILON: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Coordinates probed per parameter tensor in the end-to-end cases.
pub const E2E_COORDS_PER_TENSOR: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OpKind {
    Conv,
    ConvStrided,
    ConvDilated,
    Xcorr,
    Relu,
    Sigmoid,
    Softplus,
    SmoothL1,
    Add,
    Sub,
    Mul,
    Scale,
    ChannelAffine,
    InstanceNorm,
    UpsampleNearest,
    UpsampleBilinear,
    Gather,
    Reshape,
    CropPad,
    Sum,
    Mean,
}

const OPS: [(&str, OpKind); 21] = [
    ("conv2d", OpKind::Conv),
    ("conv2d_stride2_pad1", OpKind::ConvStrided),
    ("conv2d_dilation2", OpKind::ConvDilated),
    ("depthwise_xcorr", OpKind::Xcorr),
    ("relu", OpKind::Relu),
    ("sigmoid", OpKind::Sigmoid),
    ("softplus", OpKind::Softplus),
    ("smooth_l1", OpKind::SmoothL1),
    ("add", OpKind::Add),
    ("sub", OpKind::Sub),
    ("mul", OpKind::Mul),
    ("scale", OpKind::Scale),
    ("channel_affine", OpKind::ChannelAffine),
    ("instance_norm", OpKind::InstanceNorm),
    ("upsample_nearest", OpKind::UpsampleNearest),
    ("upsample_bilinear", OpKind::UpsampleBilinear),
    ("gather", OpKind::Gather),
    ("reshape", OpKind::Reshape),
    ("crop_pad", OpKind::CropPad),
    ("sum", OpKind::Sum),
    ("mean", OpKind::Mean),
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], range: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-range..range)).collect())
        .expect("positive dims")
        .with_grad()
}

impl OpKind {
    fn inputs(self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        match self {
            OpKind::Conv => vec![random(rng, &[2, 5, 5], 1.0), random(rng, &[3, 2, 3, 3], 1.0), random(rng, &[3], 1.0)],
            OpKind::ConvStrided => vec![random(rng, &[2, 7, 6], 1.0), random(rng, &[2, 2, 3, 3], 1.0)],
            OpKind::ConvDilated => vec![random(rng, &[2, 8, 8], 1.0), random(rng, &[2, 2, 3, 3], 1.0)],
            OpKind::Xcorr => vec![random(rng, &[3, 7, 6], 1.0), random(rng, &[3, 3, 2], 1.0)],
            OpKind::Add | OpKind::Sub | OpKind::Mul => vec![random(rng, &[2, 3, 4], 2.0), random(rng, &[2, 3, 4], 2.0)],
            OpKind::ChannelAffine => vec![random(rng, &[3, 2, 4], 2.0), random(rng, &[3], 2.0), random(rng, &[3], 2.0)],
            OpKind::SmoothL1 => vec![random(rng, &[3, 4, 4], 3.0)],
            OpKind::UpsampleNearest | OpKind::UpsampleBilinear | OpKind::CropPad => vec![random(rng, &[2, 3, 4], 2.0)],
            _ => vec![random(rng, &[2, 3, 4], 3.0)],
        }
    }
}

/// `sum(op(inputs) * w)` with fixed pseudo-random weights `w`, so each output
/// element reaches the loss with a different coefficient.
struct Weighted(OpKind);

impl TapeFn for Weighted {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = match self.0 {
            OpKind::Conv => tape.conv2d(v[0], v[1], Some(v[2]), ConvGeom::UNIT)?,
            OpKind::ConvStrided => tape.conv2d(v[0], v[1], None, ConvGeom::new(2, 1, 1))?,
            OpKind::ConvDilated => tape.conv2d(v[0], v[1], None, ConvGeom::new(1, 2, 2))?,
            OpKind::Xcorr => tape.depthwise_xcorr(v[0], v[1])?,
            OpKind::Relu => tape.relu(v[0]),
            OpKind::Sigmoid => tape.sigmoid(v[0]),
            OpKind::Softplus => tape.softplus(v[0]),
            OpKind::SmoothL1 => tape.smooth_l1(v[0]),
            OpKind::Add => tape.add(v[0], v[1])?,
            OpKind::Sub => tape.sub(v[0], v[1])?,
            OpKind::Mul => tape.mul(v[0], v[1])?,
            OpKind::Scale => tape.scale(v[0], -1.75),
            OpKind::ChannelAffine => tape.channel_affine(v[0], v[1], v[2])?,
            OpKind::InstanceNorm => tape.instance_norm(v[0], 1e-5)?,
            OpKind::UpsampleNearest => tape.upsample2x(v[0], UpsampleMode::Nearest)?,
            OpKind::UpsampleBilinear => tape.upsample2x(v[0], UpsampleMode::Bilinear)?,
            OpKind::Gather => tape.gather(v[0], vec![3, 0, 7, 7, 23, 11])?,
            OpKind::Reshape => tape.reshape(v[0], &[4, 6])?,
            OpKind::CropPad => tape.crop_pad(v[0], -1, 1, 3, 5)?,
            OpKind::Sum => tape.sum(v[0]),
            OpKind::Mean => tape.mean(v[0]),
        };
        weighted_sum(tape, y)
    }
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(0.25f32..1.25)).collect();
    let wv = tape.constant(&shape, &w)?;
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    MaskStrict,
    MaskPerPositive,
    PixelLogistic,
    SimMean,
    SimBalanced,
    ScoreMean,
    ScoreBalanced,
    Box,
}

const LOSSES: [(&str, LossKind); 8] = [
    ("mask_loss_strict", LossKind::MaskStrict),
    ("mask_loss_per_positive", LossKind::MaskPerPositive),
    ("pixel_logistic_loss", LossKind::PixelLogistic),
    ("sim_loss", LossKind::SimMean),
    ("sim_loss_balanced", LossKind::SimBalanced),
    ("score_loss", LossKind::ScoreMean),
    ("score_loss_balanced", LossKind::ScoreBalanced),
    ("box_loss", LossKind::Box),
];

const TOY_MASK: usize = 3;

struct LossCase {
    kind: LossKind,
    labels: RowLabels,
    pixel_target: Vec<f32>,
}

impl LossCase {
    fn new(kind: LossKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch = BinaryMask::from_fn(255, 255, |x, y| {
            let (dx, dy) = (x as f64 - 127.0, y as f64 - 130.0);
            dx * dx / 900.0 + dy * dy / 1600.0 < 1.0
        })?;
        let mut labels = match kind {
            LossKind::ScoreMean | LossKind::ScoreBalanced | LossKind::Box => {
                let anchors = generate_anchors(&AnchorConfig::default());
                label_rows_3b(&anchors, &AxisBox::new(96.0, 88.0, 158.0, 170.0)?)?
            }
            _ => label_rows_2b((8, 8), 1.0),
        };
        attach_row_masks(&mut labels, &patch, TOY_MASK);
        let pixel_target = (0..25).map(|_| if rng.gen_bool(0.4) { 1.0 } else { -1.0 }).collect();
        Ok(Self {
            kind,
            labels,
            pixel_target,
        })
    }

    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let (k, cells) = (self.labels.k, self.labels.cells);
        let shape: Vec<usize> = match self.kind {
            LossKind::MaskStrict | LossKind::MaskPerPositive => {
                vec![TOY_MASK * TOY_MASK, self.labels.num_positive_cells(), 1]
            }
            LossKind::PixelLogistic => vec![1, 5, 5],
            LossKind::SimMean | LossKind::SimBalanced => vec![1, 17, 17],
            LossKind::ScoreMean | LossKind::ScoreBalanced => vec![2 * k, 17, 17],
            LossKind::Box => vec![4 * k, 17, 17],
        };
        debug_assert_eq!(cells, 289);
        vec![random(rng, &shape, 2.0)]
    }
}

impl TapeFn for LossCase {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let l = &self.labels;
        match self.kind {
            LossKind::MaskStrict => mask_loss(tape, v[0], l, MaskLossMode::Strict),
            LossKind::MaskPerPositive => mask_loss(tape, v[0], l, MaskLossMode::PerPositive),
            LossKind::PixelLogistic => pixel_logistic_loss(tape, v[0], &self.pixel_target),
            LossKind::SimMean => sim_loss_with(tape, v[0], l, ScoreWeighting::Mean),
            LossKind::SimBalanced => sim_loss_with(tape, v[0], l, ScoreWeighting::Balanced),
            LossKind::ScoreMean => score_loss_with(tape, v[0], l, ScoreWeighting::Mean),
            LossKind::ScoreBalanced => score_loss_with(tape, v[0], l, ScoreWeighting::Balanced),
            LossKind::Box => box_loss(tape, v[0], l),
        }
    }
}

/// The full training objective of one variant on one pair, as a function of
/// every model tensor (buffers enter as constants).
struct EndToEnd {
    config: ModelConfig,
    train: TrainConfig,
    names: Vec<String>,
    pair: TrainingPair,
    labels: RowLabels,
    refine_cell: Option<usize>,
}

impl TapeFn for EndToEnd {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let b = Bound::from_vars(self.names.iter().cloned().zip(v.iter().copied()));
        let loss = pair_loss(tape, &b, &self.config, &self.pair, &self.labels, &self.train, self.refine_cell)?;
        Ok(loss.total)
    }
}

fn end_to_end(variant: Variant, seed: u64) -> Result<(EndToEnd, Vec<Tensor>)> {
    let config = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        score_weighting: ScoreWeighting::Balanced,
        ..TrainConfig::default()
    };
    let pairs = synth_pairs(2, 8, 4, (160, 160), Jitter::DEFAULT, seed)?;
    let mut model = Model::new(config.clone(), seed);
    let anchors = {
        let mut trainer = Trainer::new(&mut model, train.clone())?;
        trainer.calibrate(&pairs)?;
        trainer.anchors().clone()
    };
    let pair = pairs[0].clone();
    let labels = pair_labels(&config, &anchors, &pair, train.label_radius)?;
    let refine_cell = labels.positive_cells().first().copied();
    let (names, inputs): (Vec<String>, Vec<Tensor>) =
        model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip();
    Ok((
        EndToEnd {
            config,
            train,
            names,
            pair,
            labels,
            refine_cell,
        },
        inputs,
    ))
}

/// A deliberately wrong derivative: `sum(x * x)` where one factor is recorded
/// as a constant, so backprop reports `x` instead of `2x`.
struct Corrupted;

impl TapeFn for Corrupted {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let values: Vec<f32> = tape.value(v[0]).iter().map(|x| x.as_f32()).collect();
        let shape = tape.shape(v[0]).to_vec();
        let c = tape.constant(&shape, &values)?;
        let p = tape.mul(v[0], c)?;
        Ok(tape.sum(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseGroup {
    Op,
    Loss,
    EndToEnd,
    Fixture,
}

impl CaseGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseGroup::Op => "op",
            CaseGroup::Loss => "loss",
            CaseGroup::EndToEnd => "e2e",
            CaseGroup::Fixture => "fixture",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CaseKind {
    Op(OpKind),
    Loss(LossKind),
    EndToEnd(Variant),
    Corrupted,
}

/// One registered check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradCase {
    pub name: &'static str,
    pub group: CaseGroup,
    kind: CaseKind,
}

/// Every registered check: all operations, all losses, then `loss_2b` and `loss_3b`.
pub fn registry() -> Vec<GradCase> {
    let ops = OPS.iter().map(|&(name, k)| GradCase {
        name,
        group: CaseGroup::Op,
        kind: CaseKind::Op(k),
    });
    let losses = LOSSES.iter().map(|&(name, k)| GradCase {
        name,
        group: CaseGroup::Loss,
        kind: CaseKind::Loss(k),
    });
    let e2e = [("loss_2b", Variant::TwoBranch), ("loss_3b", Variant::ThreeBranch)]
        .into_iter()
        .map(|(name, v)| GradCase {
            name,
            group: CaseGroup::EndToEnd,
            kind: CaseKind::EndToEnd(v),
        });
    ops.chain(losses).chain(e2e).collect()
}

/// A check that must fail: its backward pass drops half the derivative.
pub fn corrupted_fixture() -> GradCase {
    GradCase {
        name: "corrupted_fixture",
        group: CaseGroup::Fixture,
        kind: CaseKind::Corrupted,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub group: CaseGroup,
    pub report: GradCheckReport,
    pub passed: bool,
    pub seconds: f64,
}

impl GradCase {
    /// Runs the check with `epsilon` and tolerance from the constants above;
    /// `seed` fixes the inputs and the sampled coordinates.
    pub fn run(&self, seed: u64) -> Result<CaseOutcome> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opts = GradCheckOptions {
            epsilon: GRADCHECK_EPSILON,
            max_coords_per_input: None,
            seed,
        };
        let report = match self.kind {
            CaseKind::Op(k) => grad_check_with(&Weighted(k), &k.inputs(&mut rng), &opts)?,
            CaseKind::Loss(k) => {
                let case = LossCase::new(k, seed)?;
                let inputs = case.inputs(&mut rng);
                grad_check_with(&case, &inputs, &opts)?
            }
            CaseKind::EndToEnd(v) => {
                let (f, inputs) = end_to_end(v, seed)?;
                opts.max_coords_per_input = Some(E2E_COORDS_PER_TENSOR);
                grad_check_with(&f, &inputs, &opts)?
            }
            CaseKind::Corrupted => grad_check_with(&Corrupted, &[random(&mut rng, &[2, 3], 2.0)], &opts)?,
        };
        Ok(CaseOutcome {
            name: self.name,
            group: self.group,
            passed: report.checked > 0 && report.max_rel_error < GRADCHECK_TOLERANCE,
            report,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}
