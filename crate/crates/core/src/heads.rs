//! Score, box and mask branches over the response map, and the refinement
//! stack that turns one RoW into a 127x127 mask.
//!
//! Every branch is `conv5 (1x1) -> fixed normalisation -> affine -> relu -> conv6 (1x1)`.
//! The fixed normalisation lives in `running_scale`/`running_shift` buffers set by
//! [`calibrate_norms`].

use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, RowMap, SearchSkips, ROW_GRID, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::model::{init_conv, Bound, ModelConfig, ParamSet, Variant, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{ConvGeom, Real, Tape, Tensor, UpsampleMode, Var};

pub const ROW_CELLS: usize = ROW_GRID * ROW_GRID;
/// Side of the refined mask, in search-patch pixels.
pub const REFINED_SIZE: usize = 127;
const REFINE_BASE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Score,
    Box,
    Mask,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Score => "score",
            Branch::Box => "box",
            Branch::Mask => "mask",
        }
    }
}

/// Refinement stack shape.
///
/// With `stages = 3` the RoW is projected to `channels x 16 x 16` and fused with
/// skips at strides 8, 4, 2 and 1 (the image) while doubling to 32, 64 and 128.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineConfig {
    pub channels: usize,
    pub stages: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { channels: 8, stages: 3 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stages > 3 {
            return Err(Error::Config(format!(
                "refine needs channels >= 1 and stages <= 3, got {} and {}",
                self.channels, self.stages
            )));
        }
        Ok(())
    }

    /// `(skip stride, crop side, fused resolution)` for the projection (row 0) and each stage.
    pub fn stage_table(&self) -> Vec<(usize, usize, usize)> {
        (0..=self.stages)
            .map(|s| {
                let stride = TOTAL_STRIDE >> s;
                let side = REFINE_BASE << s;
                (stride, side, side)
            })
            .collect()
    }
}

fn skip_channels(cfg: &BackboneConfig, stride: usize) -> Option<usize> {
    if stride == 1 {
        return Some(3);
    }
    cfg.stage_strides()
        .iter()
        .zip(&cfg.stages)
        .rev()
        .find(|(s, _)| **s == stride)
        .map(|(_, st)| st.channels)
}

fn init_branch(p: &mut ParamSet, rng: &mut ChaCha8Rng, branch: Branch, cin: usize, hidden: usize, cout: usize, out_gain: f64) {
    let pre = branch.prefix();
    p.insert(format!("{pre}.conv5.weight"), init_conv(rng, hidden, cin, 1, RELU_GAIN));
    p.insert(format!("{pre}.norm.running_scale"), Tensor::full(&[hidden], 1.0));
    p.insert(format!("{pre}.norm.running_shift"), Tensor::zeros(&[hidden]));
    p.insert(format!("{pre}.norm.weight"), Tensor::full(&[hidden], 1.0));
    p.insert(format!("{pre}.norm.bias"), Tensor::zeros(&[hidden]));
    p.insert(format!("{pre}.conv6.weight"), init_conv(rng, cout, hidden, 1, out_gain));
    p.insert(format!("{pre}.conv6.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn init(p: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let c = cfg.backbone.adjust_channels;
    let h = cfg.head_hidden;
    let k = cfg.k();
    match cfg.variant {
        Variant::TwoBranch => init_branch(p, rng, Branch::Score, c, h, 1, LINEAR_GAIN),
        Variant::ThreeBranch => {
            init_branch(p, rng, Branch::Score, c, h, 2 * k, LINEAR_GAIN);
            init_branch(p, rng, Branch::Box, c, h, 4 * k, 0.1 * LINEAR_GAIN);
        }
    }
    init_branch(p, rng, Branch::Mask, c, h, cfg.mask_size * cfg.mask_size, LINEAR_GAIN);

    let r = cfg.refine.channels;
    p.insert("refine.norm.running_scale", Tensor::full(&[c], 1.0));
    p.insert("refine.norm.running_shift", Tensor::zeros(&[c]));
    p.insert("refine.proj.weight", init_conv(rng, r * REFINE_BASE * REFINE_BASE, c, 1, RELU_GAIN));
    p.insert("refine.proj.bias", Tensor::zeros(&[r * REFINE_BASE * REFINE_BASE]));
    for (s, &(stride, _, _)) in cfg.refine.stage_table().iter().enumerate() {
        let Some(cin) = skip_channels(&cfg.backbone, stride) else { continue };
        p.insert(format!("refine.skip{s}.weight"), init_conv(rng, r, cin, 1, RELU_GAIN));
        p.insert(format!("refine.skip{s}.bias"), Tensor::zeros(&[r]));
        if s > 0 {
            p.insert(format!("refine.fuse{s}.weight"), init_conv(rng, r, r, 3, RELU_GAIN));
            p.insert(format!("refine.fuse{s}.bias"), Tensor::zeros(&[r]));
        }
    }
    p.insert("refine.out.weight", init_conv(rng, 1, r, 3, LINEAR_GAIN));
    p.insert("refine.out.bias", Tensor::zeros(&[1]));
}

/// conv5 + normalisation + relu + conv6 over any `[C, H, W]` input.
fn branch_forward<T: Real>(tape: &mut Tape<T>, b: &Bound, branch: Branch, x: Var) -> Result<Var> {
    let pre = branch.prefix();
    let h = tape.conv2d(x, b.get(&format!("{pre}.conv5.weight"))?, None, ConvGeom::UNIT)?;
    let h = tape.channel_affine(
        h,
        b.get(&format!("{pre}.norm.running_scale"))?,
        b.get(&format!("{pre}.norm.running_shift"))?,
    )?;
    let h = tape.channel_affine(h, b.get(&format!("{pre}.norm.weight"))?, b.get(&format!("{pre}.norm.bias"))?)?;
    let h = tape.relu(h);
    tape.conv2d(
        h,
        b.get(&format!("{pre}.conv6.weight"))?,
        Some(b.get(&format!("{pre}.conv6.bias"))?),
        ConvGeom::UNIT,
    )
}

/// `[2k, 17, 17]` (background logits in channels `0..k`, foreground in `k..2k`)
/// for the three-branch variant, `[1, 17, 17]` for the two-branch one.
pub fn score_head<T: Real>(tape: &mut Tape<T>, b: &Bound, row: RowMap, variant: Variant) -> Result<Var> {
    let out = branch_forward(tape, b, Branch::Score, row.features)?;
    let c = tape.shape(out)[0];
    let ok = match variant {
        Variant::TwoBranch => c == 1,
        Variant::ThreeBranch => c % 2 == 0,
    };
    if !ok {
        return Err(Error::shape(
            "score_head",
            format!("{c} score channels do not fit the {} variant", variant.as_str()),
        ));
    }
    Ok(out)
}

/// `[4k, 17, 17]` deltas; channel `coord * k + a` holds coordinate `coord` (dx, dy, dw, dh) of anchor `a`.
pub fn box_head<T: Real>(tape: &mut Tape<T>, b: &Bound, row: RowMap, variant: Variant) -> Result<Var> {
    if variant == Variant::TwoBranch {
        return Err(Error::InvalidArgument("box_head is not available in the two-branch variant".into()));
    }
    branch_forward(tape, b, Branch::Box, row.features)
}

/// `[m*m, 17, 17]`; the mask of cell `n` is channel vector `n` reshaped row-major to `m x m`.
pub fn mask_head<T: Real>(tape: &mut Tape<T>, b: &Bound, row: RowMap) -> Result<Var> {
    branch_forward(tape, b, Branch::Mask, row.features)
}

/// RoW vectors of the given flat cells as `[C, n, 1]`.
pub fn gather_rows<T: Real>(tape: &mut Tape<T>, row: RowMap, cells: &[usize]) -> Result<Var> {
    let shape = tape.shape(row.features).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("gather_rows", format!("expected [C,H,W], got {shape:?}")));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    if cells.is_empty() || cells.iter().any(|&n| n >= hw) {
        return Err(Error::shape("gather_rows", format!("cells {cells:?} outside a {hw}-cell map")));
    }
    let index = (0..c).flat_map(|ch| cells.iter().map(move |&n| ch * hw + n)).collect();
    let flat = tape.gather(row.features, index)?;
    tape.reshape(flat, &[c, cells.len(), 1])
}

/// Mask logits for selected cells only, `[m*m, n, 1]`; identical to the
/// corresponding columns of [`mask_head`].
pub fn mask_head_at<T: Real>(tape: &mut Tape<T>, b: &Bound, row: RowMap, cells: &[usize]) -> Result<Var> {
    let x = gather_rows(tape, row, cells)?;
    branch_forward(tape, b, Branch::Mask, x)
}

/// Refined `[1, 127, 127]` logits for `cell` from the RoW vector there.
pub fn refine_mask<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &RefineConfig,
    row: RowMap,
    cell: usize,
    skips: &SearchSkips,
) -> Result<Var> {
    let v = gather_rows(tape, row, &[cell])?;
    refine_from_row(tape, b, cfg, v, cell, skips)
}

/// Refinement from an explicit RoW vector `[C, 1, 1]`.
pub fn refine_from_row<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &RefineConfig,
    row_vector: Var,
    cell: usize,
    skips: &SearchSkips,
) -> Result<Var> {
    cfg.validate()?;
    if cell >= ROW_CELLS {
        return Err(Error::shape("refine_mask", format!("cell {cell} outside the 17x17 grid")));
    }
    let (ci, cj) = ((cell / ROW_GRID) as isize, (cell % ROW_GRID) as isize);
    let r = cfg.channels;
    let skip = |tape: &mut Tape<T>, s: usize, stride: usize, side: usize| -> Result<Var> {
        let src = skips
            .at_stride(stride)
            .ok_or_else(|| Error::Missing(format!("refinement skip at stride {stride}")))?;
        let scale = (TOTAL_STRIDE / stride) as isize;
        let crop = tape.crop_pad(src, ci * scale, cj * scale, side, side)?;
        tape.conv2d(
            crop,
            b.get(&format!("refine.skip{s}.weight"))?,
            Some(b.get(&format!("refine.skip{s}.bias"))?),
            ConvGeom::UNIT,
        )
    };

    let table = cfg.stage_table();
    let row_vector = tape.channel_affine(
        row_vector,
        b.get("refine.norm.running_scale")?,
        b.get("refine.norm.running_shift")?,
    )?;
    let proj = tape.conv2d(
        row_vector,
        b.get("refine.proj.weight")?,
        Some(b.get("refine.proj.bias")?),
        ConvGeom::UNIT,
    )?;
    let proj = tape.reshape(proj, &[r, REFINE_BASE, REFINE_BASE])?;
    let (stride0, side0, _) = table[0];
    let s0 = skip(tape, 0, stride0, side0)?;
    let sum = tape.add(proj, s0)?;
    let mut h = tape.relu(sum);
    for (s, &(stride, side, _)) in table.iter().enumerate().skip(1) {
        let up = tape.upsample2x(h, UpsampleMode::Bilinear)?;
        let sk = skip(tape, s, stride, side)?;
        let sum = tape.add(up, sk)?;
        let fused = tape.relu(sum);
        let conv = tape.conv2d(
            fused,
            b.get(&format!("refine.fuse{s}.weight"))?,
            Some(b.get(&format!("refine.fuse{s}.bias"))?),
            ConvGeom::new(1, 1, 1),
        )?;
        h = tape.relu(conv);
    }
    let mut out = tape.conv2d(
        h,
        b.get("refine.out.weight")?,
        Some(b.get("refine.out.bias")?),
        ConvGeom::new(1, 1, 1),
    )?;
    while tape.shape(out)[1] < REFINED_SIZE {
        out = tape.upsample2x(out, UpsampleMode::Bilinear)?;
    }
    tape.crop_pad(out, 0, 0, REFINED_SIZE, REFINED_SIZE)
}

/// Sets every branch's fixed normalisation so conv5 outputs have zero mean and
/// unit variance per channel over all cells of `row_maps`.
pub fn calibrate_norms(params: &mut ParamSet, row_maps: &[Tensor]) -> Result<()> {
    if row_maps.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one response map".into()));
    }
    let raw = row_maps.to_vec();
    set_standardizer(params, "refine.norm", &raw)?;
    for branch in [Branch::Score, Branch::Box, Branch::Mask] {
        let pre = branch.prefix();
        let wname = format!("{pre}.conv5.weight");
        if !params.contains(&wname) {
            continue;
        }
        let w = params.get(&wname)?.clone();
        let mut hidden = Vec::with_capacity(row_maps.len());
        for m in row_maps {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(m);
            let wv = tape.leaf(&w);
            let h = tape.conv2d(x, wv, None, ConvGeom::UNIT)?;
            hidden.push(tape.to_tensor(h));
        }
        set_standardizer(params, &format!("{pre}.norm"), &hidden)?;
    }
    Ok(())
}

/// Writes `{pre}.running_scale/shift` so each channel of `maps` gets zero mean and unit variance.
fn set_standardizer(params: &mut ParamSet, pre: &str, maps: &[Tensor]) -> Result<()> {
    let channels = maps[0].shape()[0];
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for m in maps {
        if m.shape()[0] != channels {
            return Err(Error::shape("calibrate_norms", format!("{:?} vs {channels} channels", m.shape())));
        }
        let inner = m.numel() / channels;
        for (i, &v) in m.data().iter().enumerate() {
            let c = i / inner;
            sum[c] += v as f64;
            sq[c] += (v as f64) * (v as f64);
        }
        count += inner;
    }
    let mut scale = vec![0.0f32; channels];
    let mut shift = vec![0.0f32; channels];
    for c in 0..channels {
        let mean = sum[c] / count as f64;
        let var = (sq[c] / count as f64 - mean * mean).max(0.0);
        let inv = 1.0 / (var + 1e-5).sqrt();
        scale[c] = inv as f32;
        shift[c] = (-mean * inv) as f32;
    }
    params.get_mut(&format!("{pre}.running_scale"))?.data_mut().copy_from_slice(&scale);
    params.get_mut(&format!("{pre}.running_shift"))?.data_mut().copy_from_slice(&shift);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_table_doubles_to_128() {
        let t = RefineConfig::default().stage_table();
        assert_eq!(t, vec![(8, 16, 16), (4, 32, 32), (2, 64, 64), (1, 128, 128)]);
    }
}
