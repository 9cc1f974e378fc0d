//! Shared-weight feature extractor, unshared adjust layers and the paired
//! depth-wise correlation that produces the 17x17 response map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{init_conv, Bound, ParamSet, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{conv_out_len, ConvGeom, Real, Tape, Tensor, Var};

pub const EXEMPLAR_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 255;
pub const EXEMPLAR_FEATURE: usize = 15;
pub const SEARCH_FEATURE: usize = 31;
pub const ROW_GRID: usize = 17;
pub const TOTAL_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl StageConfig {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.dilation, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub adjust_channels: usize,
    /// Per-channel instance normalisation plus a learned affine after every stage conv.
    pub stage_norm: bool,
    /// Instance normalisation of both adjusted feature maps before correlation.
    pub adjust_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::with_widths(&[8, 16, 32, 32], 32)
    }
}

impl BackboneConfig {
    /// Four 3x3 stages with strides (2,2,2,1); the last is dilated by 2 and padded to keep 31/15.
    pub fn with_widths(widths: &[usize], adjust_channels: usize) -> Self {
        let geom = [(2, 1, 0), (2, 1, 0), (2, 1, 0), (1, 2, 2)];
        let stages = widths
            .iter()
            .zip(geom)
            .map(|(&channels, (stride, dilation, padding))| StageConfig {
                channels,
                kernel: 3,
                stride,
                dilation,
                padding,
            })
            .collect();
        Self {
            stages,
            adjust_channels,
            stage_norm: true,
            adjust_norm: true,
        }
    }

    /// One 15x15 convolution with stride 8.
    pub fn single_layer(channels: usize, adjust_channels: usize) -> Self {
        Self {
            stages: vec![StageConfig {
                channels,
                kernel: 15,
                stride: 8,
                dilation: 1,
                padding: 0,
            }],
            adjust_channels,
            stage_norm: true,
            adjust_norm: true,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.channels)
    }

    /// Spatial size after every stage for a square input of side `input`.
    pub fn stage_sizes(&self, input: usize) -> Option<Vec<usize>> {
        let mut n = input;
        self.stages
            .iter()
            .map(|s| {
                n = conv_out_len(n, s.kernel, s.geom())?;
                Some(n)
            })
            .collect()
    }

    /// Cumulative stride after every stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        self.stages
            .iter()
            .map(|s| {
                acc *= s.stride;
                acc
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.adjust_channels == 0 || self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config("backbone widths and adjust_channels must be >= 1".into()));
        }
        let total = self.stage_strides().last().copied().unwrap_or(1);
        if total != TOTAL_STRIDE {
            return Err(Error::Config(format!("total stride {total}, expected {TOTAL_STRIDE}")));
        }
        let last = |n| self.stage_sizes(n).and_then(|v| v.last().copied());
        if last(EXEMPLAR_SIZE) != Some(EXEMPLAR_FEATURE) || last(SEARCH_SIZE) != Some(SEARCH_FEATURE) {
            return Err(Error::Config(format!(
                "backbone maps {EXEMPLAR_SIZE}->{:?} and {SEARCH_SIZE}->{:?}, expected {EXEMPLAR_FEATURE} and {SEARCH_FEATURE}",
                last(EXEMPLAR_SIZE),
                last(SEARCH_SIZE)
            )));
        }
        Ok(())
    }
}

pub(crate) fn init(p: &mut ParamSet, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let mut cin = 3;
    for (i, s) in cfg.stages.iter().enumerate() {
        let pre = format!("backbone.stage{}", i + 1);
        p.insert(format!("{pre}.weight"), init_conv(rng, s.channels, cin, s.kernel, RELU_GAIN));
        if cfg.stage_norm {
            p.insert(format!("{pre}.norm.weight"), Tensor::full(&[s.channels], 1.0));
            p.insert(format!("{pre}.norm.bias"), Tensor::zeros(&[s.channels]));
        } else {
            p.insert(format!("{pre}.bias"), Tensor::zeros(&[s.channels]));
        }
        cin = s.channels;
    }
    for side in [Stream::Exemplar, Stream::Search] {
        let prefix = side.adjust_prefix();
        p.insert(format!("{prefix}.weight"), init_conv(rng, cfg.adjust_channels, cin, 1, LINEAR_GAIN));
        if !cfg.adjust_norm {
            p.insert(format!("{prefix}.bias"), Tensor::zeros(&[cfg.adjust_channels]));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Exemplar,
    Search,
}

impl Stream {
    fn adjust_prefix(self) -> &'static str {
        match self {
            Stream::Exemplar => "adjust.exemplar",
            Stream::Search => "adjust.search",
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            Stream::Exemplar => EXEMPLAR_SIZE,
            Stream::Search => SEARCH_SIZE,
        }
    }
}

/// Where a patch came from in frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchGeometry {
    pub center: (f64, f64),
    /// Side of the square frame region that was resampled to the patch.
    pub side: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Tensor,
    pub geometry: PatchGeometry,
}

impl Patch {
    /// `pixels` is `[3, n, n]` with values in `[0, 1]`.
    pub fn new(stream: Stream, pixels: Tensor, geometry: PatchGeometry) -> Result<Self> {
        let n = stream.input_size();
        if pixels.shape() != [3, n, n] {
            return Err(Error::shape(
                "patch",
                format!("{stream:?} patch must be [3,{n},{n}], got {:?}", pixels.shape()),
            ));
        }
        Ok(Self { pixels, geometry })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

pub type ExemplarPatch = Patch;
pub type SearchPatch = Patch;

/// Output of every backbone stage, first to last.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub input: Var,
    pub stages: Vec<Var>,
}

impl Embedding {
    pub fn last(&self) -> Var {
        *self.stages.last().expect("at least one stage")
    }
}

/// Shared backbone; `image` is `[3, n, n]` with `n` in {127, 255}.
pub fn embed<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &BackboneConfig, image: Var) -> Result<Embedding> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] || (shape[1] != EXEMPLAR_SIZE && shape[1] != SEARCH_SIZE) {
        return Err(Error::shape(
            "embed",
            format!("input must be [3,{EXEMPLAR_SIZE},{EXEMPLAR_SIZE}] or [3,{SEARCH_SIZE},{SEARCH_SIZE}], got {shape:?}"),
        ));
    }
    let mut h = image;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        let pre = format!("backbone.stage{}", i + 1);
        let w = b.get(&format!("{pre}.weight"))?;
        let mut z = tape.conv2d(h, w, b.try_get(&format!("{pre}.bias")), s.geom())?;
        if cfg.stage_norm {
            z = tape.instance_norm(z, NORM_EPS)?;
            z = tape.channel_affine(z, b.get(&format!("{pre}.norm.weight"))?, b.get(&format!("{pre}.norm.bias"))?)?;
        }
        h = tape.relu(z);
        stages.push(h);
    }
    Ok(Embedding { input: image, stages })
}

pub const NORM_EPS: f64 = 1e-5;

/// Stream-specific 1x1 projection.
pub fn adjust<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &BackboneConfig, feature: Var, which: Stream) -> Result<Var> {
    let prefix = which.adjust_prefix();
    let w = b.get(&format!("{prefix}.weight"))?;
    let y = tape.conv2d(feature, w, b.try_get(&format!("{prefix}.bias")), ConvGeom::UNIT)?;
    if cfg.adjust_norm {
        tape.instance_norm(y, NORM_EPS)
    } else {
        Ok(y)
    }
}

/// The `[C,17,17]` response map; one RoW per cell.
#[derive(Clone, Copy, Debug)]
pub struct RowMap {
    pub features: Var,
}

/// Search-stream outputs needed by the refinement stages.
#[derive(Clone, Debug)]
pub struct SearchSkips {
    pub image: Var,
    /// Backbone stage outputs paired with their cumulative stride.
    pub stages: Vec<(usize, Var)>,
}

impl SearchSkips {
    /// Deepest stage output with exactly `stride`, or the image for stride 1.
    pub fn at_stride(&self, stride: usize) -> Option<Var> {
        if stride == 1 {
            return Some(self.image);
        }
        self.stages.iter().rev().find(|(s, _)| *s == stride).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug)]
pub struct PairForward {
    pub row_map: RowMap,
    pub skips: SearchSkips,
}

/// Adjusted exemplar features `[adjust_channels, 15, 15]`.
pub fn exemplar_features<T: Real>(tape: &mut Tape<T>, b: &Bound, cfg: &BackboneConfig, z: Var) -> Result<Var> {
    let e = embed(tape, b, cfg, z)?;
    adjust(tape, b, cfg, e.last(), Stream::Exemplar)
}

/// Search stream correlated against already-adjusted exemplar features.
pub fn search_forward<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &BackboneConfig,
    x: Var,
    zfeat: Var,
) -> Result<PairForward> {
    let e = embed(tape, b, cfg, x)?;
    let xfeat = adjust(tape, b, cfg, e.last(), Stream::Search)?;
    let features = tape.depthwise_xcorr(xfeat, zfeat)?;
    let skips = SearchSkips {
        image: e.input,
        stages: cfg.stage_strides().into_iter().zip(e.stages.iter().copied()).collect(),
    };
    Ok(PairForward {
        row_map: RowMap { features },
        skips,
    })
}

/// Embeds and adjusts both patches, then correlates them channel by channel.
pub fn forward_pair<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &BackboneConfig,
    z: &ExemplarPatch,
    x: &SearchPatch,
) -> Result<PairForward> {
    if z.size() != EXEMPLAR_SIZE || x.size() != SEARCH_SIZE {
        return Err(Error::shape(
            "forward_pair",
            format!("expected {EXEMPLAR_SIZE} and {SEARCH_SIZE} patches, got {} and {}", z.size(), x.size()),
        ));
    }
    let zv = tape.leaf(z.pixels());
    let xv = tape.leaf(x.pixels());
    let zfeat = exemplar_features(tape, b, cfg, zv)?;
    search_forward(tape, b, cfg, xv, zfeat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_single_layer_configs_are_valid() {
        BackboneConfig::default().validate().unwrap();
        BackboneConfig::single_layer(8, 8).validate().unwrap();
        assert_eq!(BackboneConfig::default().stage_sizes(255).unwrap(), vec![127, 63, 31, 31]);
        assert_eq!(BackboneConfig::default().stage_sizes(127).unwrap(), vec![63, 31, 15, 15]);
    }

    #[test]
    fn wrong_stride_is_rejected() {
        let mut c = BackboneConfig::default();
        c.stages[3].stride = 2;
        assert!(c.validate().is_err());
    }
}
