//! Parameter storage and the assembled network configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::AnchorConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::RefineConfig;
use crate::tensor::{read_checkpoint, write_checkpoint, Real, Tape, Tensor, Var};

/// Head layout: score and mask, or score, box and mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    TwoBranch,
    ThreeBranch,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TwoBranch => "2b",
            Variant::ThreeBranch => "3b",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2b" => Ok(Variant::TwoBranch),
            "3b" => Ok(Variant::ThreeBranch),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected 2b or 3b)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// Width of the conv5 layer of every head.
    pub head_hidden: usize,
    pub anchors: AnchorConfig,
    /// Side of the per-RoW mask.
    pub mask_size: usize,
    pub refine: RefineConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ThreeBranch,
            backbone: BackboneConfig::default(),
            head_hidden: 64,
            anchors: AnchorConfig::default(),
            mask_size: 63,
            refine: RefineConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Anchors per RoW for the score/box heads (1 for the two-branch score map).
    pub fn k(&self) -> usize {
        self.anchors.ratios.len()
    }
}

/// Named parameter and buffer tensors.
///
/// Buffers (names containing `running_`) never require grad.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.contains("running_")
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        let name = name.into();
        t.set_requires_grad(!is_buffer(&name));
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor on `tape`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Adds the tape gradients of every bound trainable tensor into its grad buffer.
    pub fn accumulate_grads<T: Real>(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(&v) = bound.vars.get(name) else { continue };
            if let Some(g) = tape.grad(v) {
                let g32: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
                t.accumulate_grad(&g32)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut set = Self::new();
        for (name, t) in read_checkpoint(path)? {
            set.insert(name, t);
        }
        Ok(set)
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Handles for tensors already recorded under these names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

/// Uniform fan-in initialisation; `gain = sqrt(6)` gives He-uniform for relu layers.
pub(crate) fn init_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    let bound = (gain / fan_in.sqrt()) as f32;
    let n = cout * cin * k * k;
    Tensor::new(&[cout, cin, k, k], (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("positive dims")
}

pub(crate) const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
pub(crate) const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3)

/// Randomly initialised parameters for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    crate::backbone::init(&mut p, &config.backbone, &mut rng);
    crate::heads::init(&mut p, config, &mut rng);
    p
}

/// Configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let params = init_params(&config, seed);
        Self { config, params }
    }

    /// Pairs loaded weights with `config`; every tensor the architecture needs
    /// must be present with the right shape, and nothing else.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let want = init_params(&config, 0);
        for (name, t) in want.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: got.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !want.contains(n)) {
            return Err(Error::InvalidArgument(format!("checkpoint tensor `{extra}` is not part of the model")));
        }
        Ok(Self { config, params })
    }
}
