//! Flat `key=value` run configuration shared by every command.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::metrics::ResetConfig;
use crate::model::ModelConfig;
use crate::synth::{Jitter, SceneConfig, ShapeFamily};
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

/// Synthetic data generation and pair sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub sequences: usize,
    pub length: usize,
    pub width: usize,
    pub height: usize,
    /// Training pairs drawn from the sequences.
    pub pairs: usize,
    pub jitter: bool,
    /// Fixed shape family for every scene (`None` draws one per scene).
    pub shape: Option<ShapeFamily>,
    /// Fixed distractor count (`None` draws one per scene).
    pub distractors: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 10,
            length: 40,
            width: 256,
            height: 256,
            pairs: 200,
            jitter: true,
            shape: None,
            distractors: None,
        }
    }
}

impl DataConfig {
    pub fn jitter(&self) -> Jitter {
        if self.jitter {
            Jitter::DEFAULT
        } else {
            Jitter::OFF
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    pub reset: ResetConfig,
    /// Boundary tolerance in pixels (`None` = from the frame diagonal).
    pub f_tolerance: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub track: TrackerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            track: TrackerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data, initialisation and sampling"),
    ("variant", "head layout: 2b (score+mask) or 3b (score+box+mask)"),
    ("backbone.widths", "channels of the four backbone stages"),
    ("backbone.adjust_channels", "channels after the adjust layers"),
    ("backbone.stage_norm", "instance normalisation after every stage conv"),
    ("backbone.adjust_norm", "instance normalisation after the adjust layers"),
    ("heads.hidden", "width of the hidden layer of every head"),
    ("heads.mask_size", "side of the per-RoW mask"),
    ("anchors.ratios", "anchor aspect ratios w/h; k is their count"),
    ("anchors.side", "side of the ratio-1 anchor in search-patch pixels"),
    ("refine.channels", "channels of the refinement stages"),
    ("refine.stages", "upsampling stages of the refinement module (0-3)"),
    ("loss.lambda1", "weight of the mask loss"),
    ("loss.lambda2", "weight of the score (3b) or similarity (2b) loss"),
    ("loss.lambda3", "weight of the box loss"),
    ("loss.mask_mode", "mask loss normalisation: strict or per_positive"),
    ("loss.score_weighting", "score term averaging: mean or balanced"),
    ("loss.refine_weight", "weight of the refined-mask term (0 = off)"),
    ("loss.label_radius", "positive radius in cells for two-branch labels"),
    ("train.steps", "SGD steps"),
    ("train.lr_start", "learning rate at step 0"),
    ("train.lr_peak", "learning rate at the end of the warmup"),
    ("train.lr_end", "learning rate at the last step"),
    ("train.warmup_frac", "fraction of the steps spent warming up"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 weight decay"),
    ("train.clip_norm", "gradient norm clip (0 = off)"),
    ("train.clip_per_tensor", "clip each tensor's gradient separately"),
    ("train.lr_mults", "prefix:multiplier learning-rate scales, comma separated"),
    ("train.calibration_pairs", "pairs used to calibrate the head normalisation"),
    ("train.recalibrate_every", "recalibration period in steps (0 = once)"),
    ("data.sequences", "synthetic sequences written by synth"),
    ("data.length", "frames per sequence"),
    ("data.width", "frame width"),
    ("data.height", "frame height"),
    ("data.pairs", "training pairs sampled from the sequences"),
    ("data.jitter", "translation and scale jitter on training pairs"),
    ("data.shape", "shape family: random, rectangle, ellipse or polygon"),
    ("data.distractors", "distractors per scene: random or a count"),
    ("track.box_strategy", "box from the mask: minmax, mbr or opt"),
    ("track.mask_threshold", "probability threshold of the output mask"),
    ("track.window_influence", "Hann window blended into the scores (0 = off)"),
    ("eval.skip", "frames skipped after a failure"),
    ("eval.burn_in", "frames after a re-initialisation excluded from accuracy"),
    ("eval.f_tolerance", "boundary tolerance in pixels: auto or a count"),
];

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), ToString::to_string)
}

impl RunConfig {
    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        Some(match key {
            "seed" => self.seed.to_string(),
            "variant" => m.variant.as_str().to_string(),
            "backbone.widths" => join(&m.backbone.stages.iter().map(|s| s.channels).collect::<Vec<_>>()),
            "backbone.adjust_channels" => m.backbone.adjust_channels.to_string(),
            "backbone.stage_norm" => m.backbone.stage_norm.to_string(),
            "backbone.adjust_norm" => m.backbone.adjust_norm.to_string(),
            "heads.hidden" => m.head_hidden.to_string(),
            "heads.mask_size" => m.mask_size.to_string(),
            "anchors.ratios" => join(&m.anchors.ratios),
            "anchors.side" => m.anchors.side.to_string(),
            "refine.channels" => m.refine.channels.to_string(),
            "refine.stages" => m.refine.stages.to_string(),
            "loss.lambda1" => t.weights.mask.to_string(),
            "loss.lambda2" => t.weights.score.to_string(),
            "loss.lambda3" => t.weights.boxes.to_string(),
            "loss.mask_mode" => t.mask_mode.as_str().to_string(),
            "loss.score_weighting" => t.score_weighting.as_str().to_string(),
            "loss.refine_weight" => t.refine_weight.to_string(),
            "loss.label_radius" => t.label_radius.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.lr_start" => t.lr_start.to_string(),
            "train.lr_peak" => t.lr_peak.to_string(),
            "train.lr_end" => t.lr_end.to_string(),
            "train.warmup_frac" => t.warmup_frac.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.clip_per_tensor" => t.clip_per_tensor.to_string(),
            "train.lr_mults" => t
                .lr_mults
                .iter()
                .map(|(p, v)| format!("{p}:{v}"))
                .collect::<Vec<_>>()
                .join(","),
            "train.calibration_pairs" => t.calibration_pairs.to_string(),
            "train.recalibrate_every" => t.recalibrate_every.to_string(),
            "data.sequences" => d.sequences.to_string(),
            "data.length" => d.length.to_string(),
            "data.width" => d.width.to_string(),
            "data.height" => d.height.to_string(),
            "data.pairs" => d.pairs.to_string(),
            "data.jitter" => d.jitter.to_string(),
            "data.shape" => d.shape.map_or("random", ShapeFamily::as_str).to_string(),
            "data.distractors" => show_optional(&d.distractors, "random"),
            "track.box_strategy" => self.track.box_strategy.as_str().to_string(),
            "track.mask_threshold" => self.track.mask_threshold.to_string(),
            "track.window_influence" => self.track.window_influence.to_string(),
            "eval.skip" => self.eval.reset.skip.to_string(),
            "eval.burn_in" => self.eval.reset.burn_in.to_string(),
            "eval.f_tolerance" => show_optional(&self.eval.f_tolerance, "auto"),
            _ => return None,
        })
    }

    /// Sets one key; unknown keys and unparsable values are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "variant" => m.variant = value.parse()?,
            "backbone.widths" => {
                let widths: Vec<usize> = parse_list(key, value)?;
                if widths.len() != 4 {
                    return Err(Error::Config(format!("`{key}`: expected 4 widths, got {}", widths.len())));
                }
                let mut b = BackboneConfig::with_widths(&widths, m.backbone.adjust_channels);
                b.stage_norm = m.backbone.stage_norm;
                b.adjust_norm = m.backbone.adjust_norm;
                m.backbone = b;
            }
            "backbone.adjust_channels" => m.backbone.adjust_channels = parse(key, value)?,
            "backbone.stage_norm" => m.backbone.stage_norm = parse_bool(key, value)?,
            "backbone.adjust_norm" => m.backbone.adjust_norm = parse_bool(key, value)?,
            "heads.hidden" => m.head_hidden = parse(key, value)?,
            "heads.mask_size" => m.mask_size = parse(key, value)?,
            "anchors.ratios" => m.anchors.ratios = parse_list(key, value)?,
            "anchors.side" => m.anchors.side = parse(key, value)?,
            "refine.channels" => m.refine.channels = parse(key, value)?,
            "refine.stages" => m.refine.stages = parse(key, value)?,
            "loss.lambda1" => t.weights.mask = parse(key, value)?,
            "loss.lambda2" => t.weights.score = parse(key, value)?,
            "loss.lambda3" => t.weights.boxes = parse(key, value)?,
            "loss.mask_mode" => t.mask_mode = value.parse()?,
            "loss.score_weighting" => t.score_weighting = value.parse()?,
            "loss.refine_weight" => t.refine_weight = parse(key, value)?,
            "loss.label_radius" => t.label_radius = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.lr_start" => t.lr_start = parse(key, value)?,
            "train.lr_peak" => t.lr_peak = parse(key, value)?,
            "train.lr_end" => t.lr_end = parse(key, value)?,
            "train.warmup_frac" => t.warmup_frac = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            "train.clip_per_tensor" => t.clip_per_tensor = parse_bool(key, value)?,
            "train.lr_mults" => {
                t.lr_mults = value
                    .split(',')
                    .map(str::trim)
                    .filter(|e| !e.is_empty())
                    .map(|e| {
                        let (p, v) = e
                            .rsplit_once(':')
                            .ok_or_else(|| Error::Config(format!("`{key}`: expected prefix:multiplier, got `{e}`")))?;
                        Ok((p.to_string(), parse(key, v)?))
                    })
                    .collect::<Result<_>>()?
            }
            "train.calibration_pairs" => t.calibration_pairs = parse(key, value)?,
            "train.recalibrate_every" => t.recalibrate_every = parse(key, value)?,
            "data.sequences" => d.sequences = parse(key, value)?,
            "data.length" => d.length = parse(key, value)?,
            "data.width" => d.width = parse(key, value)?,
            "data.height" => d.height = parse(key, value)?,
            "data.pairs" => d.pairs = parse(key, value)?,
            "data.jitter" => d.jitter = parse_bool(key, value)?,
            "data.shape" => d.shape = if value == "random" { None } else { Some(value.parse()?) },
            "data.distractors" => d.distractors = parse_optional(key, value, "random")?,
            "track.box_strategy" => self.track.box_strategy = value.parse()?,
            "track.mask_threshold" => self.track.mask_threshold = parse(key, value)?,
            "track.window_influence" => self.track.window_influence = parse(key, value)?,
            "eval.skip" => self.eval.reset.skip = parse(key, value)?,
            "eval.burn_in" => self.eval.reset.burn_in = parse(key, value)?,
            "eval.f_tolerance" => self.eval.f_tolerance = parse_optional(key, value, "auto")?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key and its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&(k, _)| (k, self.get(k).expect("every listed key is readable")))
            .collect()
    }

    /// The fully resolved configuration, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Defaults overridden by the keys in `text`.
    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text, path)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.backbone.validate()?;
        m.anchors.validate()?;
        m.refine.validate()?;
        if m.head_hidden == 0 || m.mask_size == 0 {
            return Err(Error::Config("heads.hidden and heads.mask_size must be >= 1".into()));
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.validate()?;
        let d = &self.data;
        if d.sequences == 0 || d.length < 2 || d.pairs == 0 {
            return Err(Error::Config("data needs >= 1 sequence of >= 2 frames and >= 1 pair".into()));
        }
        if !(0.0..=1.0).contains(&self.track.mask_threshold) || !(0.0..=1.0).contains(&self.track.window_influence) {
            return Err(Error::Config("track.mask_threshold and track.window_influence must lie in [0, 1]".into()));
        }
        if self.eval.f_tolerance == Some(0) {
            return Err(Error::Config("eval.f_tolerance must be >= 1 or auto".into()));
        }
        self.scene(0).validate()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Seed of scene `index`; distinct run seeds give disjoint scene streams.
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1 << 32).wrapping_add(index as u64)
    }

    /// Scene `index` of the dataset: randomized from its seed, with the
    /// configured overrides applied.
    pub fn scene(&self, index: usize) -> SceneConfig {
        let d = &self.data;
        let mut s = SceneConfig::random(self.scene_seed(index), d.width, d.height);
        if let Some(shape) = d.shape {
            s.shape = shape;
        }
        if let Some(n) = d.distractors {
            s.distractors = n;
        }
        s
    }
}
