pub mod anchors;
pub mod backbone;
pub mod config;
pub mod crop;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tracker;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{AxisBox, BinaryMask, BoxStrategy, RotatedBox};
pub use io::{Image, SequenceData};
pub use config::RunConfig;
pub use model::{Model, ModelConfig, ParamSet, Variant};
pub use tensor::{Tape, Tensor, Var};
