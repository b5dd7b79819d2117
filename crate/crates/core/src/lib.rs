pub mod attribution;
pub mod autograd;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod far;
pub mod gradcheck;
pub mod init;
pub mod mask;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod profiler;
pub mod prune;
pub mod runconfig;
pub mod tensor;
pub mod vit;

pub use autograd::{Graph, Var};
pub use config::{ModelConfig, Precision, Variant};
pub use error::{Error, Result};
pub use mask::{Direction, MaskSet, PruneMask};
pub use model::{replace_attention, ForwardOptions, Init, Model};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
