//! GRTN: a causal video denoiser built from gated recurrent fusion and
//! Euclidean-distance window attention, with the tensor engine, training
//! loop and evaluation harness it needs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod net;
pub mod params;
pub mod rsste;
pub mod tensor;

pub use autodiff::{Activation, Conv2dSpec, Graph, OrthoMode, Var};
pub use error::{Error, Result};
pub use net::{Alignment, GrtnConfig, GrtnParams};
pub use params::{ParamId, ParamStore};
pub use rsste::{AttentionKind, RssteConfig};
pub use tensor::{Element, Tensor};
