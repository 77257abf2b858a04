//! Multi-scale normalizing flow over label-probability maps: squeeze, then
//! steps of ActNorm, LU-parameterized 1×1 channel mix and affine coupling,
//! with half the channels factored out after every scale but the last.

mod checkpoint;
pub mod layers;
pub mod linalg;
mod model;

pub use checkpoint::FlowManifest;
pub use layers::{squeeze_tensor, unsqueeze_tensor, ActNorm, Coupling, Inv1x1};
pub use model::{FlowConfig, FlowModel, FlowStep, FlowTrace, Latent, ScaleBlock};
