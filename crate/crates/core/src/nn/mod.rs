//! Layer descriptors, parameters, forward/backward passes and model files.

mod arch;
mod io;
mod model;

pub use arch::{ArchFamily, Block, LayerSpec, ModelArch};
pub use io::{file_fingerprint, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use model::{Gradients, Model, Params, TrainingContext};
