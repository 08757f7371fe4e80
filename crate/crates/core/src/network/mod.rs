//! Network configuration, construction, inference and serialization.

mod config;
pub mod format;
mod input;
mod model;

pub use config::{LevelSpec, NetworkConfig};
pub use format::{load_model, save_model};
pub use input::{add_intensity_channel, load_image, preprocess, Normalization};
pub use model::{build_model, forward, global_avg_pool, Decoder, Model};

pub(crate) use format::write_atomic;
