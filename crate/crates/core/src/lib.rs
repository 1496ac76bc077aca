pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod training;

pub use error::{GemsError, Result};
pub use config::{profile, RunConfig};
pub use data::{Dataset, InteractionEvent};
pub use decoder::Fusion;
pub use eval::EvalReport;
pub use model::{GemsModel, Streams};
pub use quantizer::{Codebook, SemanticId, SidIndex};
