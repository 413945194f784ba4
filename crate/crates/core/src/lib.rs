//! All-in-one streaming/offline speech recognition model built from a shared
//! encoder, a label predictor and a multi-mode joiner.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod extlm;
pub mod graph;
pub mod joiner;
pub mod lattice;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod predictor;
pub mod tensor;
pub mod train;
pub use encoder::ChunkConfig;
pub use error::{Error, Result};
pub use lattice::{Mode, PosteriorLattice};
pub use model::{AioModel, ModelConfig};
pub use tensor::Tensor;
