//! Cross-modal discrete hashing.
//!
//! Learns joint `{-1,+1}` codes for a paired image/sketch-token modality and a
//! free-hand sketch modality by alternating a closed-form dictionary update,
//! bit-wise discrete cyclic coordinate descent on the codes, and SGD on two
//! coupled encoders that share their sketch sub-network. Trained codes are
//! packed into 64-bit words and searched by popcount Hamming scans.
//!
//! Module map:
//! - [`numerics`]: dense row-major matrices, products, SPD solves.
//! - [`data`]: datasets, similarity matrices, class embeddings, file formats.
//! - [`optimizer`]: objective, dictionary update, bit updates, the epoch loop.
//! - [`hash`]: the coupled encoders, their training and encoding.
//! - [`index`]: packed code storage and Hamming search.
//! - [`eval`]: retrieval metrics and timing.

pub mod codes;
pub mod data;
pub mod error;
pub mod eval;
pub mod hash;
pub mod index;
pub mod io;
pub mod numerics;
pub mod optimizer;
pub mod rng;

pub use data::{FeatureDataset, SemanticEmbedding, SimilarityMatrix, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{MetricsReport, RelevanceJudgment};
pub use hash::{Activation, HashModelParams, HashTrainer, SgdConfig};
pub use index::{PackedCodeIndex, SearchHit};
pub use numerics::DenseMatrix;
pub use optimizer::{CodeMatrix, Dictionary, FitOutput, ObjectiveBreakdown, OptimizerConfig, Side};
