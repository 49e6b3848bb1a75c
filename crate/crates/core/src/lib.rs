//! Few-shot prompt learning for OOD detection with gradient alignment.
//!
//! A frozen surrogate text encoder maps learnable context tokens plus a class
//! embedding to unit text features. Training minimizes cross-entropy on
//! global image features plus an entropy-maximizing regularizer on
//! background-like regions, and resolves conflicts between the two gradients
//! by projecting the ID gradient when the angle is obtuse.

pub mod align;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use align::{align, classify, AlignBranch, ConflictStats, FlatGradient};
pub use data::{FeatureBank, RunConfig, Split, SynthConfig};
pub use error::{Error, ErrorKind, Result};
pub use model::{EncoderSpec, FrozenTextEncoder, PromptParams, TextFeatures};
pub use numerics::SeededRng;
pub use trainer::{Strategy, TrainConfig};
