//! Mixed-modality transformer engine with visual-computation pruning.
//!
//! A sequence is a 2D grid of visual tokens followed by text tokens. Four
//! static knobs cut the cost of the visual part while leaving text
//! computation intact:
//!
//! 1. windowed visual attention (visual queries see nearby visual keys only),
//! 2. dropping inactive heads for visual queries,
//! 3. a reduced FFN neuron set for visual rows,
//! 4. text-only layers, where visual rows skip the layer entirely.
//!
//! [`flops`] prices any configuration analytically, [`analysis`] measures
//! attention redundancy on captured weights, and
//! [`pruning::solve_budget`] enumerates configurations under a FLOPs budget.

pub mod analysis;
pub mod error;
pub mod flops;
pub mod layout;
pub mod model;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{DistanceMetric, TokenLayout};
pub use model::{AttentionRecord, FfnKind, ForwardOutput, HeadRecord, ModelConfig, ModelWeights};
pub use pruning::{HeadActivity, PruneConfig};
pub use tensor::{AdditiveMask, Matrix, Precision, Real};
