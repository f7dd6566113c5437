//! Property-neuron analysis for Transformer feed-forward layers.
//!
//! The pipeline turns per-frame FFN activations and frame labels into
//! co-occurrence statistics ([`stats`]), binary activation patterns
//! ([`patterns`]), embeddings and cluster scores ([`geometry`]), and group /
//! property neuron sets ([`neurons`]). [`surgery`] prunes or erases neurons in
//! FFN weights, and [`encoder`] plus [`synth`] provide a small encoder and
//! planted fixtures to run everything end to end.

pub mod config;
pub mod encoder;
pub mod error;
pub mod ffn;
pub mod geometry;
pub mod labels;
pub mod neurons;
pub mod patterns;
pub mod probe;
pub mod scan;
pub mod stats;
pub mod surgery;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use ffn::{Activation, FfnWeights};
pub use labels::{FrameRecord, Gender, PitchBin, PitchBins};
pub use neurons::{GroupSpec, Property, PropertyNeuronResult};
pub use patterns::{ActivationPatternSet, NeuronSet};
pub use stats::{Condition, CooccurrenceTable, StatKey};
pub use surgery::PruneMask;
pub use tensor::{DType, Tensor, TensorArchive};
