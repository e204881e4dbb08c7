//! Segmental recurrent neural network engine.
//!
//! A bidirectional LSTM encoder with hierarchical subsampling feeds a
//! zeroth-order segmental CRF. Training marginalizes over all
//! segmentations with exact log-domain dynamic programs; decoding runs a
//! joint Viterbi search or a marginal-hybrid recursion. Brute-force
//! enumeration in [`oracle`] checks all of it on small inputs.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod params;
pub mod segcrf;
pub mod selftest;
pub mod speedup;
pub mod trainer;

pub use config::{ModelConfig, RunConfig, SubsampleMode, TrainConfig};
pub use decoder::{decode_joint, decode_marginal_hybrid, DecodeMode, DecodeResult};
pub use error::{Error, Result};
pub use lattice::{
    collapse_labels, lattice_entry_count, validate_segmentation, FrameSequence, LabelSequence,
    ScoreLattice, Segmentation, Vocabulary,
};
pub use model::Model;
pub use params::ModelParams;
pub use segcrf::{build_score_lattice, log_clamped, log_partition};
