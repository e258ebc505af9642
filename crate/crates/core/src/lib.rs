//! Long-document multi-label classification with chunked encoding and
//! per-label sequence attention.
//!
//! The pipeline: [`textprep`] normalizes and chunks text, [`encoder`] turns
//! each chunk into a vector and stacks them into a document matrix, [`sac`]
//! attends over the chunk vectors once per label and scores each label,
//! [`trainer`] fits everything with Adam on binary cross-entropy, and
//! [`metrics`] computes macro / micro precision, recall and F1.

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod metrics;
pub mod pipeline;
pub mod sac;
pub mod textprep;
pub mod trainer;
