//! Text-to-audio grounding with a query graph and cross-gating attention.
//!
//! The pipeline turns a mono clip into log-mel features ([`audio`]), encodes
//! them with a CRNN ([`encoder`]), embeds the query ([`text`]) and refines the
//! word features with a positional query graph ([`graph`]). Snippet-specific
//! query features and mutual gating ([`cross_modal`]) feed a distance-based
//! similarity that is thresholded into event segments ([`head`]). [`metrics`]
//! scores segment predictions and [`harness`] ties everything into datasets,
//! training, checkpoints and inference.

pub mod audio;
pub mod cross_modal;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
