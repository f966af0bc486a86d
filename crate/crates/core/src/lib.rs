//! Weakly-labelled semi-supervised sound event detection at desk scale:
//! log-mel features, a gated CRNN with attention pooling, virtual
//! adversarial training, segment-level alignment refinement of the
//! decoding parameters, and collar-based event scoring.

pub mod autodiff;
pub mod data_io;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gcrnn;
pub mod params;
pub mod postproc;
pub mod salr;
pub mod tensor;
pub mod train;
pub mod vat;

pub use error::{Error, Result};
