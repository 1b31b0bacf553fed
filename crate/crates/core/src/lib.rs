//! Multi-rate temporal mixture-of-experts for clip-level classification of
//! frame feature sequences.
//!
//! The pipeline for one clip of `T` frames:
//!
//! 1. [`rgsta`] compresses the frames into one pathway per rate `r`
//!    (length `T / r`) by keeping the highest-scored frame of each group of
//!    `r` and soft-merging the rest into it.
//! 2. [`dbi`] exchanges information between pathways through gated
//!    slow→fast (interpolate + project) and fast→slow (strided temporal
//!    convolution) updates.
//! 3. [`hmoe`] runs one transformer expert per pathway and reads the
//!    concatenated outputs with a single learnable global query.
//! 4. [`objectives`] combines classification, ranking, diversity and
//!    gate-balancing losses.
//!
//! Everything runs on a small float64 reverse-mode engine ([`autograd`]).

pub mod autograd;
pub mod checkpoint;
pub mod dbi;
pub mod error;
pub mod feature_io;
pub mod gradcheck;
pub mod hmoe;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rgsta;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
