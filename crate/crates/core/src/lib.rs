//! Data-driven design and verification of neural-network state-feedback
//! controllers for unknown discrete-time LTI plants.

// openblas backs the LAPACK calls made by the SDP backend.
extern crate openblas_src;

pub mod cert;
pub mod error;
pub mod expert;
pub mod finetune;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod plant;
pub mod scenario;
pub mod sdp;
pub mod sector;
pub mod synthesis;
mod serde_util;

pub use error::{Error, Result};
