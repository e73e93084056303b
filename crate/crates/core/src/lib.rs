//! One-shot adaptation of plane-conditioned radiance fields.
//!
//! A hypernetwork reads a handful of posed support images, predicts an
//! additive update for a shared radiance-field decoder, and the adapted
//! decoder renders novel views of the object. Everything needed to train and
//! evaluate that pipeline on a CPU lives here: a small reverse-mode engine,
//! ray sampling and compositing, image-plane features, the three decoder
//! families, the hypernetwork, the meta-trainer, metrics and file formats.

pub mod autograd;
pub mod error;
pub mod geometry;
pub mod hypernet;
pub mod io;
pub mod meta;
pub mod metrics;
pub mod par;
pub mod planes;
pub mod raster;
pub mod render;
pub mod target;

pub use error::{Error, Result};
