//! U-shaped segmentation network with direction-adaptive RWKV mixing.
//!
//! The crate is self-contained: [`tensor`] provides dense arrays and a
//! reverse-mode tape, [`rwkv`], [`quadscan`], [`darm`] and [`sase`] build the
//! network blocks on top of it, and [`model`] assembles the encoder–decoder.
//! [`metrics`], [`data`], [`train`] and [`erf`] cover evaluation, synthetic
//! data, optimization and receptive-field analysis.

pub mod ablation;
pub mod checkpoint;
pub mod darm;
pub mod data;
pub mod erf;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quadscan;
pub mod rwkv;
pub mod sase;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
