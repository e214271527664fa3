//! Pedestrian detection downstream of a region proposal network.
//!
//! The crate covers everything after the convolutional backbone:
//!
//! - [`geometry`]: boxes, IoU, anchor grids, box deltas and NMS.
//! - [`tensors`]: dilated convolution, max pooling, the à-trous stage,
//!   RoI pooling and feature concatenation.
//! - [`proposals`]: anchor labeling, minibatch sampling, proposal decoding,
//!   selection and the recall-vs-IoU evaluator.
//! - [`forest`]: a RealBoost decision forest trained in bootstrapped stages
//!   with hard-negative mining, seeded by the proposal score.
//! - [`eval`]: reasonable-subset filtering, greedy matching with ignore
//!   regions, FPPI/miss-rate curves and log-average miss rate.
//! - [`synth`]: deterministic synthetic scenes, a fixed toy backbone and an
//!   oracle proposer used for desk-scale experiments.
//! - [`pipeline`]: run configuration, file codecs and the stages behind the
//!   `rpnbf` binary.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod forest;
pub mod geometry;
pub mod pipeline;
pub mod proposals;
pub mod synth;
pub mod tensors;

pub use error::{Error, Result};
pub use geometry::Box2;
