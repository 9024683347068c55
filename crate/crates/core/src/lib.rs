//! Dual-refinement single-stage object detection at desk scale.
//!
//! The crate implements a small single-shot detector whose detection head
//! refines both its anchors and its feature sampling locations, the
//! temporal variant that propagates that refinement state across video
//! frames under a key-frame schedule, and everything needed to train and
//! evaluate the networks end to end: a reverse-mode autodiff tape over
//! dense f64 tensors, box geometry, matching and hard negative mining, the
//! multi-task loss, SGD, NMS post-processing, VOC-style evaluation, and a
//! deterministic synthetic dataset of moving shapes.

pub mod afw;
pub mod boxes;
pub mod conv;
pub mod data;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod postprocess;
pub mod reference;
pub mod report;
pub mod sampling;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use boxes::{BBox, BoxSet, OffsetCoding};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
