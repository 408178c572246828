//! Desk-scale two-stage vehicle detection on the CPU.
//!
//! Implements two classic detection pipelines end to end, small enough to
//! train on a laptop core in minutes:
//!
//! * **R-CNN**: class-independent region proposals, a warp-with-context CNN
//!   feature extractor, per-class linear SVM scoring, and closed-form ridge
//!   bounding-box regression.
//! * **Faster R-CNN**: a region proposal network (RPN) over shared
//!   convolutional features, an RoI-pooled detection head, and the 4-step
//!   alternating training schedule that ties both to one backbone.
//!
//! Supporting kit: a minimal trainable CNN engine with finite-difference
//! gradient checking ([`nnet`]), box geometry and NMS ([`geometry`]),
//! proposal generators ([`proposals`]), a PR/AP evaluation harness
//! ([`evalkit`]), dataset and model I/O plus a synthetic vehicle-scene
//! generator ([`data_io`]), and a CLI ([`cli`]).

pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evalkit;
pub mod faster_rcnn;
pub mod geometry;
pub mod model;
pub mod nnet;
pub mod proposals;
pub mod rcnn;
pub mod util;

pub use error::{Error, Result};
pub use geometry::{BBox, BoxDelta, ScoredBox};
