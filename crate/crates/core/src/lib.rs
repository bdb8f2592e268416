//! Semi-supervised object detection with a Mean Teacher and an
//! IoU-classification branch that filters pseudo-labels by predicted
//! localization quality.
//!
//! Everything runs on the CPU in f64 through a small reverse-mode tape
//! ([`autograd`]), on procedurally generated scenes ([`synthdata`]).

pub mod autograd;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod synthdata;
pub mod trainer;
