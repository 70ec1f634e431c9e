//! File formats, task persistence, the annotation HTTP service and the
//! evaluation harness built on `cadkit-core`.

pub mod ablation;
pub mod dataset;
pub mod formats;
pub mod journal;
pub mod service;
pub mod tasks;
