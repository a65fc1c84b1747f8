//! Calibrated adaptive teacher for unsupervised domain adaptation on 1-D
//! signal classification: domain-adversarial feature alignment, mean-teacher
//! self-training with curriculum pseudo-labeling, and in-loop post-hoc
//! calibration of the teacher's target predictions.

pub mod calibration;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pseudolabel;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{CatError, Result};
