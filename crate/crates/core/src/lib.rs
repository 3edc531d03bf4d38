//! Cross-domain multi-modal few-shot object detection at desk scale.

pub mod aggregation;
pub mod attention;
pub mod data;
pub mod detr;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rectify;
pub mod tensor;

pub use error::{Error, Result};
