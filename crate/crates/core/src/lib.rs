//! Single-shot detection heads over MobileNet-v1: the pooling pyramid
//! network (max-pool pyramid plus one shared box predictor) and the vanilla
//! SSD baseline, with parameter/FLOP accounting and a small training and
//! evaluation harness on synthetic scenes.

pub mod analyzer;
pub mod backbone;
pub mod boxes;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod head;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
