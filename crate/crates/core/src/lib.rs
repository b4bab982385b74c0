//! MMCC-Net polyp segmentation on a small deterministic tensor core: dilated
//! and strided convolution routes fused over three stages, with losses,
//! metrics, data handling, and a training and experiment harness.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
