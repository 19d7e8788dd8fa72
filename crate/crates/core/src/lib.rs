//! Image restoration with adaptive feature modification (AdaFM) layers.
//!
//! A small residual CNN is trained on a start degradation level, depthwise
//! AdaFM layers inserted into its residual blocks are then trained on an end
//! level with the base frozen, and intermediate levels are served by linearly
//! interpolating the AdaFM parameters with a single coefficient.

pub mod tensor;
pub mod data;
pub mod net;
pub mod modulation;
pub mod pipeline;
