//! Post-training vector quantization for dense weight matrices: channel
//! sensitivity assessment from gradient and activation statistics, structured
//! 2x2 mixed-precision bit allocation with a closed-form budget split,
//! k-means codebooks, and curvature-guided error compensation.

pub mod gaec;
pub mod linalg;
pub mod pipeline;
pub mod plan;
pub mod sensitivity;
pub mod vq;
