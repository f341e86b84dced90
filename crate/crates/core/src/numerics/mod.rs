//! Deterministic numeric primitives shared by every other module.

mod mmt;
mod project;
mod rng;
mod tensor;
mod wavelet;

pub use mmt::{decode_mmt, encode_mmt, read_mmt, write_mmt, MMT_MAGIC};
pub use project::{l2_norm, project_l2, project_linf};
pub use rng::RngStream;
pub use tensor::ImageTensor;
pub use wavelet::{
    apply_scale_mask, haar_dwt2, haar_idwt2, DetailBand, ScaleMask, Subband, WaveletPyramid,
};
