//! Training-free multi-style attention control kernels.
//!
//! The crate covers region-wise AdaIN initialization ([`adain`]), query
//! anchoring ([`lqa`]), closed-form attention mass allocation ([`lama`]),
//! sharpness-aware temperature scaling ([`sts`]), frequency-domain detail
//! injection ([`ddi`]), a synthetic end-to-end step ([`pipeline`]), the
//! temperature calibration generator ([`calibration`]) and analysis helpers
//! ([`diagnostics`]). Everything runs on synthetic features; no diffusion
//! model is involved.

pub mod adain;
pub mod calibration;
pub mod ddi;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod lama;
pub mod lqa;
pub mod masks;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod sts;
pub mod tensor;

pub use error::{MastError, Result};
pub use tensor::{ComplexTensor, Matrix, Tensor};
