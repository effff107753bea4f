//! Quantitative MR parameter-map reconstruction from undersampled k-space.
//!
//! The solver couples two low-rank tensor priors inside an ADMM loop:
//! spatial tensors built from groups of similar image patches, and
//! parametric tensors built from Hankel matrices of voxels that share a
//! tissue class. Around it sit the encoding operator, sampling-mask
//! generators, a mono-exponential fitter, a numerical phantom and the
//! usual image-quality metrics.

pub mod encoding;
pub mod error;
pub mod fitting;
pub mod io;
pub mod metrics;
pub mod parametric;
pub mod patching;
pub mod phantom;
pub mod sampling;
pub mod solver;
pub mod tensor;

pub use encoding::{CoilSensitivities, Grid, ImageSeries, KSpaceData, SamplingMask};
pub use error::{Error, Result};
pub use tensor::{ComplexMatrix, HosvdFactors, Mode, Tensor3};

pub use num_complex::Complex64;
