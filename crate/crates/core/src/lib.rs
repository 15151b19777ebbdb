//! Multi-slice reconstruction from incomplete measurements.
//!
//! Two modalities share one engine:
//!
//! - undersampled Cartesian MRI, where each slice of a complex volume is
//!   observed through a masked centered 2-D Fourier transform, and
//! - multi-slice 4D-STEM, where a scanned probe is transmitted through the
//!   slices with Fresnel propagation in between and only far-field
//!   intensities are recorded.
//!
//! Reconstruction combines an ancestral diffusion sampler driven by a
//! pluggable score model ([`diffusion::Denoiser`]) with physics-based
//! gradient / data-consistency steps. The sampler runs slice-partitioned
//! across worker lanes ([`partition`]) with counter-based noise streams, so
//! results do not depend on the worker count. Two drivers live in
//! [`inference`]: DART alternates one sampler step with one physics step,
//! DRIFT samples a bank of candidates, keeps the one most similar to the
//! measurements and then refines it.

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod container;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod external;
pub mod fft;
pub mod inference;
pub mod metrics;
pub mod mri;
pub mod noise;
pub mod partition;
pub mod pgm;
pub mod stem;
pub mod types;

pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use types::{ComplexVolume, DiffractionSet, KSpaceStack, MaskKind, ProbeParams, SamplingMask};
