//! Displaced aggregation unit (DAU) convolution.
//!
//! A DAU filter is a sum of `K` normalised Gaussian blobs, each with its own
//! weight and sub-pixel displacement. Two execution paths are provided:
//!
//! * the *general* path rasterises every filter onto a dense canvas and runs a
//!   plain convolution ([`forward_naive`] / [`backward_naive`]); it supports a
//!   learnable per-unit standard deviation;
//! * the *efficient* path blurs each input channel once with a shared Gaussian
//!   and gathers the blurred maps at bilinearly interpolated displacements
//!   ([`forward_efficient`] / [`backward_efficient`]).
//!
//! Displacements use the convolution orientation: a unit at `mu = (2, 0)`
//! produces an output that is the (blurred) input moved down by two rows.

mod efficient;
mod gaussian;
mod naive;
mod params;
mod raster;
mod stencil;

pub use efficient::{backward_efficient, blur_planes, forward_efficient, ForwardCache, MuGradient};
pub use gaussian::{
    blur_radius, gaussian_1d, gaussian_deriv_kernels, gaussian_kernel, unit_gaussian, unit_kernels, UnitKernels,
};
pub use naive::{backward_naive, forward_naive, Rasterizer};
pub use params::{clamp_displacements, DauConfig, DauGrads, DauParams, Mode, Sigma, MIN_LEARNED_SIGMA};
pub use raster::{canvas_radius, rasterize_analytic, rasterize_frozen_stencil, rasterize_reference};
pub use stencil::BilinearStencil;
pub(crate) use params::clamp_slice;
