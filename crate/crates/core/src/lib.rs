//! Continuous image representation as a sum of anisotropic 2D Gaussians.
//!
//! A [`GaussianField`] is fitted once per image ([`fitter`]) and can then be
//! rendered at any output size with the tile-based splatter in [`render`].

pub mod error;
pub mod field;
pub mod fitter;
pub mod format;
pub mod image;
pub mod metrics;
mod par;
pub mod prior;
pub mod render;
pub mod reparam;
pub mod rng;

pub use error::{Error, Result};
pub use field::{
    build_covariance, eval_field, eval_kernel, CovarianceParams, GaussianField, GaussianKernel, GridSpec,
    Normalization,
};
pub use fitter::{fit_image, FitConfig, FitMode, FitOutcome, FitReport};
pub use image::ImageBuffer;
pub use metrics::{psnr, ssim, ChannelMode, MetricConfig, Psnr};
pub use par::is_parallel;
pub use prior::{sample_dictionary, KernelDictionary, PriorModel};
pub use render::{render, render_backward, OutputSize, RenderMode, RenderRequest};
