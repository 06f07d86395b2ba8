//! Gaussian field data model and exact pointwise evaluation.
//!
//! Coordinates are measured in LR-pixel units: LR pixel `(m, n)` covers
//! `[m, m + 1) x [n, n + 1)` and has its center at `(m + 0.5, n + 0.5)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Determinants at or below this are treated as singular.
pub const DET_EPSILON: f64 = 1e-12;

/// Kernels may drift this far (in LR pixels) outside the grid.
pub const POSITION_MARGIN: f64 = 1.0;

/// Amplitude convention for a kernel's prefactor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `1 / (2π |Σ|)`.
    #[default]
    AsPrinted,
    /// `1 / (2π |Σ|^½)`, the normalized bivariate density.
    Statistical,
}

impl Normalization {
    /// Power applied to `|Σ|` in the prefactor denominator.
    pub fn det_power(self) -> f64 {
        match self {
            Normalization::AsPrinted => 1.0,
            Normalization::Statistical => 0.5,
        }
    }

    pub fn amplitude(self, det: f64) -> f64 {
        match self {
            Normalization::AsPrinted => 1.0 / (2.0 * PI * det),
            Normalization::Statistical => 1.0 / (2.0 * PI * det.sqrt()),
        }
    }
}

/// The three free entries of a symmetric 2x2 covariance matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl CovarianceParams {
    pub fn new(var_x: f64, var_y: f64, cov_xy: f64) -> Result<Self> {
        let p = Self {
            var_x,
            var_y,
            cov_xy,
        };
        p.validate()?;
        Ok(p)
    }

    pub const fn identity() -> Self {
        Self {
            var_x: 1.0,
            var_y: 1.0,
            cov_xy: 0.0,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.var_x * self.var_y - self.cov_xy * self.cov_xy
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.var_x.is_finite() && self.var_y.is_finite() && self.cov_xy.is_finite();
        if !finite || self.var_x <= 0.0 || self.var_y <= 0.0 || self.determinant() <= DET_EPSILON {
            return Err(Error::NotPositiveDefinite {
                var_x: self.var_x,
                var_y: self.var_y,
                cov_xy: self.cov_xy,
            });
        }
        Ok(())
    }

    /// Upper-triangle of `Σ⁻¹` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub fn inverse(&self) -> Result<[f64; 3]> {
        self.validate()?;
        let det = self.determinant();
        Ok([self.var_y / det, -self.cov_xy / det, self.var_x / det])
    }

    /// Larger eigenvalue of `Σ`.
    pub fn max_eigenvalue(&self) -> f64 {
        max_eigenvalue(self.var_x, self.cov_xy, self.var_y)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.var_x, self.var_y, self.cov_xy]
    }
}

pub(crate) fn max_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mid = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    mid + (half_diff * half_diff + b * b).sqrt()
}

/// Builds `Σ = [[σx², ρσxσy], [ρσxσy, σy²]]`, rejecting non positive-definite input.
pub fn build_covariance(p: &CovarianceParams) -> Result<[[f64; 2]; 2]> {
    p.validate()?;
    Ok([[p.var_x, p.cov_xy], [p.cov_xy, p.var_y]])
}

/// One additive term of the continuous field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub mu_x: f64,
    pub mu_y: f64,
    pub cov: CovarianceParams,
    pub color: [f64; 3],
}

impl GaussianKernel {
    pub fn new(mu_x: f64, mu_y: f64, cov: CovarianceParams, color: [f64; 3]) -> Result<Self> {
        let k = Self {
            mu_x,
            mu_y,
            cov,
            color,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_x.is_finite() && self.mu_y.is_finite()) {
            return Err(Error::NonFiniteInput("kernel position"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidColor(self.color));
        }
        self.cov.validate()
    }
}

/// Evaluates one kernel at `(x, y)` under the default amplitude convention.
pub fn eval_kernel(k: &GaussianKernel, x: f64, y: f64) -> Result<[f64; 3]> {
    eval_kernel_with(k, x, y, Normalization::AsPrinted)
}

pub fn eval_kernel_with(
    k: &GaussianKernel,
    x: f64,
    y: f64,
    norm: Normalization,
) -> Result<[f64; 3]> {
    k.cov.validate()?;
    let weight = kernel_weight(k, x, y, norm);
    Ok([
        k.color[0] * weight,
        k.color[1] * weight,
        k.color[2] * weight,
    ])
}

/// Scalar `A · exp(-½ dᵀΣ⁻¹d)`; assumes a validated covariance.
#[inline]
pub(crate) fn kernel_weight(k: &GaussianKernel, x: f64, y: f64, norm: Normalization) -> f64 {
    let det = k.cov.determinant();
    let dx = x - k.mu_x;
    let dy = y - k.mu_y;
    let q = (k.cov.var_y * dx * dx - 2.0 * k.cov.cov_xy * dx * dy + k.cov.var_x * dy * dy) / det;
    norm.amplitude(det) * (-0.5 * q).exp()
}

/// LR grid the field was built on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: u32,
    pub height: u32,
    pub kernels_per_pixel: u32,
}

impl GridSpec {
    pub fn new(width: u32, height: u32, kernels_per_pixel: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionError(format!(
                "grid {width}x{height} must be non-empty"
            )));
        }
        let side = (kernels_per_pixel as f64).sqrt().round() as u32;
        if kernels_per_pixel == 0 || side * side != kernels_per_pixel {
            return Err(Error::InvalidConfig(format!(
                "kernels per pixel must be a positive perfect square, got {kernels_per_pixel}"
            )));
        }
        Ok(Self {
            width,
            height,
            kernels_per_pixel,
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.width as usize * self.height as usize * self.kernels_per_pixel as usize
    }

    /// LR pixel `(m, n)` that owns kernel `index`.
    pub fn home_pixel(&self, index: usize) -> (usize, usize) {
        let pixel = index / self.kernels_per_pixel as usize;
        (pixel % self.width as usize, pixel / self.width as usize)
    }

    /// Initial kernel position: an even sub-grid inside the owning pixel.
    /// One kernel sits at the center, four at the quarter points.
    pub fn init_position(&self, index: usize) -> [f64; 2] {
        let side = (self.kernels_per_pixel as f64).sqrt().round() as usize;
        let (m, n) = self.home_pixel(index);
        let sub = index % self.kernels_per_pixel as usize;
        let (sx, sy) = (sub % side, sub / side);
        let step = 1.0 / side as f64;
        [
            m as f64 + (sx as f64 + 0.5) * step,
            n as f64 + (sy as f64 + 0.5) * step,
        ]
    }
}

/// An ordered collection of kernels over an LR grid.
///
/// Immutable after construction; every kernel has been validated.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    kernels: Vec<GaussianKernel>,
    lr_width: u32,
    lr_height: u32,
    kernels_per_pixel: u32,
}

impl GaussianField {
    pub fn new(
        kernels: Vec<GaussianKernel>,
        lr_width: u32,
        lr_height: u32,
        kernels_per_pixel: u32,
    ) -> Result<Self> {
        if lr_width == 0 || lr_height == 0 || kernels_per_pixel == 0 {
            return Err(Error::DimensionError(format!(
                "field grid {lr_width}x{lr_height} with {kernels_per_pixel} kernels per pixel"
            )));
        }
        let (xmax, ymax) = (
            lr_width as f64 + POSITION_MARGIN,
            lr_height as f64 + POSITION_MARGIN,
        );
        for (index, k) in kernels.iter().enumerate() {
            k.validate()?;
            if !(-POSITION_MARGIN..=xmax).contains(&k.mu_x)
                || !(-POSITION_MARGIN..=ymax).contains(&k.mu_y)
            {
                return Err(Error::PositionOutOfBounds {
                    index,
                    x: k.mu_x,
                    y: k.mu_y,
                });
            }
        }
        Ok(Self {
            kernels,
            lr_width,
            lr_height,
            kernels_per_pixel,
        })
    }

    pub fn kernels(&self) -> &[GaussianKernel] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn lr_width(&self) -> u32 {
        self.lr_width
    }

    pub fn lr_height(&self) -> u32 {
        self.lr_height
    }

    pub fn kernels_per_pixel(&self) -> u32 {
        self.kernels_per_pixel
    }

    pub fn into_kernels(self) -> Vec<GaussianKernel> {
        self.kernels
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<[f64; 3]> {
        eval_field(self, x, y)
    }
}

/// Exact sum of every kernel at `(x, y)`; no truncation.
pub fn eval_field(f: &GaussianField, x: f64, y: f64) -> Result<[f64; 3]> {
    eval_field_with(f, x, y, Normalization::AsPrinted)
}

pub fn eval_field_with(
    f: &GaussianField,
    x: f64,
    y: f64,
    norm: Normalization,
) -> Result<[f64; 3]> {
    if f.is_empty() {
        return Err(Error::EmptyField);
    }
    Ok(sum_kernels(&f.kernels, x, y, norm))
}

#[inline]
pub(crate) fn sum_kernels(kernels: &[GaussianKernel], x: f64, y: f64, norm: Normalization) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for k in kernels {
        let w = kernel_weight(k, x, y, norm);
        acc[0] += k.color[0] * w;
        acc[1] += k.color[1] * w;
        acc[2] += k.color[2] * w;
    }
    acc
}
