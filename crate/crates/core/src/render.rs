//! Tile-based splatting rasterizer, exact per-pixel oracle renderer and the
//! analytic backward pass.
//!
//! HR pixel `(i, j)` samples the continuous field at `((i + 0.5) / sx, (j + 0.5) / sy)`
//! in LR-pixel coordinates. Accumulation is in `f64` and unclamped.

use crate::error::{Error, Result};
use crate::field::{max_eigenvalue, GaussianField, GaussianKernel, Normalization};
use crate::image::ImageBuffer;
use crate::par;

pub const DEFAULT_R_CUT: f64 = 3.0;
pub const DEFAULT_TILE_SIZE: usize = 16;
pub const DEFAULT_MAX_DIM: u32 = 16384;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputSize {
    /// HR pixels per LR pixel; output is `round(s·W₀) x round(s·H₀)`.
    Scale(f64),
    /// Explicit output size; the LR frame is divided uniformly along each axis.
    Dims { width: u32, height: u32 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenderMode {
    /// Truncated, tile-binned splatting.
    #[default]
    Fast,
    /// Every kernel at every pixel via [`crate::field::eval_field`].
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderRequest {
    pub size: OutputSize,
    /// Truncation radius in standard deviations.
    pub r_cut: f64,
    pub mode: RenderMode,
    pub normalization: Normalization,
    pub tile_size: usize,
    /// Neumaier-compensated accumulation in fast mode.
    pub compensated: bool,
    /// Largest permitted output width or height.
    pub max_dim: u32,
}

impl RenderRequest {
    pub fn scale(s: f64) -> Self {
        Self::with_size(OutputSize::Scale(s))
    }

    pub fn dims(width: u32, height: u32) -> Self {
        Self::with_size(OutputSize::Dims { width, height })
    }

    fn with_size(size: OutputSize) -> Self {
        Self {
            size,
            r_cut: DEFAULT_R_CUT,
            mode: RenderMode::Fast,
            normalization: Normalization::AsPrinted,
            tile_size: DEFAULT_TILE_SIZE,
            compensated: false,
            max_dim: DEFAULT_MAX_DIM,
        }
    }

    pub fn mode(mut self, mode: RenderMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn r_cut(mut self, r_cut: f64) -> Self {
        self.r_cut = r_cut;
        self
    }

    pub fn normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    pub fn tile_size(mut self, t: usize) -> Self {
        self.tile_size = t;
        self
    }

    pub fn compensated(mut self, on: bool) -> Self {
        self.compensated = on;
        self
    }

    pub fn max_dim(mut self, cap: u32) -> Self {
        self.max_dim = cap;
        self
    }

    /// Resolves the output canvas for `field`, validating the request.
    pub fn canvas(&self, field: &GaussianField) -> Result<Canvas> {
        if !(self.r_cut.is_finite() && self.r_cut >= 1.0) {
            return Err(Error::InvalidRequest(format!(
                "truncation radius must be >= 1, got {}",
                self.r_cut
            )));
        }
        if self.tile_size == 0 {
            return Err(Error::InvalidRequest("tile size must be positive".into()));
        }
        let (w0, h0) = (field.lr_width() as f64, field.lr_height() as f64);
        let (width, height, sx, sy) = match self.size {
            OutputSize::Scale(s) => {
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::InvalidRequest(format!("scale must be positive, got {s}")));
                }
                let w = (s * w0).round();
                let h = (s * h0).round();
                if w < 1.0 || h < 1.0 {
                    return Err(Error::InvalidRequest(format!(
                        "scale {s} produces an empty {w}x{h} output"
                    )));
                }
                (w, h, s, s)
            }
            OutputSize::Dims { width, height } => {
                if width == 0 || height == 0 {
                    return Err(Error::InvalidRequest(format!(
                        "output dims {width}x{height} must be at least 1x1"
                    )));
                }
                let (w, h) = (width as f64, height as f64);
                (w, h, w / w0, h / h0)
            }
        };
        if width > self.max_dim as f64 || height > self.max_dim as f64 {
            return Err(Error::DimensionOverflow {
                width: width as u64,
                height: height as u64,
                cap: self.max_dim,
            });
        }
        Ok(Canvas {
            width: width as usize,
            height: height as usize,
            scale_x: sx,
            scale_y: sy,
        })
    }
}

/// Resolved output grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl Canvas {
    /// LR-frame coordinate sampled by HR pixel `(i, j)`.
    #[inline]
    pub fn sample_point(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) / self.scale_x,
            (j as f64 + 0.5) / self.scale_y,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A kernel expressed in HR-pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedKernel {
    pub center: [f64; 2],
    /// Truncation radius in HR pixels.
    pub radius: f64,
    /// `(a, b, c)` of the HR-frame inverse covariance `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Always zero: additive composition has no draw order.
    pub depth: f64,
    /// Prefactor from the LR-frame determinant.
    pub amplitude: f64,
}

impl ProjectedKernel {
    /// Inclusive pixel range `(x0, x1, y0, y1)` whose centers may fall inside
    /// the truncation disk, clipped to the canvas.
    fn pixel_range(&self, canvas: &Canvas) -> Option<(usize, usize, usize, usize)> {
        let axis = |c: f64, n: usize| -> Option<(usize, usize)> {
            let lo = (c - self.radius - 0.5).ceil().max(0.0);
            let hi = (c + self.radius - 0.5).floor().min(n as f64 - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let (x0, x1) = axis(self.center[0], canvas.width)?;
        let (y0, y1) = axis(self.center[1], canvas.height)?;
        Some((x0, x1, y0, y1))
    }

    /// HR offset from the center to pixel `(i, j)`, or `None` outside the disk.
    #[inline]
    fn offset_if_covered(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        let dx = i as f64 + 0.5 - self.center[0];
        let dy = j as f64 + 0.5 - self.center[1];
        (dx * dx + dy * dy <= self.radius * self.radius).then_some((dx, dy))
    }

    #[inline]
    fn weight(&self, dx: f64, dy: f64) -> f64 {
        let [a, b, c] = self.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        self.amplitude * (-0.5 * q).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterPlan {
    pub canvas: Canvas,
    pub r_cut: f64,
    pub kernels: Vec<ProjectedKernel>,
}

impl RasterPlan {
    pub fn memory_bytes(&self) -> usize {
        self.kernels.len() * std::mem::size_of::<ProjectedKernel>()
    }
}

/// Counters from one render.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Bytes held by the output buffer, the plan and the tile bins.
    pub working_bytes: usize,
    /// Number of (pixel, kernel) evaluations performed.
    pub pixels_touched: u64,
    pub tiles: usize,
}

fn project_kernel(k: &GaussianKernel, canvas: &Canvas, r_cut: f64, norm: Normalization) -> ProjectedKernel {
    let (sx, sy) = (canvas.scale_x, canvas.scale_y);
    // HR covariance S Σ S with S = diag(sx, sy)
    let a = k.cov.var_x * sx * sx;
    let b = k.cov.cov_xy * sx * sy;
    let c = k.cov.var_y * sy * sy;
    let det = a * c - b * b;
    ProjectedKernel {
        center: [k.mu_x * sx, k.mu_y * sy],
        radius: r_cut * max_eigenvalue(a, b, c).sqrt(),
        conic: [c / det, -b / det, a / det],
        depth: 0.0,
        amplitude: norm.amplitude(k.cov.determinant()),
    }
}

/// Projects every kernel into HR-pixel space.
pub fn project(f: &GaussianField, req: &RenderRequest) -> Result<RasterPlan> {
    let canvas = req.canvas(f)?;
    for k in f.kernels() {
        k.cov.validate()?;
    }
    let kernels = f
        .kernels()
        .iter()
        .map(|k| project_kernel(k, &canvas, req.r_cut, req.normalization))
        .collect();
    Ok(RasterPlan {
        canvas,
        r_cut: req.r_cut,
        kernels,
    })
}

struct TileBins {
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    bins: Vec<Vec<u32>>,
}

impl TileBins {
    fn build(plan: &RasterPlan, tile: usize) -> Self {
        let tiles_x = plan.canvas.width.div_ceil(tile);
        let tiles_y = plan.canvas.height.div_ceil(tile);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (idx, pk) in plan.kernels.iter().enumerate() {
            let Some((x0, x1, y0, y1)) = pk.pixel_range(&plan.canvas) else {
                continue;
            };
            for ty in y0 / tile..=y1 / tile {
                for tx in x0 / tile..=x1 / tile {
                    bins[ty * tiles_x + tx].push(idx as u32);
                }
            }
        }
        Self {
            tile,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    fn memory_bytes(&self) -> usize {
        self.bins.len() * std::mem::size_of::<Vec<u32>>()
            + self.bins.iter().map(|b| b.len() * 4).sum::<usize>()
    }
}

/// Accumulates every covering kernel into the output, one band of tiles per task.
pub fn composite(plan: &RasterPlan, f: &GaussianField, req: &RenderRequest) -> Result<ImageBuffer> {
    composite_with_stats(plan, f, req).map(|(img, _)| img)
}

pub fn composite_with_stats(
    plan: &RasterPlan,
    f: &GaussianField,
    req: &RenderRequest,
) -> Result<(ImageBuffer, RenderStats)> {
    if plan.kernels.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: f.len(),
            found: plan.kernels.len(),
        });
    }
    if req.tile_size == 0 {
        return Err(Error::InvalidRequest("tile size must be positive".into()));
    }
    let canvas = plan.canvas;
    let bins = TileBins::build(plan, req.tile_size);
    let mut out = ImageBuffer::new(canvas.width, canvas.height);
    let band_len = bins.tile * canvas.width * 3;
    let colors = f.kernels();
    let compensated = req.compensated;

    let touched = par::map_chunks_mut(out.data_mut(), band_len, |ty, band| {
        let row0 = ty * bins.tile;
        let rows = band.len() / (canvas.width * 3);
        let mut comp = if compensated {
            vec![0.0; band.len()]
        } else {
            Vec::new()
        };
        let mut touched = 0u64;
        for tx in 0..bins.tiles_x {
            let (tx0, tx1) = (tx * bins.tile, ((tx + 1) * bins.tile).min(canvas.width) - 1);
            let (ty0, ty1) = (row0, row0 + rows - 1);
            for &idx in &bins.bins[ty * bins.tiles_x + tx] {
                let pk = &plan.kernels[idx as usize];
                let color = colors[idx as usize].color;
                let (x0, x1, y0, y1) = pk
                    .pixel_range(&canvas)
                    .expect("binned kernels cover at least one pixel");
                for j in y0.max(ty0)..=y1.min(ty1) {
                    for i in x0.max(tx0)..=x1.min(tx1) {
                        let Some((dx, dy)) = pk.offset_if_covered(i, j) else {
                            continue;
                        };
                        let w = pk.weight(dx, dy);
                        let base = ((j - row0) * canvas.width + i) * 3;
                        for ch in 0..3 {
                            let term = color[ch] * w;
                            if compensated {
                                neumaier_add(&mut band[base + ch], &mut comp[base + ch], term);
                            } else {
                                band[base + ch] += term;
                            }
                        }
                        touched += 1;
                    }
                }
            }
        }
        if compensated {
            for (v, c) in band.iter_mut().zip(&comp) {
                *v += c;
            }
        }
        touched
    });

    // one band of compensation scratch per worker
    let comp_bytes = if compensated { band_len * 8 } else { 0 };
    let stats = RenderStats {
        working_bytes: canvas.pixel_count() * 3 * 8
            + plan.memory_bytes()
            + bins.memory_bytes()
            + comp_bytes,
        pixels_touched: touched.iter().sum(),
        tiles: bins.tiles_x * bins.tiles_y,
    };
    Ok((out, stats))
}

#[inline]
fn neumaier_add(sum: &mut f64, comp: &mut f64, term: f64) {
    let t = *sum + term;
    if sum.abs() >= term.abs() {
        *comp += (*sum - t) + term;
    } else {
        *comp += (term - t) + *sum;
    }
    *sum = t;
}

/// Renders `f` according to `req`.
pub fn render(f: &GaussianField, req: &RenderRequest) -> Result<ImageBuffer> {
    render_with_stats(f, req).map(|(img, _)| img)
}

pub fn render_with_stats(f: &GaussianField, req: &RenderRequest) -> Result<(ImageBuffer, RenderStats)> {
    if f.is_empty() {
        return Err(Error::EmptyField);
    }
    match req.mode {
        RenderMode::Fast => {
            let plan = project(f, req)?;
            composite_with_stats(&plan, f, req)
        }
        RenderMode::Exact => {
            let canvas = req.canvas(f)?;
            let mut out = ImageBuffer::new(canvas.width, canvas.height);
            let row_len = canvas.width * 3;
            let norm = req.normalization;
            par::for_each_chunk_mut(out.data_mut(), row_len, |j, row| {
                for i in 0..canvas.width {
                    let (x, y) = canvas.sample_point(i, j);
                    let v = crate::field::sum_kernels(f.kernels(), x, y, norm);
                    row[i * 3..i * 3 + 3].copy_from_slice(&v);
                }
            });
            let stats = RenderStats {
                working_bytes: canvas.pixel_count() * 3 * 8,
                pixels_touched: (canvas.pixel_count() * f.len()) as u64,
                tiles: 0,
            };
            Ok((out, stats))
        }
    }
}

/// Gradient of a scalar loss with respect to one kernel's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KernelGrad {
    pub d_color: [f64; 3],
    pub d_mu: [f64; 2],
    /// With respect to `(var_x, var_y, cov_xy)`.
    pub d_cov: [f64; 3],
}

/// Gradients of `L = Σ_pixels ⟨d_image, render(f, req)⟩` with respect to every
/// kernel's color, position and covariance triple.
///
/// Work is split over kernels; each kernel reads `d_image` only, so the result
/// does not depend on thread count.
pub fn render_backward(
    f: &GaussianField,
    req: &RenderRequest,
    d_image: &ImageBuffer,
) -> Result<Vec<KernelGrad>> {
    if f.is_empty() {
        return Err(Error::EmptyField);
    }
    let canvas = req.canvas(f)?;
    if d_image.dims() != (canvas.width, canvas.height) {
        return Err(Error::ShapeMismatch {
            expected: (canvas.width, canvas.height),
            found: d_image.dims(),
        });
    }
    let plan = match req.mode {
        RenderMode::Fast => Some(project(f, req)?),
        RenderMode::Exact => None,
    };
    let power = req.normalization.det_power();
    let norm = req.normalization;
    let full = (0, canvas.width - 1, 0, canvas.height - 1);

    Ok(par::map_indexed(f.len(), |idx| {
        let k = &f.kernels()[idx];
        let pk = plan.as_ref().map(|p| &p.kernels[idx]);
        let range = match pk {
            Some(pk) => match pk.pixel_range(&canvas) {
                Some(r) => r,
                None => return KernelGrad::default(),
            },
            None => full,
        };
        let det = k.cov.determinant();
        let (ia, ib, ic) = (k.cov.var_y / det, -k.cov.cov_xy / det, k.cov.var_x / det);
        let amp = norm.amplitude(det);
        let mut g = KernelGrad::default();
        let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
        let mut s_total = 0.0;
        let (x0, x1, y0, y1) = range;
        for j in y0..=y1 {
            for i in x0..=x1 {
                if let Some(pk) = pk {
                    if pk.offset_if_covered(i, j).is_none() {
                        continue;
                    }
                }
                let up = d_image.get(i, j);
                let (x, y) = canvas.sample_point(i, j);
                let dx = x - k.mu_x;
                let dy = y - k.mu_y;
                // u = Σ⁻¹ d
                let ux = ia * dx + ib * dy;
                let uy = ib * dx + ic * dy;
                let e = amp * (-0.5 * (dx * ux + dy * uy)).exp();
                let proj = up[0] * k.color[0] + up[1] * k.color[1] + up[2] * k.color[2];
                for (dc, u) in g.d_color.iter_mut().zip(up) {
                    *dc += u * e;
                }
                let s = proj * e;
                g.d_mu[0] += s * ux;
                g.d_mu[1] += s * uy;
                m00 += s * ux * ux;
                m01 += s * ux * uy;
                m11 += s * uy * uy;
                s_total += s;
            }
        }
        // dL/dΣ = ½ Σ s·u uᵀ − p·(Σ s)·Σ⁻¹, then fold the symmetric off-diagonal.
        g.d_cov[0] = 0.5 * m00 - power * s_total * ia;
        g.d_cov[1] = 0.5 * m11 - power * s_total * ic;
        g.d_cov[2] = 2.0 * (0.5 * m01 - power * s_total * ib);
        g
    }))
}
