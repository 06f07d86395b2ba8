//! Per-image optimization of a Gaussian field against a target image.
//!
//! Two parameterizations are supported. `Reparam` optimizes dictionary weights,
//! drift and color logits (see [`crate::reparam`]); every iterate is a valid field
//! by construction. `Unconstrained` optimizes the raw eight parameters per
//! kernel and projects them back onto the valid set after each step.

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::{CovarianceParams, GaussianField, GaussianKernel, GridSpec, Normalization, POSITION_MARGIN};
use crate::format::{cgsf_bytes, fnv1a64};
use crate::image::ImageBuffer;
use crate::metrics::{psnr, MetricConfig, Psnr};
use crate::par;
use crate::prior::KernelDictionary;
use crate::render::{render, render_backward, RenderMode, RenderRequest, DEFAULT_R_CUT};
use crate::render::KernelGrad;
use crate::reparam::{
    kernel_logit_grad, logit, materialize, materialize_reusing, LatentParams, DEFAULT_DRIFT_AMPLITUDE,
};
use crate::rng::{substream, Stream};

/// Lower bound on variances in unconstrained mode.
pub const UNCONSTRAINED_VAR_FLOOR: f64 = 1e-3;
/// `|cov_xy| <= CORRELATION_LIMIT · sqrt(var_x · var_y)` in unconstrained mode.
pub const CORRELATION_LIMIT: f64 = 0.999;

// --- losses -----------------------------------------------------------------

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    pred.ensure_same_dims(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// L1 loss and its gradient with respect to `pred` (subgradient 0 at ties).
pub fn l1_loss_grad(pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let loss = l1_loss(pred, target)?;
    let inv = 1.0 / pred.data().len() as f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, ImageBuffer::from_raw(pred.width(), pred.height(), grad)?))
}

/// Spectral L2 loss.
///
/// Per channel: `(1 / HW) Σ_k |F(pred)_k − F(target)_k|²` with `F` the
/// unnormalized forward 2D DFT; the result is the mean over the three channels.
/// The gradient is formed with the adjoint transform.
pub struct SpectralLoss {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl SpectralLoss {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transform(&self, plane: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (w, h) = (self.width, self.height);
        row.process(plane);
        let mut column = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }

    /// Forward spectrum of one channel of `pred − target`.
    fn diff_spectrum(&self, pred: &ImageBuffer, target: &ImageBuffer, ch: usize) -> Vec<Complex64> {
        let mut plane: Vec<Complex64> = pred
            .data()
            .chunks_exact(3)
            .zip(target.data().chunks_exact(3))
            .map(|(p, t)| Complex64::new(p[ch] - t[ch], 0.0))
            .collect();
        let (row, col) = (self.row_fwd.clone(), self.col_fwd.clone());
        self.transform(&mut plane, &row, &col);
        plane
    }

    fn check(&self, pred: &ImageBuffer, target: &ImageBuffer) -> Result<()> {
        pred.ensure_same_dims(target)?;
        if pred.dims() != (self.width, self.height) {
            return Err(Error::ShapeMismatch {
                expected: (self.width, self.height),
                found: pred.dims(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
        self.check(pred, target)?;
        let hw = (self.width * self.height) as f64;
        let total: f64 = (0..3)
            .map(|ch| {
                self.diff_spectrum(pred, target, ch)
                    .iter()
                    .map(|z| z.norm_sqr())
                    .sum::<f64>()
                    / hw
            })
            .sum();
        Ok(total / 3.0)
    }

    pub fn loss_grad(&self, pred: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
        self.check(pred, target)?;
        let hw = (self.width * self.height) as f64;
        let mut grad = ImageBuffer::new(self.width, self.height);
        let mut total = 0.0;
        let (row, col) = (self.row_inv.clone(), self.col_inv.clone());
        for ch in 0..3 {
            let mut spec = self.diff_spectrum(pred, target, ch);
            total += spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / hw;
            // dL/dx = (2 / (3·HW)) Re(Fᴴ F(x − y)); Fᴴ is the unnormalized inverse.
            self.transform(&mut spec, &row, &col);
            let k = 2.0 / (3.0 * hw);
            for (px, z) in grad.data_mut().chunks_exact_mut(3).zip(&spec) {
                px[ch] = k * z.re;
            }
        }
        Ok((total / 3.0, grad))
    }
}

pub fn freq_loss(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    pred.ensure_same_dims(target)?;
    SpectralLoss::new(pred.width(), pred.height()).loss(pred, target)
}

// --- Adam -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    let coef = state.advance(cfg);
    par::for_each_zip3_mut(params, &mut state.m, &mut state.v, 1 << 14, |off, p, m, v| {
        coef.apply(p, m, v, &grads[off..off + p.len()]);
    });
    Ok(())
}

/// Per-step Adam constants with the bias corrections folded in.
#[derive(Clone, Copy)]
struct AdamCoefficients {
    step: f64,
    inv_bc2: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    fn advance(&mut self, cfg: &AdamConfig) -> AdamCoefficients {
        self.t += 1;
        let t = self.t as i32;
        AdamCoefficients {
            step: cfg.learning_rate / (1.0 - cfg.beta1.powi(t)),
            inv_bc2: 1.0 / (1.0 - cfg.beta2.powi(t)),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

impl AdamCoefficients {
    #[inline]
    fn apply(&self, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.step * *m / ((*v * self.inv_bc2).sqrt() + self.eps);
        }
    }
}

/// Backward through the reparameterization fused with the Adam update, one
/// kernel at a time. Equivalent to `latent_backward` followed by `adam_step`
/// without materializing the full gradient array.
fn reparam_step(
    latent: &mut LatentParams,
    weights: &[f64],
    kgrads: &[KernelGrad],
    dict: &KernelDictionary,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    let (m, stride, alpha) = (latent.dict_size(), latent.stride(), latent.alpha());
    let coef = state.advance(cfg);
    par::for_each_zip3_mut(latent.values_mut(), &mut state.m, &mut state.v, stride, |off, p, mo, vo| {
        let k = off / stride;
        let mut g = vec![0.0; stride];
        kernel_logit_grad(p, &weights[k * m..(k + 1) * m], alpha, &kgrads[k], dict, &mut g);
        coef.apply(p, mo, vo, &g);
    });
}

// --- fitting ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FitMode {
    /// Dictionary weights, bounded drift and squashed colors.
    #[default]
    Reparam,
    /// Raw position, covariance and color with projection after each step.
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub mode: FitMode,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the spectral loss relative to L1.
    pub freq_loss_weight: f64,
    pub seed: u64,
    pub log_every: usize,
    pub kernels_per_pixel: u32,
    pub drift_amplitude: f64,
    /// Spread of the initial dictionary-weight logits.
    pub init_logit_std: f64,
    pub r_cut: f64,
    pub render_mode: RenderMode,
    pub normalization: Normalization,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: FitMode::Reparam,
            iterations: 2000,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freq_loss_weight: 0.1,
            seed: 0,
            log_every: 50,
            kernels_per_pixel: 4,
            drift_amplitude: DEFAULT_DRIFT_AMPLITUDE,
            init_logit_std: 0.5,
            r_cut: DEFAULT_R_CUT,
            render_mode: RenderMode::Fast,
            normalization: Normalization::AsPrinted,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.freq_loss_weight.is_finite() && self.freq_loss_weight >= 0.0) {
            return Err(Error::InvalidConfig("frequency loss weight must be >= 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log interval must be >= 1".into()));
        }
        // grid points sit inside their pixel, so this keeps every kernel in the field domain
        if !(self.drift_amplitude > 0.0 && self.drift_amplitude <= POSITION_MARGIN) {
            return Err(Error::InvalidConfig(format!(
                "drift amplitude must be in (0, {POSITION_MARGIN}], got {}",
                self.drift_amplitude
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn render_request(&self) -> RenderRequest {
        RenderRequest::scale(1.0)
            .r_cut(self.r_cut)
            .mode(self.render_mode)
            .normalization(self.normalization)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitStep {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_freq: f64,
    /// PSNR of the 8-bit encoded render against the target.
    pub psnr: Psnr,
    pub best_psnr: Psnr,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub steps: Vec<FitStep>,
    pub best_psnr: Psnr,
    pub best_iteration: usize,
    /// FNV-1a of the returned field's CGSF encoding.
    pub checksum: u64,
    pub wall_time: Duration,
}

pub const FIT_REPORT_HEADER: &str = "iteration,loss_total,loss_l1,loss_freq,psnr,elapsed_ms,best_psnr";

impl FitReport {
    /// CSV with a header row. With `timings == false` the elapsed column is
    /// written as zero so repeated runs are byte-identical.
    pub fn write_csv<W: Write>(&self, mut w: W, timings: bool) -> Result<()> {
        writeln!(w, "{FIT_REPORT_HEADER}")?;
        for s in &self.steps {
            let elapsed = if timings { s.elapsed_ms } else { 0.0 };
            writeln!(
                w,
                "{},{:.9e},{:.9e},{:.9e},{},{:.3},{}",
                s.iteration, s.loss_total, s.loss_l1, s.loss_freq, s.psnr, elapsed, s.best_psnr
            )?;
        }
        Ok(())
    }

    pub fn final_step(&self) -> &FitStep {
        self.steps.last().expect("a report always has its final step")
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Best field seen, by report PSNR.
    pub field: GaussianField,
    /// Final optimizer logits, present in reparam mode.
    pub latent: Option<LatentParams>,
    pub report: FitReport,
}

/// Initial logits: jittered dictionary weights, zero drift, and colors chosen so
/// the first render approximates the target at every kernel's home pixel.
pub fn init_latent(target: &ImageBuffer, dict: &KernelDictionary, config: &FitConfig) -> Result<LatentParams> {
    let grid = GridSpec::new(target.width() as u32, target.height() as u32, config.kernels_per_pixel)?;
    let mut latent = LatentParams::zeros(grid, dict.len(), config.drift_amplitude)?;
    let mut rng = substream(config.seed, Stream::Init);
    if config.init_logit_std > 0.0 {
        let normal = Normal::new(0.0, config.init_logit_std)
            .map_err(|e| Error::InvalidConfig(format!("init logit std: {e}")))?;
        for k in 0..latent.kernel_count() {
            for l in latent.weight_logits_mut(k) {
                *l = normal.sample(&mut rng);
            }
        }
    }
    let start = materialize(&latent, dict)?;
    let unit_kernels: Vec<GaussianKernel> = start
        .kernels()
        .iter()
        .map(|k| GaussianKernel { color: [1.0; 3], ..*k })
        .collect();
    let unit_field = GaussianField::new(unit_kernels, grid.width, grid.height, grid.kernels_per_pixel)?;
    let response = render(&unit_field, &config.render_request())?;
    for k in 0..latent.kernel_count() {
        let (m, n) = grid.home_pixel(k);
        let r = response.get(m, n)[0].max(1e-12);
        let t = target.get(m, n);
        let c = t.map(|v| logit((v / r).clamp(0.01, 0.99)));
        latent.set_color_logits(k, c);
    }
    Ok(latent)
}

const RAW_STRIDE: usize = 8;

fn raw_from_field(field: &GaussianField) -> Vec<f64> {
    field
        .kernels()
        .iter()
        .flat_map(|k| {
            [
                k.mu_x,
                k.mu_y,
                k.cov.var_x,
                k.cov.var_y,
                k.cov.cov_xy,
                k.color[0],
                k.color[1],
                k.color[2],
            ]
        })
        .collect()
}

/// Projects raw parameters back onto the valid set.
fn project_raw(p: &mut [f64], grid: &GridSpec) {
    let (xmax, ymax) = (grid.width as f64 + POSITION_MARGIN, grid.height as f64 + POSITION_MARGIN);
    for k in p.chunks_exact_mut(RAW_STRIDE) {
        k[0] = k[0].clamp(-POSITION_MARGIN, xmax);
        k[1] = k[1].clamp(-POSITION_MARGIN, ymax);
        k[2] = k[2].max(UNCONSTRAINED_VAR_FLOOR);
        k[3] = k[3].max(UNCONSTRAINED_VAR_FLOOR);
        let lim = CORRELATION_LIMIT * (k[2] * k[3]).sqrt();
        k[4] = k[4].clamp(-lim, lim);
        for c in &mut k[5..8] {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

fn field_from_raw(p: &[f64], grid: &GridSpec) -> Result<GaussianField> {
    let kernels = p
        .chunks_exact(RAW_STRIDE)
        .map(|k| GaussianKernel {
            mu_x: k[0],
            mu_y: k[1],
            cov: CovarianceParams {
                var_x: k[2],
                var_y: k[3],
                cov_xy: k[4],
            },
            color: [k[5], k[6], k[7]],
        })
        .collect();
    GaussianField::new(kernels, grid.width, grid.height, grid.kernels_per_pixel)
}

struct Tracker<'a> {
    target: &'a ImageBuffer,
    spectral: SpectralLoss,
    lambda: f64,
    log_every: usize,
    iterations: usize,
    start: Instant,
    steps: Vec<FitStep>,
    best: Option<(Psnr, usize, GaussianField)>,
}

impl Tracker<'_> {
    /// Scores `field`'s render; returns the image-space loss gradient.
    fn observe(&mut self, iteration: usize, field: &GaussianField, img: &ImageBuffer) -> Result<ImageBuffer> {
        let (l1, g1) = l1_loss_grad(img, self.target)?;
        let (lf, gf) = self.spectral.loss_grad(img, self.target)?;
        let total = l1 + self.lambda * lf;
        let best_so_far = self.best.as_ref().map(|b| b.0);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                best_psnr: best_so_far.map_or("none".into(), |p| p.to_string()),
            });
        }
        let p = psnr(&img.quantized(), self.target, &MetricConfig::rgb())?;
        if best_so_far.is_none_or(|b| p > b) {
            self.best = Some((p, iteration, field.clone()));
        }
        if iteration.is_multiple_of(self.log_every) || iteration == self.iterations {
            self.steps.push(FitStep {
                iteration,
                loss_total: total,
                loss_l1: l1,
                loss_freq: lf,
                psnr: p,
                best_psnr: self.best.as_ref().map(|b| b.0).expect("set above"),
                elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mut grad = g1;
        for (g, f) in grad.data_mut().iter_mut().zip(gf.data()) {
            *g += self.lambda * f;
        }
        Ok(grad)
    }

    fn finish(self, latent: Option<LatentParams>) -> FitOutcome {
        let (best_psnr, best_iteration, field) = self.best.expect("at least one evaluation");
        FitOutcome {
            report: FitReport {
                steps: self.steps,
                best_psnr,
                best_iteration,
                checksum: fnv1a64(&cgsf_bytes(&field)),
                wall_time: self.start.elapsed(),
            },
            field,
            latent,
        }
    }
}

fn non_finite(iteration: usize, best: &Option<(Psnr, usize, GaussianField)>) -> Error {
    Error::NonFiniteLoss {
        iteration,
        best_psnr: best.as_ref().map_or("none".into(), |b| b.0.to_string()),
    }
}

/// Fits a field to `target` on a grid of one cell per target pixel.
///
/// Runs `config.iterations` optimizer steps, scoring every iterate (including
/// the final one), and returns the best-scoring field.
pub fn fit_image(target: &ImageBuffer, dict: &KernelDictionary, config: &FitConfig) -> Result<FitOutcome> {
    let latent = init_latent(target, dict, config)?;
    fit_image_from(target, dict, config, latent)
}

/// As [`fit_image`], starting from given logits (for example a loaded sidecar).
/// In unconstrained mode the logits only provide the starting field.
pub fn fit_image_from(
    target: &ImageBuffer,
    dict: &KernelDictionary,
    config: &FitConfig,
    mut latent: LatentParams,
) -> Result<FitOutcome> {
    config.validate()?;
    let grid = latent.grid();
    if (grid.width as usize, grid.height as usize) != target.dims() {
        return Err(Error::ShapeMismatch {
            expected: (grid.width as usize, grid.height as usize),
            found: target.dims(),
        });
    }
    let req = config.render_request();
    let adam = config.adam();
    let mut tracker = Tracker {
        target,
        spectral: SpectralLoss::new(target.width(), target.height()),
        lambda: config.freq_loss_weight,
        log_every: config.log_every,
        iterations: config.iterations,
        start: Instant::now(),
        steps: Vec::new(),
        best: None,
    };

    match config.mode {
        FitMode::Reparam => {
            let mut state = AdamState::new(latent.values().len());
            // the N x M weight buffer is recycled between iterations
            let mut weights = Vec::new();
            for it in 0..=config.iterations {
                let mat = materialize_reusing(&latent, dict, std::mem::take(&mut weights)).map_err(|e| match e {
                    Error::NonFiniteInput(_) => non_finite(it, &tracker.best),
                    other => other,
                })?;
                let img = render(&mat.field, &req)?;
                let d_image = tracker.observe(it, &mat.field, &img)?;
                if it == config.iterations {
                    break;
                }
                let kgrads = render_backward(&mat.field, &req, &d_image)?;
                reparam_step(&mut latent, &mat.weights, &kgrads, dict, &mut state, &adam);
                weights = mat.weights;
            }
            Ok(tracker.finish(Some(latent)))
        }
        FitMode::Unconstrained => {
            let start = materialize(&latent, dict)?;
            let mut params = raw_from_field(&start);
            let mut state = AdamState::new(params.len());
            for it in 0..=config.iterations {
                if params.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite(it, &tracker.best));
                }
                let field = field_from_raw(&params, &grid)?;
                let img = render(&field, &req)?;
                let d_image = tracker.observe(it, &field, &img)?;
                if it == config.iterations {
                    break;
                }
                let kgrads = render_backward(&field, &req, &d_image)?;
                let grads: Vec<f64> = kgrads
                    .iter()
                    .flat_map(|g| {
                        [
                            g.d_mu[0],
                            g.d_mu[1],
                            g.d_cov[0],
                            g.d_cov[1],
                            g.d_cov[2],
                            g.d_color[0],
                            g.d_color[1],
                            g.d_color[2],
                        ]
                    })
                    .collect();
                adam_step(&mut params, &grads, &mut state, &adam)?;
                project_raw(&mut params, &grid);
            }
            Ok(tracker.finish(None))
        }
    }
}
