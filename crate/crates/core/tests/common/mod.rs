//! Brute-force references shared by the integration tests. Written directly
//! from the field definition, without going through the library's evaluators.

#![allow(dead_code)]

use continuum::metrics::ChannelMode;
use continuum::fitter::{freq_loss, l1_loss, l1_loss_grad, SpectralLoss};
use continuum::reparam::{latent_backward, materialize, materialize_with_weights, LatentParams};
use continuum::{
    render, render_backward, sample_dictionary, CovarianceParams, GaussianField, GaussianKernel, GridSpec,
    ImageBuffer, KernelDictionary, PriorModel, RenderMode, RenderRequest,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

/// `Σ c · exp(-½ dᵀ Σ⁻¹ d) / (2π |Σ|)` at `(x, y)`.
pub fn oracle_eval(kernels: &[GaussianKernel], x: f64, y: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in kernels {
        let (a, b, c) = (k.cov.var_x, k.cov.cov_xy, k.cov.var_y);
        let det = a * c - b * b;
        let inv = [[c / det, -b / det], [-b / det, a / det]];
        let d = [x - k.mu_x, y - k.mu_y];
        let mut q = 0.0;
        for r in 0..2 {
            for s in 0..2 {
                q += d[r] * inv[r][s] * d[s];
            }
        }
        let g = (-0.5 * q).exp() / (2.0 * PI * det);
        for (o, c) in out.iter_mut().zip(k.color) {
            *o += c * g;
        }
    }
    out
}

/// Double loop over output pixels; pixel `(i, j)` samples `((i+½)/sx, (j+½)/sy)`.
pub fn oracle_render(f: &GaussianField, width: usize, height: usize, sx: f64, sy: f64) -> ImageBuffer {
    let mut img = ImageBuffer::new(width, height);
    for j in 0..height {
        for i in 0..width {
            let v = oracle_eval(f.kernels(), (i as f64 + 0.5) / sx, (j as f64 + 0.5) / sy);
            img.set(i, j, v);
        }
    }
    img
}

/// Covariance with variances and covariance inside the published 99% ranges
/// (0..2.4, 0..2.2, -0.9..1.5), redrawn until positive definite with
/// determinant at least `min_det`.
pub fn random_cov<R: Rng>(rng: &mut R, min_det: f64) -> CovarianceParams {
    loop {
        let vx = rng.random_range(0.0..2.4);
        let vy = rng.random_range(0.0..2.2);
        let c = rng.random_range(-0.9..1.5);
        if let Ok(p) = CovarianceParams::new(vx, vy, c) {
            if p.determinant() >= min_det {
                return p;
            }
        }
    }
}

pub fn random_kernel<R: Rng>(rng: &mut R, w: u32, h: u32, min_det: f64) -> GaussianKernel {
    GaussianKernel::new(
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
        random_cov(rng, min_det),
        [rng.random(), rng.random(), rng.random()],
    )
    .unwrap()
}

pub fn random_field<R: Rng>(rng: &mut R, w: u32, h: u32, n: usize) -> GaussianField {
    let kernels = (0..n).map(|_| random_kernel(rng, w, h, 0.05)).collect();
    GaussianField::new(kernels, w, h, 1).unwrap()
}

pub fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One randomized end-to-end gradient check: latent logits, a dictionary, and
/// a target that stays clear of the L1 kink.
pub struct GradCase {
    pub latent: LatentParams,
    pub dict: KernelDictionary,
    pub target: ImageBuffer,
    pub req: RenderRequest,
    pub lambda: f64,
}

/// Random case on an 8x8 target: a 4x4 grid with one kernel per pixel at
/// scale 2, or a 2x2 grid with four per pixel at scale 4. Dictionary size 1..=8.
pub fn grad_case<R: Rng>(rng: &mut R) -> GradCase {
    let (grid, s) = if rng.random_bool(0.5) {
        (GridSpec::new(4, 4, 1).unwrap(), 2.0)
    } else {
        (GridSpec::new(2, 2, 4).unwrap(), 4.0)
    };
    let m = rng.random_range(1..=8);
    let dict = sample_dictionary(&PriorModel::shipped_default(), m, rng.random()).unwrap();
    let alpha = rng.random_range(0.25..=1.0);
    let mut latent = LatentParams::zeros(grid, m, alpha).unwrap();
    for v in latent.values_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    let req = RenderRequest::scale(s).mode(RenderMode::Exact);
    let pred = render(&materialize(&latent, &dict).unwrap(), &req).unwrap();
    let mut target = pred.clone();
    for v in target.data_mut() {
        let off = rng.random_range(0.05..0.3);
        *v += if rng.random_bool(0.5) { off } else { -off };
    }
    GradCase {
        latent,
        dict,
        target,
        req,
        lambda: 0.1,
    }
}

impl GradCase {
    pub fn loss_at(&self, latent: &LatentParams) -> f64 {
        let img = render(&materialize(latent, &self.dict).unwrap(), &self.req).unwrap();
        l1_loss(&img, &self.target).unwrap() + self.lambda * freq_loss(&img, &self.target).unwrap()
    }

    /// Render backward chained through the reparameterization.
    pub fn analytic(&self) -> Vec<f64> {
        let mat = materialize_with_weights(&self.latent, &self.dict).unwrap();
        let img = render(&mat.field, &self.req).unwrap();
        let (_, mut d) = l1_loss_grad(&img, &self.target).unwrap();
        let (_, df) = SpectralLoss::new(img.width(), img.height())
            .loss_grad(&img, &self.target)
            .unwrap();
        for (a, b) in d.data_mut().iter_mut().zip(df.data()) {
            *a += self.lambda * b;
        }
        let kg = render_backward(&mat.field, &self.req, &d).unwrap();
        latent_backward(&self.latent, &mat, &kg, &self.dict).unwrap()
    }

    /// Central differences over every logit.
    pub fn numeric(&self, h: f64) -> Vec<f64> {
        let mut probe = self.latent.clone();
        (0..self.latent.values().len())
            .map(|i| {
                let x = self.latent.values()[i];
                probe.values_mut()[i] = x + h;
                let up = self.loss_at(&probe);
                probe.values_mut()[i] = x - h;
                let down = self.loss_at(&probe);
                probe.values_mut()[i] = x;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_rel_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

// --- metric oracles ---------------------------------------------------------

fn planes(img: &ImageBuffer, mode: ChannelMode, shave: usize) -> Vec<Vec<Vec<f64>>> {
    let (w, h) = img.dims();
    let pick = |f: &dyn Fn([f64; 3]) -> f64| -> Vec<Vec<f64>> {
        (shave..h - shave)
            .map(|y| (shave..w - shave).map(|x| f(img.get(x, y))).collect())
            .collect()
    };
    match mode {
        ChannelMode::YChannel => vec![pick(&|p| (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0)],
        ChannelMode::Rgb => (0..3).map(|c| pick(&|p| p[c])).collect(),
    }
}

pub fn oracle_psnr(a: &ImageBuffer, b: &ImageBuffer, mode: ChannelMode, shave: usize) -> f64 {
    let (pa, pb) = (planes(a, mode, shave), planes(b, mode, shave));
    let (mut sum, mut n) = (0.0, 0.0);
    for (x, y) in pa.iter().zip(&pb) {
        for (rx, ry) in x.iter().zip(y) {
            for (u, v) in rx.iter().zip(ry) {
                sum += (u - v) * (u - v);
                n += 1.0;
            }
        }
    }
    10.0 * (1.0 / (sum / n)).log10()
}

/// Direct 2D windowed statistics at every valid 11x11 position.
pub fn oracle_ssim(a: &ImageBuffer, b: &ImageBuffer, mode: ChannelMode, shave: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (pa, pb) = (planes(a, mode, shave), planes(b, mode, shave));
    let mut chans = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let (h, w) = (x.len(), x[0].len());
        let (mut acc, mut count) = (0.0, 0.0);
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / total;
                        let (u, v) = (x[oy + i][ox + j], y[oy + i][ox + j]);
                        ma += g * u;
                        mb += g * v;
                        saa += g * u * u;
                        sbb += g * v * v;
                        sab += g * u * v;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        chans += acc / count;
    }
    chans / pa.len() as f64
}

// --- synthetic prior corpus -------------------------------------------------

/// Fields whose covariances are drawn from known normals.
pub fn synthetic_corpus(rng: &mut ChaCha8Rng, fields: usize, side: u32) -> Vec<GaussianField> {
    let (nx, ny, nc) = (
        Normal::new(1.2, 0.2).unwrap(),
        Normal::new(1.0, 0.2).unwrap(),
        Normal::new(0.1, 0.1).unwrap(),
    );
    (0..fields)
        .map(|_| {
            let ks = (0..side * side)
                .map(|i| loop {
                    let cov = CovarianceParams::new(nx.sample(rng), ny.sample(rng), nc.sample(rng));
                    if let Ok(cov) = cov {
                        let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
                        break GaussianKernel::new(x, y, cov, [rng.random(), rng.random(), rng.random()]).unwrap();
                    }
                })
                .collect();
            GaussianField::new(ks, side, side, 1).unwrap()
        })
        .collect()
}
