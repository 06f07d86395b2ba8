//! Quality metrics in the conventions used by super-resolution benchmarks, and
//! the bicubic degradation used to synthesize LR inputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    /// BT.601 luma of the YCbCr transform.
    #[default]
    YChannel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub channel_mode: ChannelMode,
    /// Pixels removed from every side before comparison.
    pub shave_border: usize,
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            channel_mode: ChannelMode::YChannel,
            shave_border: 0,
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl MetricConfig {
    /// Y-channel config shaving `round(scale)` pixels.
    pub fn for_scale(scale: f64) -> Self {
        Self {
            shave_border: scale.round().max(0.0) as usize,
            ..Self::default()
        }
    }

    pub fn rgb() -> Self {
        Self {
            channel_mode: ChannelMode::Rgb,
            ..Self::default()
        }
    }

    pub fn with_channel_mode(mut self, mode: ChannelMode) -> Self {
        self.channel_mode = mode;
        self
    }

    pub fn with_shave(mut self, shave: usize) -> Self {
        self.shave_border = shave;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "SSIM window must be odd, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.data_range > 0.0) {
            return Err(Error::InvalidConfig("sigma and data range must be positive".into()));
        }
        Ok(())
    }
}

/// Single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255` for inputs in `[0, 1]`.
pub fn rgb_to_y(img: &ImageBuffer) -> Result<Plane> {
    if let Some(&bad) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::RangeError(bad));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| (65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2] + 16.0) / 255.0)
        .collect();
    Ok(Plane {
        width: img.width(),
        height: img.height(),
        data,
    })
}

fn shaved_planes(img: &ImageBuffer, cfg: &MetricConfig) -> Result<Vec<Plane>> {
    let s = cfg.shave_border;
    let (w, h) = img.dims();
    if 2 * s >= w || 2 * s >= h {
        return Err(Error::DimensionError(format!(
            "shaving {s} pixels leaves nothing of a {w}x{h} image"
        )));
    }
    let inner = img.crop(s, s, w - 2 * s, h - 2 * s)?;
    match cfg.channel_mode {
        ChannelMode::YChannel => Ok(vec![rgb_to_y(&inner)?]),
        ChannelMode::Rgb => Ok((0..3)
            .map(|c| Plane {
                width: inner.width(),
                height: inner.height(),
                data: inner.data().chunks_exact(3).map(|p| p[c]).collect(),
            })
            .collect()),
    }
}

/// PSNR in dB; identical inputs give [`Psnr::Infinite`] rather than a float overflow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    /// Total order key; `Infinite` sorts above every finite value.
    pub fn key(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn from_mse(mse: f64, data_range: f64) -> Psnr {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (data_range * data_range / mse).log10())
        }
    }
}

impl PartialOrd for Psnr {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.key().partial_cmp(&other.key())
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.6}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, cfg: &MetricConfig) -> Result<Psnr> {
    a.ensure_same_dims(b)?;
    cfg.validate()?;
    let pa = shaved_planes(a, cfg)?;
    let pb = shaved_planes(b, cfg)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.data.iter().zip(&y.data) {
            sum += (u - v) * (u - v);
        }
        count += x.data.len();
    }
    Ok(Psnr::from_mse(sum / count as f64, cfg.data_range))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering.
fn filter_valid(p: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &Plane, b: &Plane, cfg: &MetricConfig) -> f64 {
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);
    let (w, h) = (a.width, a.height);
    let prod = |x: &Plane, y: &Plane| -> Vec<f64> {
        x.data.iter().zip(&y.data).map(|(u, v)| u * v).collect()
    };
    let mu_a = filter_valid(&a.data, w, h, &taps);
    let mu_b = filter_valid(&b.data, w, h, &taps);
    let e_aa = filter_valid(&prod(a, a), w, h, &taps);
    let e_bb = filter_valid(&prod(b, b), w, h, &taps);
    let e_ab = filter_valid(&prod(a, b), w, h, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
        let (va, vb, cab) = (e_aa[i] - maa, e_bb[i] - mbb, e_ab[i] - mab);
        total += ((2.0 * mab + c1) * (2.0 * cab + c2)) / ((maa + mbb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over every valid window position, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &MetricConfig) -> Result<f64> {
    a.ensure_same_dims(b)?;
    cfg.validate()?;
    let pa = shaved_planes(a, cfg)?;
    let pb = shaved_planes(b, cfg)?;
    let (w, h) = (pa[0].width, pa[0].height);
    if w < cfg.window || h < cfg.window {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            window: cfg.window,
        });
    }
    let sum: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, cfg)).sum();
    Ok(sum / pa.len() as f64)
}

const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for every output sample along one axis.
///
/// Output sample `o` is centered on source coordinate `(o + 0.5)·in/out − 0.5`.
/// With `antialias` the kernel is stretched by the downscale ratio. Source
/// indices are clamped to the edge.
pub fn bicubic_weights(in_len: usize, out_len: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    let stretch = if antialias { ratio.max(1.0) } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).ceil() as i64;
            let hi = (center + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| {
                    let w = cubic((j as f64 - center) / stretch);
                    (j.clamp(0, in_len as i64 - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= s;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize to `out_w x out_h`.
pub fn bicubic_resize(img: &ImageBuffer, out_w: usize, out_h: usize, antialias: bool) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 || img.width() == 0 || img.height() == 0 {
        return Err(Error::DimensionError(format!(
            "cannot resize {}x{} to {out_w}x{out_h}",
            img.width(),
            img.height()
        )));
    }
    let wx = bicubic_weights(img.width(), out_w, antialias);
    let wy = bicubic_weights(img.height(), out_h, antialias);
    let mut horiz = ImageBuffer::new(out_w, img.height());
    for y in 0..img.height() {
        for (x, taps) in wx.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(sx, w) in taps {
                let p = img.get(sx, y);
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
            horiz.set(x, y, acc);
        }
    }
    let mut out = ImageBuffer::new(out_w, out_h);
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = [0.0; 3];
            for &(sy, w) in taps {
                let p = horiz.get(x, sy);
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
            out.set(x, y, acc);
        }
    }
    Ok(out)
}

/// Antialiased bicubic downscale by `factor`; output is `round(W / factor) x round(H / factor)`.
pub fn bicubic_downsample(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    bicubic_downsample_with(img, factor, true)
}

pub fn bicubic_downsample_with(img: &ImageBuffer, factor: f64, antialias: bool) -> Result<ImageBuffer> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::DimensionError(format!("invalid factor {factor}")));
    }
    let out_w = (img.width() as f64 / factor).round() as usize;
    let out_h = (img.height() as f64 / factor).round() as usize;
    bicubic_resize(img, out_w, out_h, antialias)
}
