//! Unconstrained logits to valid kernel parameters.
//!
//! Each kernel carries a softmax over the shared covariance dictionary, a
//! tanh-bounded drift from its grid position, and a logistic color. Any finite
//! logits map to a valid field: the combined covariance is a convex combination
//! of positive-definite entries, drift stays inside `(-α, α)` and colors inside
//! `(0, 1)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::field::{CovarianceParams, GaussianField, GaussianKernel, GridSpec};
use crate::par;
use crate::prior::KernelDictionary;
use crate::render::KernelGrad;

pub const DEFAULT_DRIFT_AMPLITUDE: f64 = 1.0;
pub const LATENT_MAGIC: &[u8; 4] = b"CGSL";
pub const LATENT_VERSION: u8 = 1;

/// Numerically stable softmax.
pub fn weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("weight logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Dot product over four interleaved accumulators, which breaks the serial
/// add chain. The summation order is fixed, so results stay deterministic.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn sum4(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for i in 0..4 {
            acc[i] += x[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `exp(x)` for `x <= 0`, within a few ulp of `f64::exp` and flushed to zero
/// below -708. Branch-free so the softmax loop vectorizes; the softmax is
/// the hottest loop of a fit.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    // ln 2 split so that k * LN2_HI is exact
    const LN2_HI: f64 = f64::from_bits(0x3FE6_2E42_FEE0_0000);
    const LN2_LO: f64 = f64::from_bits(0x3DEA_39EF_3579_3C76);
    let xc = if x < -708.0 { -708.0 } else { x };
    let shifted = xc * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // degree-12 Taylor polynomial on |r| <= ln2/2, grouped in pairs
    let (r2, r4) = (r * r, r * r * r * r);
    let q0 = (1.0 + r) + r2 * (1.0 / 2.0 + r * (1.0 / 6.0));
    let q1 = (1.0 / 24.0 + r * (1.0 / 120.0)) + r2 * (1.0 / 720.0 + r * (1.0 / 5040.0));
    let q2 = (1.0 / 40320.0 + r * (1.0 / 362_880.0)) + r2 * (1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0));
    let p = q0 + r4 * (q1 + r4 * (q2 + r4 * (1.0 / 479_001_600.0)));
    // the low bits of `shifted` hold k; move k + 1023 into the exponent field
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

#[inline]
fn softmax_into(logits: &[f64], out: &mut [f64]) {
    // callers have checked the logits are finite
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| if l > m { l } else { m });
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = exp_nonpositive(l - max);
    }
    let inv = 1.0 / sum4(out);
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Vector-Jacobian product of softmax: `w ⊙ (g − ⟨w, g⟩)`.
pub fn softmax_vjp(w: &[f64], grad_w: &[f64], out: &mut [f64]) {
    let mean: f64 = w.iter().zip(grad_w).map(|(a, b)| a * b).sum();
    for ((o, &wi), &gi) in out.iter_mut().zip(w).zip(grad_w) {
        *o = wi * (gi - mean);
    }
}

/// Convex combination of the dictionary's covariance triples.
pub fn combine_covariance(w: &[f64], dict: &KernelDictionary) -> Result<CovarianceParams> {
    if w.len() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            found: w.len(),
        });
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFiniteInput("dictionary weights"));
    }
    let p = combine_unchecked(w, dict.entries());
    p.validate()?;
    Ok(p)
}

#[inline]
fn combine_unchecked(w: &[f64], entries: &[CovarianceParams]) -> CovarianceParams {
    let mut acc = [[0.0; 4]; 3];
    let (cw, ce) = (w.chunks_exact(4), entries.chunks_exact(4));
    let mut tail = [0.0; 3];
    for (wi, e) in cw.remainder().iter().zip(ce.remainder()) {
        tail[0] += wi * e.var_x;
        tail[1] += wi * e.var_y;
        tail[2] += wi * e.cov_xy;
    }
    for (wc, ec) in cw.zip(ce) {
        for i in 0..4 {
            acc[0][i] += wc[i] * ec[i].var_x;
            acc[1][i] += wc[i] * ec[i].var_y;
            acc[2][i] += wc[i] * ec[i].cov_xy;
        }
    }
    let fold = |a: [f64; 4], t: f64| (a[0] + a[1]) + (a[2] + a[3]) + t;
    CovarianceParams {
        var_x: fold(acc[0], tail[0]),
        var_y: fold(acc[1], tail[1]),
        cov_xy: fold(acc[2], tail[2]),
    }
}

/// `P_init + α·tanh(offset_logits)`.
pub fn position(offset_logits: [f64; 2], p_init: [f64; 2], alpha: f64) -> Result<[f64; 2]> {
    if offset_logits.iter().chain(&p_init).any(|v| !v.is_finite()) || !alpha.is_finite() {
        return Err(Error::NonFiniteInput("position"));
    }
    Ok([
        p_init[0] + alpha * offset_logits[0].tanh(),
        p_init[1] + alpha * offset_logits[1].tanh(),
    ])
}

#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Component-wise logistic squash into `(0, 1)`.
pub fn color(color_logits: [f64; 3]) -> Result<[f64; 3]> {
    if color_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("color logits"));
    }
    Ok(color_logits.map(logistic))
}

/// Inverse of [`logistic`] for `c ∈ (0, 1)`.
pub fn logit(c: f64) -> f64 {
    (c / (1.0 - c)).ln()
}

/// Optimizable per-kernel logits, stored flat as
/// `[w_0 .. w_{M-1}, off_x, off_y, c_r, c_g, c_b]` per kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    grid: GridSpec,
    dict_size: usize,
    alpha: f64,
    values: Vec<f64>,
}

impl LatentParams {
    pub fn zeros(grid: GridSpec, dict_size: usize, alpha: f64) -> Result<Self> {
        let values = vec![0.0; grid.kernel_count() * (dict_size + 5)];
        Self::from_values(grid, dict_size, alpha, values)
    }

    pub fn from_values(grid: GridSpec, dict_size: usize, alpha: f64, values: Vec<f64>) -> Result<Self> {
        if dict_size == 0 {
            return Err(Error::InvalidConfig("dictionary size must be >= 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "drift amplitude must be positive, got {alpha}"
            )));
        }
        let expected = grid.kernel_count() * (dict_size + 5);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            grid,
            dict_size,
            alpha,
            values,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn dict_size(&self) -> usize {
        self.dict_size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn stride(&self) -> usize {
        self.dict_size + 5
    }

    pub fn kernel_count(&self) -> usize {
        self.grid.kernel_count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn kernel(&self, k: usize) -> &[f64] {
        &self.values[k * self.stride()..(k + 1) * self.stride()]
    }

    fn kernel_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.values[k * s..(k + 1) * s]
    }

    pub fn weight_logits(&self, k: usize) -> &[f64] {
        &self.kernel(k)[..self.dict_size]
    }

    pub fn weight_logits_mut(&mut self, k: usize) -> &mut [f64] {
        let m = self.dict_size;
        &mut self.kernel_mut(k)[..m]
    }

    pub fn offset_logits(&self, k: usize) -> [f64; 2] {
        let s = &self.kernel(k)[self.dict_size..];
        [s[0], s[1]]
    }

    pub fn set_offset_logits(&mut self, k: usize, v: [f64; 2]) {
        let m = self.dict_size;
        self.kernel_mut(k)[m..m + 2].copy_from_slice(&v);
    }

    pub fn color_logits(&self, k: usize) -> [f64; 3] {
        let s = &self.kernel(k)[self.dict_size + 2..];
        [s[0], s[1], s[2]]
    }

    pub fn set_color_logits(&mut self, k: usize, v: [f64; 3]) {
        let m = self.dict_size;
        self.kernel_mut(k)[m + 2..m + 5].copy_from_slice(&v);
    }

    pub fn write_to<W: Write>(&self, dict: &KernelDictionary, mut w: W) -> Result<()> {
        if dict.len() != self.dict_size {
            return Err(Error::DimensionMismatch {
                expected: self.dict_size,
                found: dict.len(),
            });
        }
        w.write_all(LATENT_MAGIC)?;
        w.write_u8(LATENT_VERSION)?;
        w.write_u32::<LittleEndian>(self.grid.width)?;
        w.write_u32::<LittleEndian>(self.grid.height)?;
        w.write_u32::<LittleEndian>(self.grid.kernels_per_pixel)?;
        w.write_u32::<LittleEndian>(self.dict_size as u32)?;
        w.write_f32::<LittleEndian>(self.alpha as f32)?;
        w.write_u64::<LittleEndian>(dict.seed())?;
        w.write_u64::<LittleEndian>(self.kernel_count() as u64)?;
        for e in dict.entries() {
            for v in e.as_array() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        for &v in &self.values {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    /// Reads a sidecar written by [`LatentParams::write_to`], returning the
    /// logits together with the dictionary they index.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, KernelDictionary)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LATENT_MAGIC {
            return Err(Error::Format(format!("bad latent magic {magic:?}")));
        }
        let version = r.read_u8()?;
        if version != LATENT_VERSION {
            return Err(Error::Format(format!("unsupported latent version {version}")));
        }
        let width = r.read_u32::<LittleEndian>()?;
        let height = r.read_u32::<LittleEndian>()?;
        let kpp = r.read_u32::<LittleEndian>()?;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let alpha = r.read_f32::<LittleEndian>()? as f64;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let grid = GridSpec::new(width, height, kpp)?;
        if n != grid.kernel_count() {
            return Err(Error::Format(format!(
                "kernel count {n} does not match a {width}x{height}x{kpp} grid"
            )));
        }
        let mut entries = Vec::with_capacity(m);
        let mut rec = [0f32; 3];
        for _ in 0..m {
            r.read_f32_into::<LittleEndian>(&mut rec)?;
            entries.push(CovarianceParams {
                var_x: rec[0] as f64,
                var_y: rec[1] as f64,
                cov_xy: rec[2] as f64,
            });
        }
        let dict = KernelDictionary::new(entries, seed)?;
        let mut raw = vec![0f32; n * (m + 5)];
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        let latent = Self::from_values(grid, m, alpha, raw.into_iter().map(f64::from).collect())?;
        Ok((latent, dict))
    }

    pub fn save(&self, dict: &KernelDictionary, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(dict, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, KernelDictionary)> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// A materialized field plus the softmax weights needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Materialized {
    pub field: GaussianField,
    /// `N x M`, row per kernel.
    pub weights: Vec<f64>,
}

/// Maps logits to a valid Gaussian field.
pub fn materialize(latent: &LatentParams, dict: &KernelDictionary) -> Result<GaussianField> {
    check_dict(latent, dict)?;
    let m = latent.dict_size();
    let kernels = par::map_indexed(latent.kernel_count(), |k| {
        let mut w = vec![0.0; m];
        materialize_kernel(latent, dict, k, &mut w)
    });
    let kernels = kernels.into_iter().collect::<Result<Vec<_>>>()?;
    let grid = latent.grid();
    GaussianField::new(kernels, grid.width, grid.height, grid.kernels_per_pixel)
}

/// As [`materialize`], also keeping every kernel's softmax weights.
pub fn materialize_with_weights(latent: &LatentParams, dict: &KernelDictionary) -> Result<Materialized> {
    materialize_reusing(latent, dict, Vec::new())
}

/// As [`materialize_with_weights`], filling `buffer` with the weights so a
/// fitting loop can recycle one allocation across iterations.
pub fn materialize_reusing(latent: &LatentParams, dict: &KernelDictionary, buffer: Vec<f64>) -> Result<Materialized> {
    check_dict(latent, dict)?;
    let (n, m) = (latent.kernel_count(), latent.dict_size());
    let mut weights = buffer;
    weights.resize(n * m, 0.0);
    let kernels = par::map_chunks_mut(&mut weights, m, |k, w| materialize_kernel(latent, dict, k, w));
    let kernels = kernels.into_iter().collect::<Result<Vec<_>>>()?;
    let grid = latent.grid();
    let field = GaussianField::new(kernels, grid.width, grid.height, grid.kernels_per_pixel)?;
    Ok(Materialized { field, weights })
}

fn check_dict(latent: &LatentParams, dict: &KernelDictionary) -> Result<()> {
    if latent.dict_size() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            found: latent.dict_size(),
        });
    }
    Ok(())
}

/// Kernel `k` of the field; its softmax weights are left in `w`.
fn materialize_kernel(latent: &LatentParams, dict: &KernelDictionary, k: usize, w: &mut [f64]) -> Result<GaussianKernel> {
    let logits = latent.kernel(k);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("latent logits"));
    }
    softmax_into(latent.weight_logits(k), w);
    let o = latent.offset_logits(k);
    let p = latent.grid().init_position(k);
    let alpha = latent.alpha();
    Ok(GaussianKernel {
        mu_x: p[0] + alpha * o[0].tanh(),
        mu_y: p[1] + alpha * o[1].tanh(),
        cov: combine_unchecked(w, dict.entries()),
        color: latent.color_logits(k).map(logistic),
    })
}

/// Chains per-kernel parameter gradients back to the logits.
pub fn latent_backward(
    latent: &LatentParams,
    mat: &Materialized,
    grads: &[KernelGrad],
    dict: &KernelDictionary,
) -> Result<Vec<f64>> {
    let (n, m, stride) = (latent.kernel_count(), latent.dict_size(), latent.stride());
    if grads.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: grads.len(),
        });
    }
    if mat.weights.len() != n * m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            found: mat.weights.len(),
        });
    }
    let mut out = vec![0.0; latent.values().len()];
    par::for_each_chunk_mut(&mut out, stride, |k, g_out| {
        let w = &mat.weights[k * m..(k + 1) * m];
        kernel_logit_grad(latent.kernel(k), w, latent.alpha(), &grads[k], dict, g_out);
    });
    Ok(out)
}

/// Gradient with respect to one kernel's logits, given its softmax weights `w`.
/// `logits` and `out` are laid out as one kernel's slice of [`LatentParams::values`].
pub(crate) fn kernel_logit_grad(
    logits: &[f64],
    w: &[f64],
    alpha: f64,
    g: &KernelGrad,
    dict: &KernelDictionary,
    out: &mut [f64],
) {
    let m = w.len();
    let [gx, gy, gc] = g.d_cov;
    // softmax VJP with the covariance gradient projected onto each entry
    let proj = &mut out[..m];
    for (o, e) in proj.iter_mut().zip(dict.entries()) {
        *o = gx * e.var_x + gy * e.var_y + gc * e.cov_xy;
    }
    let mean = dot4(w, proj);
    for (o, wi) in proj.iter_mut().zip(w) {
        *o = wi * (*o - mean);
    }
    for a in 0..2 {
        let t = logits[m + a].tanh();
        out[m + a] = g.d_mu[a] * alpha * (1.0 - t * t);
    }
    for ch in 0..3 {
        let c = logistic(logits[m + 2 + ch]);
        out[m + 2 + ch] = g.d_color[ch] * c * (1.0 - c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dict(entries: &[(f64, f64, f64)]) -> KernelDictionary {
        KernelDictionary::new(
            entries
                .iter()
                .map(|&(a, b, c)| CovarianceParams::new(a, b, c).unwrap())
                .collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        let w = weights(&[0.3; 7]).unwrap();
        for wi in &w {
            assert_abs_diff_eq!(*wi, 1.0 / 7.0, epsilon = 1e-15);
        }
        let mut l = vec![0.0; 730];
        l[5] = 50.0;
        let w = weights(&l).unwrap();
        assert!(w[5] >= 1.0 - 1e-15);

        let w = weights(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in w.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(weights(&[1.0, f64::NAN]), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn fast_exp_tracks_std() {
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-750.0), 0.0);
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -708.0 * (i as f64 / 200_000.0).powi(3);
            let (a, b) = (exp_nonpositive(x), x.exp());
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst:e}");
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.25).collect();
        for (a, b) in weights(&l).unwrap().iter().zip(weights(&shifted).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn combine_examples() {
        let d = dict(&[(1.0, 1.0, 0.0), (2.0, 2.0, 1.0)]);
        assert_eq!(combine_covariance(&[0.0, 1.0], &d).unwrap(), d.entries()[1]);
        let c = combine_covariance(&[0.25, 0.75], &d).unwrap();
        assert_abs_diff_eq!(c.var_x, 1.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.var_y, 1.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.cov_xy, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.determinant(), 2.5, epsilon = 1e-12);
        let u = combine_covariance(&[0.5, 0.5], &d).unwrap();
        assert_eq!(u.as_array(), [1.5, 1.5, 0.5]);
        assert!(matches!(
            combine_covariance(&[1.0], &d),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn position_examples() {
        assert_eq!(position([0.0, 0.0], [3.5, 7.5], 1.0).unwrap(), [3.5, 7.5]);
        let p = position([100.0, -100.0], [0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], -1.0, epsilon = 1e-12);
        let p = position([0.5, -0.25], [3.5, 7.5], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 3.962_117_157_260_01, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 7.255_081_337_596_291, epsilon = 1e-12);
        assert!(position([f64::INFINITY, 0.0], [0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn color_examples() {
        assert_eq!(color([0.0; 3]).unwrap(), [0.5; 3]);
        assert!(color([40.0, 0.0, 0.0]).unwrap()[0] >= 1.0 - 1e-15);
        let c = color([1.0, -1.0, 2.0]).unwrap();
        let expect = [0.731_058_578_630_004_9, 0.268_941_421_369_995_1, 0.880_797_077_977_882_4];
        for (a, b) in c.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(logit(logistic(0.8)), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn materialize_identity_case() {
        let grid = GridSpec::new(3, 2, 4).unwrap();
        let d = dict(&[(1.0, 1.0, 0.0)]);
        let latent = LatentParams::zeros(grid, 1, 1.0).unwrap();
        let f = materialize(&latent, &d).unwrap();
        assert_eq!(f.len(), 24);
        for (i, k) in f.kernels().iter().enumerate() {
            assert_eq!([k.mu_x, k.mu_y], grid.init_position(i));
            assert_eq!(k.cov, CovarianceParams::identity());
            assert_eq!(k.color, [0.5; 3]);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        // tanh drift
        for &t in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let alpha = 0.8;
            let num = (position([t + h, 0.0], [0.0; 2], alpha).unwrap()[0]
                - position([t - h, 0.0], [0.0; 2], alpha).unwrap()[0])
                / (2.0 * h);
            let ana = alpha * (1.0 - t.tanh().powi(2));
            assert!(rel(num, ana) < 1e-4);
            // logistic
            let num = (logistic(t + h) - logistic(t - h)) / (2.0 * h);
            let s = logistic(t);
            assert!(rel(num, s * (1.0 - s)) < 1e-4);
        }
        // softmax vjp against perturbing each logit
        let l = [0.4, -1.1, 0.9, 2.0];
        let g = [0.3, -0.7, 1.2, 0.05];
        let f = |l: &[f64]| -> f64 { weights(l).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum() };
        let w = weights(&l).unwrap();
        let mut ana = [0.0; 4];
        softmax_vjp(&w, &g, &mut ana);
        for i in 0..4 {
            let mut lp = l;
            let mut lm = l;
            lp[i] += h;
            lm[i] -= h;
            let num = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!(rel(num, ana[i]) < 1e-4, "{i}: {num} vs {}", ana[i]);
        }
    }

    #[test]
    fn latent_sidecar_roundtrip() {
        let grid = GridSpec::new(2, 1, 1).unwrap();
        let d = dict(&[(1.0, 1.0, 0.0), (0.5, 2.0, 0.25)]);
        let vals = vec![0.5, -1.0, 0.25, 0.125, 1.0, 2.0, -3.0, 0.0, 4.0, 0.5, -0.5, 0.75, 0.25, -0.125];
        let latent = LatentParams::from_values(grid, 2, 1.0, vals).unwrap();
        let mut buf = Vec::new();
        latent.write_to(&d, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CGSL");
        let (back, back_dict) = LatentParams::read_from(&buf[..]).unwrap();
        assert_eq!(back, latent);
        assert_eq!(back_dict, d);
        assert!(LatentParams::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
