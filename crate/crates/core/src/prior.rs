//! Empirical covariance prior and the kernel dictionary sampled from it.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CovarianceParams, GaussianField};
use crate::rng::{substream, Stream};

pub const PRIOR_FORMAT_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-4;
/// Lower bound applied to sampled variances.
pub const VAR_FLOOR: f64 = 1e-3;
pub const QUANTILE_LOW: f64 = 0.005;
pub const QUANTILE_HIGH: f64 = 0.995;
pub const DEFAULT_DICTIONARY_SIZE: usize = 730;
pub const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000_000;

const DEFAULT_PRIOR_JSON: &str = include_str!("../data/default_prior.json");

/// Gaussian fit and empirical 0.5%/99.5% range of one covariance channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    pub q_low: f64,
    pub q_high: f64,
}

impl ChannelStats {
    fn validate(&self, channel: &str) -> Result<()> {
        let finite = [self.mean, self.std, self.q_low, self.q_high]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.std < STD_FLOOR || self.q_low > self.q_high {
            return Err(Error::InvalidConfig(format!(
                "prior channel {channel} is invalid: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub version: u32,
    pub sample_count: u64,
    pub var_x: ChannelStats,
    pub var_y: ChannelStats,
    pub cov_xy: ChannelStats,
    /// How the model was obtained when it was not fitted to a corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivation: Option<String>,
}

impl PriorModel {
    /// The shipped prior: a normal per channel whose central 99% interval is
    /// `var_x ∈ [0, 2.4]`, `var_y ∈ [0, 2.2]`, `cov_xy ∈ [-0.9, 1.5]`.
    pub fn shipped_default() -> Self {
        Self::from_json(DEFAULT_PRIOR_JSON).expect("bundled prior is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PRIOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported prior version {}",
                self.version
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("prior has zero samples".into()));
        }
        self.var_x.validate("var_x")?;
        self.var_y.validate("var_y")?;
        self.cov_xy.validate("cov_xy")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: PriorModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn channels(&self) -> [(&'static str, &ChannelStats); 3] {
        [
            ("var_x", &self.var_x),
            ("var_y", &self.var_y),
            ("cov_xy", &self.cov_xy),
        ]
    }
}

/// Raw covariance samples collected from fitted fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplePools {
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov_xy: Vec<f64>,
}

impl SamplePools {
    pub fn push_field(&mut self, field: &GaussianField) {
        for k in field.kernels() {
            self.var_x.push(k.cov.var_x);
            self.var_y.push(k.cov.var_y);
            self.cov_xy.push(k.cov.cov_xy);
        }
    }

    pub fn merge(&mut self, other: SamplePools) {
        self.var_x.extend(other.var_x);
        self.var_y.extend(other.var_y);
        self.cov_xy.extend(other.cov_xy);
    }

    pub fn len(&self) -> usize {
        self.var_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.var_x.is_empty()
    }
}

/// Pools the covariance triple of every kernel in `fields`.
pub fn accumulate_stats<'a, I>(fields: I) -> Result<SamplePools>
where
    I: IntoIterator<Item = &'a GaussianField>,
{
    let mut pools = SamplePools::default();
    for f in fields {
        pools.push_field(f);
    }
    if pools.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(pools)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QualityWarning {
    /// The channel's 0.5% and 99.5% quantiles coincide.
    DegenerateRange { channel: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorFit {
    pub model: PriorModel,
    pub warnings: Vec<QualityWarning>,
}

/// Linear-interpolation quantile of sorted data (`h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn channel_stats(name: &'static str, pool: &[f64]) -> Result<(ChannelStats, Option<QualityWarning>)> {
    if pool.len() < 2 {
        return Err(Error::InsufficientSamples {
            channel: name,
            count: pool.len(),
        });
    }
    if pool.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("covariance sample pool"));
    }
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let stats = ChannelStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
        q_low: quantile_sorted(&sorted, QUANTILE_LOW),
        q_high: quantile_sorted(&sorted, QUANTILE_HIGH),
    };
    let warning = (stats.q_low >= stats.q_high).then_some(QualityWarning::DegenerateRange { channel: name });
    Ok((stats, warning))
}

/// Fits a normal and the 0.5%/99.5% range to each channel's pool.
pub fn fit_prior(pools: &SamplePools) -> Result<PriorFit> {
    if pools.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut warnings = Vec::new();
    let mut fit = |name, pool: &[f64]| -> Result<ChannelStats> {
        let (s, w) = channel_stats(name, pool)?;
        warnings.extend(w);
        Ok(s)
    };
    let var_x = fit("var_x", &pools.var_x)?;
    let var_y = fit("var_y", &pools.var_y)?;
    let cov_xy = fit("cov_xy", &pools.cov_xy)?;
    Ok(PriorFit {
        model: PriorModel {
            version: PRIOR_FORMAT_VERSION,
            sample_count: pools.len() as u64,
            var_x,
            var_y,
            cov_xy,
            derivation: None,
        },
        warnings,
    })
}

/// Fixed set of covariance triples that kernels are combined from.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDictionary {
    entries: Vec<CovarianceParams>,
    seed: u64,
}

impl KernelDictionary {
    pub fn new(entries: Vec<CovarianceParams>, seed: u64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig("dictionary must not be empty".into()));
        }
        for e in &entries {
            e.validate()?;
        }
        Ok(Self { entries, seed })
    }

    pub fn entries(&self) -> &[CovarianceParams] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

struct Sampler<R> {
    rng: R,
    rejections: u64,
}

impl<R: Rng> Sampler<R> {
    fn reject(&mut self) -> Result<()> {
        self.rejections += 1;
        if self.rejections >= MAX_CONSECUTIVE_REJECTIONS {
            return Err(Error::RejectionOverflow {
                attempts: self.rejections,
            });
        }
        Ok(())
    }

    /// Normal draw truncated to `[max(q_low, floor), max(q_high, floor)]`.
    fn truncated(&mut self, c: &ChannelStats, floor: f64) -> Result<f64> {
        let lo = c.q_low.max(floor);
        let hi = c.q_high.max(floor);
        if hi <= lo {
            return Ok(lo);
        }
        loop {
            let z: f64 = self.rng.sample(StandardNormal);
            let x = c.mean + c.std * z;
            if (lo..=hi).contains(&x) {
                return Ok(x);
            }
            self.reject()?;
        }
    }
}

/// Draws `m` positive-definite covariance triples from `prior`.
///
/// Each channel is sampled independently from its normal truncated to the
/// prior's quantile range; triples that are not strictly positive definite are
/// redrawn. The result is a pure function of `(prior, m, seed)`.
pub fn sample_dictionary(prior: &PriorModel, m: usize, seed: u64) -> Result<KernelDictionary> {
    if m == 0 {
        return Err(Error::InvalidConfig("dictionary size must be >= 1".into()));
    }
    prior.validate()?;
    let mut sampler = Sampler {
        rng: substream(seed, Stream::Dictionary),
        rejections: 0,
    };
    let mut entries = Vec::with_capacity(m);
    while entries.len() < m {
        sampler.rejections = 0;
        loop {
            let p = CovarianceParams {
                var_x: sampler.truncated(&prior.var_x, VAR_FLOOR)?,
                var_y: sampler.truncated(&prior.var_y, VAR_FLOOR)?,
                cov_xy: sampler.truncated(&prior.cov_xy, f64::NEG_INFINITY)?,
            };
            if p.validate().is_ok() {
                entries.push(p);
                break;
            }
            sampler.reject()?;
        }
    }
    KernelDictionary::new(entries, seed)
}
