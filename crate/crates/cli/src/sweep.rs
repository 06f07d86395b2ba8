//! Multi-scale render sweep for `bench`.

use std::io::{self, Write};
use std::time::Instant;

use continuum::render::RenderStats;
use continuum::{GaussianField, ImageBuffer, RenderRequest};

pub const CSV_HEADER: &str = "kind,scale,width,height,out_pixels,elapsed_ms,working_bytes";

/// Parses `lo:hi:count` into `count` evenly spaced scales from `lo` to `hi`.
pub fn parse_scales(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, count] = parts[..] else {
        return Err(format!("scale sweep '{spec}' is not lo:hi:count"));
    };
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad sweep start '{lo}'"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad sweep end '{hi}'"))?;
    let count: usize = count.trim().parse().map_err(|_| format!("bad sweep count '{count}'"))?;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(format!("scale sweep needs 0 < lo <= hi, got {lo}:{hi}"));
    }
    if count == 0 {
        return Err("scale sweep count must be >= 1".into());
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: &'static str,
    pub scale: Option<f64>,
    pub width: usize,
    pub height: usize,
    pub elapsed_ms: f64,
    pub working_bytes: Option<usize>,
}

impl SweepRow {
    pub fn out_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Renders `field` once per scale. The field is borrowed immutably throughout,
/// so nothing about it can be rebuilt between scales.
pub fn run<F>(field: &GaussianField, scales: &[f64], mut render: F) -> anyhow::Result<Vec<SweepRow>>
where
    F: FnMut(&GaussianField, &RenderRequest) -> anyhow::Result<(ImageBuffer, RenderStats)>,
{
    let mut rows = Vec::with_capacity(scales.len());
    for &s in scales {
        let req = RenderRequest::scale(s);
        let start = Instant::now();
        let (img, stats) = render(field, &req)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(SweepRow {
            kind: "render",
            scale: Some(s),
            width: img.width(),
            height: img.height(),
            elapsed_ms,
            working_bytes: Some(stats.working_bytes),
        });
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut w: W, build: &SweepRow, rows: &[SweepRow], timings: bool) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in std::iter::once(build).chain(rows) {
        let scale = r.scale.map(|s| format!("{s}")).unwrap_or_default();
        let bytes = r.working_bytes.map(|b| b.to_string()).unwrap_or_default();
        let ms = if timings { r.elapsed_ms } else { 0.0 };
        writeln!(
            w,
            "{},{scale},{},{},{},{ms:.3},{bytes}",
            r.kind,
            r.width,
            r.height,
            r.out_pixels()
        )?;
    }
    Ok(())
}

pub struct Summary {
    pub total_render_ms: f64,
    pub max_render_ms: f64,
    /// Pearson correlation of render time against output pixel count.
    pub correlation: f64,
}

pub fn summarize(rows: &[SweepRow]) -> Summary {
    let times: Vec<f64> = rows.iter().map(|r| r.elapsed_ms).collect();
    let pixels: Vec<f64> = rows.iter().map(|r| r.out_pixels() as f64).collect();
    Summary {
        total_render_ms: times.iter().sum(),
        max_render_ms: times.iter().copied().fold(0.0, f64::max),
        correlation: pearson(&pixels, &times),
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
