use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use rayon::prelude::*;

use continuum::format::{load_cgsf, save_cgsf};
use continuum::prior::{accumulate_stats, fit_prior, QualityWarning};
use continuum::render::render_with_stats;
use continuum::{
    fit_image, psnr, sample_dictionary, ssim, ChannelMode, FitConfig, FitMode, GaussianField, ImageBuffer,
    KernelDictionary, MetricConfig, PriorModel, RenderMode, RenderRequest,
};

use crate::sweep::{self, SweepRow};
use crate::{BenchArgs, CmdResult, EvalArgs, Failure, FitArgs, FitOptions, Mode, RenderArgs, StatsArgs};

pub struct Context {
    pub seed: u64,
    pub quiet: bool,
    pub timings: bool,
}

impl Context {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_image(path: &Path) -> Result<ImageBuffer, Failure> {
    Ok(ImageBuffer::load_png(path).with_context(|| format!("reading image {}", path.display()))?)
}

fn load_field(path: &Path) -> Result<GaussianField, Failure> {
    Ok(load_cgsf(path).with_context(|| format!("reading field {}", path.display()))?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn dictionary(opts: &FitOptions, seed: u64) -> Result<KernelDictionary, Failure> {
    let prior = match &opts.prior {
        Some(p) => PriorModel::load(p).with_context(|| format!("reading prior {}", p.display()))?,
        None => PriorModel::shipped_default(),
    };
    Ok(sample_dictionary(&prior, opts.dict_size, seed)?)
}

fn fit_config(opts: &FitOptions, mode: Mode, seed: u64) -> FitConfig {
    FitConfig {
        mode: match mode {
            Mode::Reparam => FitMode::Reparam,
            Mode::Unconstrained => FitMode::Unconstrained,
        },
        iterations: opts.iters,
        learning_rate: opts.lr,
        freq_loss_weight: opts.lambda_freq,
        seed,
        log_every: opts.log_every,
        kernels_per_pixel: opts.kpp,
        drift_amplitude: opts.alpha,
        ..FitConfig::default()
    }
}

pub fn fit(ctx: &Context, a: FitArgs) -> CmdResult {
    let target = load_image(&a.input)?;
    let dict = dictionary(&a.opts, ctx.seed)?;
    let cfg = fit_config(&a.opts, a.mode, ctx.seed);
    let out = fit_image(&target, &dict, &cfg)?;

    save_cgsf(&out.field, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let report_path = a.report.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut w = create(&report_path)?;
    out.report.write_csv(&mut w, ctx.timings)?;
    w.flush().with_context(|| format!("writing {}", report_path.display()))?;
    if let Some(latent) = &out.latent {
        let sidecar = a.out.with_extension("cgsl");
        latent
            .save(&dict, &sidecar)
            .with_context(|| format!("writing {}", sidecar.display()))?;
    }

    let last = out.report.final_step();
    ctx.say(format!(
        "{} kernels, {} iterations: final PSNR {} dB, best {} dB at iteration {}, checksum {:016x}",
        out.field.len(),
        last.iteration,
        last.psnr,
        out.report.best_psnr,
        out.report.best_iteration,
        out.report.checksum
    ));
    Ok(())
}

pub fn render(ctx: &Context, a: RenderArgs) -> CmdResult {
    let field = load_field(&a.field)?;
    let req = match (a.scale, a.width, a.height) {
        (Some(s), _, _) => RenderRequest::scale(s),
        (None, Some(w), Some(h)) => RenderRequest::dims(w, h),
        _ => return Err(Failure::usage("give --scale or both --width and --height")),
    };
    let req = req
        .r_cut(a.rcut)
        .max_dim(a.max_dim)
        .mode(if a.exact { RenderMode::Exact } else { RenderMode::Fast });
    let start = Instant::now();
    let img = continuum::render(&field, &req)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    img.save_png(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(raw) = &a.raw {
        img.save_raw_planar(raw)
            .with_context(|| format!("writing {}", raw.display()))?;
    }
    ctx.say(format!("rendered {}x{} in {ms:.2} ms", img.width(), img.height()));
    Ok(())
}

pub fn stats(ctx: &Context, a: StatsArgs) -> CmdResult {
    let entries = std::fs::read_dir(&a.dir).with_context(|| format!("reading directory {}", a.dir.display()))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.with_context(|| format!("reading directory {}", a.dir.display()))?.path();
        if has_extension(&p, "png") || has_extension(&p, "cgsf") {
            files.push(p);
        }
    }
    files.sort();

    // image fits use raw parameters so the prior does not feed back into itself
    let opts = FitOptions {
        iters: a.iters,
        lr: 1e-2,
        lambda_freq: 0.1,
        kpp: a.kpp,
        dict_size: 1,
        prior: None,
        alpha: 1.0,
        log_every: a.iters.max(1),
    };
    let needs_fit = files.iter().any(|p| has_extension(p, "png"));
    let dict = if needs_fit { Some(dictionary(&opts, ctx.seed)?) } else { None };
    let cfg = fit_config(&opts, Mode::Unconstrained, ctx.seed);

    let fields: Vec<GaussianField> = files
        .par_iter()
        .map(|p| -> Result<GaussianField, Failure> {
            if has_extension(p, "cgsf") {
                return load_field(p);
            }
            let img = load_image(p)?;
            let dict = dict.as_ref().expect("dictionary exists when images are present");
            let out = fit_image(&img, dict, &cfg).with_context(|| format!("fitting {}", p.display()))?;
            Ok(out.field)
        })
        .collect::<Result<_, _>>()?;

    let pools = accumulate_stats(fields.iter())?;
    let fit = fit_prior(&pools)?;
    fit.model
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;

    if !ctx.quiet {
        println!("{} files, {} kernels", files.len(), pools.len());
        println!("channel,mean,std,q_low,q_high");
        for (name, c) in fit.model.channels() {
            println!("{name},{},{},{},{}", c.mean, c.std, c.q_low, c.q_high);
        }
    }
    for w in &fit.warnings {
        match w {
            QualityWarning::DegenerateRange { channel } => {
                eprintln!("warning: channel {channel} has a degenerate quantile range")
            }
        }
    }
    Ok(())
}

pub fn eval(ctx: &Context, a: EvalArgs) -> CmdResult {
    let field = load_field(&a.field)?;
    let gt = load_image(&a.gt)?;
    let (w0, h0) = (field.lr_width() as f64, field.lr_height() as f64);
    let (gw, gh) = gt.dims();
    let scale = match a.scale {
        Some(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Failure::usage(format!("--scale must be positive, got {s}")));
            }
            let expect = ((s * w0).round() as usize, (s * h0).round() as usize);
            if expect != (gw, gh) {
                return Err(Failure::usage(format!(
                    "scale {s} gives {}x{}, but {} is {gw}x{gh}",
                    expect.0,
                    expect.1,
                    a.gt.display()
                )));
            }
            s
        }
        None => {
            let s = gw as f64 / w0;
            if (s * h0).round() as usize != gh {
                return Err(Failure::usage(format!(
                    "{} is {gw}x{gh}, which is not a uniform scale of the {w0}x{h0} field; pass --scale",
                    a.gt.display()
                )));
            }
            s
        }
    };

    let img = continuum::render(&field, &RenderRequest::dims(gw as u32, gh as u32))?.quantized();
    let mode = if a.rgb { ChannelMode::Rgb } else { ChannelMode::YChannel };
    let mut cfg = MetricConfig::for_scale(scale).with_channel_mode(mode);
    if let Some(s) = a.shave {
        cfg = cfg.with_shave(s);
    }
    let p = psnr(&img, &gt, &cfg)?;
    let s = ssim(&img, &gt, &cfg)?;

    let name = a.gt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let row = format!("{name},{scale},{p},{s:.9}");
    let header = "image,scale,psnr_db,ssim";
    match &a.csv {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{header}\n{row}")
                .and_then(|_| w.flush())
                .with_context(|| format!("writing {}", path.display()))?;
            ctx.say(format!("PSNR {p} dB, SSIM {s:.6}"));
        }
        None => println!("{header}\n{row}"),
    }
    Ok(())
}

pub fn bench(ctx: &Context, a: BenchArgs) -> CmdResult {
    let scales = sweep::parse_scales(&a.scales).map_err(Failure::usage)?;

    let mut builds = 0usize;
    let start = Instant::now();
    let field = if has_extension(&a.input, "cgsf") {
        load_field(&a.input)?
    } else {
        let target = load_image(&a.input)?;
        let dict = dictionary(&a.opts, ctx.seed)?;
        fit_image(&target, &dict, &fit_config(&a.opts, a.mode, ctx.seed))?.field
    };
    builds += 1;
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(p) = &a.field_out {
        save_cgsf(&field, p).with_context(|| format!("writing {}", p.display()))?;
    }

    let rows = sweep::run(&field, &scales, |f, req| Ok(render_with_stats(f, req)?))?;
    if builds != 1 {
        return Err(anyhow::anyhow!("field was built {builds} times").into());
    }

    let path_desc;
    let mut out: Box<dyn Write> = match &a.csv {
        Some(p) => {
            path_desc = p.display().to_string();
            Box::new(create(p)?)
        }
        None => {
            path_desc = "stdout".into();
            Box::new(std::io::stdout().lock())
        }
    };
    let build_row = SweepRow {
        kind: "build",
        scale: None,
        width: field.lr_width() as usize,
        height: field.lr_height() as usize,
        elapsed_ms: build_ms,
        working_bytes: None,
    };
    sweep::write_csv(&mut out, &build_row, &rows, ctx.timings)
        .and_then(|_| out.flush())
        .with_context(|| format!("writing {path_desc}"))?;

    let summary = sweep::summarize(&rows);
    ctx.say(format!(
        "builds {builds}, build {:.1} ms, {} renders in {:.1} ms (largest {:.2} ms), time vs pixels r = {:.4}",
        build_ms,
        rows.len(),
        summary.total_render_ms,
        summary.max_render_ms,
        summary.correlation
    ));
    Ok(())
}
