mod common;

use common::*;
use continuum::fitter::init_latent;
use continuum::format::cgsf_bytes;
use continuum::reparam::materialize;
use continuum::{
    fit_image, psnr, render, sample_dictionary, FitConfig, FitMode, ImageBuffer, MetricConfig, PriorModel,
    RenderRequest,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: FitMode, iterations: usize) -> FitConfig {
    FitConfig {
        mode,
        iterations,
        kernels_per_pixel: 1,
        log_every: 10,
        ..FitConfig::default()
    }
}

#[test]
fn flat_gray_is_reached_quickly() {
    let target = ImageBuffer::filled(8, 8, [0.5; 3]);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 32, 0).unwrap();
    let out = fit_image(&target, &dict, &small(FitMode::Reparam, 500)).unwrap();
    assert!(out.report.best_psnr.key() >= 50.0, "{}", out.report.best_psnr);
}

#[test]
fn report_tracks_the_best_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let target = random_image(&mut rng, 6, 5);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 16, 0).unwrap();
    let out = fit_image(&target, &dict, &small(FitMode::Reparam, 60)).unwrap();
    let steps = &out.report.steps;
    assert_eq!(steps.first().unwrap().iteration, 0);
    assert_eq!(out.report.final_step().iteration, 60);
    for w in steps.windows(2) {
        assert!(w[1].best_psnr >= w[0].best_psnr);
        assert!(w[1].iteration > w[0].iteration);
    }
    // the returned field is the best one, re-rendered
    let img = render(&out.field, &RenderRequest::scale(1.0)).unwrap().quantized();
    let p = psnr(&img, &target, &MetricConfig::rgb()).unwrap();
    assert_eq!(p, out.report.best_psnr);
    assert!(out.report.best_psnr >= steps[0].psnr);
}

#[test]
fn fits_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let target = random_image(&mut rng, 5, 5);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 8, 3).unwrap();
    for mode in [FitMode::Reparam, FitMode::Unconstrained] {
        let cfg = FitConfig { seed: 9, ..small(mode, 30) };
        let a = fit_image(&target, &dict, &cfg).unwrap();
        let b = fit_image(&target, &dict, &cfg).unwrap();
        assert_eq!(cgsf_bytes(&a.field), cgsf_bytes(&b.field));
        assert_eq!(a.report.checksum, b.report.checksum);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.report.write_csv(&mut ca, false).unwrap();
        b.report.write_csv(&mut cb, false).unwrap();
        assert_eq!(ca, cb);
    }
}

#[test]
fn both_modes_start_from_the_same_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let target = random_image(&mut rng, 4, 4);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 8, 0).unwrap();
    let a = fit_image(&target, &dict, &small(FitMode::Reparam, 1)).unwrap();
    let b = fit_image(&target, &dict, &small(FitMode::Unconstrained, 1)).unwrap();
    let (sa, sb) = (&a.report.steps[0], &b.report.steps[0]);
    assert_eq!((sa.loss_total, sa.psnr), (sb.loss_total, sb.psnr));
    assert!(a.latent.is_some() && b.latent.is_none());
    let init = init_latent(&target, &dict, &small(FitMode::Reparam, 1)).unwrap();
    let start = render(&materialize(&init, &dict).unwrap(), &RenderRequest::scale(1.0)).unwrap();
    let p = psnr(&start.quantized(), &target, &MetricConfig::rgb()).unwrap();
    assert_eq!(p, sa.psnr);
}

#[test]
fn unconstrained_fits_stay_valid_under_a_large_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let target = random_image(&mut rng, 6, 6);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 8, 0).unwrap();
    let cfg = FitConfig {
        learning_rate: 0.5,
        ..small(FitMode::Unconstrained, 40)
    };
    let out = fit_image(&target, &dict, &cfg).unwrap();
    for k in out.field.kernels() {
        assert!(k.cov.determinant() > 0.0 && k.cov.var_x >= 1e-3 && k.cov.var_y >= 1e-3);
        assert!(k.color.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let target = ImageBuffer::filled(4, 4, [0.5; 3]);
    let dict = sample_dictionary(&PriorModel::shipped_default(), 4, 0).unwrap();
    for cfg in [
        FitConfig { learning_rate: 0.0, ..FitConfig::default() },
        FitConfig { kernels_per_pixel: 3, ..FitConfig::default() },
        FitConfig { freq_loss_weight: -1.0, ..FitConfig::default() },
    ] {
        assert!(fit_image(&target, &dict, &cfg).is_err());
    }
}
