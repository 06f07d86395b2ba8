use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use continuum::format::save_cgsf;
use continuum::{CovarianceParams, GaussianField, GaussianKernel, ImageBuffer};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_continuum"));
    c.env_remove("CONTINUUM_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradient_png(dir: &Path, w: usize, h: usize) -> PathBuf {
    let img = ImageBuffer::from_fn(w, h, |x, y| {
        [x as f64 / w as f64, y as f64 / h as f64, 0.5]
    })
    .quantized();
    let p = dir.join("in.png");
    img.save_png(&p).unwrap();
    p
}

fn field_file(dir: &Path, w: u32, h: u32) -> PathBuf {
    let ks = (0..w * h)
        .map(|i| {
            let cov = CovarianceParams::new(0.8, 0.7, 0.1).unwrap();
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            GaussianKernel::new(x, y, cov, [0.3, 0.5, 0.7]).unwrap()
        })
        .collect();
    let p = dir.join("f.cgsf");
    save_cgsf(&GaussianField::new(ks, w, h, 1).unwrap(), &p).unwrap();
    p
}

#[test]
fn help_lists_every_documented_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("fit", &["--out", "--mode", "--iters", "--lr", "--lambda-freq", "--kpp", "--dict-size", "--prior", "--seed"]),
        ("render", &["--scale", "--width", "--height", "--out", "--exact", "--rcut"]),
        ("stats", &["--out", "--iters"]),
        ("eval", &["--gt", "--scale", "--ychannel", "--rgb", "--shave"]),
        ("bench", &["--scales", "--csv"]),
    ];
    for (cmd, flags) in cases {
        let o = run(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
        assert!(text.contains("CONTINUUM_THREADS"), "{cmd} --help lacks the thread env var");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["render", "x.cgsf", "--out", "y.png"])), 2);
    assert_eq!(code(&run(&["render", "x.cgsf", "--scale", "2", "--width", "4", "--height", "4", "--out", "y.png"])), 2);
    assert_eq!(code(&run(&["eval", "x.cgsf", "--gt", "y.png", "--rgb", "--ychannel"])), 2);
    assert_eq!(code(&run(&["bench", "x.cgsf", "--scales", "4:48"])), 2);
}

#[test]
fn missing_inputs_exit_3_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let o = run(&["fit", s(&missing), "--out", s(&dir.path().join("o.cgsf"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.png"), "{}", stderr(&o));

    let o = run(&["render", s(&dir.path().join("gone.cgsf")), "--scale", "2", "--out", "x.png"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gone.cgsf"));
}

#[test]
fn out_of_range_fit_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = gradient_png(dir.path(), 4, 4);
    let out = dir.path().join("o.cgsf");
    let o = run(&["fit", s(&input), "--out", s(&out), "--alpha", "3", "--iters", "5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("drift amplitude"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn stats_on_an_empty_directory_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["stats", s(dir.path()), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn corrupt_field_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cgsf");
    std::fs::write(&p, b"CGSF\x01garbage").unwrap();
    let o = run(&["render", s(&p), "--scale", "2", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn render_sizes_follow_the_rounded_scale() {
    let dir = tempfile::tempdir().unwrap();
    let f = field_file(dir.path(), 8, 5);
    let out = dir.path().join("r.png");
    let o = run(&["render", s(&f), "--scale", "2.7", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(ImageBuffer::load_png(&out).unwrap().dims(), (22, 14));

    let raw = dir.path().join("r.f32");
    let o = run(&["render", s(&f), "--width", "13", "--height", "9", "--exact", "--out", s(&out), "--raw", s(&raw)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(ImageBuffer::load_png(&out).unwrap().dims(), (13, 9));
    assert_eq!(std::fs::metadata(&raw).unwrap().len(), 13 * 9 * 3 * 4);
}

#[test]
fn oversized_renders_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let f = field_file(dir.path(), 8, 5);
    let o = run(&["render", s(&f), "--scale", "100", "--max-dim", "512", "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn fit_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_png(dir.path(), 6, 4);
    let out = dir.path().join("fit.cgsf");
    let o = run(&[
        "fit", s(&img), "--out", s(&out), "--iters", "30", "--kpp", "1", "--dict-size", "8", "--log-every", "10",
        "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.exists() && out.with_extension("cgsl").exists());
    let report = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "iteration,loss_total,loss_l1,loss_freq,psnr,elapsed_ms,best_psnr");
    assert_eq!(lines.count(), 4);

    // a field scored against its own render
    let gt = dir.path().join("gt.png");
    assert_eq!(code(&run(&["render", s(&out), "--scale", "3", "--out", s(&gt)])), 0);
    let o = run(&["eval", s(&out), "--gt", s(&gt), "--shave", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "gt.png");
    assert_eq!(row[1], "3");
    assert_eq!(row[2], "inf");

    // ground truth that is not a uniform scale of the field
    let odd = dir.path().join("odd.png");
    ImageBuffer::filled(18, 5, [0.5; 3]).save_png(&odd).unwrap();
    let o = run(&["eval", s(&out), "--gt", s(&odd)]);
    assert_eq!(code(&o), 2);
    let o = run(&["eval", s(&out), "--gt", s(&gt), "--scale", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unconstrained_fit_writes_no_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_png(dir.path(), 4, 4);
    let out = dir.path().join("u.cgsf");
    let o = run(&[
        "fit", s(&img), "--out", s(&out), "--mode", "unconstrained", "--iters", "5", "--kpp", "1", "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.exists() && !out.with_extension("cgsl").exists());
}

#[test]
fn bench_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let f = field_file(dir.path(), 6, 4);
    let csv = dir.path().join("b.csv");
    let o = run(&["bench", s(&f), "--scales", "1:4:7", "--csv", s(&csv), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "kind,scale,width,height,out_pixels,elapsed_ms,working_bytes");
    assert_eq!(rows.iter().filter(|r| r.starts_with("build,")).count(), 1);
    assert_eq!(rows.iter().filter(|r| r.starts_with("render,")).count(), 7);
}

#[test]
fn thread_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let f = field_file(dir.path(), 4, 4);
    let o = bin()
        .env("CONTINUUM_THREADS", "2")
        .args(["render", s(&f), "--scale", "2", "--out", s(&dir.path().join("x.png"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .env("CONTINUUM_THREADS", "many")
        .args(["render", s(&f), "--scale", "2", "--out", "x.png"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
