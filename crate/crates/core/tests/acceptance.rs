use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use opama::cli::verify::{run_suite, Check, Suite};
use opama::cli::{config_path, main_with, write_demo_seed, EXIT_OK};
use opama::conditioning::text_dropout;
use opama::geometry::{composite_nfov, extract_nfov, EquirectImage, ViewCoords};
use opama::pipeline::synth::SynthSceneSpec;
use opama::pipeline::{generate_panorama, synth_panorama, Models, RunConfig, Trainer};
use opama::rng;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, criterion: usize, pass: bool, detail: String) {
        show(&format!("criterion {criterion:>2} {} {detail}", if pass { "PASS" } else { "FAIL" }));
        self.lines.push((criterion, pass, detail));
    }

    /// Record checks of `suite` whose names satisfy `pick` as one criterion.
    fn suite(&mut self, criterion: usize, suite: Suite, pick: fn(&str) -> bool, limit: Option<Duration>) {
        let start = Instant::now();
        let checks: Vec<Check> = run_suite(suite).into_iter().filter(|c| pick(c.name)).collect();
        let elapsed = start.elapsed();
        let failed = checks.iter().filter(|c| !c.pass).count();
        let mut pass = failed == 0 && !checks.is_empty();
        let mut detail = format!("{} {}/{} checks in {:.1}s", suite.name(), checks.len() - failed, checks.len(), elapsed.as_secs_f64());
        if let Some(l) = limit {
            pass &= elapsed < l;
            detail.push_str(&format!(" (limit {}s)", l.as_secs()));
        }
        for c in &checks {
            show(&format!("    {c}"));
        }
        self.record(criterion, pass, detail);
    }
}

/// Straight to the process stdout so the table shows even when the harness
/// captures test output.
fn show(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn any(_: &str) -> bool {
    true
}

fn mean_abs_horizontal(p: &EquirectImage) -> (f64, f64) {
    let (w, h, c) = (p.width(), p.height(), p.channels());
    let d = p.pixels.data();
    let at = |y: usize, x: usize, k: usize| d[(y * w + x) * c + k];
    let (mut interior, mut seam) = (0.0, 0.0);
    for y in 0..h {
        for k in 0..c {
            for x in 0..w - 1 {
                interior += (at(y, x + 1, k) - at(y, x, k)).abs();
            }
            seam += (at(y, 0, k) - at(y, w - 1, k)).abs();
        }
    }
    (seam / (h * c) as f64, interior / (h * c * (w - 1)) as f64)
}

fn seed_view(cfg: &RunConfig) -> opama::geometry::NFoVView {
    let (pano, _) = synth_panorama(&SynthSceneSpec::random(777), cfg.pano_w, cfg.pano_h).unwrap();
    extract_nfov(&pano, ViewCoords::new(0.0, 0.0, cfg.view_fov).unwrap(), cfg.view_size).unwrap()
}

fn generation_properties(report: &mut Report, models: &Models, cfg: &RunConfig, caption: &str) {
    let seed = seed_view(cfg);
    let seeded = composite_nfov(&EquirectImage::blank(cfg.pano_w, cfg.pano_h, 3).unwrap(), &seed).unwrap();
    let modes: [(&str, Option<&opama::geometry::NFoVView>, &str); 3] =
        [("image-only", Some(&seed), ""), ("text-only", None, caption), ("image+text", Some(&seed), caption)];
    for (name, view, text) in modes {
        let start = Instant::now();
        let g = match generate_panorama(models, view, text, cfg) {
            Ok(g) => g,
            Err(e) => {
                report.record(9, false, format!("{name}: {e}"));
                continue;
            }
        };
        let p = &g.panorama;
        let unknown = p.unknown_count();
        let mut detail = format!("{name}: {unknown} unknown pixels");
        let mut pass = unknown == 0;
        if view.is_some() {
            let mask = seeded.mask_or_ones();
            let (mut err, mut n) = (0.0, 0usize);
            for (i, &m) in mask.data().iter().enumerate() {
                if m > 0.5 {
                    for k in 0..3 {
                        err += (p.pixels.data()[i * 3 + k] - seeded.pixels.data()[i * 3 + k]).abs();
                        n += 1;
                    }
                }
            }
            let mean = err / n as f64;
            pass &= mean <= 2.0 / 255.0;
            detail.push_str(&format!(", seed change {mean:.2e} (limit {:.2e})", 2.0 / 255.0));
        }
        let (seam, interior) = mean_abs_horizontal(p);
        pass &= seam <= 1.5 * interior;
        detail.push_str(&format!(", seam gradient {seam:.4} vs interior {interior:.4}, {:.1}s", start.elapsed().as_secs_f64()));
        report.record(9, pass, detail);
    }

    let mut r = rng::seeded(9);
    let dropped = (0..10_000).filter(|_| text_dropout("a prompt", &mut r).is_empty()).count();
    let freq = dropped as f64 / 1e4;
    report.record(9, (freq - 0.5).abs() <= 0.02, format!("text dropout frequency {freq:.4} over 10^4 draws"));
}

fn run_cli(args: &[&str]) -> i32 {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("opama").chain(args.iter().copied()), &mut out, &mut err);
    if code != EXIT_OK {
        eprintln!("{}", String::from_utf8_lossy(&err));
    }
    code
}

fn determinism(report: &mut Report, dir: &Path, ckpt: &Path) {
    let cfg = RunConfig::load(config_path(ckpt)).unwrap();
    let seed = dir.join("seed.png");
    write_demo_seed(&seed, 4242, &cfg).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let code = run_cli(&[
            "generate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--seed-image",
            seed.to_str().unwrap(),
            "--text",
            "a red box",
            "--seed",
            "5",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        outputs.push((code, std::fs::read(out.join("panorama.png")).unwrap_or_default()));
    }
    let same = outputs[0].1 == outputs[1].1 && !outputs[0].1.is_empty();
    report.record(
        10,
        outputs.iter().all(|(c, _)| *c == EXIT_OK) && same,
        format!("two generate runs, exit codes {} {}, panorama.png identical: {same}", outputs[0].0, outputs[1].0),
    );
}

#[test]
fn acceptance() {
    let mut report = Report { lines: Vec::new() };
    report.suite(1, Suite::Scan, |n| !n.starts_with("zoh"), None);
    report.suite(2, Suite::Scan, |n| n.starts_with("zoh"), None);
    report.suite(3, Suite::Grad, any, Some(Duration::from_secs(300)));
    report.suite(4, Suite::Geometry, any, None);
    report.suite(5, Suite::Diffusion, any, None);
    report.suite(6, Suite::Vcr, any, None);
    report.suite(7, Suite::Gma, any, None);

    let cfg = RunConfig::default();
    let mut tr = Trainer::new(&cfg).unwrap();
    let start = Instant::now();
    let losses: Vec<f64> = (0..2000).map(|_| tr.step_once().unwrap()).collect();
    let elapsed = start.elapsed();
    let first = losses[..100].iter().sum::<f64>() / 100.0;
    let last = losses[1500..].iter().sum::<f64>() / 500.0;
    report.record(
        8,
        elapsed <= Duration::from_secs(30 * 60) && last <= 0.5 * first && tr.corpus.len() == 64,
        format!(
            "{} panoramas, 2000 steps in {:.0}s, first-100 mean {first:.4}, last-500 mean {last:.4}, ratio {:.3}",
            tr.corpus.len(),
            elapsed.as_secs_f64(),
            last / first
        ),
    );

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.ckpt");
    tr.checkpoint().save(&ckpt).unwrap();
    std::fs::write(config_path(&ckpt), cfg.to_text()).unwrap();

    let caption = tr.corpus[0].1.clone();
    generation_properties(&mut report, &tr.models, &cfg, &caption);
    determinism(&mut report, dir.path(), &ckpt);

    let failed: Vec<String> = report.lines.iter().filter(|l| !l.1).map(|l| format!("{}: {}", l.0, l.2)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
