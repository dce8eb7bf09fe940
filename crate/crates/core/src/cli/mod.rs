//! The `opama` command line: argument types and the commands behind them.
//!
//! Exit codes: 0 on success, 1 for bad flags, configs, contract violations
//! and failed verification, 2 for file and codec failures.

pub mod verify;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::geometry::io::{load_equirect, load_mask, load_rgb, save_mask, save_rgb};
use crate::geometry::{cubemap_to_equirect, equirect_to_cubemap, extract_nfov, CubeMap, EquirectImage, Face, NFoVView, ViewCoords};
use crate::pipeline::{generate_panorama, write_outputs, Models, RunConfig, SynthSceneSpec, Trainer};
use crate::ssm::bench::{bench_scan, Precision, Variant, CSV_HEADER};
use crate::ssm::ScanDims;
use crate::tensor::checkpoint::Checkpoint;
use verify::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const LOSS_HEADER: &str = "step,loss,lr";

#[derive(Debug, Parser)]
#[command(name = "opama", version, about = "360-degree panorama out-painting on a toy latent diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert between equirectangular, cubemap and perspective images.
    Project(ProjectArgs),
    /// Train on the synthetic panorama corpus.
    Train(TrainArgs),
    /// Grow a panorama from a seed view, a prompt, or both.
    Generate(GenerateArgs),
    /// Run the property suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Time the scan kernels.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Projection {
    Cubemap,
    Equirect,
    Nfov,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Equirect image, or a directory of face images for `--to equirect`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub to: Projection,
    /// Optional validity mask of the equirect input.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long, default_value_t = 90.0)]
    pub fov: f64,
    /// Face or view extent; defaults to half the equirect height for faces
    /// and 64 for views.
    #[arg(long)]
    pub size: Option<usize>,
    /// Equirect width when assembling from faces; defaults to four faces.
    #[arg(long)]
    pub width: Option<usize>,
    /// Output image, or output directory for `--to cubemap`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory: read if it holds a corpus, written otherwise.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub ckpt_out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global-local scales, e.g. `2,3,4`.
    #[arg(long, value_delimiter = ',')]
    pub gma_scales: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Perspective seed image placed at `--lon`/`--lat` with the configured fov.
    #[arg(long)]
    pub seed_image: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    /// Defaults to the config written next to the checkpoint, if any.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub cfg_scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub gma_scales: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = ["scan", "grad", "geometry", "diffusion", "vcr", "gma", "all"])]
    pub suite: String,
    /// Worker threads for running properties side by side.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kernel {
    Scan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchVariant {
    Seq,
    Parallel,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchPrecision {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "scan")]
    pub kernel: Kernel,
    #[arg(long = "L")]
    pub l: usize,
    #[arg(long = "N", default_value_t = 16)]
    pub n: usize,
    #[arg(long = "D", default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value = "both")]
    pub variant: BenchVariant,
    #[arg(long, default_value = "f64")]
    pub precision: BenchPrecision,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write rows here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_CONTRACT
    }
}

/// Parse `args` (program name first) and run. Returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONTRACT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Project(a) => cmd_project(&a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a, out).map(|_| EXIT_OK),
        Command::Generate(a) => cmd_generate(&a).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Bench(a) => cmd_bench(&a, out).map(|_| EXIT_OK),
    }
}

fn face_path(dir: &Path, f: Face) -> PathBuf {
    dir.join(format!("{}.png", f.name()))
}

fn face_mask_path(dir: &Path, f: Face) -> PathBuf {
    dir.join(format!("{}_mask.png", f.name()))
}

pub fn save_cubemap(dir: &Path, cube: &CubeMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in Face::ALL {
        save_rgb(face_path(dir, f), cube.face(f))?;
        if let Some(m) = cube.face_mask(f) {
            save_mask(face_mask_path(dir, f), m)?;
        }
    }
    Ok(())
}

/// Faces are `F.png … D.png`; masks `F_mask.png …` are used when all six exist.
pub fn load_cubemap(dir: &Path) -> Result<CubeMap> {
    let faces = Face::ALL.iter().map(|&f| load_rgb(face_path(dir, f))).collect::<Result<Vec<_>>>()?;
    let masks = if Face::ALL.iter().all(|&f| face_mask_path(dir, f).exists()) {
        Some(Face::ALL.iter().map(|&f| load_mask(face_mask_path(dir, f))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    CubeMap::new(faces, masks)
}

fn save_equirect(path: &Path, img: &EquirectImage) -> Result<()> {
    save_rgb(path, &img.pixels)?;
    if img.mask.is_some() {
        save_mask(path.with_extension("mask.png"), &img.mask_or_ones())?;
    }
    Ok(())
}

pub fn cmd_project(a: &ProjectArgs) -> Result<()> {
    match a.to {
        Projection::Cubemap => {
            let img = load_equirect(&a.input, a.mask.as_deref())?;
            let size = a.size.unwrap_or(img.height() / 2);
            save_cubemap(&a.out, &equirect_to_cubemap(&img, size)?)
        }
        Projection::Equirect => {
            let cube = load_cubemap(&a.input)?;
            let w = a.width.unwrap_or(4 * cube.face_size);
            if !w.is_multiple_of(2) {
                return Err(Error::Contract(format!("equirect width {w} must be even")));
            }
            save_equirect(&a.out, &cubemap_to_equirect(&cube, w, w / 2)?)
        }
        Projection::Nfov => {
            let img = load_equirect(&a.input, a.mask.as_deref())?;
            let view = extract_nfov(&img, ViewCoords::new(a.lon, a.lat, a.fov)?, a.size.unwrap_or(64))?;
            save_rgb(&a.out, &view.image)?;
            if let Some(m) = &view.mask {
                save_mask(a.out.with_extension("mask.png"), m)?;
            }
            Ok(())
        }
    }
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, scales: Option<&Vec<usize>>) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(sc) = scales {
        cfg.gma_active_scales = sc.clone();
    }
    cfg.validate()
}

/// The config a checkpoint was trained with, stored beside it.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

const CAPTIONS: &str = "captions.txt";

fn pano_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pano_{i:04}.png"))
}

/// Read a corpus written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Vec<(EquirectImage, String)>> {
    let captions = fs::read_to_string(dir.join(CAPTIONS))?;
    captions.lines().enumerate().map(|(i, c)| Ok((EquirectImage::new(load_rgb(pano_path(dir, i))?, None)?, c.to_string()))).collect()
}

pub fn save_corpus(dir: &Path, corpus: &[(EquirectImage, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut captions = String::new();
    for (i, (img, c)) in corpus.iter().enumerate() {
        save_rgb(pano_path(dir, i), &img.pixels)?;
        captions.push_str(c);
        captions.push('\n');
    }
    fs::write(dir.join(CAPTIONS), captions)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config_or_default(a.config.as_deref())?;
    apply_overrides(&mut cfg, a.seed, a.gma_scales.as_ref())?;
    let mut tr = match &a.resume {
        Some(p) => Trainer::resume(&cfg, p)?,
        None => Trainer::new(&cfg)?,
    };
    if let Some(dir) = &a.data_dir {
        if dir.join(CAPTIONS).exists() {
            tr.corpus = load_corpus(dir)?;
            if tr.corpus.is_empty() {
                return Err(Error::Contract(format!("corpus in {} is empty", dir.display())));
            }
        } else {
            save_corpus(dir, &tr.corpus)?;
        }
    }
    if let Some(parent) = a.ckpt_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| a.ckpt_out.with_extension("csv"));
    let append = a.resume.is_some() && csv_path.exists();
    let mut csv = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&csv_path)?;
    if !append {
        writeln!(csv, "{LOSS_HEADER}")?;
    }
    let first = tr.step;
    for _ in 0..a.steps {
        let loss = tr.step_once()?;
        writeln!(csv, "{},{},{}", tr.step, loss, tr.lr())?;
    }
    csv.flush()?;
    tr.checkpoint().save(&a.ckpt_out)?;
    fs::write(config_path(&a.ckpt_out), cfg.to_text())?;
    writeln!(out, "trained steps {}..{} -> {}", first + 1, tr.step, a.ckpt_out.display())?;
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let text = a.text.clone().unwrap_or_default();
    if a.seed_image.is_none() && text.trim().is_empty() {
        return Err(Error::Contract("generate needs --seed-image, --text, or both".into()));
    }
    let beside = config_path(&a.ckpt);
    let cfg_file = a.config.clone().or_else(|| beside.exists().then_some(beside));
    let mut cfg = config_or_default(cfg_file.as_deref())?;
    if let Some(s) = a.sample_steps {
        cfg.sample_steps = s;
    }
    if let Some(s) = a.cfg_scale {
        cfg.cfg_scale = s;
    }
    apply_overrides(&mut cfg, a.seed, a.gma_scales.as_ref())?;
    let models = Models::from_checkpoint(&cfg, &Checkpoint::load(&a.ckpt)?)?;
    let seed_view = match &a.seed_image {
        Some(p) => Some(NFoVView::new(ViewCoords::new(a.lon, a.lat, cfg.view_fov)?, load_rgb(p)?, None)?),
        None => None,
    };
    let g = generate_panorama(&models, seed_view.as_ref(), &text, &cfg)?;
    write_outputs(&a.out_dir, &g, &cfg, &text)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let suite: Suite = a.suite.parse()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs.max(1)).build().map_err(|e| Error::Contract(e.to_string()))?;
    let checks = pool.install(|| run_suite(suite));
    for c in &checks {
        writeln!(out, "{c}")?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        writeln!(out, "all {} properties passed", checks.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "FAILED: {}", failed.join(", "))?;
        Ok(EXIT_CONTRACT)
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let Kernel::Scan = a.kernel;
    let dims = ScanDims { l: a.l, n: a.n, d: a.d };
    let variants = match a.variant {
        BenchVariant::Seq => vec![Variant::Seq],
        BenchVariant::Parallel => vec![Variant::Parallel],
        BenchVariant::Both => vec![Variant::Seq, Variant::Parallel],
    };
    let precision = match a.precision {
        BenchPrecision::F64 => Precision::F64,
        BenchPrecision::F32 => Precision::F32,
    };
    if a.reps == 0 {
        return Err(Error::Contract("--reps must be at least 1".into()));
    }
    let mut rows = vec![CSV_HEADER.to_string()];
    for rep in 0..a.reps {
        for &v in &variants {
            rows.push(bench_scan(dims, v, precision, a.seed.wrapping_add(rep as u64))?.csv());
        }
    }
    let text = rows.join("\n") + "\n";
    match &a.csv {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Write a synthetic seed view for demos and tests.
pub fn write_demo_seed(path: &Path, seed: u64, cfg: &RunConfig) -> Result<()> {
    let (pano, _) = crate::pipeline::synth_panorama(&SynthSceneSpec::random(seed), cfg.pano_w, cfg.pano_h)?;
    let view = extract_nfov(&pano, ViewCoords::new(0.0, 0.0, cfg.view_fov)?, cfg.view_size)?;
    save_rgb(path, &view.image)
}
