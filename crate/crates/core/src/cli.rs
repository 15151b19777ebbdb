//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Any long flag may also be given in a `--config` file as `key=value`
//! (`key=true` for switches); flags on the command line take precedence.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ndarray::Axis;

use crate::container::{read_container, write_container, Container};
use crate::datagen::{
    make_crystal_phantom, make_gaussian_mask, make_mri_phantom, make_probe, make_uniform_mask, simulate_mri, simulate_stem,
    CrystalSpec,
};
use crate::diffusion::{make_linear_schedule, Denoiser, SamplerCoefficient, ShrinkageDenoiser, ZeroScore};
use crate::error::Error;
use crate::external::{serve, ExternalDenoiser};
use crate::inference::{reconstruct, write_progress_csv, Measurements, Mode, ReconConfig};
use crate::metrics::{psnr, rel_error, volume_ssim, SsimParams};
use crate::mri::MriStepConfig;
use crate::partition::{bench_partition, write_bench_csv};
use crate::pgm::{export_pgm, RangePolicy};
use crate::stem::{StemGeometry, StemStepConfig};
use crate::types::ProbeParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "msrecon", version, about = "Multi-slice MRI and 4D-STEM reconstruction with diffusion priors")]
pub struct Cli {
    /// Plain-text key=value file supplying default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic object volume.
    MakePhantom(PhantomArgs),
    /// Generate a k-space sampling mask.
    MakeMask(MaskArgs),
    /// Generate a normalised probe wave.
    MakeProbe(ProbeArgs),
    /// Apply a forward model to a volume.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Reconstruct a volume from measurements.
    Recon(ReconArgs),
    /// Compare two volumes.
    Metrics(MetricsArgs),
    /// Export a slice or image as a grayscale picture.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Time the partitioned sampler for several worker counts.
    Bench(BenchArgs),
    /// Answer score requests on standard streams.
    #[command(hide = true)]
    ServeDenoiser(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhantomKind {
    Mri,
    Crystal,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum, default_value = "mri")]
    pub kind: PhantomKind,
    #[arg(long, default_value_t = 8)]
    pub slices: usize,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Crystal pixel size in Angstrom.
    #[arg(long, default_value_t = 0.25)]
    pub pixel_size: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskKindArg {
    Uniform,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    pub kind: MaskKindArg,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 2.0)]
    pub accel: f64,
    #[arg(long, default_value_t = 0.15)]
    pub center_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct OpticsArgs {
    /// Electron wavelength in Angstrom.
    #[arg(long, default_value_t = 0.0251)]
    pub wavelength: f64,
    /// Aperture semi-angle in radians.
    #[arg(long, default_value_t = 0.025)]
    pub semi_angle: f64,
    /// Defocus in Angstrom.
    #[arg(long, default_value_t = 0.0)]
    pub defocus: f64,
    /// Real-space pixel size in Angstrom.
    #[arg(long, default_value_t = 0.25)]
    pub pixel_size: f64,
}

impl OpticsArgs {
    fn params(&self, n: usize) -> ProbeParams {
        ProbeParams {
            wavelength: self.wavelength,
            semi_angle: self.semi_angle,
            defocus: self.defocus,
            pixel_size: self.pixel_size,
            n,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[command(flatten)]
    pub optics: OpticsArgs,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub shift_y: isize,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub shift_x: isize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCmd {
    /// Masked k-space of every slice.
    Mri(SimMriArgs),
    /// Far-field diffraction intensities over a raster scan.
    Stem(SimStemArgs),
}

#[derive(Debug, Args)]
pub struct SimMriArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimStemArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[command(flatten)]
    pub optics: OpticsArgs,
    /// Distance between slices in Angstrom.
    #[arg(long, default_value_t = 2.0)]
    pub slice_spacing: f64,
    #[arg(long, default_value_t = 8)]
    pub scan_y: usize,
    #[arg(long, default_value_t = 8)]
    pub scan_x: usize,
    #[arg(long, default_value_t = 2)]
    pub scan_step_px: usize,
    /// Expected electrons per pattern; omit for noiseless data.
    #[arg(long)]
    pub dose: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Dart,
    Drift,
    Physics,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PriorArg {
    Shrinkage,
    Zero,
    External,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long, value_enum, default_value = "dart")]
    pub mode: ModeArg,
    /// k-space or diffraction container.
    #[arg(long)]
    pub measurements: PathBuf,
    /// Sampling mask, required for k-space measurements.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long = "T", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long = "L", default_value_t = 16)]
    pub candidates: usize,
    #[arg(long, default_value_t = 100)]
    pub k_refine: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Physics step size; STEM defaults to a line search when omitted.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Clamp STEM transmission magnitudes to at most 1.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_max: f64,
    /// Use `1/(1-beta)` instead of `1/sqrt(1-beta)` in the sampler.
    #[arg(long)]
    pub printed_coefficient: bool,
    #[arg(long, value_enum, default_value = "shrinkage")]
    pub prior: PriorArg,
    /// Shrinkage prior cutoff as a fraction of the largest spectral radius.
    #[arg(long, default_value_t = 0.25)]
    pub cutoff: f64,
    /// Command line of an external denoiser process.
    #[arg(long)]
    pub denoiser_cmd: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Progress log CSV (step, loss, SSIM against the measurement reference).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    Ssim,
    Psnr,
    Rel,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(value_enum)]
    pub metric: MetricArg,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub window: usize,
}

#[derive(Debug, Subcommand)]
pub enum ExportCmd {
    /// Binary 8-bit PGM.
    Pgm(PgmArgs),
}

#[derive(Debug, Args)]
pub struct PgmArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Slice of a volume, or row-major scan point of a diffraction set.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    pub slices: usize,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub workers: Vec<usize>,
    #[arg(long = "T", default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 0.25)]
    pub cutoff: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum, default_value = "shrinkage")]
    pub prior: PriorArg,
    #[arg(long, default_value_t = 0.25)]
    pub cutoff: f64,
    #[arg(long = "T", default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_max: f64,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => EXIT_NUMERICAL,
            Error::InvalidParam(_) => EXIT_USAGE,
            Error::Shape(_) | Error::Container(_) | Error::Io(_) | Error::External(_) => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<crate::container::ContainerError> for CliError {
    fn from(e: crate::container::ContainerError) -> Self {
        Error::from(e).into()
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn command() -> clap::Command {
    fn override_self(c: clap::Command) -> clap::Command {
        c.args_override_self(true).mut_subcommands(override_self)
    }
    override_self(Cli::command())
}

/// `key=value` lines as long flags. Blank lines and `#` comments are skipped.
pub fn config_to_args(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k == "config" {
            return Err(format!("config line {}: invalid key {k:?}", i + 1));
        }
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => out.push(format!("--{k}={v}")),
        }
    }
    Ok(out)
}

/// Names of the selected subcommand chain, outermost first.
fn subcommand_path(m: &clap::ArgMatches) -> Vec<String> {
    let mut path = Vec::new();
    let mut cur = m;
    while let Some((name, sub)) = cur.subcommand() {
        path.push(name.to_string());
        cur = sub;
    }
    path
}

/// Parses `argv`, merging a config file if one is named.
pub fn parse(argv: &[OsString]) -> std::result::Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let Some(path) = &cli.config else { return Ok(cli) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| command().error(clap::error::ErrorKind::Io, format!("cannot read config {}: {e}", path.display())))?;
    let extra = config_to_args(&text).map_err(|e| command().error(clap::error::ErrorKind::InvalidValue, e))?;

    // config flags go right after the subcommand so later command-line flags win
    let sub = subcommand_path(&matches);
    let mut at = 0;
    for name in &sub {
        at = argv.iter().skip(at + 1).position(|a| a.to_str() == Some(name)).map(|p| p + at + 1).unwrap_or(at);
    }
    let mut merged: Vec<OsString> = argv[..=at].to_vec();
    merged.extend(extra.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[at + 1..]);
    let matches = command().try_get_matches_from(&merged)?;
    Cli::from_arg_matches(&matches)
}

/// Runs the CLI and returns the process exit code.
pub fn main_with_args(argv: Vec<OsString>) -> i32 {
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    eprintln!("msrecon: resolved configuration: {:?}", cli.command);
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("msrecon: error: {}", e.message);
            e.code
        }
    }
}

fn load(path: &Path) -> CliResult<Container> {
    read_container(path).map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })
}

fn save(path: &Path, c: &Container) -> CliResult<()> {
    write_container(path, c).map_err(|e| CliError { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::MakePhantom(a) => {
            let x = match a.kind {
                PhantomKind::Mri => make_mri_phantom(a.slices, a.n, a.seed)?,
                PhantomKind::Crystal => make_crystal_phantom(&CrystalSpec::gaas_like(a.slices, a.n, a.pixel_size))?,
            };
            save(&a.out, &Container::from_volume(&x))
        }
        Cmd::MakeMask(a) => {
            let m = match a.kind {
                MaskKindArg::Uniform => make_uniform_mask(a.n, a.accel, a.center_frac, a.seed)?,
                MaskKindArg::Gaussian => make_gaussian_mask(a.n, a.accel, a.center_frac, a.seed)?,
            };
            save(&a.out, &Container::from_mask(&m))
        }
        Cmd::MakeProbe(a) => {
            let params = a.optics.params(a.n);
            let p = make_probe(&params, (a.shift_y, a.shift_x))?;
            save(&a.out, &Container::from_probe(&p, &params))
        }
        Cmd::Simulate(SimulateCmd::Mri(a)) => {
            let x = load(&a.volume)?.to_volume()?;
            let mask = load(&a.mask)?.to_mask()?;
            let Measurements::Mri { kspace, .. } = simulate_mri(&x, &mask)? else { unreachable!() };
            save(&a.out, &Container::from_kspace(&kspace))
        }
        Cmd::Simulate(SimulateCmd::Stem(a)) => {
            let x = load(&a.volume)?.to_volume()?;
            let geom =
                StemGeometry::new(a.optics.params(x.n()), x.slices(), a.slice_spacing, (a.scan_y, a.scan_x), a.scan_step_px)?;
            let Measurements::Stem { data, .. } = simulate_stem(&x, &geom, a.dose, a.seed)? else { unreachable!() };
            let mut c = Container::from_diffraction(&data)
                .with_attr("wavelength", a.optics.wavelength)
                .with_attr("semi_angle", a.optics.semi_angle)
                .with_attr("defocus", a.optics.defocus)
                .with_attr("pixel_size", a.optics.pixel_size)
                .with_attr("slices", x.slices())
                .with_attr("slice_spacing", a.slice_spacing)
                .with_attr("scan_step_px", a.scan_step_px);
            if let Some(d) = a.dose {
                c = c.with_attr("dose", d);
            }
            save(&a.out, &c)
        }
        Cmd::Recon(a) => recon(a),
        Cmd::Metrics(a) => {
            let r = load(&a.reference)?.to_volume()?;
            let e = load(&a.estimate)?.to_volume()?;
            let v = match a.metric {
                MetricArg::Ssim => volume_ssim(&r, &e, &SsimParams::with_window(a.window))?,
                MetricArg::Psnr => psnr(&r, &e)?,
                MetricArg::Rel => rel_error(&r, &e)?,
            };
            println!("{v}");
            Ok(())
        }
        Cmd::Export(ExportCmd::Pgm(a)) => {
            let c = load(&a.input)?;
            let img = match c.shape.len() {
                2 => c.to_real_dyn()?.into_dimensionality::<ndarray::Ix2>().map_err(|e| CliError::usage(e.to_string()))?,
                3 => {
                    if a.slice >= c.shape[0] {
                        return Err(CliError::usage(format!("slice {} out of range 0..{}", a.slice, c.shape[0])));
                    }
                    let all = c.to_real_dyn()?;
                    let sub = all.index_axis(Axis(0), a.slice).to_owned();
                    sub.into_dimensionality::<ndarray::Ix2>().map_err(|e| CliError::usage(e.to_string()))?
                }
                4 => {
                    let points = c.shape[0] * c.shape[1];
                    if a.slice >= points {
                        return Err(CliError::usage(format!("scan point {} out of range 0..{points}", a.slice)));
                    }
                    let all = c.to_real_dyn()?;
                    let sub = all.index_axis(Axis(0), a.slice / c.shape[1]).index_axis(Axis(0), a.slice % c.shape[1]).to_owned();
                    sub.into_dimensionality::<ndarray::Ix2>().map_err(|e| CliError::usage(e.to_string()))?
                }
                r => return Err(CliError { code: EXIT_DATA, message: format!("cannot export a rank-{r} array") }),
            };
            let policy = match (a.lo, a.hi) {
                (Some(lo), Some(hi)) => RangePolicy::Fixed { lo, hi },
                (None, None) => RangePolicy::MinMax,
                _ => return Err(CliError::usage("--lo and --hi must be given together")),
            };
            export_pgm(&img, &a.out, policy)?;
            Ok(())
        }
        Cmd::Bench(a) => {
            let sched = make_linear_schedule(a.steps, a.beta_min, a.beta_max)?;
            let model = ShrinkageDenoiser::new(a.cutoff, sched.clone())?;
            let rows = bench_partition(a.slices, a.n, &a.workers, &sched, &model, a.seed)?;
            match &a.out {
                Some(p) => write_bench_csv(&rows, &mut BufWriter::new(File::create(p)?))?,
                None => write_bench_csv(&rows, &mut io::stdout().lock())?,
            }
            Ok(())
        }
        Cmd::ServeDenoiser(a) => {
            let sched = make_linear_schedule(a.steps, a.beta_min, a.beta_max)?;
            let model: Box<dyn Denoiser> = match a.prior {
                PriorArg::Shrinkage => Box::new(ShrinkageDenoiser::new(a.cutoff, sched)?),
                PriorArg::Zero => Box::new(ZeroScore),
                PriorArg::External => return Err(CliError::usage("a served denoiser cannot itself be external")),
            };
            let mut out = io::stdout().lock();
            serve(model.as_ref(), &mut io::stdin().lock(), &mut out)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn geometry_from(c: &Container) -> CliResult<StemGeometry> {
    let n = *c.shape.last().unwrap_or(&0);
    let probe = ProbeParams {
        wavelength: c.attr("wavelength")?,
        semi_angle: c.attr("semi_angle")?,
        defocus: c.attr("defocus")?,
        pixel_size: c.attr("pixel_size")?,
        n,
    };
    Ok(StemGeometry::new(probe, c.attr("slices")?, c.attr("slice_spacing")?, (c.shape[0], c.shape[1]), c.attr("scan_step_px")?)?)
}

fn recon(a: ReconArgs) -> CliResult<()> {
    let c = load(&a.measurements)?;
    let meas = match c.content() {
        Some("diffraction") => Measurements::Stem { data: c.to_diffraction()?, geometry: geometry_from(&c)? },
        Some("kspace") | Some("volume") => {
            let path = a.mask.as_ref().ok_or_else(|| CliError::usage("k-space reconstruction needs --mask"))?;
            let mask = load(path)?.to_mask()?;
            Measurements::Mri { kspace: c.to_kspace(&mask)?, mask }
        }
        other => return Err(CliError { code: EXIT_DATA, message: format!("unsupported measurement content {other:?}") }),
    };
    let cfg = ReconConfig {
        mode: match a.mode {
            ModeArg::Dart => Mode::Dart,
            ModeArg::Drift => Mode::Drift,
            ModeArg::Physics => Mode::PhysicsOnly,
        },
        steps: a.steps,
        beta_min: a.beta_min,
        beta_max: a.beta_max,
        candidates: a.candidates,
        refine_steps: a.k_refine,
        mri: MriStepConfig { step: a.step.unwrap_or(0.5), threshold: a.threshold },
        stem: StemStepConfig { step: a.step, threshold: a.threshold, clamp: a.clamp },
        seed: a.seed,
        workers: a.workers,
        coefficient: if a.printed_coefficient { SamplerCoefficient::Printed } else { SamplerCoefficient::Sqrt },
        sampler_noise: true,
        ssim: SsimParams::default(),
        progress: a.log.is_some(),
    };
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let model: Box<dyn Denoiser> = match a.prior {
        PriorArg::Shrinkage => Box::new(ShrinkageDenoiser::new(a.cutoff, sched)?),
        PriorArg::Zero => Box::new(ZeroScore),
        PriorArg::External => {
            let line = a.denoiser_cmd.as_deref().ok_or_else(|| CliError::usage("--prior external needs --denoiser-cmd"))?;
            let mut parts = line.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| CliError::usage("empty --denoiser-cmd"))?;
            Box::new(ExternalDenoiser::spawn(&program, &parts.collect::<Vec<_>>())?)
        }
    };
    let rec = reconstruct(&meas, model.as_ref(), &cfg)?;
    if let Some(sel) = &rec.selected {
        eprintln!("msrecon: selected candidate {} (score {:.6})", sel.index, sel.scores[sel.index]);
    }
    save(&a.out, &Container::from_volume(&rec.volume).with_attr("mode", cfg.mode.as_str()).with_attr("seed", cfg.seed))?;
    if let Some(p) = &a.log {
        write_progress_csv(&rec.progress, &mut BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        list.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_lines_become_flags() {
        let got = config_to_args("# comment\nseed = 7\n\nclamp=true\nquiet=false\nT=50\n").unwrap();
        assert_eq!(got, vec!["--seed=7", "--clamp", "--T=50"]);
        assert!(config_to_args("novalue").is_err());
        assert!(config_to_args("config=x").is_err());
    }

    #[test]
    fn command_line_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "seed=7\nn=16\n").unwrap();
        let cfg = cfg.to_str().unwrap();
        let cli = parse(&args(&["msrecon", "--config", cfg, "make-mask", "--seed", "3", "--out", "m"])).unwrap();
        let Cmd::MakeMask(m) = cli.command else { panic!() };
        assert_eq!((m.seed, m.n), (3, 16));

        let cli = parse(&args(&["msrecon", "make-mask", "--out", "m", "--config", cfg])).unwrap();
        let Cmd::MakeMask(m) = cli.command else { panic!() };
        assert_eq!((m.seed, m.n), (7, 16));
    }

    #[test]
    fn config_applies_to_nested_subcommands() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "dose=100\nseed=4\n").unwrap();
        let cli = parse(&args(&[
            "msrecon",
            "--config",
            cfg.to_str().unwrap(),
            "simulate",
            "stem",
            "--volume",
            "v",
            "--out",
            "o",
            "--seed",
            "9",
        ]))
        .unwrap();
        let Cmd::Simulate(SimulateCmd::Stem(s)) = cli.command else { panic!() };
        assert_eq!((s.dose, s.seed), (Some(100.0), 9));
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "bogus=1\n").unwrap();
        assert!(parse(&args(&["msrecon", "--config", cfg.to_str().unwrap(), "make-mask", "--out", "m"])).is_err());
    }

    #[test]
    fn recon_flags_parse() {
        let cli = parse(&args(&[
            "msrecon",
            "recon",
            "--mode",
            "drift",
            "--L",
            "16",
            "--k-refine",
            "100",
            "--measurements",
            "y",
            "--mask",
            "m",
            "--out",
            "x",
        ]))
        .unwrap();
        let Cmd::Recon(r) = cli.command else { panic!() };
        assert!(matches!(r.mode, ModeArg::Drift));
        assert_eq!((r.candidates, r.k_refine, r.steps), (16, 100, 1000));
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(CliError::from(Error::non_finite("x")).code, EXIT_NUMERICAL);
        assert_eq!(CliError::from(Error::shape("x")).code, EXIT_DATA);
        assert_eq!(CliError::from(Error::param("x")).code, EXIT_USAGE);
        assert_eq!(main_with_args(args(&["msrecon", "--bogus"])), EXIT_USAGE);
        assert_eq!(
            main_with_args(args(&["msrecon", "metrics", "rel", "--reference", "/nonexistent/a", "--estimate", "/nonexistent/b"])),
            EXIT_DATA
        );
    }
}
