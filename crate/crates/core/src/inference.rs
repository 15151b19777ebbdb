//! Reconstruction drivers: DART, DRIFT and the physics-only baseline.

use std::io::Write;

use ndarray::Array2;

use crate::diffusion::{make_linear_schedule, Denoiser, NoiseSchedule, SamplerCoefficient};
use crate::error::{Error, Result};
use crate::metrics::{ssim, volume_ssim, SsimParams};
use crate::mri::{mri_dc_step, mri_loss, zero_filled_recon, MriStepConfig};
use crate::partition::{plan_partition, PartitionedSampler, SamplerOptions, SamplingReport};
use crate::stem::{
    bright_field_disk, default_initial_step, stem_forward, stem_gd_step, stem_line_search_step, stem_loss, StemGeometry,
    StemStepConfig,
};
use crate::types::{ComplexVolume, DiffractionSet, KSpaceStack, SamplingMask};
use num_complex::Complex64;

/// Observed data together with the acquisition that produced it.
#[derive(Clone, Debug)]
pub enum Measurements {
    Mri { kspace: KSpaceStack, mask: SamplingMask },
    Stem { data: DiffractionSet, geometry: StemGeometry },
}

impl Measurements {
    pub fn slices(&self) -> usize {
        match self {
            Measurements::Mri { kspace, .. } => kspace.slices(),
            Measurements::Stem { geometry, .. } => geometry.slices,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Measurements::Mri { kspace, .. } => kspace.n(),
            Measurements::Stem { geometry, .. } => geometry.n(),
        }
    }

    pub fn loss(&self, x: &ComplexVolume) -> Result<f64> {
        match self {
            Measurements::Mri { kspace, mask } => mri_loss(x, kspace, mask),
            Measurements::Stem { data, geometry } => stem_loss(x, data, geometry),
        }
    }

    /// Zero-filled recon for MRI, vacuum `X = 1` for STEM.
    pub fn physics_init(&self) -> Result<ComplexVolume> {
        match self {
            Measurements::Mri { kspace, .. } => Ok(zero_filled_recon(kspace)),
            Measurements::Stem { geometry, .. } => ComplexVolume::filled(geometry.slices, geometry.n(), Complex64::new(1.0, 0.0)),
        }
    }

    /// Detector radius in pixels used for STEM bright-field images.
    fn bright_field_radius(geometry: &StemGeometry) -> f64 {
        geometry.probe.cutoff_pixels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dart,
    Drift,
    PhysicsOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dart => "dart",
            Mode::Drift => "drift",
            Mode::PhysicsOnly => "physics",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dart" => Some(Mode::Dart),
            "drift" => Some(Mode::Drift),
            "physics" | "physics-only" => Some(Mode::PhysicsOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub mode: Mode,
    /// Sampler steps `T`; also the iteration count of the physics-only mode.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// DRIFT bank size `L`.
    pub candidates: usize,
    /// DRIFT refinement steps.
    pub refine_steps: usize,
    pub mri: MriStepConfig,
    pub stem: StemStepConfig,
    pub seed: u64,
    pub workers: usize,
    pub coefficient: SamplerCoefficient,
    /// When false the sampler runs without its stochastic term.
    pub sampler_noise: bool,
    pub ssim: SsimParams,
    /// Record loss and reference SSIM after every step.
    pub progress: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dart,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            candidates: 16,
            refine_steps: 100,
            mri: MriStepConfig::default(),
            stem: StemStepConfig::default(),
            seed: 0,
            workers: 1,
            coefficient: SamplerCoefficient::Sqrt,
            sampler_noise: true,
            ssim: SsimParams::default(),
            progress: false,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("T must be at least 1"));
        }
        if self.candidates == 0 {
            return Err(Error::param("L must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::param("worker count must be at least 1"));
        }
        self.mri.validate()?;
        self.stem.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_min, self.beta_max)
    }

    fn sampler_options(&self, lane: usize) -> SamplerOptions {
        SamplerOptions { seed: self.seed, lane, coefficient: self.coefficient, noise: self.sampler_noise }
    }
}

/// One physics update per call. For line-searched STEM steps the trial
/// step starts at twice the last accepted one.
pub struct PhysicsStepper<'a> {
    meas: &'a Measurements,
    cfg: &'a ReconConfig,
    last_step: Option<f64>,
    last_loss: Option<f64>,
}

impl<'a> PhysicsStepper<'a> {
    pub fn new(meas: &'a Measurements, cfg: &'a ReconConfig) -> Self {
        Self { meas, cfg, last_step: None, last_loss: None }
    }

    /// Loss after the latest step when the step computed it.
    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn step(&mut self, x: &ComplexVolume) -> Result<ComplexVolume> {
        self.last_loss = None;
        match self.meas {
            Measurements::Mri { kspace, mask } => mri_dc_step(x, kspace, mask, &self.cfg.mri),
            Measurements::Stem { data, geometry } => {
                if self.cfg.stem.step.is_some() {
                    return stem_gd_step(x, data, geometry, &self.cfg.stem);
                }
                let start = match self.last_step {
                    Some(s) if s > 0.0 => 2.0 * s,
                    _ => default_initial_step(geometry),
                };
                let out = stem_line_search_step(x, data, geometry, &self.cfg.stem, start)?;
                self.last_step = Some(out.step);
                self.last_loss = Some(out.loss_after);
                out.volume.check_finite("STEM refinement")?;
                Ok(out.volume)
            }
        }
    }
}

/// One row of the progress log.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressRow {
    pub phase: &'static str,
    pub step: usize,
    pub loss: f64,
    pub ssim: Option<f64>,
}

pub fn write_progress_csv<W: Write>(rows: &[ProgressRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "phase,step,loss,ssim")?;
    for r in rows {
        let s = r.ssim.map(|v| format!("{v:.9}")).unwrap_or_default();
        writeln!(w, "{},{},{:.12e},{s}", r.phase, r.step, r.loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: ComplexVolume,
    pub progress: Vec<ProgressRow>,
    /// Sampler instrumentation, one per sampled chain.
    pub sampling: Vec<SamplingReport>,
    /// DRIFT: selected candidate index and every candidate's score.
    pub selected: Option<Selection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// `L` candidate volumes; candidate `l` was sampled on noise lane `lanes[l]`.
#[derive(Clone, Debug)]
pub struct CandidateBank {
    pub candidates: Vec<ComplexVolume>,
    pub lanes: Vec<usize>,
}

impl CandidateBank {
    pub fn new(candidates: Vec<ComplexVolume>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::param("candidate bank is empty"));
        }
        for c in &candidates[1..] {
            candidates[0].same_shape(c)?;
        }
        let lanes = (0..candidates.len()).collect();
        Ok(Self { candidates, lanes })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Largest usable odd window for an image of the given size.
fn fit_window(params: &SsimParams, h: usize, w: usize) -> SsimParams {
    let limit = h.min(w);
    if params.window <= limit {
        return *params;
    }
    let odd = if limit % 2 == 1 { limit } else { limit.saturating_sub(1) };
    SsimParams { window: odd.max(1), ..*params }
}

/// Scores candidates against a measurement-derived reference.
pub struct CandidateScorer<'a> {
    meas: &'a Measurements,
    params: SsimParams,
    reference: Reference,
}

enum Reference {
    Volume(ComplexVolume),
    Image(Array2<f64>),
}

impl<'a> CandidateScorer<'a> {
    pub fn new(meas: &'a Measurements, params: &SsimParams) -> Result<Self> {
        match meas {
            Measurements::Mri { kspace, .. } => {
                let zf = zero_filled_recon(kspace);
                let params = fit_window(params, zf.n(), zf.n());
                Ok(Self { meas, params, reference: Reference::Volume(zf) })
            }
            Measurements::Stem { data, geometry } => {
                let bf = bright_field_disk(data, Measurements::bright_field_radius(geometry));
                let params = fit_window(params, bf.nrows(), bf.ncols());
                Ok(Self { meas, params, reference: Reference::Image(bf) })
            }
        }
    }

    /// Window actually used.
    pub fn params(&self) -> &SsimParams {
        &self.params
    }

    pub fn score(&self, candidate: &ComplexVolume) -> Result<f64> {
        match (&self.reference, self.meas) {
            (Reference::Volume(zf), _) => volume_ssim(zf, candidate, &self.params),
            (Reference::Image(bf), Measurements::Stem { geometry, .. }) => {
                let sim = stem_forward(candidate, geometry)?;
                let img = bright_field_disk(&sim, Measurements::bright_field_radius(geometry));
                ssim(bf.view(), img.view(), &self.params)
            }
            (Reference::Image(_), Measurements::Mri { .. }) => unreachable!("reference matches modality"),
        }
    }
}

/// Lowest index attaining the maximal reference SSIM.
pub fn select_candidate(bank: &CandidateBank, meas: &Measurements, params: &SsimParams) -> Result<Selection> {
    let scorer = CandidateScorer::new(meas, params)?;
    let scores = bank.candidates.iter().map(|c| scorer.score(c)).collect::<Result<Vec<_>>>()?;
    let mut index = 0;
    for (l, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = l;
        }
    }
    Ok(Selection { index, scores })
}

fn check_meas(meas: &Measurements, cfg: &ReconConfig) -> Result<()> {
    cfg.validate()?;
    if let Measurements::Stem { data, geometry } = meas {
        if data.scan_dims() != geometry.scan || data.detector_n() != geometry.n() {
            return Err(Error::shape("diffraction data does not match the scan geometry"));
        }
    }
    Ok(())
}

fn log_row(
    meas: &Measurements,
    scorer: Option<&CandidateScorer>,
    phase: &'static str,
    step: usize,
    x: &ComplexVolume,
    loss: Option<f64>,
) -> Result<ProgressRow> {
    let loss = match loss {
        Some(l) => l,
        None => meas.loss(x)?,
    };
    let ssim = match scorer {
        Some(s) => s.score(x).ok(),
        None => None,
    };
    Ok(ProgressRow { phase, step, loss, ssim })
}

/// DART: for `t = T..1`, one partitioned sampler step followed by one
/// physics step on the gathered volume.
pub fn dart_reconstruct(meas: &Measurements, model: &dyn Denoiser, cfg: &ReconConfig) -> Result<Reconstruction> {
    check_meas(meas, cfg)?;
    let schedule = cfg.schedule()?;
    let plan = plan_partition(meas.slices(), cfg.workers)?;
    let mut sampler = PartitionedSampler::new(plan, &schedule, model, cfg.sampler_options(0))?;
    let x = sampler.initial_state(meas.n())?;
    dart_from(meas, &mut sampler, x, cfg)
}

/// DART loop from an explicit initial state.
pub fn dart_from(
    meas: &Measurements,
    sampler: &mut PartitionedSampler<'_>,
    init: ComplexVolume,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    let scorer = if cfg.progress { Some(CandidateScorer::new(meas, &cfg.ssim)?) } else { None };
    let mut stepper = PhysicsStepper::new(meas, cfg);
    let mut progress = Vec::new();
    let mut x = init;
    for t in (1..=cfg.steps).rev() {
        x = sampler.step(&x, t)?;
        x = stepper.step(&x)?;
        if cfg.progress {
            progress.push(log_row(meas, scorer.as_ref(), "dart", t, &x, stepper.last_loss())?);
        }
    }
    Ok(Reconstruction { volume: x, progress, sampling: vec![sampler.report().clone()], selected: None })
}

/// Full `T`-step chain on noise lane `lane`, no physics.
pub fn sample_candidate(
    n: usize,
    slices: usize,
    model: &dyn Denoiser,
    cfg: &ReconConfig,
    lane: usize,
) -> Result<(ComplexVolume, SamplingReport)> {
    let schedule = cfg.schedule()?;
    let plan = plan_partition(slices, cfg.workers)?;
    let mut sampler = PartitionedSampler::new(plan, &schedule, model, cfg.sampler_options(lane))?;
    let mut x = sampler.initial_state(n)?;
    for t in (1..=cfg.steps).rev() {
        x = sampler.step(&x, t)?;
    }
    Ok((x, sampler.into_report()))
}

/// Samples `L` candidates, lane `l` for candidate `l`.
pub fn sample_bank(meas: &Measurements, model: &dyn Denoiser, cfg: &ReconConfig) -> Result<(CandidateBank, Vec<SamplingReport>)> {
    let mut cands = Vec::with_capacity(cfg.candidates);
    let mut reports = Vec::with_capacity(cfg.candidates);
    for l in 0..cfg.candidates {
        let (x, r) = sample_candidate(meas.n(), meas.slices(), model, cfg, l)?;
        cands.push(x);
        reports.push(r);
    }
    Ok((CandidateBank::new(cands)?, reports))
}

/// Selection and `K_refine` physics steps on an existing bank.
pub fn drift_from_bank(meas: &Measurements, bank: &CandidateBank, cfg: &ReconConfig) -> Result<Reconstruction> {
    check_meas(meas, cfg)?;
    let selection = select_candidate(bank, meas, &cfg.ssim)?;
    let scorer = if cfg.progress { Some(CandidateScorer::new(meas, &cfg.ssim)?) } else { None };
    let mut x = bank.candidates[selection.index].clone();
    let mut progress = Vec::new();
    if cfg.progress {
        progress.push(log_row(meas, scorer.as_ref(), "select", 0, &x, None)?);
    }
    let mut stepper = PhysicsStepper::new(meas, cfg);
    for k in 1..=cfg.refine_steps {
        x = stepper.step(&x)?;
        if cfg.progress {
            progress.push(log_row(meas, scorer.as_ref(), "refine", k, &x, stepper.last_loss())?);
        }
    }
    Ok(Reconstruction { volume: x, progress, sampling: Vec::new(), selected: Some(selection) })
}

/// DRIFT: sample a bank, keep the candidate closest to the measurements,
/// refine it with physics steps.
pub fn drift_reconstruct(meas: &Measurements, model: &dyn Denoiser, cfg: &ReconConfig) -> Result<Reconstruction> {
    check_meas(meas, cfg)?;
    let (bank, reports) = sample_bank(meas, model, cfg)?;
    let mut rec = drift_from_bank(meas, &bank, cfg)?;
    rec.sampling = reports;
    Ok(rec)
}

/// `iters` physics steps from the zero-filled (MRI) or vacuum (STEM) start.
pub fn physics_only(meas: &Measurements, cfg: &ReconConfig, iters: usize) -> Result<Reconstruction> {
    check_meas(meas, cfg)?;
    let scorer = if cfg.progress { Some(CandidateScorer::new(meas, &cfg.ssim)?) } else { None };
    let mut x = meas.physics_init()?;
    let mut stepper = PhysicsStepper::new(meas, cfg);
    let mut progress = Vec::new();
    for k in 1..=iters {
        x = stepper.step(&x)?;
        if cfg.progress {
            progress.push(log_row(meas, scorer.as_ref(), "physics", k, &x, stepper.last_loss())?);
        }
    }
    Ok(Reconstruction { volume: x, progress, sampling: Vec::new(), selected: None })
}

/// Dispatches on `cfg.mode`; physics-only runs `cfg.steps` iterations.
pub fn reconstruct(meas: &Measurements, model: &dyn Denoiser, cfg: &ReconConfig) -> Result<Reconstruction> {
    match cfg.mode {
        Mode::Dart => dart_reconstruct(meas, model, cfg),
        Mode::Drift => drift_reconstruct(meas, model, cfg),
        Mode::PhysicsOnly => physics_only(meas, cfg, cfg.steps),
    }
}
