//! Slice partitioning and the worker-parallel sampling loop.
//!
//! A volume of `S` slices is cut into contiguous blocks of `B = ceil(S/G)`
//! slices, one per worker. Each timestep the blocks advance one sampler step
//! concurrently and are gathered back at the root before the next timestep
//! starts. Noise is keyed by absolute slice index, so results are identical
//! for every worker count.

use std::io::Write;
use std::ops::Range;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::diffusion::{ddpm_sample_step, Denoiser, NoiseSchedule, SamplerCoefficient};
use crate::error::{Error, Result};
use crate::noise::{mix64, NoiseStream};
use crate::types::ComplexVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    slices: usize,
    workers: usize,
    block: usize,
}

impl PartitionPlan {
    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Nominal block size `ceil(S / G)`.
    pub fn block_size(&self) -> usize {
        self.block
    }

    /// `[min(gB, S), min((g+1)B, S))`; empty for idle workers.
    pub fn range(&self, g: usize) -> Range<usize> {
        (g * self.block).min(self.slices)..((g + 1) * self.block).min(self.slices)
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.workers).map(|g| self.range(g)).collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.ranges().into_iter().map(|r| r.len()).collect()
    }

    pub fn active_workers(&self) -> usize {
        self.block_sizes().into_iter().filter(|&b| b > 0).count()
    }
}

pub fn plan_partition(slices: usize, workers: usize) -> Result<PartitionPlan> {
    if slices == 0 || workers == 0 {
        return Err(Error::param(format!("partition needs S >= 1 and G >= 1, got S={slices}, G={workers}")));
    }
    Ok(PartitionPlan { slices, workers, block: slices.div_ceil(workers) })
}

/// Contiguous slices `first..first + volume.slices()` owned by `worker`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBlock {
    pub worker: usize,
    pub first: usize,
    pub volume: ComplexVolume,
}

/// One block per non-idle worker, in worker order.
pub fn scatter(x: &ComplexVolume, plan: &PartitionPlan) -> Result<Vec<SliceBlock>> {
    if x.slices() != plan.slices() {
        return Err(Error::shape(format!("volume has {} slices but plan covers {}", x.slices(), plan.slices())));
    }
    let nn = x.n() * x.n();
    let n = x.n();
    Ok(plan
        .ranges()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(g, r)| SliceBlock {
            worker: g,
            first: r.start,
            volume: ComplexVolume::from_raw((r.len(), n, n), x.as_slice()[r.start * nn..r.end * nn].to_vec()),
        })
        .collect())
}

/// Places each block at its range; block order is irrelevant.
pub fn gather(blocks: &[SliceBlock], plan: &PartitionPlan) -> Result<ComplexVolume> {
    let first = blocks.first().ok_or_else(|| Error::shape("nothing to gather"))?;
    let n = first.volume.n();
    let nn = n * n;
    let mut out = vec![Complex64::new(0.0, 0.0); plan.slices() * nn];
    let mut seen = vec![false; plan.workers()];
    for b in blocks {
        if b.worker >= plan.workers() || seen[b.worker] {
            return Err(Error::shape(format!("unexpected or duplicate block from worker {}", b.worker)));
        }
        let r = plan.range(b.worker);
        if b.first != r.start || b.volume.slices() != r.len() || b.volume.n() != n {
            return Err(Error::shape(format!(
                "block of worker {} covers {}..{} but the plan assigns {r:?}",
                b.worker,
                b.first,
                b.first + b.volume.slices()
            )));
        }
        seen[b.worker] = true;
        out[r.start * nn..r.end * nn].copy_from_slice(b.volume.as_slice());
    }
    if let Some(g) = (0..plan.workers()).find(|&g| !seen[g] && !plan.range(g).is_empty()) {
        return Err(Error::shape(format!("missing block of worker {g}")));
    }
    Ok(ComplexVolume::from_raw((plan.slices(), n, n), out))
}

/// Standard complex normal field for `slices` absolute slice indices.
pub fn noise_volume(seed: u64, slices: Range<usize>, n: usize, step: usize, lane: usize) -> ComplexVolume {
    let mut data = Vec::with_capacity(slices.len() * n * n);
    for s in slices.clone() {
        data.extend(NoiseStream::new(seed, s, step, lane).complex_field(n));
    }
    ComplexVolume::from_raw((slices.len(), n, n), data)
}

/// Step index reserved for the initial state `X_T`; sampler steps use
/// `t >= 1`.
pub const INIT_STEP: usize = 0;

/// Initial state `X_T`: independent standard normal real and imaginary parts.
pub fn initial_state(seed: u64, slices: usize, n: usize, lane: usize) -> Result<ComplexVolume> {
    if slices == 0 {
        return Err(Error::param("volume needs at least one slice"));
    }
    crate::types::check_grid(n)?;
    Ok(noise_volume(seed, 0..slices, n, INIT_STEP, lane))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    pub seed: u64,
    pub lane: usize,
    pub coefficient: SamplerCoefficient,
    /// When false, the sampler runs without its stochastic term.
    pub noise: bool,
}

impl SamplerOptions {
    pub fn new(seed: u64, lane: usize) -> Self {
        Self { seed, lane, coefficient: SamplerCoefficient::Sqrt, noise: true }
    }
}

/// Instrumentation collected across timesteps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingReport {
    /// `(t, wall time)` for every executed timestep, in execution order.
    pub step_times: Vec<(usize, Duration)>,
    /// Largest working set in bytes held by each worker during a step.
    pub peak_bytes: Vec<usize>,
    /// Noise fields drawn per absolute slice.
    pub noise_fields: Vec<usize>,
}

impl SamplingReport {
    fn new(plan: &PartitionPlan) -> Self {
        Self { step_times: Vec::new(), peak_bytes: vec![0; plan.workers()], noise_fields: vec![0; plan.slices()] }
    }

    /// One `t,seconds` line per timestep.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,seconds")?;
        for (t, d) in &self.step_times {
            writeln!(w, "{t},{:.9}", d.as_secs_f64())?;
        }
        Ok(())
    }
}

struct BlockOutcome {
    block: SliceBlock,
    bytes: usize,
    noise_slices: Range<usize>,
}

/// Advances blocks of a volume in parallel, one barrier per timestep.
pub struct PartitionedSampler<'a> {
    plan: PartitionPlan,
    schedule: &'a NoiseSchedule,
    model: &'a dyn Denoiser,
    options: SamplerOptions,
    pool: rayon::ThreadPool,
    report: SamplingReport,
}

impl<'a> PartitionedSampler<'a> {
    pub fn new(
        plan: PartitionPlan,
        schedule: &'a NoiseSchedule,
        model: &'a dyn Denoiser,
        options: SamplerOptions,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers())
            .build()
            .map_err(|e| Error::param(format!("cannot start {} workers: {e}", plan.workers())))?;
        Ok(Self { report: SamplingReport::new(&plan), plan, schedule, model, options, pool })
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn report(&self) -> &SamplingReport {
        &self.report
    }

    pub fn into_report(self) -> SamplingReport {
        self.report
    }

    /// Draws the initial state and records it in the noise audit.
    pub fn initial_state(&mut self, n: usize) -> Result<ComplexVolume> {
        let x = initial_state(self.options.seed, self.plan.slices(), n, self.options.lane)?;
        self.report.noise_fields.iter_mut().for_each(|c| *c += 1);
        Ok(x)
    }

    /// `X_t -> X_{t-1}` for the whole volume.
    pub fn step(&mut self, x: &ComplexVolume, t: usize) -> Result<ComplexVolume> {
        self.schedule.check_step(t)?;
        let start = Instant::now();
        let blocks = scatter(x, &self.plan)?;
        let n = x.n();
        let opts = self.options;
        let (schedule, model) = (self.schedule, self.model);
        let outcomes: Vec<Result<BlockOutcome>> = self.pool.install(|| {
            blocks
                .into_par_iter()
                .map(|b| {
                    let range = b.first..b.first + b.volume.slices();
                    let draw = opts.noise && t > 1;
                    let noise = draw.then(|| noise_volume(opts.seed, range.clone(), n, t, opts.lane));
                    let next = ddpm_sample_step(&b.volume, t, schedule, model, b.first, noise.as_ref(), opts.coefficient)?;
                    // input, score, noise and output buffers
                    let field = std::mem::size_of_val(b.volume.as_slice());
                    let bytes = field * if draw { 4 } else { 3 };
                    Ok(BlockOutcome {
                        block: SliceBlock { worker: b.worker, first: b.first, volume: next },
                        bytes,
                        noise_slices: if draw { range } else { 0..0 },
                    })
                })
                .collect()
        });
        let mut done = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            let o = o?;
            let peak = &mut self.report.peak_bytes[o.block.worker];
            *peak = (*peak).max(o.bytes);
            for s in o.noise_slices {
                self.report.noise_fields[s] += 1;
            }
            done.push(o.block);
        }
        let out = gather(&done, &self.plan)?;
        self.report.step_times.push((t, start.elapsed()));
        Ok(out)
    }
}

/// Runs timesteps `t_range` from high to low on `x`.
pub fn run_partitioned_sampling(
    x: &ComplexVolume,
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    plan: &PartitionPlan,
    options: SamplerOptions,
    t_range: Range<usize>,
) -> Result<(ComplexVolume, SamplingReport)> {
    let mut sampler = PartitionedSampler::new(*plan, schedule, model, options)?;
    let mut cur = x.clone();
    for t in t_range.rev() {
        cur = sampler.step(&cur, t)?;
    }
    Ok((cur, sampler.into_report()))
}

/// Order-sensitive fingerprint of the exact bits of a volume.
pub fn fingerprint(x: &ComplexVolume) -> u64 {
    x.as_slice().iter().fold(0x5eed_u64, |h, z| mix64(mix64(h ^ z.re.to_bits()) ^ z.im.to_bits()))
}

/// One row of the partition benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub workers: usize,
    pub steps: usize,
    pub mean_step_seconds: f64,
    pub peak_bytes_per_worker: usize,
    pub fingerprint: u64,
}

/// Full sampling pass from the seeded initial state for each worker count.
pub fn bench_partition(
    slices: usize,
    n: usize,
    worker_counts: &[usize],
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &g in worker_counts {
        let plan = plan_partition(slices, g)?;
        let mut sampler = PartitionedSampler::new(plan, schedule, model, SamplerOptions::new(seed, 0))?;
        let mut x = sampler.initial_state(n)?;
        for t in (1..=schedule.steps()).rev() {
            x = sampler.step(&x, t)?;
        }
        let report = sampler.into_report();
        let total: f64 = report.step_times.iter().map(|(_, d)| d.as_secs_f64()).sum();
        rows.push(BenchRow {
            workers: g,
            steps: report.step_times.len(),
            mean_step_seconds: total / report.step_times.len().max(1) as f64,
            peak_bytes_per_worker: report.peak_bytes.iter().copied().max().unwrap_or(0),
            fingerprint: fingerprint(&x),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "workers,steps,mean_step_seconds,peak_bytes_per_worker,fingerprint")?;
    for r in rows {
        writeln!(w, "{},{},{:.9},{},{:016x}", r.workers, r.steps, r.mean_step_seconds, r.peak_bytes_per_worker, r.fingerprint)?;
    }
    Ok(())
}
