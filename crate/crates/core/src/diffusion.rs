//! Noise schedule, forward perturbation, the ancestral sampling step and the
//! score-model interface with analytic reference models.

use ndarray::Zip;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2c_inplace, ifft2c_inplace};
use crate::types::ComplexVolume;

/// Variances `beta_1..beta_T` with cumulative products
/// `alpha_bar_t = prod_{u <= t} (1 - beta_u)` and `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param(format!("beta must lie in (0, 1), got {b}")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `beta_t` linear from `beta_min` at `t = 1` to `beta_max` at `t = T`.
pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs T >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let betas = (0..steps)
        .map(|i| if steps == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64 })
        .collect();
    NoiseSchedule::new(betas)
}

/// Closed-form marginal `sqrt(ab_t) X_0 + sqrt(1 - ab_t) Z` for `0 <= t <= T`.
pub fn forward_perturb(x0: &ComplexVolume, t: usize, schedule: &NoiseSchedule, noise: &ComplexVolume) -> Result<ComplexVolume> {
    if t > schedule.steps() {
        return Err(Error::param(format!("timestep {t} outside 0..={}", schedule.steps())));
    }
    x0.same_shape(noise)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    Zip::from(out.data_mut()).and(noise.data()).for_each(|x, &z| *x = *x * a + z * b);
    Ok(out)
}

/// Score estimate for a contiguous block of slices.
///
/// `first_slice` is the absolute index of the block's first slice. The
/// result must have the block's shape and depend only on the arguments.
pub trait Denoiser: Sync {
    fn score(&self, block: &ComplexVolume, first_slice: usize, t: usize) -> Result<ComplexVolume>;
}

/// Rescaling applied to `X_t + beta_t S` in the sampling step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplerCoefficient {
    /// `1 / sqrt(1 - beta_t)`.
    #[default]
    Sqrt,
    /// `1 / (1 - beta_t)`.
    Printed,
}

impl SamplerCoefficient {
    fn value(self, beta: f64) -> f64 {
        match self {
            SamplerCoefficient::Sqrt => 1.0 / (1.0 - beta).sqrt(),
            SamplerCoefficient::Printed => 1.0 / (1.0 - beta),
        }
    }
}

/// `X_{t-1} = c_t (X_t + beta_t S(X_t, t)) + sqrt(beta_t) Z`, with no noise
/// at `t = 1` or when `noise` is `None`.
pub fn ddpm_sample_step(
    x: &ComplexVolume,
    t: usize,
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    first_slice: usize,
    noise: Option<&ComplexVolume>,
    coefficient: SamplerCoefficient,
) -> Result<ComplexVolume> {
    schedule.check_step(t)?;
    let score = model.score(x, first_slice, t)?;
    x.same_shape(&score)?;
    let beta = schedule.beta(t);
    let c = coefficient.value(beta);
    let mut out = x.clone();
    Zip::from(out.data_mut()).and(score.data()).for_each(|v, &s| *v = (*v + s * beta) * c);
    if let (Some(z), true) = (noise, t > 1) {
        x.same_shape(z)?;
        let sb = beta.sqrt();
        Zip::from(out.data_mut()).and(z.data()).for_each(|v, &n| *v += n * sb);
    }
    out.check_finite(&format!("sampler step t={t}"))?;
    Ok(out)
}

/// Exact score of `N(sqrt(ab_t) mu, (ab_t sigma0^2 + 1 - ab_t) Id)`, the
/// perturbed density of the prior `N(mu, sigma0^2 Id)`.
#[derive(Clone, Debug)]
pub struct GaussianScoreModel {
    mean: ComplexVolume,
    sigma0: f64,
    schedule: NoiseSchedule,
}

impl GaussianScoreModel {
    pub fn new(mean: ComplexVolume, sigma0: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma0 >= 0.0) || !sigma0.is_finite() {
            return Err(Error::param(format!("prior sigma must be >= 0, got {sigma0}")));
        }
        Ok(Self { mean, sigma0, schedule })
    }

    pub fn variance(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        ab * self.sigma0 * self.sigma0 + 1.0 - ab
    }
}

impl Denoiser for GaussianScoreModel {
    fn score(&self, block: &ComplexVolume, first_slice: usize, t: usize) -> Result<ComplexVolume> {
        if t > self.schedule.steps() {
            return Err(Error::param(format!("timestep {t} outside 0..={}", self.schedule.steps())));
        }
        let (s, n, _) = block.dim();
        if first_slice + s > self.mean.slices() || n != self.mean.n() {
            return Err(Error::shape(format!(
                "block of {s} slices at {first_slice} does not fit a prior mean of shape {:?}",
                self.mean.dim()
            )));
        }
        let var = self.variance(t);
        if var <= 0.0 {
            return Err(Error::param("degenerate prior: sigma0 = 0 at alpha_bar = 1"));
        }
        let ra = self.schedule.alpha_bar(t).sqrt();
        let nn = n * n;
        let mu = &self.mean.as_slice()[first_slice * nn..(first_slice + s) * nn];
        let mut out = block.clone();
        out.as_slice_mut().iter_mut().zip(mu).for_each(|(x, &m)| *x = -(*x - m * ra) / var);
        Ok(out)
    }
}

/// `S(x, t) = (LP(x) - x) / (1 - ab_t)`, where `LP` keeps the spectral
/// components whose centred radius is within `cutoff` of the largest one.
#[derive(Clone, Debug)]
pub struct ShrinkageDenoiser {
    cutoff: f64,
    schedule: NoiseSchedule,
}

impl ShrinkageDenoiser {
    pub fn new(cutoff: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(Error::param(format!("shrinkage cutoff must lie in (0, 1], got {cutoff}")));
        }
        Ok(Self { cutoff, schedule })
    }

    fn keeps(&self, i: usize, j: usize, n: usize) -> bool {
        let h = (n / 2) as f64;
        let r = ((i as f64 - h).powi(2) + (j as f64 - h).powi(2)).sqrt();
        r <= self.cutoff * h * std::f64::consts::SQRT_2 + 1e-12
    }

    /// Low-pass projection of every slice.
    pub fn low_pass(&self, x: &ComplexVolume) -> ComplexVolume {
        let n = x.n();
        let nn = n * n;
        let mut out = x.clone();
        for buf in out.as_slice_mut().chunks_mut(nn) {
            fft2c_inplace(buf, n);
            for (k, z) in buf.iter_mut().enumerate() {
                if !self.keeps(k / n, k % n, n) {
                    *z = Complex64::new(0.0, 0.0);
                }
            }
            ifft2c_inplace(buf, n);
        }
        out
    }
}

impl Denoiser for ShrinkageDenoiser {
    fn score(&self, block: &ComplexVolume, _first_slice: usize, t: usize) -> Result<ComplexVolume> {
        self.schedule.check_step(t)?;
        let scale = 1.0 / (1.0 - self.schedule.alpha_bar(t));
        let mut out = self.low_pass(block);
        Zip::from(out.data_mut()).and(block.data()).for_each(|lp, &x| *lp = (*lp - x) * scale);
        Ok(out)
    }
}

/// `S == 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl Denoiser for ZeroScore {
    fn score(&self, block: &ComplexVolume, _first_slice: usize, _t: usize) -> Result<ComplexVolume> {
        ComplexVolume::zeros(block.slices(), block.n())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseStream;

    fn field(s: usize, n: usize, seed: u64, t: usize) -> ComplexVolume {
        let slices: Vec<_> = (0..s).map(|k| NoiseStream::new(seed, k, t, 0).complex_field(n)).collect();
        ComplexVolume::from_slices(&slices).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.betas(), &[0.01]);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn thousand_step_schedule_alpha_bar() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let log_sum: f64 = s.betas().iter().map(|b| (1.0 - b).ln()).sum();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-15);
        let approx = (-s.betas().iter().sum::<f64>()).exp();
        assert!(s.alpha_bar(1000) > approx / 2.0 && s.alpha_bar(1000) < approx * 2.0);
        assert!((s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 1.0);
        assert!((1..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
    }

    #[test]
    fn invalid_schedules() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(5, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(5, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_perturb_limits() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x = field(2, 4, 1, 0);
        let z = field(2, 4, 2, 0);
        assert_eq!(forward_perturb(&x, 0, &s, &z).unwrap(), x);
        let zero = ComplexVolume::zeros(2, 4).unwrap();
        let out = forward_perturb(&x, 7, &s, &zero).unwrap();
        let ra = s.alpha_bar(7).sqrt();
        for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b * ra).norm() < 1e-15);
        }
        assert!(forward_perturb(&x, 11, &s, &z).is_err());
    }

    #[test]
    fn forward_perturb_variance() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let t = 6;
        let x0 = ComplexVolume::zeros(1, 2).unwrap();
        let draws = 100_000 / 4;
        let mut acc = 0.0;
        for d in 0..draws {
            let z = field(1, 2, 1000 + d as u64, 0);
            let xt = forward_perturb(&x0, t, &s, &z).unwrap();
            acc += xt.as_slice().iter().map(|v| v.re * v.re).sum::<f64>();
        }
        let var = acc / (draws * 4) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
    }

    #[test]
    fn zero_score_zero_noise_rescales() {
        let s = make_linear_schedule(5, 0.05, 0.3).unwrap();
        let x = field(2, 4, 3, 0);
        let out = ddpm_sample_step(&x, 4, &s, &ZeroScore, 0, None, SamplerCoefficient::Sqrt).unwrap();
        let c = 1.0 / (1.0 - s.beta(4)).sqrt();
        for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b * c).norm() < 1e-15);
        }
        let printed = ddpm_sample_step(&x, 4, &s, &ZeroScore, 0, None, SamplerCoefficient::Printed).unwrap();
        assert!((printed.as_slice()[0] - x.as_slice()[0] / (1.0 - s.beta(4))).norm() < 1e-15);
    }

    #[test]
    fn vanishing_beta_is_identity() {
        let s = NoiseSchedule::new(vec![1e-15; 3]).unwrap();
        let x = field(1, 4, 4, 0);
        let out = ddpm_sample_step(&x, 2, &s, &ZeroScore, 0, None, SamplerCoefficient::Sqrt).unwrap();
        for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn final_step_ignores_noise() {
        let s = make_linear_schedule(3, 0.1, 0.2).unwrap();
        let x = field(1, 4, 5, 0);
        let z = field(1, 4, 6, 0);
        let with = ddpm_sample_step(&x, 1, &s, &ZeroScore, 0, Some(&z), SamplerCoefficient::Sqrt).unwrap();
        let without = ddpm_sample_step(&x, 1, &s, &ZeroScore, 0, None, SamplerCoefficient::Sqrt).unwrap();
        assert_eq!(with, without);
        assert!(ddpm_sample_step(&x, 0, &s, &ZeroScore, 0, None, SamplerCoefficient::Sqrt).is_err());
        assert!(ddpm_sample_step(&x, 4, &s, &ZeroScore, 0, None, SamplerCoefficient::Sqrt).is_err());
    }

    #[test]
    fn step_is_linear_for_affine_score() {
        // Gaussian score is affine; superposition holds after removing the offset
        let s = make_linear_schedule(6, 0.02, 0.2).unwrap();
        let model = GaussianScoreModel::new(field(1, 4, 7, 0), 0.7, s.clone()).unwrap();
        let zero = ComplexVolume::zeros(1, 4).unwrap();
        let (x1, x2) = (field(1, 4, 8, 0), field(1, 4, 9, 0));
        let (z1, z2) = (field(1, 4, 10, 0), field(1, 4, 11, 0));
        let step = |x: &ComplexVolume, z: &ComplexVolume| {
            ddpm_sample_step(x, 3, &s, &model, 0, Some(z), SamplerCoefficient::Sqrt).unwrap()
        };
        let base = step(&zero, &zero);
        let (a, b) = (0.3, -1.7);
        let mix = |p: &ComplexVolume, q: &ComplexVolume| {
            let mut o = p.clone();
            Zip::from(o.data_mut()).and(q.data()).for_each(|u, &v| *u = *u * a + v * b);
            o
        };
        let lhs = step(&mix(&x1, &x2), &mix(&z1, &z2));
        let (r1, r2) = (step(&x1, &z1), step(&x2, &z2));
        for k in 0..16 {
            let want =
                (r1.as_slice()[k] - base.as_slice()[k]) * a + (r2.as_slice()[k] - base.as_slice()[k]) * b + base.as_slice()[k];
            assert!((lhs.as_slice()[k] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn gaussian_score_properties() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let mu = field(2, 4, 12, 0);
        let model = GaussianScoreModel::new(mu.clone(), 0.5, s.clone()).unwrap();
        let t = 4;
        let ra = s.alpha_bar(t).sqrt();
        let mut mode = mu.clone();
        mode.as_slice_mut().iter_mut().for_each(|z| *z *= ra);
        assert!(model.score(&mode, 0, t).unwrap().norm_sqr() < 1e-30);

        // finite differences of log N(x; sqrt(ab) mu, v) against the score
        let x = field(2, 4, 13, 0);
        let var = model.variance(t);
        let logp = |x: &ComplexVolume| -> f64 {
            x.as_slice().iter().zip(mode.as_slice()).map(|(a, m)| -(a - m).norm_sqr() / (2.0 * var)).sum()
        };
        let sc = model.score(&x, 0, t).unwrap();
        let h = 1e-5;
        for k in [0, 5, 17, 31] {
            for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut p = x.clone();
                p.as_slice_mut()[k] += dir * h;
                let mut m = x.clone();
                m.as_slice_mut()[k] -= dir * h;
                let fd = (logp(&p) - logp(&m)) / (2.0 * h);
                let an = if dir.re == 1.0 { sc.as_slice()[k].re } else { sc.as_slice()[k].im };
                assert!((fd - an).abs() < 1e-8, "{fd} vs {an}");
            }
        }

        // block offset selects the matching slices of the mean
        let second = ComplexVolume::from_slices(&[x.slice(1).to_owned()]).unwrap();
        let sb = model.score(&second, 1, t).unwrap();
        for (a, b) in sb.as_slice().iter().zip(&sc.as_slice()[16..]) {
            assert_eq!(a, b);
        }
        assert!(model.score(&second, 2, t).is_err());
    }

    #[test]
    fn degenerate_gaussian_is_rejected() {
        let s = make_linear_schedule(3, 0.1, 0.2).unwrap();
        let model = GaussianScoreModel::new(field(1, 4, 1, 0), 0.0, s).unwrap();
        assert!(model.score(&field(1, 4, 2, 0), 0, 0).is_err());
        assert!(model.score(&field(1, 4, 2, 0), 0, 1).is_ok());
    }

    #[test]
    fn scalar_chain_reaches_prior_mean() {
        let s = make_linear_schedule(50, 1e-3, 0.3).unwrap();
        let mu = ComplexVolume::filled(1, 2, Complex64::new(0.8, -0.4)).unwrap();
        let sigma0 = 0.5;
        let model = GaussianScoreModel::new(mu, sigma0, s.clone()).unwrap();
        let runs = 10_000 / 4;
        let mut sum = Complex64::new(0.0, 0.0);
        for r in 0..runs {
            let mut x = ComplexVolume::from_slices(&[NoiseStream::new(99, 0, 51, r).complex_field(2)]).unwrap();
            for t in (1..=50).rev() {
                let z = ComplexVolume::from_slices(&[NoiseStream::new(99, 0, t, r).complex_field(2)]).unwrap();
                x = ddpm_sample_step(&x, t, &s, &model, 0, Some(&z), SamplerCoefficient::Sqrt).unwrap();
            }
            sum += x.as_slice().iter().sum::<Complex64>();
        }
        let count = (runs * 4) as f64;
        let mean = sum / count;
        let se = sigma0 / count.sqrt();
        assert!((mean.re - 0.8).abs() < 3.0 * se, "{mean}");
        assert!((mean.im + 0.4).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn shrinkage_properties() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let full = ShrinkageDenoiser::new(1.0, s.clone()).unwrap();
        let x = field(2, 8, 14, 0);
        assert!(full.score(&x, 0, 5).unwrap().norm_sqr() < 1e-25);

        let half = ShrinkageDenoiser::new(0.5, s.clone()).unwrap();
        let lp = half.low_pass(&x);
        assert!(lp.norm_sqr() < x.norm_sqr());
        // already band-limited input has zero score
        assert!(half.score(&lp, 0, 5).unwrap().norm_sqr() < 1e-25);
        assert!(ShrinkageDenoiser::new(0.0, s.clone()).is_err());
        assert!(ShrinkageDenoiser::new(1.5, s).is_err());
    }
}
