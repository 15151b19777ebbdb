//! Synthetic phantoms, sampling masks, probes and simulated measurements.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::fft::{centered_frequency, ifft2c};
use crate::inference::Measurements;
use crate::mri::mri_forward;
use crate::stem::{roll2, stem_forward, StemGeometry};
use crate::types::{check_grid, ComplexVolume, DiffractionSet, MaskKind, ProbeParams, SamplingMask};

/// `ceil(frac * n)` without rounding products like `0.15 * 240` up by one.
fn center_columns(n: usize, center_frac: f64) -> usize {
    ((center_frac * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_mask_params(n: usize, accel: f64, center_frac: f64) -> Result<(usize, usize)> {
    check_grid(n)?;
    if !(accel > 1.0) || !accel.is_finite() {
        return Err(Error::param(format!("acceleration must be > 1, got {accel}")));
    }
    if !(center_frac > 0.0 && center_frac < 1.0) {
        return Err(Error::param(format!("center fraction must lie in (0, 1), got {center_frac}")));
    }
    if center_frac > 1.0 / accel {
        return Err(Error::param(format!("center fraction {center_frac} exceeds the kept fraction 1/{accel}")));
    }
    let center = center_columns(n, center_frac).min(n);
    let total = ((n as f64 / accel).round() as usize).clamp(center, n);
    Ok((center, total))
}

fn center_band(n: usize, center: usize) -> std::ops::Range<usize> {
    let start = n / 2 - center / 2;
    start..start + center
}

fn columns_to_mask(n: usize, cols: impl IntoIterator<Item = usize>) -> Array2<u8> {
    let mut m = Array2::zeros((n, n));
    for c in cols {
        m.column_mut(c).fill(1);
    }
    m
}

/// Fully sampled centre band plus uniformly drawn readout columns, for
/// `round(n / accel)` kept columns in total.
pub fn make_uniform_mask(n: usize, accel: f64, center_frac: f64, seed: u64) -> Result<SamplingMask> {
    let (center, total) = check_mask_params(n, accel, center_frac)?;
    let band = center_band(n, center);
    let outside: Vec<usize> = (0..n).filter(|c| !band.contains(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, outside.len(), total - center);
    let cols = band.clone().chain(picked.into_iter().map(|i| outside[i]));
    SamplingMask::new(columns_to_mask(n, cols), accel, center_frac, MaskKind::Uniform, seed)
}

/// Centre band plus columns drawn without replacement with probability
/// proportional to `exp(-d^2 / (2 (n/6)^2))` of their distance `d` from the
/// centre column.
pub fn make_gaussian_mask(n: usize, accel: f64, center_frac: f64, seed: u64) -> Result<SamplingMask> {
    let (center, total) = check_mask_params(n, accel, center_frac)?;
    let band = center_band(n, center);
    let outside: Vec<usize> = (0..n).filter(|c| !band.contains(c)).collect();
    let sigma = n as f64 / 6.0;
    let mid = (n / 2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample_weighted(
        &mut rng,
        outside.len(),
        |i| {
            let d = outside[i] as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        },
        total - center,
    )
    .map_err(|e| Error::param(format!("gaussian mask sampling failed: {e}")))?;
    let cols = band.clone().chain(picked.into_iter().map(|i| outside[i]));
    SamplingMask::new(columns_to_mask(n, cols), accel, center_frac, MaskKind::Gaussian, seed)
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    angle: f64,
    value: f64,
}

impl Ellipsoid {
    /// Smooth indicator: 1 inside, 0 outside, logistic edge.
    fn weight(&self, x: f64, y: f64, z: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        let w = (z - self.center[2]) / self.axes[2];
        let r = (u * u + v * v + w * w).sqrt();
        1.0 / (1.0 + ((r - 1.0) / 0.04).exp())
    }
}

/// Smooth 3-D ellipsoid phantom with a mild smooth phase, magnitude in
/// `[0, 1]`. Stand-in for anatomical MRI volumes.
pub fn make_mri_phantom(slices: usize, n: usize, seed: u64) -> Result<ComplexVolume> {
    if slices == 0 {
        return Err(Error::param("phantom needs at least one slice"));
    }
    check_grid(n)?;
    if n < 32 {
        return Err(Error::param(format!("phantom grid must be at least 32, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = vec![
        Ellipsoid { center: [0.0, 0.0, 0.0], axes: [0.72, 0.86, 1.4], angle: 0.0, value: 0.8 },
        Ellipsoid { center: [0.0, -0.02, 0.0], axes: [0.66, 0.8, 1.3], angle: 0.0, value: -0.35 },
    ];
    for _ in 0..rng.random_range(4..=6) {
        shapes.push(Ellipsoid {
            center: [rng.random_range(-0.35..0.35), rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2)],
            axes: [rng.random_range(0.08..0.3), rng.random_range(0.1..0.35), rng.random_range(0.7..1.4)],
            angle: rng.random_range(-0.8..0.8),
            value: rng.random_range(0.15..0.45) * if rng.random_bool(0.8) { 1.0 } else { -0.5 },
        });
    }
    let phase_coef: [f64; 4] =
        [rng.random_range(0.5..1.5), rng.random_range(0.0..PI), rng.random_range(0.5..1.5), rng.random_range(0.0..PI)];
    let half = (n / 2) as f64;
    let mut mag = Array3::<f64>::zeros((slices, n, n));
    for ((s, i, j), m) in mag.indexed_iter_mut() {
        let z = (s as f64 + 0.5) / slices as f64 - 0.5;
        let y = (i as f64 - half) / half;
        let x = (j as f64 - half) / half;
        *m = shapes.iter().map(|e| e.value * e.weight(x, y, z)).sum::<f64>().max(0.0);
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let data = Array3::from_shape_fn((slices, n, n), |(s, i, j)| {
        let z = (s as f64 + 0.5) / slices as f64 - 0.5;
        let y = (i as f64 - half) / half;
        let x = (j as f64 - half) / half;
        let phase =
            0.25 * ((PI * phase_coef[0] * x + phase_coef[1]).sin() + (PI * phase_coef[2] * y + phase_coef[3]).cos()) + 0.1 * z;
        Complex64::from_polar((mag[[s, i, j]] * scale).min(1.0), phase)
    });
    ComplexVolume::new(data)
}

/// One atomic column of the unit cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtomSite {
    /// Fractional coordinates in `[0, 1)`.
    pub position: [f64; 3],
    /// Peak phase shift in radians.
    pub amplitude: f64,
    /// Gaussian width in Angstrom.
    pub width: f64,
}

/// Cubic crystal tiled laterally across the field of view; the unit cell
/// depth is split into `slices` equal z-bins.
#[derive(Clone, Debug, PartialEq)]
pub struct CrystalSpec {
    pub lattice: f64,
    pub sites: Vec<AtomSite>,
    pub slices: usize,
    pub n: usize,
    pub pixel_size: f64,
}

impl CrystalSpec {
    /// Zinc-blende cell with GaAs lattice constant (5.6533 A).
    pub fn gaas_like(slices: usize, n: usize, pixel_size: f64) -> Self {
        let fcc = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];
        let mut sites = Vec::new();
        for p in fcc {
            sites.push(AtomSite { position: p, amplitude: 0.5, width: 0.35 });
            sites.push(AtomSite { position: [p[0] + 0.25, p[1] + 0.25, p[2] + 0.25], amplitude: 0.6, width: 0.35 });
        }
        Self { lattice: 5.6533, sites, slices, n, pixel_size }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid(self.n)?;
        if self.slices == 0 {
            return Err(Error::param("crystal needs at least one slice"));
        }
        if !(self.lattice > 0.0) || !(self.pixel_size > 0.0) {
            return Err(Error::param("lattice constant and pixel size must be positive"));
        }
        for site in &self.sites {
            if site.position.iter().any(|&f| !(0.0..1.0).contains(&f)) {
                return Err(Error::param(format!("site {:?} lies outside the unit cell", site.position)));
            }
            if !(site.width > 0.0) || !site.amplitude.is_finite() {
                return Err(Error::param("site widths must be positive and amplitudes finite"));
            }
        }
        Ok(())
    }
}

/// Minimum-image offset of `d` for period `a`, in `[-a/2, a/2)`.
fn wrap(d: f64, a: f64) -> f64 {
    d - a * (d / a + 0.5).floor()
}

/// Phase-only crystal object `X_s = exp(i phi_s)`, where `phi_s` sums
/// Gaussian bumps of the sites whose depth falls in slice `s`.
pub fn make_crystal_phantom(spec: &CrystalSpec) -> Result<ComplexVolume> {
    spec.validate()?;
    let a = spec.lattice;
    let mut data = Array3::from_elem((spec.slices, spec.n, spec.n), Complex64::new(1.0, 0.0));
    for s in 0..spec.slices {
        let sites: Vec<&AtomSite> = spec
            .sites
            .iter()
            .filter(|site| ((site.position[2] * spec.slices as f64).floor() as usize).min(spec.slices - 1) == s)
            .collect();
        if sites.is_empty() {
            continue;
        }
        for i in 0..spec.n {
            for j in 0..spec.n {
                let y = i as f64 * spec.pixel_size;
                let x = j as f64 * spec.pixel_size;
                let phi: f64 = sites
                    .iter()
                    .map(|site| {
                        let dx = wrap(x - site.position[0] * a, a);
                        let dy = wrap(y - site.position[1] * a, a);
                        site.amplitude * (-(dx * dx + dy * dy) / (2.0 * site.width * site.width)).exp()
                    })
                    .sum();
                data[[s, i, j]] = Complex64::from_polar(1.0, phi);
            }
        }
    }
    ComplexVolume::new(data)
}

/// Aberrated probe `ifft2c(A(k) exp(-i chi(k)))` with a hard aperture of
/// radius `alpha / lambda` and defocus `chi = pi lambda df |k|^2`, normalised
/// to unit energy and circularly shifted by `shift` pixels.
pub fn make_probe(params: &ProbeParams, shift: (isize, isize)) -> Result<Array2<Complex64>> {
    params.validate()?;
    let n = params.n;
    let cutoff = params.cutoff();
    let spectrum = Array2::from_shape_fn((n, n), |(i, j)| {
        let ky = centered_frequency(i, n, params.pixel_size);
        let kx = centered_frequency(j, n, params.pixel_size);
        let k2 = kx * kx + ky * ky;
        if k2.sqrt() <= cutoff {
            Complex64::from_polar(1.0, -PI * params.wavelength * params.defocus * k2)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let mut probe = ifft2c(&spectrum)?;
    let norm = probe.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::param("aperture contains no frequencies"));
    }
    probe.mapv_inplace(|z| z / norm);
    Ok(roll2(&probe, shift))
}

/// Forward-model k-space for `x` under `mask`.
pub fn simulate_mri(x: &ComplexVolume, mask: &SamplingMask) -> Result<Measurements> {
    Ok(Measurements::Mri { kspace: mri_forward(x, mask)?, mask: mask.clone() })
}

/// Forward-model diffraction for `x`. With a dose, each pattern is replaced
/// by Poisson counts with `dose` expected electrons per pattern, rescaled
/// back to intensity units.
pub fn simulate_stem(x: &ComplexVolume, geometry: &StemGeometry, dose: Option<f64>, seed: u64) -> Result<Measurements> {
    let clean = stem_forward(x, geometry)?;
    let data = match dose {
        None => clean,
        Some(d) => poisson_resample(&clean, d, seed)?,
    };
    Ok(Measurements::Stem { data, geometry: geometry.clone() })
}

/// Poisson resampling at `dose` counts per pattern.
pub fn poisson_resample(data: &DiffractionSet, dose: f64, seed: u64) -> Result<DiffractionSet> {
    if !(dose >= 0.0) || dose.is_nan() {
        return Err(Error::param(format!("dose must be non-negative, got {dose}")));
    }
    if dose.is_infinite() {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sy, sx) = data.scan_dims();
    let mut out = data.data().clone();
    for iy in 0..sy {
        for ix in 0..sx {
            let total: f64 = data.pattern(iy, ix).sum();
            let mut pat = out.index_axis_mut(ndarray::Axis(0), iy);
            let mut pat = pat.index_axis_mut(ndarray::Axis(0), ix);
            if total <= 0.0 || dose == 0.0 {
                pat.fill(0.0);
                continue;
            }
            for v in pat.iter_mut() {
                let lambda = dose * *v / total;
                let counts = if lambda > 0.0 {
                    Poisson::new(lambda).map_err(|e| Error::param(format!("poisson rate {lambda}: {e}")))?.sample(&mut rng)
                } else {
                    0.0
                };
                *v = counts * total / dose;
            }
        }
    }
    DiffractionSet::new(out, data.scan_step)
}
