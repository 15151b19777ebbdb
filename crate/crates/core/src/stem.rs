//! Multi-slice 4D-STEM forward model, intensity loss and Wirtinger gradient.
//!
//! For scan point `r` the incident wave on slice 1 is the shifted probe
//! `W_1 = P_r`; each slice transmits `E_s = X_s * W_s` and the next incident
//! wave is the Fresnel-propagated exit wave `W_{s+1} = V(E_s)`. The detector
//! records `I_r = |fft2c(E_S)|^2`.
//!
//! Gradients are accumulated over scan points in fixed-size chunks that are
//! reduced pairwise in a fixed order, so results are bit-identical for any
//! thread count.

use ndarray::{Array2, Array4, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::datagen::make_probe;
use crate::error::{Error, Result};
use crate::fft::{fft2c_inplace, ifft2c_inplace, FresnelKernel};
use crate::mri::soft_threshold;
use crate::types::{ComplexVolume, DiffractionSet, ProbeParams};

/// Scan points handled sequentially by one task before the pairwise reduction.
const SCAN_CHUNK: usize = 8;

/// Known acquisition geometry: probe optics, slice spacing and raster scan.
///
/// Scan positions are integer pixel shifts of the probe, `scan_step_px`
/// apart and centred on the field of view.
#[derive(Clone, Debug)]
pub struct StemGeometry {
    pub probe: ProbeParams,
    pub slices: usize,
    pub slice_spacing: f64,
    pub scan: (usize, usize),
    pub scan_step_px: usize,
    base_probe: Array2<Complex64>,
    kernel: FresnelKernel,
}

impl StemGeometry {
    pub fn new(probe: ProbeParams, slices: usize, slice_spacing: f64, scan: (usize, usize), scan_step_px: usize) -> Result<Self> {
        probe.validate()?;
        if slices == 0 {
            return Err(Error::param("STEM object needs at least one slice"));
        }
        if !(slice_spacing > 0.0) || !slice_spacing.is_finite() {
            return Err(Error::param(format!("slice spacing must be positive, got {slice_spacing}")));
        }
        if scan.0 == 0 || scan.1 == 0 {
            return Err(Error::param("scan grid must be at least 1x1"));
        }
        let base_probe = make_probe(&probe, (0, 0))?;
        let kernel = FresnelKernel::new(probe.n, probe.pixel_size, probe.wavelength, slice_spacing)?;
        Ok(Self { probe, slices, slice_spacing, scan, scan_step_px, base_probe, kernel })
    }

    pub fn n(&self) -> usize {
        self.probe.n
    }

    pub fn scan_points(&self) -> usize {
        self.scan.0 * self.scan.1
    }

    /// Scan step in Angstrom.
    pub fn scan_step(&self) -> f64 {
        self.scan_step_px as f64 * self.probe.pixel_size
    }

    pub fn kernel(&self) -> &FresnelKernel {
        &self.kernel
    }

    /// Pixel shift of the probe at scan index `(iy, ix)`.
    pub fn scan_shift(&self, iy: usize, ix: usize) -> (isize, isize) {
        let step = self.scan_step_px as isize;
        let oy = (self.scan.0 as isize - 1) * step / 2;
        let ox = (self.scan.1 as isize - 1) * step / 2;
        (iy as isize * step - oy, ix as isize * step - ox)
    }

    /// Probe at scan point `r` in row-major scan order.
    pub fn probe_at(&self, r: usize) -> Array2<Complex64> {
        let (iy, ix) = (r / self.scan.1, r % self.scan.1);
        roll2(&self.base_probe, self.scan_shift(iy, ix))
    }

    pub fn probe_energy(&self) -> f64 {
        self.base_probe.iter().map(|z| z.norm_sqr()).sum()
    }

    fn check_volume(&self, x: &ComplexVolume) -> Result<()> {
        if x.slices() != self.slices || x.n() != self.n() {
            return Err(Error::shape(format!(
                "object is {:?} but geometry expects ({}, {n}, {n})",
                x.dim(),
                self.slices,
                n = self.n()
            )));
        }
        Ok(())
    }

    fn check_data(&self, data: &DiffractionSet) -> Result<()> {
        if data.scan_dims() != self.scan || data.detector_n() != self.n() {
            return Err(Error::shape(format!(
                "diffraction set is {:?} but geometry expects ({}, {}, {n}, {n})",
                data.data().dim(),
                self.scan.0,
                self.scan.1,
                n = self.n()
            )));
        }
        Ok(())
    }
}

/// Circular shift: `out[i, j] = a[i - dy, j - dx]`.
pub(crate) fn roll2(a: &Array2<Complex64>, (dy, dx): (isize, isize)) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    Array2::from_shape_fn((h, w), |(i, j)| a[[(i + h - dy) % h, (j + w - dx) % w]])
}

/// Incident waves on every slice plus the far-field wave for one scan point.
struct Waves {
    incident: Vec<Vec<Complex64>>,
    far_field: Vec<Complex64>,
}

fn propagate(x: &ComplexVolume, geom: &StemGeometry, probe: &[Complex64]) -> Waves {
    let n = geom.n();
    let nn = n * n;
    let xs = x.as_slice();
    let mut incident = Vec::with_capacity(geom.slices);
    let mut w = probe.to_vec();
    for s in 0..geom.slices {
        let mut e: Vec<Complex64> = w.iter().zip(&xs[s * nn..(s + 1) * nn]).map(|(a, b)| a * b).collect();
        incident.push(w);
        if s + 1 < geom.slices {
            geom.kernel.propagate_inplace(&mut e);
            w = e;
        } else {
            fft2c_inplace(&mut e, n);
            return Waves { incident, far_field: e };
        }
    }
    unreachable!("geometry has at least one slice")
}

/// Adds `d L / d conj(X)` for one scan point to `grad`, given the gradient
/// with respect to the conjugate exit wave of the last slice.
fn backprop(x: &ComplexVolume, geom: &StemGeometry, waves: &Waves, mut g: Vec<Complex64>, grad: &mut [Complex64]) {
    let nn = geom.n() * geom.n();
    let xs = x.as_slice();
    for s in (0..geom.slices).rev() {
        let w = &waves.incident[s];
        let gs = &mut grad[s * nn..(s + 1) * nn];
        for ((acc, gv), wv) in gs.iter_mut().zip(&g).zip(w) {
            *acc += wv.conj() * gv;
        }
        if s > 0 {
            for (gv, xv) in g.iter_mut().zip(&xs[s * nn..(s + 1) * nn]) {
                *gv *= xv.conj();
            }
            geom.kernel.adjoint_inplace(&mut g);
        }
    }
}

fn pairwise_sum(mut parts: Vec<Vec<Complex64>>) -> Vec<Complex64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Sums `f(r)` over all scan points with a deterministic reduction tree.
/// `f` must add its contribution into the provided buffer.
fn accumulate<F>(x: &ComplexVolume, geom: &StemGeometry, f: F) -> ComplexVolume
where
    F: Fn(usize, &mut [Complex64]) + Sync,
{
    let len = x.as_slice().len();
    let points: Vec<usize> = (0..geom.scan_points()).collect();
    let parts: Vec<Vec<Complex64>> = points
        .par_chunks(SCAN_CHUNK)
        .map(|chunk| {
            let mut buf = vec![Complex64::new(0.0, 0.0); len];
            for &r in chunk {
                f(r, &mut buf);
            }
            buf
        })
        .collect();
    ComplexVolume::from_raw(x.dim(), pairwise_sum(parts))
}

fn probe_vec(geom: &StemGeometry, r: usize) -> Vec<Complex64> {
    geom.probe_at(r).into_raw_vec_and_offset().0
}

/// Simulated diffraction intensities for every scan point.
pub fn stem_forward(x: &ComplexVolume, geom: &StemGeometry) -> Result<DiffractionSet> {
    geom.check_volume(x)?;
    let n = geom.n();
    let (sy, sx) = geom.scan;
    let mut data = Array4::<f64>::zeros((sy, sx, n, n));
    data.as_slice_mut().expect("standard layout").par_chunks_mut(n * n).enumerate().for_each(|(r, out)| {
        let waves = propagate(x, geom, &probe_vec(geom, r));
        out.iter_mut().zip(&waves.far_field).for_each(|(o, z)| *o = z.norm_sqr());
    });
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("simulated diffraction"));
    }
    DiffractionSet::new(data, geom.scan_step())
}

/// `sum_r || I_r - |fft2c(E_S^r)|^2 ||_F^2`.
pub fn stem_loss(x: &ComplexVolume, meas: &DiffractionSet, geom: &StemGeometry) -> Result<f64> {
    geom.check_volume(x)?;
    geom.check_data(meas)?;
    let n = geom.n();
    let measured = meas.data().as_slice().expect("standard layout");
    let per_point: Vec<f64> = (0..geom.scan_points())
        .into_par_iter()
        .map(|r| {
            let waves = propagate(x, geom, &probe_vec(geom, r));
            let i_r = &measured[r * n * n..(r + 1) * n * n];
            waves.far_field.iter().zip(i_r).map(|(z, &i)| (i - z.norm_sqr()).powi(2)).sum()
        })
        .collect();
    Ok(per_point.iter().sum())
}

/// Wirtinger gradient `dL/d conj(X)` of [`stem_loss`]. The real gradient
/// `dL/dRe + i dL/dIm` is twice this.
pub fn stem_grad(x: &ComplexVolume, meas: &DiffractionSet, geom: &StemGeometry) -> Result<ComplexVolume> {
    geom.check_volume(x)?;
    geom.check_data(meas)?;
    let n = geom.n();
    let measured = meas.data().as_slice().expect("standard layout");
    let g = accumulate(x, geom, |r, buf| {
        let waves = propagate(x, geom, &probe_vec(geom, r));
        let i_r = &measured[r * n * n..(r + 1) * n * n];
        let mut seed: Vec<Complex64> =
            waves.far_field.iter().zip(i_r).map(|(psi, &i)| psi * (-2.0 * (i - psi.norm_sqr()))).collect();
        ifft2c_inplace(&mut seed, n);
        backprop(x, geom, &waves, seed, buf);
    });
    g.check_finite("STEM gradient")?;
    Ok(g)
}

/// Directional derivative of the intensities: `dI_r = 2 Re(conj(Psi_r) dPsi_r)`.
pub fn stem_jvp(x: &ComplexVolume, dx: &ComplexVolume, geom: &StemGeometry) -> Result<Array4<f64>> {
    geom.check_volume(x)?;
    x.same_shape(dx)?;
    let n = geom.n();
    let nn = n * n;
    let (sy, sx) = geom.scan;
    let xs = x.as_slice();
    let ds = dx.as_slice();
    let mut out = Array4::<f64>::zeros((sy, sx, n, n));
    out.as_slice_mut().expect("standard layout").par_chunks_mut(nn).enumerate().for_each(|(r, o)| {
        let mut w = probe_vec(geom, r);
        let mut dw = vec![Complex64::new(0.0, 0.0); nn];
        for s in 0..geom.slices {
            let xsl = &xs[s * nn..(s + 1) * nn];
            let dsl = &ds[s * nn..(s + 1) * nn];
            let mut e: Vec<Complex64> = w.iter().zip(xsl).map(|(a, b)| a * b).collect();
            let mut de: Vec<Complex64> = (0..nn).map(|k| dsl[k] * w[k] + xsl[k] * dw[k]).collect();
            if s + 1 < geom.slices {
                geom.kernel.propagate_inplace(&mut e);
                geom.kernel.propagate_inplace(&mut de);
                w = e;
                dw = de;
            } else {
                fft2c_inplace(&mut e, n);
                fft2c_inplace(&mut de, n);
                for k in 0..nn {
                    o[k] = 2.0 * (e[k].conj() * de[k]).re;
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`stem_jvp`] under the real inner products
/// `<a, b> = sum a b` on intensities and `Re sum conj(u) v` on volumes.
pub fn stem_vjp(x: &ComplexVolume, y: &Array4<f64>, geom: &StemGeometry) -> Result<ComplexVolume> {
    geom.check_volume(x)?;
    let n = geom.n();
    if y.dim() != (geom.scan.0, geom.scan.1, n, n) {
        return Err(Error::shape("cotangent does not match the scan geometry"));
    }
    let ys = y.as_standard_layout();
    let ys = ys.as_slice().expect("standard layout");
    let mut g = accumulate(x, geom, |r, buf| {
        let waves = propagate(x, geom, &probe_vec(geom, r));
        let y_r = &ys[r * n * n..(r + 1) * n * n];
        let mut seed: Vec<Complex64> = waves.far_field.iter().zip(y_r).map(|(psi, &v)| psi * v).collect();
        ifft2c_inplace(&mut seed, n);
        backprop(x, geom, &waves, seed, buf);
    });
    g.as_slice_mut().iter_mut().for_each(|z| *z *= 2.0);
    Ok(g)
}

/// Step size, deviation-from-vacuum threshold and optional `|X| <= 1` clamp.
/// Without a step size the update runs a backtracking line search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StemStepConfig {
    pub step: Option<f64>,
    pub threshold: f64,
    pub clamp: bool,
}

impl Default for StemStepConfig {
    fn default() -> Self {
        Self { step: None, threshold: 0.0, clamp: false }
    }
}

impl StemStepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.step {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::param(format!("STEM step size must be positive, got {eta}")));
            }
        }
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::param(format!("STEM threshold must be >= 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Soft-thresholds the deviation from vacuum, `1 + shrink(X - 1)`, then
/// optionally clamps the magnitude to 1.
pub fn stem_prox(x: &mut ComplexVolume, threshold: f64, clamp: bool) {
    let one = Complex64::new(1.0, 0.0);
    for z in x.as_slice_mut() {
        let mut v = one + soft_threshold(*z - one, threshold);
        if clamp {
            let m = v.norm();
            if m > 1.0 {
                v /= m;
            }
        }
        *z = v;
    }
}

fn update(x: &ComplexVolume, grad: &ComplexVolume, eta: f64, cfg: &StemStepConfig) -> ComplexVolume {
    let mut out = x.clone();
    Zip::from(out.data_mut()).and(grad.data()).for_each(|z, &g| *z -= g * eta);
    stem_prox(&mut out, cfg.threshold, cfg.clamp);
    out
}

/// Initial trial step of the line search: `1 / (2 ||P||^2 R)`.
pub fn default_initial_step(geom: &StemGeometry) -> f64 {
    1.0 / (2.0 * geom.probe_energy() * geom.scan_points() as f64)
}

/// Outcome of one line-searched update.
#[derive(Clone, Debug)]
pub struct StemStep {
    pub volume: ComplexVolume,
    /// Accepted step size; zero when no trial step decreased the loss.
    pub step: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Backtracking line search starting at `initial_step`, halving until the
/// sufficient-decrease condition holds.
pub fn stem_line_search_step(
    x: &ComplexVolume,
    meas: &DiffractionSet,
    geom: &StemGeometry,
    cfg: &StemStepConfig,
    initial_step: f64,
) -> Result<StemStep> {
    cfg.validate()?;
    if !(initial_step > 0.0) || !initial_step.is_finite() {
        return Err(Error::param(format!("initial step must be positive, got {initial_step}")));
    }
    let loss = stem_loss(x, meas, geom)?;
    let grad = stem_grad(x, meas, geom)?;
    // directional derivative along -grad is -2 ||grad||^2
    let slope = 2.0 * grad.norm_sqr();
    let mut eta = initial_step;
    for _ in 0..MAX_HALVINGS {
        let trial = update(x, &grad, eta, cfg);
        if trial.check_finite("STEM update").is_ok() {
            let l = stem_loss(&trial, meas, geom)?;
            if l <= loss - ARMIJO * eta * slope && l < loss {
                return Ok(StemStep { volume: trial, step: eta, loss_before: loss, loss_after: l });
            }
        }
        eta *= 0.5;
    }
    Ok(StemStep { volume: x.clone(), step: 0.0, loss_before: loss, loss_after: loss })
}

/// `Prox(X - eta * grad)`. With no configured step size the step comes from
/// a line search starting at [`default_initial_step`].
pub fn stem_gd_step(
    x: &ComplexVolume,
    meas: &DiffractionSet,
    geom: &StemGeometry,
    cfg: &StemStepConfig,
) -> Result<ComplexVolume> {
    cfg.validate()?;
    match cfg.step {
        Some(eta) => {
            let grad = stem_grad(x, meas, geom)?;
            let out = update(x, &grad, eta, cfg);
            out.check_finite("STEM gradient step")?;
            Ok(out)
        }
        None => Ok(stem_line_search_step(x, meas, geom, cfg, default_initial_step(geom))?.volume),
    }
}

/// Sum of each diffraction pattern over the whole detector.
pub fn bright_field(data: &DiffractionSet) -> Array2<f64> {
    data.data().sum_axis(Axis(3)).sum_axis(Axis(2))
}

/// Sum of each pattern over a centred detector disk of `radius` pixels.
pub fn bright_field_disk(data: &DiffractionSet, radius: f64) -> Array2<f64> {
    let n = data.detector_n();
    let c = (n / 2) as f64;
    let (sy, sx) = data.scan_dims();
    Array2::from_shape_fn((sy, sx), |(iy, ix)| {
        data.pattern(iy, ix)
            .indexed_iter()
            .filter(|((i, j), _)| ((*i as f64 - c).powi(2) + (*j as f64 - c).powi(2)).sqrt() <= radius)
            .map(|(_, v)| *v)
            .sum()
    })
}
