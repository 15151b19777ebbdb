//! Cartesian MRI acquisition model and its data-consistency update.

use ndarray::Zip;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{fft2c_inplace, ifft2c_inplace};
use crate::types::{ComplexVolume, KSpaceStack, SamplingMask};

/// Gradient step size `lambda` and soft-threshold `tau` of the MRI update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MriStepConfig {
    pub step: f64,
    pub threshold: f64,
}

impl Default for MriStepConfig {
    fn default() -> Self {
        Self { step: 0.5, threshold: 0.0 }
    }
}

impl MriStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::param(format!("MRI step size must be positive, got {}", self.step)));
        }
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::param(format!("MRI threshold must be >= 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Complex soft-thresholding: shrinks the magnitude by `tau`, keeps the phase.
#[inline]
pub fn soft_threshold(z: Complex64, tau: f64) -> Complex64 {
    if tau <= 0.0 {
        return z;
    }
    let mag = z.norm();
    if mag <= tau {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((mag - tau) / mag)
    }
}

fn check(x: &ComplexVolume, y: &KSpaceStack, mask: &SamplingMask) -> Result<()> {
    mask.check_volume(x)?;
    x.same_shape(y.spectra())
}

fn for_each_slice<F>(x: &mut ComplexVolume, f: F)
where
    F: Fn(usize, &mut [Complex64]) + Sync,
{
    let nn = x.n() * x.n();
    x.as_slice_mut().par_chunks_mut(nn).enumerate().for_each(|(s, buf)| f(s, buf));
}

/// `Y_s = M * fft2c(X_s)` for every slice.
pub fn mri_forward(x: &ComplexVolume, mask: &SamplingMask) -> Result<KSpaceStack> {
    mask.check_volume(x)?;
    let n = x.n();
    let m = mask.values().as_slice().expect("standard layout");
    let mut spectra = x.clone();
    for_each_slice(&mut spectra, |_, buf| {
        fft2c_inplace(buf, n);
        buf.iter_mut().zip(m).for_each(|(z, &keep)| {
            if keep == 0 {
                *z = Complex64::new(0.0, 0.0);
            }
        });
    });
    KSpaceStack::new(spectra, mask)
}

/// `M * fft2c(X_s) - Y_s` for every slice.
fn residual(x: &ComplexVolume, y: &KSpaceStack, mask: &SamplingMask) -> ComplexVolume {
    let n = x.n();
    let nn = n * n;
    let m = mask.values().as_slice().expect("standard layout");
    let meas = y.spectra().as_slice();
    let mut r = x.clone();
    for_each_slice(&mut r, |s, buf| {
        fft2c_inplace(buf, n);
        let ys = &meas[s * nn..(s + 1) * nn];
        for ((z, &keep), &yv) in buf.iter_mut().zip(m).zip(ys) {
            *z = if keep == 0 { Complex64::new(0.0, 0.0) } else { *z - yv };
        }
    });
    r
}

/// `sum_s || Y_s - M * fft2c(X_s) ||_F^2`.
pub fn mri_loss(x: &ComplexVolume, y: &KSpaceStack, mask: &SamplingMask) -> Result<f64> {
    check(x, y, mask)?;
    Ok(residual(x, y, mask).norm_sqr())
}

/// Gradient of [`mri_loss`] as `dL/dRe + i dL/dIm`, i.e.
/// `2 ifft2c(M * (fft2c(X_s) - Y_s))` per slice.
pub fn mri_grad(x: &ComplexVolume, y: &KSpaceStack, mask: &SamplingMask) -> Result<ComplexVolume> {
    check(x, y, mask)?;
    let n = x.n();
    let mut g = residual(x, y, mask);
    for_each_slice(&mut g, |_, buf| {
        ifft2c_inplace(buf, n);
        buf.iter_mut().for_each(|z| *z *= 2.0);
    });
    Ok(g)
}

/// One proximal gradient step on the k-space data term.
///
/// With `step = 1/2` and no threshold the sampled spectral entries of the
/// result equal the measurements and the unsampled ones are left untouched.
pub fn mri_dc_step(x: &ComplexVolume, y: &KSpaceStack, mask: &SamplingMask, cfg: &MriStepConfig) -> Result<ComplexVolume> {
    cfg.validate()?;
    let g = mri_grad(x, y, mask)?;
    let mut out = x.clone();
    Zip::from(out.data_mut()).and(g.data()).for_each(|z, &gz| {
        *z = soft_threshold(*z - gz * cfg.step, cfg.threshold);
    });
    out.check_finite("MRI data-consistency step")?;
    Ok(out)
}

/// `X_s = ifft2c(Y_s)`.
pub fn zero_filled_recon(y: &KSpaceStack) -> ComplexVolume {
    let n = y.n();
    let mut x = y.spectra().clone();
    for_each_slice(&mut x, |_, buf| ifft2c_inplace(buf, n));
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::fft2c;
    use crate::noise::NoiseStream;
    use ndarray::{Array2, Array3};

    fn random_volume(s: usize, n: usize, seed: u64) -> ComplexVolume {
        let slices: Vec<_> = (0..s).map(|k| NoiseStream::new(seed, k, 0, 0).complex_field(n)).collect();
        ComplexVolume::from_slices(&slices).unwrap()
    }

    fn column_mask(n: usize, cols: &[usize]) -> SamplingMask {
        let mut m = Array2::zeros((n, n));
        for &c in cols {
            m.column_mut(c).fill(1);
        }
        SamplingMask::custom(m).unwrap()
    }

    #[test]
    fn full_mask_on_delta_is_flat() {
        let n = 8;
        let mut a = Array3::zeros((1, n, n));
        a[[0, n / 2, n / 2]] = Complex64::new(1.0, 0.0);
        let x = ComplexVolume::new(a).unwrap();
        let y = mri_forward(&x, &SamplingMask::full(n).unwrap()).unwrap();
        assert!(y.spectra().as_slice().iter().all(|z| (z - Complex64::new(0.125, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn empty_mask_gives_zero_stack() {
        let x = random_volume(2, 8, 1);
        let mask = SamplingMask::custom(Array2::zeros((8, 8))).unwrap();
        let y = mri_forward(&x, &mask).unwrap();
        assert!(y.spectra().as_slice().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn support_matches_mask() {
        let x = random_volume(3, 8, 2);
        let mask = column_mask(8, &[0, 3, 4, 6]);
        let y = mri_forward(&x, &mask).unwrap();
        let nonzero = y.spectra().as_slice().iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nonzero, 3 * mask.count_ones());
    }

    #[test]
    fn loss_zero_at_truth_and_norm_at_zero() {
        let x = random_volume(2, 8, 3);
        let mask = column_mask(8, &[1, 4, 5]);
        let y = mri_forward(&x, &mask).unwrap();
        assert!(mri_loss(&x, &y, &mask).unwrap() < 1e-20);
        let zero = ComplexVolume::zeros(2, 8).unwrap();
        let l0 = mri_loss(&zero, &y, &mask).unwrap();
        assert!((l0 - y.spectra().norm_sqr()).abs() < 1e-12 * l0);
    }

    #[test]
    fn loss_grows_quadratically_with_pixel_error() {
        let x = random_volume(1, 8, 4);
        let mask = column_mask(8, &[2, 4, 7]);
        let y = mri_forward(&x, &mask).unwrap();
        let losses: Vec<f64> = [1e-3, 1e-2, 1e-1]
            .iter()
            .map(|&eps| {
                let mut p = x.clone();
                p.data_mut()[[0, 3, 3]] += Complex64::new(eps, 0.0);
                mri_loss(&p, &y, &mask).unwrap()
            })
            .collect();
        assert!(losses[0] > 0.0 && losses[0] < losses[1] && losses[1] < losses[2]);
        // quadratic in eps: ratio of 100 per decade
        assert!((losses[2] / losses[1] - 100.0).abs() < 1e-6);
    }

    #[test]
    fn half_step_replaces_sampled_entries() {
        let x = random_volume(2, 8, 5);
        let truth = random_volume(2, 8, 6);
        let mask = column_mask(8, &[0, 2, 4, 5]);
        let y = mri_forward(&truth, &mask).unwrap();
        let out = mri_dc_step(&x, &y, &mask, &MriStepConfig::default()).unwrap();
        for s in 0..2 {
            let before = fft2c(&x.slice(s)).unwrap();
            let after = fft2c(&out.slice(s)).unwrap();
            for ((i, j), z) in after.indexed_iter() {
                let want = if mask.is_sampled(i, j) { y.spectra().data()[[s, i, j]] } else { before[[i, j]] };
                assert!((z - want).norm() <= 1e-10, "slice {s} ({i},{j})");
            }
        }
    }

    #[test]
    fn consistent_volume_is_fixed_point() {
        let x = random_volume(2, 8, 7);
        let mask = column_mask(8, &[1, 3, 4]);
        let y = mri_forward(&x, &mask).unwrap();
        let out = mri_dc_step(&x, &y, &mask, &MriStepConfig::default()).unwrap();
        for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn full_mask_half_step_is_zero_filled() {
        let x = random_volume(2, 8, 8);
        let truth = random_volume(2, 8, 9);
        let mask = SamplingMask::full(8).unwrap();
        let y = mri_forward(&truth, &mask).unwrap();
        let out = mri_dc_step(&x, &y, &mask, &MriStepConfig::default()).unwrap();
        let zf = zero_filled_recon(&y);
        for (a, b) in out.as_slice().iter().zip(zf.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_filled_of_full_and_empty() {
        let x = random_volume(2, 8, 10);
        let zf = zero_filled_recon(&mri_forward(&x, &SamplingMask::full(8).unwrap()).unwrap());
        for (a, b) in zf.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
        let empty = SamplingMask::custom(Array2::zeros((8, 8))).unwrap();
        let zf = zero_filled_recon(&mri_forward(&x, &empty).unwrap());
        assert_eq!(zf.norm_sqr(), 0.0);
    }

    #[test]
    fn soft_threshold_shrinks_magnitude() {
        let z = Complex64::new(3.0, 4.0);
        let s = soft_threshold(z, 1.0);
        assert!((s.norm() - 4.0).abs() < 1e-15);
        assert!((s.arg() - z.arg()).abs() < 1e-15);
        assert_eq!(soft_threshold(z, 5.0), Complex64::new(0.0, 0.0));
        assert_eq!(soft_threshold(z, 0.0), z);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = random_volume(2, 8, 11);
        let mask = SamplingMask::full(16).unwrap();
        assert!(mri_forward(&x, &mask).is_err());
        let bad = MriStepConfig { step: 0.0, threshold: 0.0 };
        let m8 = SamplingMask::full(8).unwrap();
        let y = mri_forward(&x, &m8).unwrap();
        assert!(mri_dc_step(&x, &y, &m8, &bad).is_err());
    }
}
