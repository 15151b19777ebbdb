//! Centered unitary 2-D Fourier transforms and the Fresnel propagator.
//!
//! Zero frequency sits at index `(n / 2, n / 2)`. Both directions are scaled
//! by `1 / n`, which makes the pair unitary and each the adjoint of the other.

use std::cell::RefCell;
use std::f64::consts::PI;

use ndarray::{Array2, ArrayBase, Data, Ix2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::types::check_grid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

fn plan(n: usize, dir: Direction) -> std::sync::Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match dir {
            Direction::Forward => p.plan_fft_forward(n),
            Direction::Inverse => p.plan_fft_inverse(n),
        }
    })
}

/// Swaps quadrants. For even `n` this is both `fftshift` and `ifftshift`.
fn roll_half(buf: &mut [Complex64], n: usize) {
    let h = n / 2;
    for i in 0..h {
        for j in 0..n {
            buf.swap(i * n + j, (i + h) * n + (j + h) % n);
        }
    }
}

fn fft2_raw(buf: &mut [Complex64], n: usize, dir: Direction) {
    let fft = plan(n, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(buf, &mut scratch);
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fft.process_with_scratch(&mut col, &mut scratch);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
}

fn transform_inplace(buf: &mut [Complex64], n: usize, dir: Direction) {
    debug_assert_eq!(buf.len(), n * n);
    roll_half(buf, n);
    fft2_raw(buf, n, dir);
    roll_half(buf, n);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|z| *z *= scale);
}

/// In-place centered forward transform of a row-major `n x n` buffer.
pub(crate) fn fft2c_inplace(buf: &mut [Complex64], n: usize) {
    transform_inplace(buf, n, Direction::Forward);
}

/// In-place centered inverse transform of a row-major `n x n` buffer.
pub(crate) fn ifft2c_inplace(buf: &mut [Complex64], n: usize) {
    transform_inplace(buf, n, Direction::Inverse);
}

fn square_even<S: Data<Elem = Complex64>>(img: &ArrayBase<S, Ix2>) -> Result<usize> {
    let (h, w) = img.dim();
    if h != w {
        return Err(Error::shape(format!("expected a square image, got {h}x{w}")));
    }
    check_grid(h)?;
    Ok(h)
}

fn transformed<S: Data<Elem = Complex64>>(img: &ArrayBase<S, Ix2>, dir: Direction) -> Result<Array2<Complex64>> {
    let n = square_even(img)?;
    let mut out = img.as_standard_layout().into_owned();
    transform_inplace(out.as_slice_mut().expect("standard layout"), n, dir);
    Ok(out)
}

pub fn fft2c<S: Data<Elem = Complex64>>(img: &ArrayBase<S, Ix2>) -> Result<Array2<Complex64>> {
    transformed(img, Direction::Forward)
}

pub fn ifft2c<S: Data<Elem = Complex64>>(spec: &ArrayBase<S, Ix2>) -> Result<Array2<Complex64>> {
    transformed(spec, Direction::Inverse)
}

/// Centered spatial frequency (cycles per Angstrom) of index `i` on an
/// `n`-point grid with spacing `dx`.
pub fn centered_frequency(i: usize, n: usize, dx: f64) -> f64 {
    (i as f64 - (n / 2) as f64) / (n as f64 * dx)
}

/// Paraxial free-space propagator `H(k) = exp(-i pi lambda dz |k|^2)` sampled
/// on the centered frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FresnelKernel {
    n: usize,
    pub pixel_size: f64,
    pub wavelength: f64,
    pub distance: f64,
    phases: Array2<Complex64>,
}

impl FresnelKernel {
    pub fn new(n: usize, pixel_size: f64, wavelength: f64, distance: f64) -> Result<Self> {
        check_grid(n)?;
        if !(pixel_size > 0.0) || !(wavelength > 0.0) || !distance.is_finite() {
            return Err(Error::param("Fresnel kernel needs positive pixel size and wavelength"));
        }
        let phases = Array2::from_shape_fn((n, n), |(i, j)| {
            let ky = centered_frequency(i, n, pixel_size);
            let kx = centered_frequency(j, n, pixel_size);
            Complex64::from_polar(1.0, -PI * wavelength * distance * (kx * kx + ky * ky))
        });
        Ok(Self { n, pixel_size, wavelength, distance, phases })
    }

    /// Kernel for the opposite distance, equal to the conjugate kernel.
    pub fn reversed(&self) -> Self {
        Self {
            n: self.n,
            pixel_size: self.pixel_size,
            wavelength: self.wavelength,
            distance: -self.distance,
            phases: self.phases.mapv(|z| z.conj()),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn phases(&self) -> &Array2<Complex64> {
        &self.phases
    }

    fn apply_inplace(&self, buf: &mut [Complex64], conjugate: bool) {
        let n = self.n;
        fft2c_inplace(buf, n);
        let h = self.phases.as_slice().expect("standard layout");
        if conjugate {
            buf.iter_mut().zip(h).for_each(|(z, p)| *z *= p.conj());
        } else {
            buf.iter_mut().zip(h).for_each(|(z, p)| *z *= p);
        }
        ifft2c_inplace(buf, n);
    }

    pub(crate) fn propagate_inplace(&self, buf: &mut [Complex64]) {
        self.apply_inplace(buf, false);
    }

    pub(crate) fn adjoint_inplace(&self, buf: &mut [Complex64]) {
        self.apply_inplace(buf, true);
    }

    fn check<S: Data<Elem = Complex64>>(&self, e: &ArrayBase<S, Ix2>) -> Result<()> {
        if e.dim() != (self.n, self.n) {
            return Err(Error::shape(format!("field is {:?} but kernel grid is {}x{}", e.dim(), self.n, self.n)));
        }
        Ok(())
    }
}

/// `ifft2c(H * fft2c(E))`.
pub fn fresnel_propagate<S: Data<Elem = Complex64>>(e: &ArrayBase<S, Ix2>, kernel: &FresnelKernel) -> Result<Array2<Complex64>> {
    kernel.check(e)?;
    let mut out = e.as_standard_layout().into_owned();
    kernel.propagate_inplace(out.as_slice_mut().expect("standard layout"));
    Ok(out)
}

/// Adjoint (and inverse) of [`fresnel_propagate`]: propagation by `-dz`.
pub fn fresnel_adjoint<S: Data<Elem = Complex64>>(e: &ArrayBase<S, Ix2>, kernel: &FresnelKernel) -> Result<Array2<Complex64>> {
    kernel.check(e)?;
    let mut out = e.as_standard_layout().into_owned();
    kernel.adjoint_inplace(out.as_slice_mut().expect("standard layout"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn centered_delta_is_flat() {
        let n = 8;
        let mut x = Array2::zeros((n, n));
        x[[n / 2, n / 2]] = c(1.0, 0.0);
        let y = fft2c(&x).unwrap();
        for z in y.iter() {
            assert!((z - c(1.0 / n as f64, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_goes_to_center() {
        let n = 8;
        let v = c(0.5, -2.0);
        let y = fft2c(&Array2::from_elem((n, n), v)).unwrap();
        for ((i, j), z) in y.indexed_iter() {
            let want = if (i, j) == (n / 2, n / 2) { v * n as f64 } else { c(0.0, 0.0) };
            assert!((z - want).norm() < 1e-13, "{i},{j}: {z}");
        }
    }

    #[test]
    fn constant_spectrum_inverts_to_scaled_delta() {
        let n = 6;
        let y = ifft2c(&Array2::from_elem((n, n), c(1.0, 0.0))).unwrap();
        assert!((y[[n / 2, n / 2]] - c(n as f64, 0.0)).norm() < 1e-13);
        assert!(y.iter().map(|z| z.norm()).sum::<f64>() - n as f64 <= 1e-12);
    }

    #[test]
    fn rejects_odd_and_non_square() {
        assert!(fft2c(&Array2::<Complex64>::zeros((5, 5))).is_err());
        assert!(ifft2c(&Array2::<Complex64>::zeros((4, 6))).is_err());
    }

    #[test]
    fn zero_distance_is_identity() {
        let k = FresnelKernel::new(8, 0.2, 0.025, 0.0).unwrap();
        assert!(k.phases().iter().all(|&z| z == c(1.0, 0.0)));
    }

    #[test]
    fn plane_wave_is_invariant() {
        let k = FresnelKernel::new(16, 0.2, 0.025, 17.0).unwrap();
        let e = Array2::from_elem((16, 16), c(1.0, 0.0));
        let out = fresnel_propagate(&e, &k).unwrap();
        for z in out.iter() {
            assert!((z - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_pure_phase_and_reversal_conjugates() {
        let k = FresnelKernel::new(16, 0.3, 0.0251, 5.0).unwrap();
        assert!(k.phases().iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        let back = FresnelKernel::new(16, 0.3, 0.0251, -5.0).unwrap();
        for (a, b) in back.phases().iter().zip(k.reversed().phases().iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let k = FresnelKernel::new(8, 0.2, 0.025, 1.0).unwrap();
        assert!(fresnel_propagate(&Array2::<Complex64>::zeros((16, 16)), &k).is_err());
        assert!(fresnel_adjoint(&Array2::<Complex64>::zeros((16, 16)), &k).is_err());
    }
}
