//! Image quality metrics: SSIM, PSNR and relative error.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::types::ComplexVolume;

/// Gaussian SSIM window. The stabilising constants are
/// `C1 = (k1 L)^2` and `C2 = (k2 L)^2` with `L` the dynamic range of the
/// reference image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl SsimParams {
    /// Same constants with a smaller window, for images narrower than the
    /// default one.
    pub fn with_window(window: usize) -> Self {
        Self { window, ..Self::default() }
    }

    fn weights(&self) -> Result<Vec<f64>> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::param(format!("SSIM window must be odd and positive, got {}", self.window)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param("SSIM sigma must be positive"));
        }
        let h = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window).map(|i| (-((i as f64 - h).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let total: f64 = g.iter().sum();
        Ok(g.into_iter().map(|v| v / total).collect())
    }
}

/// Separable valid-mode filtering with the 1-D kernel `g`.
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let w = g.len();
    let (h, wd) = img.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, wd + 1 - w), |(i, j)| (0..w).map(|k| g[k] * img[[i, j + k]]).sum());
    Array2::from_shape_fn((h + 1 - w, wd + 1 - w), |(i, j)| (0..w).map(|k| g[k] * rows[[i + k, j]]).sum())
}

/// Mean structural similarity of `estimate` against `reference`, evaluated
/// only where the window fits entirely inside the image.
pub fn ssim(reference: ArrayView2<'_, f64>, estimate: ArrayView2<'_, f64>, params: &SsimParams) -> Result<f64> {
    if reference.dim() != estimate.dim() {
        return Err(Error::shape(format!("SSIM inputs differ: {:?} vs {:?}", reference.dim(), estimate.dim())));
    }
    let g = params.weights()?;
    let (h, w) = reference.dim();
    if h < params.window || w < params.window {
        return Err(Error::shape(format!("image {h}x{w} is smaller than the {0}x{0} SSIM window", params.window)));
    }
    if reference.iter().chain(estimate.iter()).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("SSIM input"));
    }
    let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::param("SSIM reference image is constant"));
    }
    let range = hi - lo;
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);

    let x = reference.to_owned();
    let y = estimate.to_owned();
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    let sxx = filter_valid(&(&x * &x), &g);
    let syy = filter_valid(&(&y * &y), &g);
    let sxy = filter_valid(&(&x * &y), &g);

    let mut total = 0.0;
    for idx in 0..mx.len() {
        let (i, j) = (idx / mx.ncols(), idx % mx.ncols());
        let (ux, uy) = (mx[[i, j]], my[[i, j]]);
        let vx = sxx[[i, j]] - ux * ux;
        let vy = syy[[i, j]] - uy * uy;
        let cxy = sxy[[i, j]] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Mean over slices of the SSIM of slice magnitudes.
pub fn volume_ssim(reference: &ComplexVolume, estimate: &ComplexVolume, params: &SsimParams) -> Result<f64> {
    reference.same_shape(estimate)?;
    let mut total = 0.0;
    for s in 0..reference.slices() {
        total += ssim(reference.magnitude(s).view(), estimate.magnitude(s).view(), params)?;
    }
    Ok(total / reference.slices() as f64)
}

/// `10 log10(L^2 / MSE)` in dB with `L` the range of `|ref|`; `+inf` when
/// the volumes are equal.
pub fn psnr(reference: &ComplexVolume, estimate: &ComplexVolume) -> Result<f64> {
    reference.same_shape(estimate)?;
    let (lo, hi) =
        reference.as_slice().iter().map(|z| z.norm()).fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let peak = hi - lo;
    let mse = reference.as_slice().iter().zip(estimate.as_slice()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
        / reference.as_slice().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    if !(peak > 0.0) {
        return Err(Error::param("PSNR reference is constant"));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `||estimate - reference|| / ||reference||` in the Frobenius norm.
pub fn rel_error(reference: &ComplexVolume, estimate: &ComplexVolume) -> Result<f64> {
    reference.same_shape(estimate)?;
    let denom = reference.norm_sqr().sqrt();
    if denom == 0.0 {
        return Err(Error::param("relative error against an all-zero reference"));
    }
    let num = reference.as_slice().iter().zip(estimate.as_slice()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Ok(num / denom)
}
