//! Shared numeric containers.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Grid sizes must be even and at least 2 so that the centered FFT index
/// convention (zero frequency at `n / 2`) is unambiguous.
pub(crate) fn check_grid(n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::param(format!("grid size must be even and >= 2, got {n}")));
    }
    Ok(())
}

/// A stack of `S` complex `N x N` slices, slice-contiguous row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    data: Array3<Complex64>,
}

impl ComplexVolume {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        let (s, h, w) = data.dim();
        if s == 0 {
            return Err(Error::shape("volume needs at least one slice"));
        }
        if h != w {
            return Err(Error::shape(format!("slices must be square, got {h}x{w}")));
        }
        check_grid(h)?;
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::non_finite("volume data"));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(Self { data })
    }

    /// Wraps a buffer whose shape is already known to be valid. Finiteness
    /// is not checked.
    pub(crate) fn from_raw(dim: (usize, usize, usize), data: Vec<Complex64>) -> Self {
        Self { data: Array3::from_shape_vec(dim, data).expect("buffer matches shape") }
    }

    pub fn zeros(slices: usize, n: usize) -> Result<Self> {
        Self::filled(slices, n, Complex64::new(0.0, 0.0))
    }

    pub fn filled(slices: usize, n: usize, value: Complex64) -> Result<Self> {
        Self::new(Array3::from_elem((slices, n, n), value))
    }

    pub fn from_slices(slices: &[Array2<Complex64>]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::shape("no slices given"))?;
        let (h, w) = first.dim();
        let mut data = Array3::zeros((slices.len(), h, w));
        for (s, img) in slices.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::shape("slices differ in size"));
            }
            data.index_axis_mut(Axis(0), s).assign(img);
        }
        Self::new(data)
    }

    pub fn slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn n(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn slice(&self, s: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), s)
    }

    pub fn slice_mut(&mut self, s: usize) -> ArrayViewMut2<'_, Complex64> {
        self.data.index_axis_mut(Axis(0), s)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    /// Mutable access to the samples. Callers that may introduce non-finite
    /// values must re-validate with [`ComplexVolume::check_finite`].
    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.data
    }

    pub fn as_slice(&self) -> &[Complex64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [Complex64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn magnitude(&self, s: usize) -> Array2<f64> {
        self.slice(s).mapv(|z| z.norm())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::non_finite(what));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ComplexVolume) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(format!("volume {:?} vs {:?}", self.dim(), other.dim())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Uniform,
    Gaussian,
    Full,
    Custom,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Uniform => "uniform",
            MaskKind::Gaussian => "gaussian",
            MaskKind::Full => "full",
            MaskKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(MaskKind::Uniform),
            "gaussian" => Some(MaskKind::Gaussian),
            "full" => Some(MaskKind::Full),
            "custom" => Some(MaskKind::Custom),
            _ => None,
        }
    }
}

/// Binary k-space sampling pattern shared by every slice of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    values: Array2<u8>,
    pub accel: f64,
    pub center_frac: f64,
    pub kind: MaskKind,
    pub seed: u64,
}

impl SamplingMask {
    pub fn new(values: Array2<u8>, accel: f64, center_frac: f64, kind: MaskKind, seed: u64) -> Result<Self> {
        let (h, w) = values.dim();
        if h != w {
            return Err(Error::shape(format!("mask must be square, got {h}x{w}")));
        }
        check_grid(h)?;
        if values.iter().any(|&v| v > 1) {
            return Err(Error::param("mask values must be 0 or 1"));
        }
        Ok(Self { values, accel, center_frac, kind, seed })
    }

    /// Arbitrary binary pattern without generator metadata.
    pub fn custom(values: Array2<u8>) -> Result<Self> {
        let ones = values.iter().filter(|&&v| v == 1).count().max(1);
        let accel = values.len() as f64 / ones as f64;
        Self::new(values, accel, 0.0, MaskKind::Custom, 0)
    }

    pub fn full(n: usize) -> Result<Self> {
        Self::new(Array2::ones((n, n)), 1.0, 1.0, MaskKind::Full, 0)
    }

    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Columns in which at least one entry is sampled.
    pub fn kept_columns(&self) -> Vec<usize> {
        (0..self.n()).filter(|&c| self.values.column(c).iter().any(|&v| v == 1)).collect()
    }

    pub fn check_volume(&self, vol: &ComplexVolume) -> Result<()> {
        if vol.n() != self.n() {
            return Err(Error::shape(format!("mask is {}x{} but slices are {}x{}", self.n(), self.n(), vol.n(), vol.n())));
        }
        Ok(())
    }
}

/// Per-slice measured spectra. Entries outside the mask are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceStack {
    spectra: ComplexVolume,
}

impl KSpaceStack {
    pub fn new(spectra: ComplexVolume, mask: &SamplingMask) -> Result<Self> {
        mask.check_volume(&spectra)?;
        for s in 0..spectra.slices() {
            let outside =
                spectra.slice(s).indexed_iter().any(|((i, j), z)| !mask.is_sampled(i, j) && *z != Complex64::new(0.0, 0.0));
            if outside {
                return Err(Error::param("k-space has nonzero entries outside the mask"));
            }
        }
        Ok(Self { spectra })
    }

    /// Builds a stack from full spectra by zeroing every unsampled entry.
    pub fn from_masked(mut spectra: ComplexVolume, mask: &SamplingMask) -> Result<Self> {
        mask.check_volume(&spectra)?;
        for s in 0..spectra.slices() {
            let mut sl = spectra.slice_mut(s);
            ndarray::Zip::from(&mut sl).and(mask.values()).for_each(|z, &m| {
                if m == 0 {
                    *z = Complex64::new(0.0, 0.0);
                }
            });
        }
        Ok(Self { spectra })
    }

    pub fn spectra(&self) -> &ComplexVolume {
        &self.spectra
    }

    pub fn into_spectra(self) -> ComplexVolume {
        self.spectra
    }

    pub fn slices(&self) -> usize {
        self.spectra.slices()
    }

    pub fn n(&self) -> usize {
        self.spectra.n()
    }
}

/// 4D-STEM intensities indexed `(scan_y, scan_x, det_y, det_x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionSet {
    data: Array4<f64>,
    /// Scan step in Angstrom.
    pub scan_step: f64,
}

impl DiffractionSet {
    pub fn new(data: Array4<f64>, scan_step: f64) -> Result<Self> {
        let (sy, sx, dy, dx) = data.dim();
        if sy == 0 || sx == 0 {
            return Err(Error::shape("scan grid must be at least 1x1"));
        }
        if dy != dx {
            return Err(Error::shape(format!("detector must be square, got {dy}x{dx}")));
        }
        check_grid(dy)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("diffraction intensities"));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::param("diffraction intensities must be non-negative"));
        }
        let data = if data.is_standard_layout() { data } else { data.as_standard_layout().into_owned() };
        Ok(Self { data, scan_step })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn scan_dims(&self) -> (usize, usize) {
        let (sy, sx, _, _) = self.data.dim();
        (sy, sx)
    }

    pub fn detector_n(&self) -> usize {
        self.data.dim().2
    }

    pub fn pattern(&self, iy: usize, ix: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), iy).index_axis_move(Axis(0), ix)
    }
}

/// Electron probe optics. Lengths in Angstrom, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeParams {
    pub wavelength: f64,
    pub semi_angle: f64,
    pub defocus: f64,
    pub pixel_size: f64,
    pub n: usize,
}

impl ProbeParams {
    pub fn validate(&self) -> Result<()> {
        check_grid(self.n)?;
        if !(self.wavelength > 0.0) || !(self.semi_angle > 0.0) || !(self.pixel_size > 0.0) {
            return Err(Error::param("wavelength, semi-angle and pixel size must be positive"));
        }
        if !self.defocus.is_finite() {
            return Err(Error::param("defocus must be finite"));
        }
        if self.cutoff() >= self.nyquist() {
            return Err(Error::param(format!(
                "aperture cutoff {:.4} 1/A is not below Nyquist {:.4} 1/A",
                self.cutoff(),
                self.nyquist()
            )));
        }
        Ok(())
    }

    /// Aperture radius in reciprocal Angstrom.
    pub fn cutoff(&self) -> f64 {
        self.semi_angle / self.wavelength
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.pixel_size
    }

    /// Aperture radius in detector pixels.
    pub fn cutoff_pixels(&self) -> f64 {
        self.cutoff() * self.n as f64 * self.pixel_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_and_tiny_grids() {
        assert!(ComplexVolume::zeros(1, 7).is_err());
        assert!(ComplexVolume::zeros(1, 0).is_err());
        assert!(ComplexVolume::zeros(0, 8).is_err());
        assert!(ComplexVolume::zeros(2, 2).is_ok());
    }

    #[test]
    fn rejects_non_finite_volume() {
        let mut a = Array3::zeros((1, 4, 4));
        a[[0, 1, 1]] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexVolume::new(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kspace_rejects_entries_outside_mask() {
        let mut m = Array2::zeros((4, 4));
        m.column_mut(1).fill(1);
        let mask = SamplingMask::custom(m).unwrap();
        let vol = ComplexVolume::filled(2, 4, Complex64::new(1.0, 0.0)).unwrap();
        assert!(KSpaceStack::new(vol.clone(), &mask).is_err());
        let ks = KSpaceStack::from_masked(vol, &mask).unwrap();
        assert_eq!(ks.spectra().as_slice().iter().filter(|z| z.re != 0.0).count(), 8);
    }

    #[test]
    fn diffraction_rejects_negative() {
        let mut d = Array4::zeros((1, 1, 4, 4));
        d[[0, 0, 0, 0]] = -1.0;
        assert!(DiffractionSet::new(d, 1.0).is_err());
    }

    #[test]
    fn probe_cutoff_must_be_below_nyquist() {
        let mut p = ProbeParams { wavelength: 0.0251, semi_angle: 0.02, defocus: 0.0, pixel_size: 0.2, n: 32 };
        assert!(p.validate().is_ok());
        p.semi_angle = 0.1;
        assert!(p.validate().is_err());
    }
}
