//! Frequency-domain augmentation: a randomized circular band-stop filter
//! plus an X-shaped diagonal stop band, applied to a random crop.
//!
//! Radii are measured in pixels of the center-shifted spectrum regardless
//! of crop size. The DC term sits at `(h / 2, w / 2)`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{self, Complex, Direction};
use crate::image::{Image, Rect, CHANNELS};
use crate::rng;

/// Radius of the low-frequency disc that is never filtered.
pub const PRESERVED_RADIUS: f64 = 10.0;
pub const MAX_BAND_RADIUS: f64 = 100.0;
/// The X filter is only drawn when the band's outer radius exceeds this.
pub const X_FILTER_MIN_OUTER: f64 = 20.0;
pub const MAX_X_THICKNESS: f64 = 10.0;
/// Largest tolerated imaginary residual after the inverse transform.
pub const IMAG_TOLERANCE: f64 = 1e-6;
/// Crop sides are drawn as this fraction range of each image dimension.
pub const CROP_FRACTION: (f64, f64) = (0.5, 1.0);

/// Center-shifted spectrum of one real plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub height: usize,
    pub width: usize,
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl ComplexSpectrum {
    fn from_complex(h: usize, w: usize, data: &[Complex]) -> Self {
        ComplexSpectrum {
            height: h,
            width: w,
            real: data.iter().map(|c| c.re).collect(),
            imag: data.iter().map(|c| c.im).collect(),
        }
    }

    fn to_complex(&self) -> Vec<Complex> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(&re, &im)| Complex::new(re, im))
            .collect()
    }

    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    /// Largest deviation from `F(c + d) = conj(F(c - d))`, relative to the
    /// largest magnitude. Zero for spectra of real planes.
    pub fn hermitian_error(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let (cy, cx) = self.center();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for y in 0..h {
            let my = (2 * cy + h - y) % h;
            for x in 0..w {
                let mx = (2 * cx + w - x) % w;
                let (a, b) = (y * w + x, my * w + mx);
                let dr = self.real[a] - self.real[b];
                let di = self.imag[a] + self.imag[b];
                worst = worst.max(libm::sqrt(dr * dr + di * di));
                scale = scale.max(libm::sqrt(
                    self.real[a] * self.real[a] + self.imag[a] * self.imag[a],
                ));
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// `ln(1 + |F|)`, the usual display scaling.
    pub fn log_amplitude(&self) -> Vec<f64> {
        amplitude_phase(self)
            .0
            .iter()
            .map(|a| libm::log1p(*a))
            .collect()
    }
}

/// Forward 2-D DFT of a row-major plane, center-shifted.
pub fn forward_dft(plane: &[f64], h: usize, w: usize) -> Result<ComplexSpectrum> {
    if h < 2 || w < 2 {
        return Err(Error::arg("DFT needs at least a 2x2 plane"));
    }
    if plane.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: alloc::vec![h, w],
            actual: alloc::vec![plane.len()],
        });
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("DFT input contains non-finite values"));
    }
    let mut data: Vec<Complex> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft::dft2d(&mut data, h, w, Direction::Forward);
    Ok(ComplexSpectrum::from_complex(
        h,
        w,
        &fft::fftshift(&data, h, w),
    ))
}

/// Inverse of [`forward_dft`], returning `(real, imag)` planes.
pub fn inverse_dft(spec: &ComplexSpectrum) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (spec.height, spec.width);
    let mut data = fft::ifftshift(&spec.to_complex(), h, w);
    fft::dft2d(&mut data, h, w, Direction::Inverse);
    let norm = 1.0 / (h * w) as f64;
    (
        data.iter().map(|c| c.re * norm).collect(),
        data.iter().map(|c| c.im * norm).collect(),
    )
}

/// Amplitude `sqrt(re^2 + im^2)` and phase `atan2(im, re)` in `(-pi, pi]`.
pub fn amplitude_phase(spec: &ComplexSpectrum) -> (Vec<f64>, Vec<f64>) {
    spec.real
        .iter()
        .zip(&spec.imag)
        .map(|(&re, &im)| {
            let mut phase = libm::atan2(im, re);
            if phase <= -core::f64::consts::PI {
                phase = core::f64::consts::PI;
            }
            (libm::hypot(re, im), phase)
        })
        .unzip()
}

/// Band-stop parameters, radii in spectrum pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFilterSpec {
    pub band_inner_radius: f64,
    pub band_outer_radius: f64,
    pub x_thickness: f64,
    pub x_enabled: bool,
}

impl FrequencyFilterSpec {
    pub fn new(inner: f64, outer: f64, x_thickness: f64) -> Result<Self> {
        let spec = FrequencyFilterSpec {
            band_inner_radius: inner,
            band_outer_radius: outer,
            x_thickness,
            x_enabled: x_thickness > 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (inner, outer) = (self.band_inner_radius, self.band_outer_radius);
        if !(inner >= PRESERVED_RADIUS && outer <= MAX_BAND_RADIUS && inner <= outer) {
            return Err(Error::arg(format!(
                "band radii must satisfy {PRESERVED_RADIUS} <= inner <= outer <= {MAX_BAND_RADIUS}, got {inner}..{outer}"
            )));
        }
        if !(0.0..=MAX_X_THICKNESS).contains(&self.x_thickness) {
            return Err(Error::arg(format!(
                "X-filter thickness must be in [0, {MAX_X_THICKNESS}], got {}",
                self.x_thickness
            )));
        }
        if self.x_enabled && outer <= X_FILTER_MIN_OUTER {
            return Err(Error::arg(format!(
                "X filter requires an outer radius above {X_FILTER_MIN_OUTER}"
            )));
        }
        Ok(())
    }
}

/// Draws two radii uniformly in `[10, 100]` as the band edges; the X filter
/// is enabled exactly when the outer radius exceeds 20.
pub fn sample_filter_spec<R: Rng + ?Sized>(rng: &mut R) -> FrequencyFilterSpec {
    let a = rng::uniform(rng, PRESERVED_RADIUS, MAX_BAND_RADIUS);
    let b = rng::uniform(rng, PRESERVED_RADIUS, MAX_BAND_RADIUS);
    let (inner, outer) = if a <= b { (a, b) } else { (b, a) };
    let thickness = rng::uniform(rng, 0.0, MAX_X_THICKNESS);
    let x_enabled = outer > X_FILTER_MIN_OUTER;
    FrequencyFilterSpec {
        band_inner_radius: inner,
        band_outer_radius: outer,
        x_thickness: if x_enabled { thickness } else { 0.0 },
        x_enabled,
    }
}

/// Binary multiplicative mask over a center-shifted spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FilterMask {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0.0).count()
    }

    /// True when the mask is unchanged by a 180-degree rotation about the
    /// spectrum center (indices taken modulo the shape).
    pub fn is_point_symmetric(&self) -> bool {
        let (h, w) = (self.height, self.width);
        let (cy, cx) = (h / 2, w / 2);
        (0..h).all(|y| {
            (0..w).all(|x| self.get(y, x) == self.get((2 * cy + h - y) % h, (2 * cx + w - x) % w))
        })
    }
}

/// Mask = 1 except inside the annulus `inner <= r <= outer` and, when the X
/// filter is on, within `x_thickness / 2` of either diagonal for `r > outer`.
pub fn build_filter_mask(spec: &FrequencyFilterSpec, shape: (usize, usize)) -> FilterMask {
    let (h, w) = shape;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let half = spec.x_thickness / 2.0;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let r = libm::sqrt(dy * dy + dx * dx);
            let mut keep = !(r >= spec.band_inner_radius && r <= spec.band_outer_radius);
            if keep && spec.x_enabled && r > spec.band_outer_radius {
                let to_diag =
                    libm::fabs(dy - dx).min(libm::fabs(dy + dx)) / core::f64::consts::SQRT_2;
                if to_diag < half {
                    keep = false;
                }
            }
            if r < PRESERVED_RADIUS {
                keep = true;
            }
            values.push(if keep { 1.0 } else { 0.0 });
        }
    }
    FilterMask {
        height: h,
        width: w,
        values,
    }
}

/// Multiplies the plane's spectrum by `mask` and returns the real part of
/// the inverse transform. Fails if the imaginary residual exceeds
/// [`IMAG_TOLERANCE`].
pub fn filter_plane(plane: &[f64], h: usize, w: usize, mask: &FilterMask) -> Result<Vec<f64>> {
    if mask.height != h || mask.width != w {
        return Err(Error::ShapeMismatch {
            expected: alloc::vec![h, w],
            actual: alloc::vec![mask.height, mask.width],
        });
    }
    let mut spec = forward_dft(plane, h, w)?;
    for ((re, im), m) in spec
        .real
        .iter_mut()
        .zip(spec.imag.iter_mut())
        .zip(&mask.values)
    {
        *re *= m;
        *im *= m;
    }
    let (real, imag) = inverse_dft(&spec);
    let residual = imag.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if residual >= IMAG_TOLERANCE {
        return Err(Error::Numerical(format!(
            "imaginary residual {residual:e} after band-stop filtering"
        )));
    }
    Ok(real)
}

/// Filters every channel of `img` inside `crop`; pixels outside the crop
/// are untouched. The written-back values are clipped to `[0, 1]`.
pub fn apply_frequency_filter(
    img: &Image,
    spec: &FrequencyFilterSpec,
    crop: Rect,
) -> Result<Image> {
    if !crop.fits_in(img.height(), img.width()) {
        return Err(Error::arg(format!(
            "crop {crop:?} is outside the {}x{} image",
            img.height(),
            img.width()
        )));
    }
    if crop.height < 2 || crop.width < 2 {
        return Err(Error::arg("frequency crop must be at least 2x2"));
    }
    let mask = build_filter_mask(spec, (crop.height, crop.width));
    let region = img.crop(crop)?;
    let mut filtered = region.clone();
    let mut cached: Option<(Vec<f64>, Vec<f64>)> = None;
    for c in 0..CHANNELS {
        let plane = region.channel(c);
        // replicated-gray channels share one transform
        let out = match &cached {
            Some((src, out)) if src.as_slice() == plane => out.clone(),
            _ => {
                let out = filter_plane(plane, crop.height, crop.width, &mask)?;
                cached = Some((plane.to_vec(), out.clone()));
                out
            }
        };
        for (dst, v) in filtered.channel_mut(c).iter_mut().zip(out) {
            *dst = v.clamp(0.0, 1.0);
        }
    }
    let mut out = img.clone();
    out.paste(crop.top, crop.left, &filtered)?;
    Ok(out)
}

/// Random crop whose sides cover 50-100% of each image dimension.
pub fn random_crop_rect<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Rect {
    let side = |rng: &mut R, n: usize| {
        let lo = libm::ceil(CROP_FRACTION.0 * n as f64) as usize;
        rng.random_range(lo.max(1)..=n)
    };
    let ch = side(rng, height);
    let cw = side(rng, width);
    let top = rng.random_range(0..=height - ch);
    let left = rng.random_range(0..=width - cw);
    Rect::new(top, left, ch, cw)
}

/// Spectral energy kept by a mask: `sum (mask * |F|)^2`.
pub fn retained_energy(plane: &[f64], h: usize, w: usize, mask: &FilterMask) -> Result<f64> {
    let spec = forward_dft(plane, h, w)?;
    Ok(spec
        .real
        .iter()
        .zip(&spec.imag)
        .zip(&mask.values)
        .map(|((r, i), m)| m * m * (r * r + i * i))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn random_plane(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, &[]);
        (0..h * w).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn constant_plane_has_single_dc_coefficient() {
        let c = 0.7;
        let spec = forward_dft(&[c; 16], 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (re, im) = (spec.real[y * 4 + x], spec.imag[y * 4 + x]);
                if (y, x) == (2, 2) {
                    assert!((re - 16.0 * c).abs() < 1e-12 && im.abs() < 1e-12);
                } else {
                    assert!(re.abs() < 1e-12 && im.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_plane_zero_spectrum() {
        let spec = forward_dft(&[0.0; 30], 5, 6).unwrap();
        assert!(spec.real.iter().chain(&spec.imag).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(forward_dft(&[0.0, f64::NAN, 0.0, 0.0], 2, 2).is_err());
        assert!(forward_dft(&[0.0; 3], 1, 3).is_err());
    }

    #[test]
    fn amplitude_and_phase_of_three_four() {
        let spec = ComplexSpectrum {
            height: 1,
            width: 3,
            real: vec![3.0, 2.0, -3.0],
            imag: vec![4.0, 0.0, -4.0],
        };
        let (amp, phase) = amplitude_phase(&spec);
        assert_eq!(amp[0], 5.0);
        assert!((phase[0] - libm::atan(4.0 / 3.0)).abs() < 1e-15);
        assert_eq!(phase[1], 0.0);
        assert_eq!(amp[2], amp[0]);
        let neg_pi = ComplexSpectrum {
            height: 1,
            width: 1,
            real: vec![-1.0],
            imag: vec![-0.0],
        };
        assert_eq!(amplitude_phase(&neg_pi).1[0], core::f64::consts::PI);
    }

    #[test]
    fn sampled_specs_respect_bounds() {
        let mut rng = rng::stream(5, &[]);
        for _ in 0..10_000 {
            let s = sample_filter_spec(&mut rng);
            s.validate().unwrap();
            assert!(s.band_inner_radius >= 10.0 && s.band_outer_radius <= 100.0);
            assert_eq!(s.x_enabled, s.band_outer_radius > 20.0);
            if s.band_outer_radius <= 20.0 {
                assert_eq!(s.x_thickness, 0.0);
            }
        }
    }

    #[test]
    fn figure_filter_one_is_representable() {
        let s = FrequencyFilterSpec::new(20.0, 30.0, 2.0).unwrap();
        assert!(s.x_enabled);
        assert!(FrequencyFilterSpec::new(12.0, 18.0, 2.0).is_err());
        assert!(FrequencyFilterSpec::new(5.0, 18.0, 0.0).is_err());
    }

    #[test]
    fn thin_ring_mask_matches_enumeration() {
        let spec = FrequencyFilterSpec::new(10.0, 10.0, 0.0).unwrap();
        let mask = build_filter_mask(&spec, (64, 64));
        // integer points at distance exactly 10: (0,±10),(±10,0),(±6,±8),(±8,±6)
        assert_eq!(mask.zero_count(), 12);
        for y in 0..64 {
            for x in 0..64 {
                let d2 = (y as i64 - 32).pow(2) + (x as i64 - 32).pow(2);
                assert_eq!(mask.get(y, x) == 0.0, d2 == 100);
            }
        }
    }

    #[test]
    fn annulus_zero_count_matches_brute_force() {
        let spec = FrequencyFilterSpec::new(12.5, 27.25, 0.0).unwrap();
        let mask = build_filter_mask(&spec, (70, 81));
        let mut count = 0;
        for y in 0..70i64 {
            for x in 0..81i64 {
                let d = (((y - 35).pow(2) + (x - 40).pow(2)) as f64).sqrt();
                if (12.5..=27.25).contains(&d) {
                    count += 1;
                }
            }
        }
        assert_eq!(mask.zero_count(), count);
    }

    #[test]
    fn masks_are_symmetric_with_open_center() {
        let mut rng = rng::stream(8, &[]);
        for shape in [(64, 64), (33, 47), (48, 96), (7, 9)] {
            for _ in 0..50 {
                let s = sample_filter_spec(&mut rng);
                let m = build_filter_mask(&s, shape);
                assert_eq!(m.get(shape.0 / 2, shape.1 / 2), 1.0);
                assert!(m.is_point_symmetric(), "{s:?} {shape:?}");
            }
        }
    }

    #[test]
    fn identity_and_dc_only_filters() {
        let mut rng = rng::stream(2, &[]);
        let gray = random_plane(40, 40, 3);
        let img = Image::from_gray("t", 40, 40, &gray).unwrap();
        // no integer lattice point lies at distance 10.5 from the center
        let empty = FrequencyFilterSpec::new(10.5, 10.5, 0.0).unwrap();
        let crop = random_crop_rect(&mut rng, 40, 40);
        let out = apply_frequency_filter(&img, &empty, crop).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = Image::constant("f", 40, 40, 0.3).unwrap();
        let spec = FrequencyFilterSpec::new(10.0, 60.0, 6.0).unwrap();
        let out = apply_frequency_filter(&flat, &spec, Rect::new(0, 0, 40, 40)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn outside_crop_untouched_and_bounds_checked() {
        let gray = random_plane(32, 32, 4);
        let img = Image::from_gray("t", 32, 32, &gray).unwrap();
        let spec = FrequencyFilterSpec::new(10.0, 14.0, 0.0).unwrap();
        let crop = Rect::new(4, 6, 24, 20);
        let out = apply_frequency_filter(&img, &spec, crop).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (4..28).contains(&y) && (6..26).contains(&x);
                if !inside {
                    assert_eq!(out.get(0, y, x), img.get(0, y, x));
                }
            }
        }
        assert!(apply_frequency_filter(&img, &spec, Rect::new(20, 20, 20, 20)).is_err());
    }

    #[test]
    fn filtering_is_idempotent_on_planes() {
        let plane = random_plane(30, 26, 9);
        let spec = FrequencyFilterSpec::new(10.0, 22.0, 4.0).unwrap();
        let mask = build_filter_mask(&spec, (30, 26));
        let once = filter_plane(&plane, 30, 26, &mask).unwrap();
        let twice = filter_plane(&once, 30, 26, &mask).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn random_crops_cover_half_or_more() {
        let mut rng = rng::stream(1, &[]);
        for _ in 0..1000 {
            let r = random_crop_rect(&mut rng, 96, 71);
            assert!(r.fits_in(96, 71));
            assert!(r.height >= 48 && r.width >= 36);
        }
    }
}
