//! Flips and color jitter: image-level transform `t1` and the per-patch
//! jitter of `t2`.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub flip_prob: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.4,
            flip_prob: 0.5,
        }
    }
}

impl JitterSpec {
    /// No flips, no jitter.
    pub fn identity() -> Self {
        JitterSpec {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let factors = [self.brightness, self.contrast, self.saturation, self.hue];
        if factors.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::arg("jitter factors must be >= 0"));
        }
        if self.hue > 0.5 {
            return Err(Error::arg("hue jitter must be <= 0.5"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::arg("flip probability must be in [0, 1]"));
        }
        Ok(())
    }

    /// Draws concrete jitter factors. Multipliers are uniform in
    /// `[1 - f, 1 + f]`; the hue shift is uniform in `[-hue, hue]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JitterParams {
        let mult = |rng: &mut R, f: f64| {
            if f == 0.0 {
                1.0
            } else {
                rng::uniform(rng, (1.0 - f).max(0.0), 1.0 + f)
            }
        };
        let brightness = mult(rng, self.brightness);
        let contrast = mult(rng, self.contrast);
        let saturation = mult(rng, self.saturation);
        let hue = if self.hue == 0.0 {
            0.0
        } else {
            rng::uniform(rng, -self.hue, self.hue)
        };
        JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

/// Concrete jitter factors applied in the fixed order
/// brightness, contrast, saturation, hue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

pub fn apply_jitter(img: &Image, p: &JitterParams) -> Image {
    let mut out = img.clone();
    if p.brightness != 1.0 {
        for v in out.data_mut() {
            *v = (*v * p.brightness).clamp(0.0, 1.0);
        }
    }
    if p.contrast != 1.0 {
        let lum = out.luminance();
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        for v in out.data_mut() {
            *v = (mean + p.contrast * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if p.saturation != 1.0 || p.hue != 0.0 {
        let n = out.height() * out.width();
        let data = out.data_mut();
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
            let s = (s * p.saturation).clamp(0.0, 1.0);
            let h = wrap_unit(h + p.hue);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            data[i] = r.clamp(0.0, 1.0);
            data[n + i] = g.clamp(0.0, 1.0);
            data[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
    out
}

fn wrap_unit(x: f64) -> f64 {
    x - libm::floor(x)
}

/// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        {
            let t = (g - b) / delta;
            t - 6.0 * libm::floor(t / 6.0)
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = wrap_unit(h) * 6.0;
    let sector = libm::floor(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Transform `t1`: independent horizontal and vertical flips, then jitter.
pub fn apply_t1<R: Rng + ?Sized>(img: &Image, spec: &JitterSpec, rng: &mut R) -> Image {
    let flip_h = rng::bernoulli(rng, spec.flip_prob);
    let flip_v = rng::bernoulli(rng, spec.flip_prob);
    let params = spec.sample(rng);
    apply_t1_with(img, flip_h, flip_v, &params)
}

/// `t1` with every random choice fixed by the caller.
pub fn apply_t1_with(img: &Image, flip_h: bool, flip_v: bool, params: &JitterParams) -> Image {
    let mut out = if flip_h {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if flip_v {
        out = out.flip_vertical();
    }
    apply_jitter(&out, params)
}

/// Per-patch jitter of `t2`: one independent draw per patch, order kept.
pub fn apply_t2_patch_jitter<R: Rng + ?Sized>(
    patches: &[Image],
    spec: &JitterSpec,
    rng: &mut R,
) -> Result<Vec<Image>> {
    if patches.is_empty() {
        return Err(Error::arg("patch list is empty"));
    }
    Ok(patches
        .iter()
        .map(|p| {
            let params = spec.sample(rng);
            apply_jitter(p, &params)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn colorful(h: usize, w: usize) -> Image {
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            data[i] = (i % 7) as f64 / 7.0;
            data[n + i] = (i % 5) as f64 / 5.0;
            data[2 * n + i] = (i % 3) as f64 / 3.0;
        }
        Image::new("c", h, w, data).unwrap()
    }

    #[test]
    fn identity_spec_leaves_image_unchanged() {
        let img = colorful(9, 11);
        let mut rng = rng::stream(1, &[]);
        assert_eq!(apply_t1(&img, &JitterSpec::identity(), &mut rng), img);
    }

    #[test]
    fn forced_flips_equal_rotation() {
        let img = colorful(6, 8);
        assert_eq!(
            apply_t1_with(&img, true, true, &JitterParams::IDENTITY),
            img.rotate_180()
        );
    }

    #[test]
    fn brightness_multiplier_clips() {
        let img = Image::constant("c", 4, 4, 0.5).unwrap();
        let p = JitterParams {
            brightness: 1.4,
            ..JitterParams::IDENTITY
        };
        let out = apply_jitter(&img, &p);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let bright = Image::constant("c", 4, 4, 0.9).unwrap();
        assert!(apply_jitter(&bright, &p).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saturation_and_hue_are_noops_on_gray() {
        let img =
            Image::from_gray("g", 3, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let p = JitterParams {
            saturation: 1.4,
            hue: 0.3,
            ..JitterParams::IDENTITY
        };
        let out = apply_jitter(&img, &p);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[
            (0.2, 0.5, 0.9),
            (0.9, 0.1, 0.3),
            (0.4, 0.4, 0.1),
            (0.0, 0.0, 0.0),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_jitter_preserves_count_and_replays() {
        let patches: Vec<Image> = (0..36).map(|_| colorful(8, 8)).collect();
        let spec = JitterSpec::default();
        let a = apply_t2_patch_jitter(&patches, &spec, &mut rng::stream(3, &[])).unwrap();
        let b = apply_t2_patch_jitter(&patches, &spec, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.height() == 8 && p.width() == 8));
        let same =
            apply_t2_patch_jitter(&patches, &JitterSpec::identity(), &mut rng::stream(3, &[]))
                .unwrap();
        assert_eq!(same, patches);
        assert!(apply_t2_patch_jitter(&[], &spec, &mut rng::stream(3, &[])).is_err());
    }
}
