use std::f64::consts::PI;

use rand::Rng;
use sslus_core::frequency::*;
use sslus_core::image::{Image, Rect};
use sslus_core::rng;

fn plane(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[7]);
    (0..h * w).map(|_| r.random::<f64>()).collect()
}

/// Direct O(N^2) DFT, shifted so frequency 0 lands at (h/2, w/2).
fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    sr += x[y * w + xx] * a.cos();
                    si += x[y * w + xx] * a.sin();
                }
            }
            let (su, sv) = ((u + h / 2) % h, (v + w / 2) % w);
            re[su * w + sv] = sr;
            im[su * w + sv] = si;
        }
    }
    (re, im)
}

#[test]
fn matches_direct_sum_including_odd_sizes() {
    for (h, w) in [(4, 4), (5, 7), (6, 9), (12, 10)] {
        let x = plane(h, w, (h * w) as u64);
        let s = forward_dft(&x, h, w).unwrap();
        let (re, im) = naive_dft(&x, h, w);
        for i in 0..h * w {
            assert!((s.real[i] - re[i]).abs() < 1e-9, "{h}x{w} re[{i}]");
            assert!((s.imag[i] - im[i]).abs() < 1e-9, "{h}x{w} im[{i}]");
        }
    }
}

#[test]
fn constant_image_has_only_dc() {
    let c = 0.37;
    let s = forward_dft(&[c; 16], 4, 4).unwrap();
    let (amp, _) = amplitude_phase(&s);
    assert_eq!(s.center(), (2, 2));
    for (i, a) in amp.iter().enumerate() {
        if i == 2 * 4 + 2 {
            assert!((a - 16.0 * c).abs() < 1e-12);
        } else {
            assert!(a.abs() < 1e-12);
        }
    }
    let z = forward_dft(&[0.0; 36], 6, 6).unwrap();
    assert!(z.real.iter().chain(&z.imag).all(|&v| v == 0.0));
}

#[test]
fn parseval_and_roundtrip() {
    let x = plane(16, 16, 3);
    let s = forward_dft(&x, 16, 16).unwrap();
    let lhs: f64 = x.iter().map(|v| v * v).sum();
    let rhs = s.energy() / 256.0;
    assert!((lhs - rhs).abs() / lhs < 1e-6);
    let (back, imag) = inverse_dft(&s);
    for (a, b) in back.iter().zip(&x) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(imag.iter().all(|v| v.abs() < 1e-12));
    assert!(forward_dft(&[1.0, f64::NAN, 0.0, 0.0], 2, 2).is_err());
}

#[test]
fn amplitude_and_phase_of_single_bins() {
    let s = ComplexSpectrum {
        height: 2,
        width: 2,
        real: vec![3.0, 2.0, 0.0, 0.0],
        imag: vec![4.0, 0.0, 0.0, 0.0],
    };
    let (amp, phase) = amplitude_phase(&s);
    assert!((amp[0] - 5.0).abs() < 1e-15);
    assert!((phase[0] - (4.0f64 / 3.0).atan()).abs() < 1e-15);
    assert_eq!(phase[1], 0.0);
}

#[test]
fn sampled_specs_respect_bounds() {
    let mut r = rng::stream(11, &[]);
    for _ in 0..10_000 {
        let s = sample_filter_spec(&mut r);
        assert!(10.0 <= s.band_inner_radius && s.band_inner_radius <= s.band_outer_radius);
        assert!(s.band_outer_radius <= 100.0);
        if s.band_outer_radius <= 20.0 {
            assert_eq!(s.x_thickness, 0.0);
            assert!(!s.x_enabled);
        }
        s.validate().unwrap();
    }
}

#[test]
fn figure_two_filters_are_representable() {
    let f1 = FrequencyFilterSpec::new(20.0, 30.0, 2.0).unwrap();
    assert_eq!(
        (f1.band_inner_radius, f1.band_outer_radius, f1.x_thickness),
        (20.0, 30.0, 2.0)
    );
    assert!(f1.x_enabled);
    FrequencyFilterSpec::new(12.0, 50.0, 8.0).unwrap();
    assert!(FrequencyFilterSpec::new(9.0, 30.0, 0.0).is_err());
    assert!(FrequencyFilterSpec::new(30.0, 20.0, 0.0).is_err());
    assert!(FrequencyFilterSpec::new(12.0, 18.0, 2.0).is_err());
}

fn ring_count(h: usize, w: usize, inner: f64, outer: f64) -> usize {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if r >= inner && r <= outer && r >= 10.0 {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn thin_ring_and_annulus_counts() {
    let spec = FrequencyFilterSpec::new(10.0, 10.0, 0.0).unwrap();
    let m = build_filter_mask(&spec, (64, 64));
    for y in 0..64 {
        for x in 0..64 {
            let r = (((y as f64) - 32.0).powi(2) + ((x as f64) - 32.0).powi(2)).sqrt();
            assert_eq!(m.get(y, x) == 0.0, r == 10.0, "({y}, {x})");
        }
    }
    assert_eq!(m.zero_count(), ring_count(64, 64, 10.0, 10.0));

    let spec = FrequencyFilterSpec::new(14.5, 27.25, 0.0).unwrap();
    let m = build_filter_mask(&spec, (70, 64));
    assert_eq!(m.zero_count(), ring_count(70, 64, 14.5, 27.25));
}

#[test]
fn masks_are_symmetric_with_dc_kept() {
    let mut r = rng::stream(2, &[]);
    for _ in 0..200 {
        let s = sample_filter_spec(&mut r);
        let side = 2 * r.random_range(20..110);
        let m = build_filter_mask(&s, (side, side));
        assert_eq!(m.get(side / 2, side / 2), 1.0);
        assert!(m.is_point_symmetric());
    }
}

#[test]
fn x_filter_cuts_diagonals_beyond_the_band() {
    let spec = FrequencyFilterSpec::new(20.0, 30.0, 2.0).unwrap();
    let m = build_filter_mask(&spec, (128, 128));
    assert_eq!(m.get(64 + 40, 64 + 40), 0.0);
    assert_eq!(m.get(64 - 40, 64 + 40), 0.0);
    assert_eq!(m.get(64, 64 + 40), 1.0);
    // inside the preserved disk and inside the band stay as the ring says
    assert_eq!(m.get(64 + 5, 64 + 5), 1.0);
    let off = FrequencyFilterSpec::new(20.0, 30.0, 0.0).unwrap();
    assert_eq!(
        build_filter_mask(&off, (128, 128)).get(64 + 40, 64 + 40),
        1.0
    );
}

fn textured(h: usize, w: usize) -> Image {
    let g: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.2 * (0.9 * x).sin() * (0.4 * y).cos() + 0.1 * (2.1 * x + 1.3 * y).sin()
        })
        .collect();
    Image::from_gray("t", h, w, &g).unwrap()
}

#[test]
fn filter_leaves_outside_and_constant_crops_alone() {
    let img = textured(80, 90);
    let rect = Rect::new(5, 7, 64, 70);
    let spec = FrequencyFilterSpec::new(12.0, 50.0, 8.0).unwrap();
    let out = apply_frequency_filter(&img, &spec, rect).unwrap();
    for c in 0..3 {
        for y in 0..80 {
            for x in 0..90 {
                let inside = (5..69).contains(&y) && (7..77).contains(&x);
                if !inside {
                    assert_eq!(out.get(c, y, x), img.get(c, y, x));
                }
            }
        }
    }
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let flat = Image::constant("c", 64, 64, 0.42).unwrap();
    let out = apply_frequency_filter(&flat, &spec, Rect::new(0, 0, 64, 64)).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-6));

    // a band beyond every frequency present in a 16x16 crop removes nothing
    let small = textured(16, 16);
    let empty = FrequencyFilterSpec::new(90.0, 100.0, 0.0).unwrap();
    let same = apply_frequency_filter(&small, &empty, Rect::new(0, 0, 16, 16)).unwrap();
    for (a, b) in same.data().iter().zip(small.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(apply_frequency_filter(&img, &spec, Rect::new(20, 20, 70, 70)).is_err());
}

#[test]
fn wider_band_retains_less_energy() {
    let img = textured(128, 128);
    let lum = img.luminance();
    let f1 = build_filter_mask(
        &FrequencyFilterSpec::new(20.0, 30.0, 2.0).unwrap(),
        (128, 128),
    );
    let f3 = build_filter_mask(
        &FrequencyFilterSpec::new(12.0, 50.0, 8.0).unwrap(),
        (128, 128),
    );
    let all = build_filter_mask(
        &FrequencyFilterSpec::new(90.0, 100.0, 0.0).unwrap(),
        (128, 128),
    );
    let e0 = retained_energy(&lum, 128, 128, &all).unwrap();
    let e1 = retained_energy(&lum, 128, 128, &f1).unwrap();
    let e3 = retained_energy(&lum, 128, 128, &f3).unwrap();
    assert!(e0 >= e1 && e1 >= e3, "{e0} {e1} {e3}");
}

#[test]
fn crop_rect_covers_half_to_all() {
    let mut r = rng::stream(4, &[]);
    for _ in 0..1000 {
        let rect = random_crop_rect(&mut r, 97, 60);
        assert!(rect.fits_in(97, 60));
        assert!(rect.height >= 49 && rect.width >= 30);
    }
}
