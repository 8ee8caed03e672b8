//! Prediction overlays: red marks over-segmentation, green marks
//! under-segmentation, yellow traces the ground-truth contour.

use std::path::Path;

use sslus_core::image::{Image, Mask};

use crate::error::Result;
use crate::png;

pub const OVER: [u8; 3] = [255, 0, 0];
pub const UNDER: [u8; 3] = [0, 255, 0];
pub const CONTOUR: [u8; 3] = [255, 255, 0];

fn on_contour(m: &Mask, y: usize, x: usize) -> bool {
    if !m.get(y, x) {
        return false;
    }
    let (h, w) = (m.height(), m.width());
    y == 0
        || x == 0
        || y + 1 == h
        || x + 1 == w
        || !m.get(y - 1, x)
        || !m.get(y + 1, x)
        || !m.get(y, x - 1)
        || !m.get(y, x + 1)
}

pub fn render_overlay(img: &Image, pred: &Mask, truth: &Mask) -> Vec<[u8; 3]> {
    let lum = img.luminance();
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let g = (lum[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            let px = match (pred.get(y, x), truth.get(y, x)) {
                _ if on_contour(truth, y, x) => CONTOUR,
                (true, false) => OVER,
                (false, true) => UNDER,
                _ => [g, g, g],
            };
            out.push(px);
        }
    }
    out
}

pub fn save_overlay(img: &Image, pred: &Mask, truth: &Mask, path: &Path) -> Result<()> {
    png::save_rgb(
        &render_overlay(img, pred, truth),
        img.height(),
        img.width(),
        path,
    )
}
