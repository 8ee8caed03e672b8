//! 8-bit PNG input and output.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use sslus_core::image::{Image, Mask, CHANNELS};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Grayscale files are replicated to three channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let img = if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        let mut data = vec![0.0; CHANNELS * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
            }
        }
        Image::new(stem(path), h, w, data)?
    } else {
        let gray = dynimg.to_luma8();
        let plane: Vec<f64> = gray.pixels().map(|p| f64::from(p[0]) / 255.0).collect();
        Image::from_gray(stem(path), h, w, &plane)?
    };
    img.validate_dataset_image()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img)
}

/// Binarized at 127.
pub fn load_mask(path: &Path, id: &str) -> Result<Mask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Mask::from_u8_threshold(id, h, w, gray.as_raw())?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P, C>(buf: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(img.get(0, y, x)),
            to_u8(img.get(1, y, x)),
            to_u8(img.get(2, y, x)),
        ])
    });
    save(&buf, path)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    save(&buf, path)
}

/// Writes a plane min-max scaled to the full 8-bit range.
pub fn save_plane_scaled(plane: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8((plane[y as usize * w + x as usize] - lo) / span)])
    });
    save(&buf, path)
}

pub fn save_rgb(data: &[[u8; 3]], h: usize, w: usize, path: &Path) -> Result<()> {
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(data[y as usize * w + x as usize])
    });
    save(&buf, path)
}
