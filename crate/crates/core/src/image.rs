//! Three-channel float images and binary masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Smallest side accepted for dataset images.
pub const MIN_DATASET_SIDE: usize = 32;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Rect {
            top,
            left,
            height,
            width,
        }
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= height
            && self.left + self.width <= width
    }
}

/// Channel-major (CHW) image with values in `[0, 1]`.
///
/// Grayscale sources are replicated to three channels so that every encoder
/// sees RGB-shaped input.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from CHW data, rejecting non-finite or out-of-range
    /// values.
    pub fn new(id: impl Into<String>, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![CHANNELS, height, width],
                actual: vec![data.len()],
            });
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::arg(alloc::format!(
                "image value {v} is outside [0, 1]"
            )));
        }
        Ok(Image {
            id: id.into(),
            height,
            width,
            data,
        })
    }

    /// Replicates a single grayscale plane to three channels.
    pub fn from_gray(
        id: impl Into<String>,
        height: usize,
        width: usize,
        gray: &[f64],
    ) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![gray.len()],
            });
        }
        let mut data = Vec::with_capacity(CHANNELS * gray.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(gray);
        }
        Image::new(id, height, width, data)
    }

    pub fn constant(
        id: impl Into<String>,
        height: usize,
        width: usize,
        value: f64,
    ) -> Result<Self> {
        Image::new(id, height, width, vec![value; CHANNELS * height * width])
    }

    /// Unchecked constructor for internal pipelines that clip explicitly.
    pub(crate) fn from_raw(id: String, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * height * width);
        Image {
            id,
            height,
            width,
            data,
        }
    }

    /// Checks the dataset-level size invariant.
    pub fn validate_dataset_image(&self) -> Result<()> {
        if self.height < MIN_DATASET_SIDE || self.width < MIN_DATASET_SIDE {
            return Err(Error::Data(alloc::format!(
                "image `{}` is {}x{}; dataset images must be at least {MIN_DATASET_SIDE}x{MIN_DATASET_SIDE}",
                self.id, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// ITU-R BT.601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    fn map_pixels(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; self.data.len()];
        for c in 0..CHANNELS {
            let src = self.channel(c);
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = f(y, x);
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
        Image::from_raw(self.id.clone(), h, w, out)
    }

    /// Mirrors left-right.
    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        self.map_pixels(|y, x| (y, w - 1 - x))
    }

    /// Mirrors top-bottom.
    pub fn flip_vertical(&self) -> Image {
        let h = self.height;
        self.map_pixels(|y, x| (h - 1 - y, x))
    }

    pub fn rotate_180(&self) -> Image {
        let (h, w) = (self.height, self.width);
        self.map_pixels(|y, x| (h - 1 - y, w - 1 - x))
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        if !rect.fits_in(self.height, self.width) {
            return Err(Error::arg(alloc::format!(
                "crop {rect:?} does not fit in {}x{}",
                self.height,
                self.width
            )));
        }
        let mut out = Vec::with_capacity(CHANNELS * rect.height * rect.width);
        for c in 0..CHANNELS {
            let src = self.channel(c);
            for y in rect.top..rect.top + rect.height {
                let row = y * self.width;
                out.extend_from_slice(&src[row + rect.left..row + rect.left + rect.width]);
            }
        }
        Ok(Image::from_raw(
            self.id.clone(),
            rect.height,
            rect.width,
            out,
        ))
    }

    /// Writes `patch` into this image with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, top: usize, left: usize, patch: &Image) -> Result<()> {
        let rect = Rect::new(top, left, patch.height, patch.width);
        if !rect.fits_in(self.height, self.width) {
            return Err(Error::arg("pasted patch does not fit"));
        }
        let w = self.width;
        for c in 0..CHANNELS {
            let src = patch.channel(c);
            let dst = self.channel_mut(c);
            for y in 0..patch.height {
                let d = (top + y) * w + left;
                dst[d..d + patch.width]
                    .copy_from_slice(&src[y * patch.width..(y + 1) * patch.width]);
            }
        }
        Ok(())
    }

    /// Bilinear resize with half-pixel centers; output clipped to `[0, 1]`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::arg("resize target must be positive"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            out.extend(resize_plane_bilinear(
                self.channel(c),
                self.height,
                self.width,
                height,
                width,
            ));
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image::from_raw(self.id.clone(), height, width, out))
    }
}

/// Source coordinate and interpolation weight for one output index.
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (libm::floor(pos) as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

pub fn resize_plane_bilinear(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let cols: Vec<_> = (0..dst_w).map(|x| bilinear_taps(x, src_w, dst_w)).collect();
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let (y0, y1, ty) = bilinear_taps(y, src_h, dst_h);
        let r0 = &src[y0 * src_w..(y0 + 1) * src_w];
        let r1 = &src[y1 * src_w..(y1 + 1) * src_w];
        for &(x0, x1, tx) in &cols {
            let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

/// Binary segmentation mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    id: String,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(id: impl Into<String>, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask values must be 0 or 1"));
        }
        Ok(Mask {
            id: id.into(),
            height,
            width,
            data,
        })
    }

    pub fn empty(id: impl Into<String>, height: usize, width: usize) -> Self {
        Mask {
            id: id.into(),
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Thresholds 8-bit intensities: values above 127 become foreground.
    pub fn from_u8_threshold(
        id: impl Into<String>,
        height: usize,
        width: usize,
        raw: &[u8],
    ) -> Result<Self> {
        Mask::new(
            id,
            height,
            width,
            raw.iter().map(|&v| u8::from(v > 127)).collect(),
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Foreground pixel coordinates as `(row, col)`.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    /// Nearest-neighbour resize (keeps the mask binary).
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * self.height) / height).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * self.width) / width).min(self.width - 1);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Mask {
            id: self.id.clone(),
            height,
            width,
            data,
        }
    }
}
