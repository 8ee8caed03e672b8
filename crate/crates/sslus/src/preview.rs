//! Augmentation previews: filtered crops with their spectra, and the
//! three-step Cross-patch sequence.

use std::path::{Path, PathBuf};

use sslus_core::frequency::{
    apply_frequency_filter, build_filter_mask, forward_dft, random_crop_rect, sample_filter_spec,
    FrequencyFilterSpec,
};
use sslus_core::image::Image;
use sslus_core::jigsaw::{
    partition_grid, prepare_crop, select_focal_sets, transform_crosspatch, FocalMode,
    DEFAULT_CROP_SIDE,
};
use sslus_core::photometric::{apply_t2_patch_jitter, JitterSpec};
use sslus_core::rng::{self, domain};

use crate::error::{Error, Result};
use crate::png;

/// Parses `inner=20,outer=30,x=2`.
pub fn parse_filter(s: &str) -> Result<FrequencyFilterSpec> {
    let (mut inner, mut outer, mut x) = (None, None, 0.0);
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| {
            Error::Config(format!("bad filter term `{part}`, expected key=value"))
        })?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad number in filter term `{part}`")))?;
        match k.trim() {
            "inner" => inner = Some(v),
            "outer" => outer = Some(v),
            "x" => x = v,
            other => return Err(Error::Config(format!("unknown filter key `{other}`"))),
        }
    }
    let (inner, outer) = inner
        .zip(outer)
        .ok_or_else(|| Error::Config("filter needs inner= and outer=".into()))?;
    FrequencyFilterSpec::new(inner, outer, x).map_err(|e| Error::Config(e.to_string()))
}

/// Writes `original.png`, a `filtered_i.png` / `spectrum_i.png` pair per
/// filter and `crosspatch_{1,2,3}.png`. Returns the written paths.
pub fn write_preview(
    img: &Image,
    filters: &[FrequencyFilterSpec],
    random: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String| {
        let p = out.join(name);
        written.push(p.clone());
        p
    };
    png::save_image(img, &put("original.png".into()))?;
    let mut r = rng::stream(seed, &[domain::PREVIEW]);
    let mut specs = filters.to_vec();
    specs.extend((0..random).map(|_| sample_filter_spec(&mut r)));
    let (h, w) = (img.height(), img.width());
    for (i, spec) in specs.iter().enumerate() {
        let rect = random_crop_rect(&mut r, h, w);
        let filtered = apply_frequency_filter(img, spec, rect)?.crop(rect)?;
        png::save_image(&filtered, &put(format!("filtered_{}.png", i + 1)))?;
        let lum = img.crop(rect)?.luminance();
        let spectrum = forward_dft(&lum, rect.height, rect.width)?;
        let mask = build_filter_mask(spec, (rect.height, rect.width));
        let shown: Vec<f64> = spectrum
            .log_amplitude()
            .iter()
            .zip(&mask.values)
            .map(|(a, m)| a * m)
            .collect();
        png::save_plane_scaled(
            &shown,
            rect.height,
            rect.width,
            &put(format!("spectrum_{}.png", i + 1)),
        )?;
    }
    let rect = random_crop_rect(&mut r, h, w);
    let crop = prepare_crop(img, rect, DEFAULT_CROP_SIDE)?;
    let bundle = partition_grid(&crop)?;
    png::save_image(&bundle.assemble()?, &put("crosspatch_1.png".into()))?;
    let layout = select_focal_sets(&mut r);
    let moved = transform_crosspatch(&bundle, &layout, FocalMode::ReversePositions, &mut r)?;
    png::save_image(&moved.assemble()?, &put("crosspatch_2.png".into()))?;
    let mut jittered = moved.clone();
    jittered.patches = apply_t2_patch_jitter(&moved.patches, &JitterSpec::default(), &mut r)?;
    png::save_image(&jittered.assemble()?, &put("crosspatch_3.png".into()))?;
    Ok(written)
}
