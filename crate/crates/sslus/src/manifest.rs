//! CSV manifests: `image_path,mask_path,split`, paths relative to the file.

use std::path::{Path, PathBuf};

use sslus_core::data::{DatasetManifest, ManifestEntry, Split};
use sslus_core::image::{Image, Mask};
use sslus_core::training::Labeled;

use crate::error::{Error, Result};
use crate::png;

const HEADER: [&str; 3] = ["image_path", "mask_path", "split"];

/// Parses and validates a manifest. Every referenced file must exist; only
/// train rows may omit the mask.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(bad(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let split = Split::parse(&rec[2])
            .ok_or_else(|| bad(line, format!("unknown split `{}`", &rec[2])))?;
        if rec[0].is_empty() {
            return Err(bad(line, "empty image_path".into()));
        }
        let mask_path = (!rec[1].is_empty()).then(|| rec[1].to_string());
        if mask_path.is_none() && split != Split::Train {
            return Err(bad(line, format!("{} rows need a mask", split.as_str())));
        }
        for p in std::iter::once(&rec[0]).chain(mask_path.as_deref()) {
            let full = base.join(p);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("line {line}: file not found"),
                    ),
                ));
            }
        }
        entries.push(ManifestEntry {
            image_path: rec[0].to_string(),
            mask_path,
            split,
        });
    }
    let name = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(DatasetManifest::new(name, entries)?)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(HEADER).map_err(wrap)?;
    for e in &manifest.entries {
        w.write_record([
            e.image_path.as_str(),
            e.mask_path.as_deref().unwrap_or(""),
            e.split.as_str(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Dataset {
            manifest: load_manifest(path)?,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    /// Loads every image (and mask, when present) of one split.
    pub fn load_split(&self, split: Split) -> Result<Vec<Labeled>> {
        self.manifest
            .split(split)
            .map(|e| {
                let mut img = png::load_image(&self.root.join(&e.image_path))?;
                img.set_id(e.id());
                let mask = e
                    .mask_path
                    .as_ref()
                    .map(|m| png::load_mask(&self.root.join(m), e.id()))
                    .transpose()?;
                Ok((img, mask))
            })
            .collect()
    }

    pub fn load_images(&self, split: Split) -> Result<Vec<Image>> {
        Ok(self
            .load_split(split)?
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }
}

pub fn masks_of(items: &[Labeled]) -> Vec<Option<Mask>> {
    items.iter().map(|(_, m)| m.clone()).collect()
}
