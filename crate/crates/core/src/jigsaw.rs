//! 6x6 patch grids and the two spatial pretext transforms: Cross-patch
//! Jigsaw and the baseline Jigsaw shuffle.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};

pub const GRID: usize = 6;
pub const PATCHES: usize = GRID * GRID;
/// Side the crop is resized to before partitioning (6 tiles of 32 px).
pub const DEFAULT_CROP_SIDE: usize = 192;

pub fn cell_index(row: usize, col: usize) -> usize {
    row * GRID + col
}

pub fn cell_coords(index: usize) -> (usize, usize) {
    (index / GRID, index % GRID)
}

/// Anchor cell plus the focal cross (anchor row and column, 11 cells) and
/// its complement (25 cells). Coordinates are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub anchor: (usize, usize),
    pub focal: Vec<usize>,
    pub nonfocal: Vec<usize>,
}

impl PatchLayout {
    pub fn from_anchor(row: usize, col: usize) -> Result<Self> {
        if row >= GRID || col >= GRID {
            return Err(Error::arg(format!(
                "anchor ({row}, {col}) is outside the 6x6 grid"
            )));
        }
        let (focal, nonfocal) = (0..PATCHES).partition(|&i| {
            let (r, c) = cell_coords(i);
            r == row || c == col
        });
        Ok(PatchLayout {
            anchor: (row, col),
            focal,
            nonfocal,
        })
    }

    pub fn is_focal(&self, index: usize) -> bool {
        let (r, c) = cell_coords(index);
        r == self.anchor.0 || c == self.anchor.1
    }
}

/// Anchor drawn uniformly over the 36 cells.
pub fn select_focal_sets<R: Rng + ?Sized>(rng: &mut R) -> PatchLayout {
    let cell = rng.random_range(0..PATCHES);
    let (r, c) = cell_coords(cell);
    PatchLayout::from_anchor(r, c).expect("cell inside grid")
}

/// How focal patches are treated by [`transform_crosspatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalMode {
    /// The anchor stays in place; the other five row patches and the other
    /// five column patches are each put in reverse order, and every focal
    /// patch is rotated 180 degrees.
    #[default]
    ReversePositions,
    /// Per-patch horizontal flip, vertical flip, then 180-degree rotation,
    /// with positions unchanged. This composition is the identity on pixels.
    LiteralPixels,
}

/// Ordered tiles with the source cell of each output position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBundle {
    pub patches: Vec<Image>,
    pub layout: Option<PatchLayout>,
    /// `provenance[position] = source cell`.
    pub provenance: Vec<usize>,
}

impl PatchBundle {
    pub fn tile_side(&self) -> usize {
        self.patches.first().map_or(0, Image::height)
    }

    pub fn has_identity_provenance(&self) -> bool {
        self.provenance.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn provenance_is_bijection(&self) -> bool {
        let mut seen = [false; PATCHES];
        self.provenance.len() == PATCHES
            && self
                .provenance
                .iter()
                .all(|&p| p < PATCHES && !core::mem::replace(&mut seen[p], true))
    }

    fn check_shape(&self) -> Result<()> {
        if self.patches.len() != PATCHES || self.provenance.len() != PATCHES {
            return Err(Error::arg(format!(
                "bundle must hold {PATCHES} patches, got {}",
                self.patches.len()
            )));
        }
        Ok(())
    }

    /// Lays tiles out by output position.
    pub fn assemble(&self) -> Result<Image> {
        self.assemble_by(|pos| pos)
    }

    /// Puts every tile back at its source cell.
    pub fn assemble_source_order(&self) -> Result<Image> {
        self.assemble_by(|pos| self.provenance[pos])
    }

    fn assemble_by(&self, place: impl Fn(usize) -> usize) -> Result<Image> {
        self.check_shape()?;
        let side = self.tile_side();
        let full = side * GRID;
        let mut out = Image::constant("", full, full, 0.0)?;
        for (pos, tile) in self.patches.iter().enumerate() {
            let (r, c) = cell_coords(place(pos));
            out.paste(r * side, c * side, tile)?;
        }
        if let Some(first) = self.patches.first() {
            out.set_id(first.id());
        }
        Ok(out)
    }
}

/// Splits a square crop whose side is divisible by 6 into 36 row-major
/// tiles with identity provenance.
pub fn partition_grid(crop: &Image) -> Result<PatchBundle> {
    let (h, w) = (crop.height(), crop.width());
    if h != w || h % GRID != 0 {
        return Err(Error::arg(format!(
            "crop must be square with a side divisible by {GRID}, got {h}x{w}"
        )));
    }
    let side = h / GRID;
    let patches = (0..PATCHES)
        .map(|i| {
            let (r, c) = cell_coords(i);
            crop.crop(Rect::new(r * side, c * side, side, side))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchBundle {
        patches,
        layout: None,
        provenance: (0..PATCHES).collect(),
    })
}

/// Crops `rect` out of `img` and resizes it to `side x side` for partitioning.
pub fn prepare_crop(img: &Image, rect: Rect, side: usize) -> Result<Image> {
    if side % GRID != 0 {
        return Err(Error::arg(format!(
            "crop side {side} is not divisible by {GRID}"
        )));
    }
    img.crop(rect)?.resize(side, side)
}

fn require_identity(bundle: &PatchBundle) -> Result<()> {
    bundle.check_shape()?;
    if !bundle.has_identity_provenance() {
        return Err(Error::arg("transform expects a freshly partitioned bundle"));
    }
    Ok(())
}

/// Maps each output position to its source cell for the focal cross.
fn reversed_focal_sources(layout: &PatchLayout) -> Vec<(usize, usize)> {
    let (ar, ac) = layout.anchor;
    let row: Vec<usize> = (0..GRID)
        .filter(|&c| c != ac)
        .map(|c| cell_index(ar, c))
        .collect();
    let col: Vec<usize> = (0..GRID)
        .filter(|&r| r != ar)
        .map(|r| cell_index(r, ac))
        .collect();
    let mut pairs = Vec::with_capacity(2 * GRID - 1);
    pairs.push((cell_index(ar, ac), cell_index(ar, ac)));
    for line in [row, col] {
        let n = line.len();
        for k in 0..n {
            pairs.push((line[k], line[n - 1 - k]));
        }
    }
    pairs
}

/// Cross-patch Jigsaw: non-focal patches are shuffled uniformly among the
/// non-focal cells; focal patches are handled per [`FocalMode`].
pub fn transform_crosspatch<R: Rng + ?Sized>(
    bundle: &PatchBundle,
    layout: &PatchLayout,
    mode: FocalMode,
    rng: &mut R,
) -> Result<PatchBundle> {
    require_identity(bundle)?;
    if layout.focal.len() + layout.nonfocal.len() != PATCHES {
        return Err(Error::arg("layout does not cover the 6x6 grid"));
    }
    let mut provenance: Vec<usize> = (0..PATCHES).collect();
    let mut shuffled = layout.nonfocal.clone();
    shuffled.shuffle(rng);
    for (&pos, &src) in layout.nonfocal.iter().zip(&shuffled) {
        provenance[pos] = src;
    }
    let mut patches: Vec<Image> = provenance
        .iter()
        .map(|&s| bundle.patches[s].clone())
        .collect();
    match mode {
        FocalMode::ReversePositions => {
            for (pos, src) in reversed_focal_sources(layout) {
                provenance[pos] = src;
                patches[pos] = bundle.patches[src].rotate_180();
            }
        }
        FocalMode::LiteralPixels => {
            for &pos in &layout.focal {
                patches[pos] = bundle.patches[pos]
                    .flip_horizontal()
                    .flip_vertical()
                    .rotate_180();
            }
        }
    }
    Ok(PatchBundle {
        patches,
        layout: Some(layout.clone()),
        provenance,
    })
}

/// Baseline Jigsaw: a uniform permutation of all 36 positions.
pub fn transform_jigsaw_baseline<R: Rng + ?Sized>(
    bundle: &PatchBundle,
    rng: &mut R,
) -> Result<PatchBundle> {
    require_identity(bundle)?;
    let mut provenance: Vec<usize> = (0..PATCHES).collect();
    provenance.shuffle(rng);
    Ok(PatchBundle {
        patches: provenance
            .iter()
            .map(|&s| bundle.patches[s].clone())
            .collect(),
        layout: None,
        provenance,
    })
}
