//! Per-image overlap and Hausdorff metrics, and their aggregates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dsc: f64,
    pub jc: f64,
    pub ppv: f64,
    pub rec: f64,
}

fn check_shapes(pred: &Mask, truth: &Mask) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::ShapeMismatch {
            expected: vec![truth.height(), truth.width()],
            actual: vec![pred.height(), pred.width()],
        });
    }
    Ok(())
}

/// DSC, JC, PPV and recall. Two empty masks score 1 everywhere; exactly one
/// empty mask scores 0 everywhere.
pub fn overlap_metrics(pred: &Mask, truth: &Mask) -> Result<Overlap> {
    check_shapes(pred, truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        t += b as usize;
        both += (a && b) as usize;
    }
    if p == 0 && t == 0 {
        return Ok(Overlap {
            dsc: 1.0,
            jc: 1.0,
            ppv: 1.0,
            rec: 1.0,
        });
    }
    if p == 0 || t == 0 {
        return Ok(Overlap {
            dsc: 0.0,
            jc: 0.0,
            ppv: 0.0,
            rec: 0.0,
        });
    }
    let (p, t, i) = (p as f64, t as f64, both as f64);
    Ok(Overlap {
        dsc: 2.0 * i / (p + t),
        jc: i / (p + t - i),
        ppv: i / p,
        rec: i / t,
    })
}

/// Hausdorff distance plus whether the empty-mask sentinel was used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hausdorff {
    pub value: f64,
    pub sentinel: bool,
}

pub fn image_diagonal(height: usize, width: usize) -> f64 {
    libm::hypot(height as f64, width as f64)
}

/// Symmetric Hausdorff distance between foreground pixel sets. Both empty
/// gives 0; exactly one empty gives the image diagonal, flagged.
pub fn hausdorff(pred: &Mask, truth: &Mask) -> Result<Hausdorff> {
    check_shapes(pred, truth)?;
    let (pc, tc) = (pred.foreground_count(), truth.foreground_count());
    if pc == 0 && tc == 0 {
        return Ok(Hausdorff {
            value: 0.0,
            sentinel: false,
        });
    }
    if pc == 0 || tc == 0 {
        return Ok(Hausdorff {
            value: image_diagonal(pred.height(), pred.width()),
            sentinel: true,
        });
    }
    let a = directed_sq(pred, truth);
    let b = directed_sq(truth, pred);
    Ok(Hausdorff {
        value: libm::sqrt(a.max(b)),
        sentinel: false,
    })
}

/// `max_{p in from} min_{t in to} |p - t|^2`, via the distance transform of `to`.
fn directed_sq(from: &Mask, to: &Mask) -> f64 {
    let dt = squared_edt(to);
    from.data()
        .iter()
        .zip(&dt)
        .filter(|(&m, _)| m != 0)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel, by separable lower envelopes of parabolas. All values are exact
/// integers.
pub fn squared_edt(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    // larger than any squared distance inside the image
    let far = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let mut grid: Vec<f64> = mask
        .data()
        .iter()
        .map(|&m| if m != 0 { 0.0 } else { far })
        .collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        edt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub jc: f64,
    pub hd: f64,
    pub ppv: f64,
    pub rec: f64,
    /// Set when `hd` is the empty-mask sentinel.
    pub hd_sentinel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanSd {
        if values.is_empty() {
            return MeanSd::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanSd {
            mean,
            sd: libm::sqrt(var),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: MeanSd,
    pub jc: MeanSd,
    pub hd: MeanSd,
    pub ppv: MeanSd,
    pub rec: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_rows(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::arg("cannot report on an empty test set"));
        }
        let col =
            |f: fn(&ImageMetrics) -> f64| MeanSd::of(&per_image.iter().map(f).collect::<Vec<_>>());
        let aggregate = Aggregate {
            dsc: col(|m| m.dsc),
            jc: col(|m| m.jc),
            hd: col(|m| m.hd),
            ppv: col(|m| m.ppv),
            rec: col(|m| m.rec),
        };
        Ok(MetricsReport {
            per_image,
            aggregate,
        })
    }
}

pub fn image_metrics(id: &str, pred: &Mask, truth: &Mask) -> Result<ImageMetrics> {
    let o = overlap_metrics(pred, truth)?;
    let h = hausdorff(pred, truth)?;
    Ok(ImageMetrics {
        id: String::from(id),
        dsc: o.dsc,
        jc: o.jc,
        hd: h.value,
        ppv: o.ppv,
        rec: o.rec,
        hd_sentinel: h.sentinel,
    })
}

/// Scores `(id, prediction, truth)` triples.
pub fn evaluate(items: &[(String, Mask, Mask)]) -> Result<MetricsReport> {
    let rows = items
        .iter()
        .map(|(id, p, t)| image_metrics(id, p, t).map_err(|e| Error::Data(format!("{id}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}

/// Reference all-pairs Hausdorff distance.
pub fn hausdorff_brute_force(pred: &Mask, truth: &Mask) -> f64 {
    let (p, t) = (pred.foreground(), truth.foreground());
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        a.iter()
            .map(|&(ay, ax)| {
                b.iter()
                    .map(|&(by, bx)| {
                        let dy = ay as f64 - by as f64;
                        let dx = ax as f64 - bx as f64;
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    libm::sqrt(directed(&p, &t).max(directed(&t, &p)))
}
