//! Per-image embedding store maintained by exponential moving average.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{normalize_in_place, Embedding};
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    momentum: f64,
    ids: Vec<String>,
    /// Row-major `ids.len() x dim`.
    entries: Vec<f64>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl MemoryBank {
    /// Builds a bank from `(id, embedding)` rows, in order.
    pub fn from_rows(rows: Vec<(String, Embedding)>, momentum: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::arg("memory bank needs at least one row"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::arg(format!("momentum {momentum} outside [0, 1]")));
        }
        let dim = rows[0].1.len();
        let mut ids = Vec::with_capacity(rows.len());
        let mut entries = Vec::with_capacity(rows.len() * dim);
        for (id, e) in rows {
            if e.len() != dim {
                return Err(Error::arg(format!(
                    "row `{id}` has length {}, expected {dim}",
                    e.len()
                )));
            }
            ids.push(id);
            entries.extend_from_slice(e.values());
        }
        let mut bank = MemoryBank {
            dim,
            momentum,
            ids,
            entries,
            index: BTreeMap::new(),
        };
        bank.rebuild_index()?;
        Ok(bank)
    }

    /// Restores the id lookup after deserialization.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, id) in self.ids.iter().enumerate() {
            if self.index.insert(id.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate bank id `{id}`")));
            }
        }
        if self.entries.len() != self.ids.len() * self.dim {
            return Err(Error::Data(String::from("bank entries do not match ids")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(String::from(id)))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        Ok(self.row(self.row_of(id)?))
    }

    /// `row <- normalize(m * row + (1 - m) * fresh)`.
    pub fn update_ema(&mut self, id: &str, fresh: &Embedding) -> Result<()> {
        let i = self.row_of(id)?;
        self.update_row(i, fresh.values())
    }

    pub fn update_row(&mut self, i: usize, fresh: &[f64]) -> Result<()> {
        if fresh.len() != self.dim {
            return Err(Error::arg(format!(
                "embedding length {} != {}",
                fresh.len(),
                self.dim
            )));
        }
        let m = self.momentum;
        let row = &mut self.entries[i * self.dim..(i + 1) * self.dim];
        for (r, f) in row.iter_mut().zip(fresh) {
            *r = m * *r + (1.0 - m) * f;
        }
        normalize_in_place(row);
        Ok(())
    }

    /// Overwrites row `i` with a normalized copy of `values`.
    pub fn replace_row(&mut self, i: usize, values: &[f64]) {
        let row = &mut self.entries[i * self.dim..(i + 1) * self.dim];
        row.copy_from_slice(values);
        normalize_in_place(row);
    }

    /// `k` distinct row indices drawn uniformly from every row except
    /// `exclude`.
    pub fn sample_negative_rows<R: Rng + ?Sized>(
        &self,
        exclude: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let n = self.len();
        if exclude >= n {
            return Err(Error::UnknownId(format!("row {exclude}")));
        }
        if k == 0 || k > n - 1 {
            return Err(Error::arg(format!(
                "cannot draw {k} negatives from {} other rows",
                n - 1
            )));
        }
        Ok(index::sample(rng, n - 1, k)
            .into_iter()
            .map(|i| if i >= exclude { i + 1 } else { i })
            .collect())
    }

    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        exclude: &str,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Embedding>> {
        let ex = self.row_of(exclude)?;
        Ok(self
            .sample_negative_rows(ex, k, rng)?
            .into_iter()
            .map(|i| Embedding::normalized(self.row(i).to_vec()))
            .collect())
    }

    pub fn max_norm_error(&self) -> f64 {
        (0..self.len())
            .map(|i| (crate::encoder::norm(self.row(i)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
