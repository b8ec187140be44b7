//! Road-region embeddings: ROI crop, the built-in grid encoder and the EDSE
//! binary format.
//!
//! EDSE layout (little-endian): magic `EDSE`, version `u32 = 1`, count `u64`,
//! dim `u64`, `count * dim` `f32` values row-major, then `count` ids, each a
//! `u32` byte length followed by UTF-8 bytes.

use std::collections::HashSet;
use std::path::Path;

use crate::binfmt::{self, ByteReader};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const EDSE_MAGIC: &[u8; 4] = b"EDSE";
pub const EDSE_VERSION: u32 = 1;
pub const DEFAULT_GRID: usize = 8;

/// Keeps the bottom `bottom_fraction` of the image rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    bottom_fraction: f64,
}

impl RoiSpec {
    pub fn new(bottom_fraction: f64) -> Result<Self> {
        if !(bottom_fraction > 0.0 && bottom_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "bottom_fraction must lie in (0, 1], got {bottom_fraction}"
            )));
        }
        Ok(RoiSpec { bottom_fraction })
    }

    pub fn bottom_fraction(&self) -> f64 {
        self.bottom_fraction
    }

    /// First retained row: `ceil(height * (1 - bottom_fraction))`.
    pub fn first_row(&self, height: usize) -> usize {
        // Absorb representation error so that e.g. 100 * (1 - 0.6) lands on 40.
        let raw = height as f64 * (1.0 - self.bottom_fraction);
        (raw - 1e-9 * (1.0 + raw)).ceil().max(0.0) as usize
    }
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            bottom_fraction: 0.6,
        }
    }
}

pub fn extract_roi(image: &Raster, spec: &RoiSpec) -> Result<Raster> {
    if image.is_empty() {
        return Err(Error::EmptyCrop("input image is empty".into()));
    }
    let start = spec.first_row(image.height());
    if start >= image.height() {
        return Err(Error::EmptyCrop(format!(
            "bottom_fraction {} of {} rows keeps nothing",
            spec.bottom_fraction,
            image.height()
        )));
    }
    Ok(image.rows_from(start))
}

/// Half-open row (or column) range of grid cell `i` out of `g` over `len` lines.
/// Cells never come out empty; when `len < g` neighbouring cells share a line.
fn cell_range(i: usize, g: usize, len: usize) -> (usize, usize) {
    let start = i * len / g;
    let end = ((i + 1) * len / g).max(start + 1);
    (start, end)
}

/// Per-cell, per-channel means over a `grid x grid` partition, cell-major,
/// channels innermost. Output dimension is `3 * grid^2`.
pub fn encode_grid(image: &Raster, grid: usize) -> Result<Vec<f32>> {
    if grid == 0 {
        return Err(Error::invalid("grid must be at least 1"));
    }
    if image.is_empty() {
        return Err(Error::invalid("cannot encode an empty image"));
    }
    let mut out = Vec::with_capacity(3 * grid * grid);
    for gi in 0..grid {
        let (r0, r1) = cell_range(gi, grid, image.height());
        for gj in 0..grid {
            let (c0, c1) = cell_range(gj, grid, image.width());
            let mut sum = [0u64; 3];
            for r in r0..r1 {
                for c in c0..c1 {
                    let p = image.pixel(r, c);
                    for ch in 0..3 {
                        sum[ch] += p[ch] as u64;
                    }
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            out.extend(sum.iter().map(|&s| (s as f64 / n) as f32));
        }
    }
    Ok(out)
}

/// Built-in desk encoder: ROI crop followed by the grid encoder.
pub fn encode_image(image: &Raster, roi: &RoiSpec, grid: usize) -> Result<Vec<f32>> {
    encode_grid(&extract_roi(image, roi)?, grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub values: Vec<f32>,
}

/// Embeddings of one dimension with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<Embedding>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, entries: Vec<Embedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.values.len(),
                });
            }
            if !ids.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(EmbeddingSet { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Subset with only the given ids, in the order given.
    pub fn select(&self, ids: &[&str]) -> Result<EmbeddingSet> {
        let by_id: std::collections::HashMap<&str, &Embedding> =
            self.entries.iter().map(|e| (e.id.as_str(), e)).collect();
        let entries = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::UnknownId(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingSet::new(self.dim, entries)
    }

    /// Per-dimension z-scoring. Constant dimensions are centred only.
    pub fn standardized(&self) -> EmbeddingSet {
        let n = self.entries.len().max(1) as f64;
        let mut mean = vec![0f64; self.dim];
        for e in &self.entries {
            for (m, &v) in mean.iter_mut().zip(&e.values) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; self.dim];
        for e in &self.entries {
            for ((s, &v), m) in var.iter_mut().zip(&e.values).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        let entries = self
            .entries
            .iter()
            .map(|e| Embedding {
                id: e.id.clone(),
                values: e
                    .values
                    .iter()
                    .zip(mean.iter().zip(&scale))
                    .map(|(&v, (m, s))| ((v as f64 - m) * s) as f32)
                    .collect(),
            })
            .collect();
        EmbeddingSet {
            dim: self.dim,
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * (self.dim * 4 + 16));
        out.extend_from_slice(EDSE_MAGIC);
        out.extend_from_slice(&EDSE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.entries {
            binfmt::put_string(&mut out, &e.id);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(EDSE_MAGIC)?;
        let version = r.u32("version")?;
        if version != EDSE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.usize_from_u64("count")?;
        let dim = r.usize_from_u64("dim")?;
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: 0,
            });
        }
        let payload = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated("count * dim overflows".into()))?;
        if r.remaining() < payload {
            return Err(Error::Truncated(format!(
                "header declares {count}x{dim} values but only {} bytes follow",
                r.remaining()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                row.push(r.f32("values")?);
            }
            values.push(row);
        }
        let mut entries = Vec::with_capacity(count);
        for row in values {
            entries.push(Embedding {
                id: r.string("id table")?,
                values: row,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::invalid(format!(
                "{} trailing bytes after id table",
                r.remaining()
            )));
        }
        EmbeddingSet::new(dim, entries)
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::from_bytes(&binfmt::read_file(path)?)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    binfmt::write_file(path, &set.to_bytes())
}
