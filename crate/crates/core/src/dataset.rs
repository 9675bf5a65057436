//! Point-set container and the on-disk formats: CSV (one point per row) and
//! flat binary (u32 n, u32 d, then n*d little-endian f32).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major matrix of `n` points in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    pub dim: usize,
    data: Vec<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(dim: usize) -> Self {
        Dataset { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend(row);
        }
        Ok(Dataset { dim, data })
    }

    pub fn push(&mut self, p: &[T]) {
        debug_assert_eq!(p.len(), self.dim);
        self.data.extend_from_slice(p);
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    /// All coordinates scaled by a constant.
    pub fn scaled(&self, factor: T) -> Dataset<T> {
        Dataset { dim: self.dim, data: self.data.iter().map(|&x| x * factor).collect() }
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for &x in &self.data {
            w.write_f32::<LittleEndian>(x.to_f32().unwrap_or(f32::NAN))?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(T::from_f32(r.read_f32::<LittleEndian>()?).unwrap());
        }
        Ok(Dataset { dim, data })
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in self.iter() {
            let row: Vec<String> = p.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut rows = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<T>, _> = trimmed
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map(T::from_f64_c)
                        .map_err(|e| Error::Format(format!("bad csv value `{tok}`: {e}")))
                })
                .collect();
            rows.push(row?);
        }
        Dataset::from_rows(rows)
    }

    /// Loads from a path, dispatching on extension: `.csv` or flat binary.
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            Dataset::read_csv(f)
        } else {
            Dataset::read_binary(&mut BufReader::new(f))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = BufWriter::new(f);
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            self.write_csv(&mut w)
        } else {
            self.write_binary(&mut w)
        }
    }
}
