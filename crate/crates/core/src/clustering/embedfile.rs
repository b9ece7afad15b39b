use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Sequence embeddings with one domain label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let e = Self { rows, labels };
        e.validate()?;
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.labels.len() {
            return Err(Error::Data("one label per embedding row required".into()));
        }
        let m = self.dim();
        if self.rows.iter().any(|r| r.len() != m) {
            return Err(Error::Data("embedding rows differ in dimension".into()));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(())
    }

    /// Distinct labels in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.labels {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    /// Rows grouped by label, in [`domains`](Self::domains) order.
    pub fn grouped<'a>(&'a self, rows: &'a [Vec<f64>]) -> Vec<(String, Vec<Vec<f64>>)> {
        self.domains()
            .into_iter()
            .map(|d| {
                let members = rows
                    .iter()
                    .zip(&self.labels)
                    .filter(|(_, l)| **l == d)
                    .map(|(r, _)| r.clone())
                    .collect();
                (d, members)
            })
            .collect()
    }

    /// `count u64 | dim u64 | count·dim f64 | count × (len u32, utf-8 label)`,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.rows.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&(l.len() as u32).to_le_bytes())?;
            w.write_all(l.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        if count.checked_mul(dim).is_none_or(|n| n > (1 << 32)) {
            return Err(Error::Format(format!("implausible embedding header {count}×{dim}")));
        }
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b8)?;
                row.push(f64::from_le_bytes(b8));
            }
            rows.push(row);
        }
        let mut labels = Vec::with_capacity(count);
        let mut b4 = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let mut s = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut s)?;
            labels.push(String::from_utf8(s).map_err(|_| Error::Format("label is not utf-8".into()))?);
        }
        Self::new(rows, labels)
    }
}
