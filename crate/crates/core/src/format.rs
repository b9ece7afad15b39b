//! Binary named-tensor container shared by backbone and adapter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HADP" | version u32 | kind u32 | n_fields u32 | fields u32 * n_fields
//!        | step u64 | n_tensors u32
//!        | per tensor: name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | f64 * numel
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"HADP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ArtifactKind {
    Backbone = 0,
    Adapters = 1,
}

impl ArtifactKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Self::Backbone),
            1 => Ok(Self::Adapters),
            other => Err(Error::Format(format!("unknown artifact kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensorFile {
    pub kind: ArtifactKind,
    pub fields: Vec<u32>,
    pub step: u64,
    pub params: ParamStore,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

impl NamedTensorFile {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&u32_of(self.fields.len(), "field count")?.to_le_bytes())?;
        for f in &self.fields {
            w.write_all(&f.to_le_bytes())?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&u32_of(self.params.len(), "tensor count")?.to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_of(t.shape().len(), "rank")?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * t.numel());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = ArtifactKind::from_u32(read_u32(r)?)?;
        let n_fields = read_u32(r)? as usize;
        let fields = (0..n_fields).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let step = u64::from_le_bytes(step);
        let n_tensors = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_tensors {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; 8 * numel];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            kind,
            fields,
            step,
            params,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
