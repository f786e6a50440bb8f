//! `PCKP` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PCKP" | version: u8 (= 1)
//! repeated until end of file:
//!     name_len: u32 | name: UTF-8 bytes | rank: u32 | dims: rank × u32 | values: numel × f32
//! ```

use std::io::{Read, Write};

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::numel;

pub const MAGIC: &[u8; 4] = b"PCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for r in records {
        if numel(&r.shape) != r.data.len() {
            return Err(bad(format!("record `{}` shape/data mismatch", r.name)));
        }
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let mut pos = 5;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        // a clean end of file is only allowed on a record boundary
        let head = match take(4) {
            Ok(h) => h,
            Err(_) => break,
        };
        let name_len = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n = numel(&shape);
        let raw = take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Record { name, shape, data });
    }
    Ok(out)
}

impl<T: Elem> ParamStore<T> {
    pub fn to_records(&self) -> Vec<Record> {
        self.iter()
            .map(|p| Record {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.to_f32().unwrap()).collect(),
            })
            .collect()
    }

    /// Overwrite parameter values from records; every stored parameter must
    /// be present with a matching shape.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        for r in records {
            let id = self
                .id_of(&r.name)
                .ok_or_else(|| bad(format!("unknown parameter `{}`", r.name)))?;
            let p = self.get_mut(id);
            if p.shape != r.shape {
                return Err(bad(format!("`{}`: shape {:?} vs stored {:?}", r.name, r.shape, p.shape)));
            }
            p.data = r.data.iter().map(|&v| T::from_f32(v).unwrap()).collect();
        }
        if records.len() != self.len() {
            return Err(bad(format!("checkpoint has {} records, model has {}", records.len(), self.len())));
        }
        Ok(())
    }
}
