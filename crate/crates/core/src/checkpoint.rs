//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u32 record count, then per-parameter
//! records of (u32 name length, name bytes, 4 x u32 shape, little-endian f32
//! values). The reader treats its input as untrusted.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"CSEGCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;
const MAX_DIM: usize = 1 << 20;
const MAX_ELEMENTS: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a checkpoint from raw bytes.
pub fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("bad parameter name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let v = r.u32()? as usize;
            if v == 0 || v > MAX_DIM {
                return Err(Error::Format(format!("bad shape extent {v}")));
            }
            *d = v;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        if shape.len() > MAX_ELEMENTS {
            return Err(Error::Format("parameter too large".into()));
        }
        let raw = r.take(shape.len() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint records".into()));
    }
    Ok(records)
}

/// Encode the network's parameters in visit order.
pub fn encode(net: &Network) -> Vec<u8> {
    let mut records: Vec<(String, Shape, Vec<f32>)> = Vec::new();
    net.visit_params(&mut |name, p| {
        records.push((name.to_string(), p.data.shape(), p.data.data().to_vec()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in [shape.n, shape.c, shape.h, shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Load parameters into an existing network. Every parameter the network
/// declares must be present with a matching shape; extras are rejected.
pub fn load_into(net: &mut Network, bytes: &[u8]) -> Result<()> {
    let records = parse(bytes)?;
    let mut by_name: HashMap<String, Record> = HashMap::new();
    for rec in records {
        if by_name.insert(rec.name.clone(), rec).is_some() {
            return Err(Error::Format("duplicate parameter record".into()));
        }
    }
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    net.visit_params(&mut |name, p| match by_name.get(name) {
        None => missing.push(name.to_string()),
        Some(rec) if rec.shape != p.data.shape() => mismatched.push(format!(
            "{name}: checkpoint {:?} vs network {:?}",
            rec.shape,
            p.data.shape()
        )),
        Some(_) => {}
    });
    if !missing.is_empty() {
        return Err(Error::Shape(format!(
            "checkpoint is missing parameters: {}",
            missing.join(", ")
        )));
    }
    if !mismatched.is_empty() {
        return Err(Error::Shape(format!(
            "checkpoint shape mismatch: {}",
            mismatched.join("; ")
        )));
    }
    let mut seen = 0usize;
    net.visit_params_mut(&mut |name, p| {
        let rec = &by_name[name];
        p.data = Tensor::from_vec(rec.shape, rec.data.clone()).unwrap();
        seen += 1;
    });
    if seen != by_name.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} records, network declares {seen}",
            by_name.len()
        )));
    }
    Ok(())
}

pub fn save_file(net: &Network, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_file(net: &mut Network, path: &std::path::Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_into(net, &bytes)
}
