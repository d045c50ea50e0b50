//! Flat binary checkpoints of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EDTK"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dim, prod(dims) × f64 }
//! ```

use std::io::{Read, Write};

use super::model::DuDnnSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EDTK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint(mut w: impl Write, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has inconsistent dims",
                t.name
            )));
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

fn named(name: String, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name,
        dims: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

/// Trainable parameters of `spec` in a fixed order.
pub fn spec_tensors(spec: &DuDnnSpec) -> Vec<NamedTensor> {
    let mut v = Vec::new();
    for (l, b) in spec.blocks.iter().enumerate() {
        v.push(named(format!("branch.{l}.f1.weight"), &b.f1.weight));
        v.push(named(format!("branch.{l}.f2.weight"), &b.f2.weight));
    }
    v.push(named("head.weight".into(), &spec.head.weight));
    v.push(NamedTensor {
        name: "head.bias".into(),
        dims: vec![spec.head.bias.len()],
        data: spec.head.bias.clone(),
    });
    v
}

/// Overwrite the trainable parameters of `spec` from a checkpoint.
pub fn load_into_spec(spec: &mut DuDnnSpec, tensors: &[NamedTensor]) -> Result<()> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    };
    let fill = |dst: &mut Tensor, name: &str| -> Result<()> {
        let t = find(name)?;
        if t.dims != dst.shape().to_vec() {
            return Err(Error::Checkpoint(format!(
                "'{name}' has dims {:?}, expected {:?}",
                t.dims,
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(&t.data);
        Ok(())
    };
    for l in 0..spec.blocks.len() {
        fill(
            &mut spec.blocks[l].f1.weight,
            &format!("branch.{l}.f1.weight"),
        )?;
        fill(
            &mut spec.blocks[l].f2.weight,
            &format!("branch.{l}.f2.weight"),
        )?;
    }
    fill(&mut spec.head.weight, "head.weight")?;
    let bias = find("head.bias")?;
    if bias.data.len() != spec.head.bias.len() {
        return Err(Error::Checkpoint("head.bias has the wrong length".into()));
    }
    spec.head.bias.copy_from_slice(&bias.data);
    Ok(())
}
