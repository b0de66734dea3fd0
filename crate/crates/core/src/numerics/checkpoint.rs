//! `DAPW` weight files.
//!
//! Layout (all integers u32 little-endian, floats f64 little-endian):
//!
//! ```text
//! "DAPW" | version | layer count | per layer: in-dim, out-dim, weights (row-major), bias
//! ```
//!
//! Version 1 is a bare MLP. Net checkpoints (see `nets`) use version 2, which
//! inserts a header of `u32` spec fields between the version and the layer table.

use crate::codec::{ByteReader, ByteWriter};
use crate::error::Result;

use super::mlp::{Layer, Mlp};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DAPW";
pub const MLP_VERSION: u32 = 1;

pub fn write_layer_table(w: &mut ByteWriter, mlp: &Mlp) -> Result<()> {
    w.len_u32(mlp.layers().len())?;
    for layer in mlp.layers() {
        w.len_u32(layer.in_dim())?;
        w.len_u32(layer.out_dim())?;
        w.f64s(layer.weight());
        w.f64s(layer.bias());
    }
    Ok(())
}

pub fn read_layer_table(r: &mut ByteReader<'_>) -> Result<Mlp> {
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for k in 0..count {
        let i = r.u32("layer in-dim")? as usize;
        let o = r.u32("layer out-dim")? as usize;
        let weight = r.f64s(i * o, &format!("layer {k} weights"))?;
        let bias = r.f64s(o, &format!("layer {k} bias"))?;
        layers.push(Layer::new(i, o, weight, bias)?);
    }
    Mlp::new(layers)
}

impl Mlp {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.magic(WEIGHTS_MAGIC);
        w.u32(MLP_VERSION);
        write_layer_table(&mut w, self)?;
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(WEIGHTS_MAGIC)?;
        r.expect_version(MLP_VERSION)?;
        let mlp = read_layer_table(&mut r)?;
        r.finish("mlp checkpoint")?;
        Ok(mlp)
    }
}
