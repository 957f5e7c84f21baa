use std::path::Path;

use crate::container::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{LoraAdapter, LoraLayer};

pub const ADAPTER_MAGIC: &[u8; 4] = b"LFTA";
pub const ADAPTER_VERSION: u32 = 1;

pub fn adapter_to_bytes(adapter: &LoraAdapter<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(ADAPTER_MAGIC)
        .u32(ADAPTER_VERSION)
        .u32(adapter.class() as u32)
        .u64(adapter.source_id())
        .u32(adapter.rank() as u32)
        .u32(adapter.layers().len() as u32);
    for l in adapter.layers() {
        w.u16(l.name.len() as u16)
            .bytes(l.name.as_bytes())
            .u32(l.d_out() as u32)
            .u32(l.d_in() as u32)
            .f32s(l.b.data())
            .f32s(l.a.data());
    }
    w.finish()
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<LoraAdapter<f32>> {
    let mut r = ByteReader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let version = r.u32("version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let class = r.u32("class label")? as usize;
    let source_id = r.u64("source id")?;
    let rank = r.u32("rank")? as usize;
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for i in 0..n_layers {
        let len = r.u16(&format!("layer {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("layer {i} name"))?)
            .map_err(|_| Error::Malformed(format!("layer {i} name is not UTF-8")))?
            .to_string();
        let d_out = r.u32(&format!("{name} d_out"))? as usize;
        let d_in = r.u32(&format!("{name} d_in"))? as usize;
        let b = r.f32s(d_out * rank, &format!("{name} B"))?;
        let a = r.f32s(rank * d_in, &format!("{name} A"))?;
        layers.push(LoraLayer {
            b: Tensor::new(vec![d_out, rank], b)?,
            a: Tensor::new(vec![rank, d_in], a)?,
            name,
        });
    }
    r.expect_end()?;
    LoraAdapter::new(class, source_id, rank, layers)
}

pub fn save_adapter(adapter: &LoraAdapter<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &adapter_to_bytes(adapter))
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter<f32>> {
    adapter_from_bytes(&std::fs::read(path)?)
}
