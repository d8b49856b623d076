//! `.cfmp` feature-map files.
//!
//! Layout (little-endian):
//! - magic `CFMP` (4 bytes), version u16 = 1
//! - side u32, depth u32, scale_id u32
//! - image_id: u32 byte length + UTF-8, layer_name: u32 byte length + UTF-8
//! - side*side*depth f32 values, row-major by (row, column, channel)

use std::path::Path;

use super::FeatureMap;
use crate::binio::{check_finite_f32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const CFMP_MAGIC: &[u8; 4] = b"CFMP";
pub const CFMP_VERSION: u16 = 1;

pub fn write_cfmp(map: &FeatureMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut w = ByteWriter::with_header(
        CFMP_MAGIC,
        CFMP_VERSION,
        12 + 8 + map.image_id.len() + map.layer_name.len() + map.values.len() * 4,
    );
    w.len_u32(map.side)?;
    w.len_u32(map.depth)?;
    w.u32(map.scale_id);
    w.str(&map.image_id);
    w.str(&map.layer_name);
    for &v in &map.values {
        w.f32(v);
    }
    Ok(w.finish())
}

pub fn read_cfmp(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::open(bytes, "cfmp", CFMP_MAGIC, CFMP_VERSION)?;
    let side = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let scale_id = r.u32()?;
    let image_id = r.str()?;
    let layer_name = r.str()?;
    let count = side
        .checked_mul(side)
        .and_then(|n| n.checked_mul(depth))
        .ok_or_else(|| Error::invalid("cfmp header", "side*side*depth overflows"))?;
    r.require(count.saturating_mul(4))?;
    let values = r.f32_vec(count)?;
    r.finish()?;
    check_finite_f32(&values)?;
    FeatureMap::new(image_id, layer_name, scale_id, side, depth, values)
}

pub fn write_cfmp_file(path: &Path, map: &FeatureMap) -> Result<()> {
    write_file(path, &write_cfmp(map)?)
}

pub fn read_cfmp_file(path: &Path) -> Result<FeatureMap> {
    read_cfmp(&read_file(path)?)
}
