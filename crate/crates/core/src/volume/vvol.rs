//! VVOL binary format (little-endian):
//! bytes 0-3 ASCII "VVOL"; u32 version = 1; u32 dx, dy, dz; f32 sx, sy, sz;
//! u32 dtype code (1 = f32); then dx*dy*dz f32 values, x fastest, then y,
//! then z.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Volume;

const MAGIC: &[u8; 4] = b"VVOL";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

pub fn write_vvol(v: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in [v.dims.0, v.dims.1, v.dims.2] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in [v.spacing_mm.0, v.spacing_mm.1, v.spacing_mm.2] {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    for val in &v.voxels {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vvol(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_field(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format("magic", format!("bad magic {magic:?}")));
    }

    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }

    let dx = read_u32(&mut r, "dx")? as usize;
    let dy = read_u32(&mut r, "dy")? as usize;
    let dz = read_u32(&mut r, "dz")? as usize;
    if dx == 0 || dy == 0 || dz == 0 {
        return Err(Error::format(
            "dims",
            format!("zero extent in {dx}x{dy}x{dz}"),
        ));
    }
    let sx = read_f32(&mut r, "sx")?;
    let sy = read_f32(&mut r, "sy")?;
    let sz = read_f32(&mut r, "sz")?;

    let dtype = read_u32(&mut r, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            "dtype",
            format!("unsupported dtype code {dtype}, expected {DTYPE_F32}"),
        ));
    }

    let n = dx * dy * dz;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::format("payload", format!("truncated payload, expected {n} f32 values"))
    })?;
    // a well-formed file ends exactly at the payload
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("payload", "trailing bytes after payload"));
    }

    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new((dx, dy, dz), (sx, sy, sz), voxels)
}

fn read_field(r: &mut impl Read, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(field, "truncated header"))
}

fn read_u32(r: &mut impl Read, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_field(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, field: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_field(r, &mut b, field)?;
    Ok(f32::from_le_bytes(b))
}
