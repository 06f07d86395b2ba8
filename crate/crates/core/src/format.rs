//! CGSF binary field files and their JSON mirror.
//!
//! Layout (little-endian): magic `CGSF`, `u8` version, `u32` width, `u32` height,
//! `u32` kernels per pixel, `u64` kernel count, then one record of eight `f32`
//! per kernel: `mu_x, mu_y, var_x, var_y, cov_xy, r, g, b`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CovarianceParams, GaussianField, GaussianKernel};

pub const CGSF_MAGIC: &[u8; 4] = b"CGSF";
pub const CGSF_VERSION: u8 = 1;

pub fn write_cgsf<W: Write>(field: &GaussianField, mut w: W) -> Result<()> {
    w.write_all(CGSF_MAGIC)?;
    w.write_u8(CGSF_VERSION)?;
    w.write_u32::<LittleEndian>(field.lr_width())?;
    w.write_u32::<LittleEndian>(field.lr_height())?;
    w.write_u32::<LittleEndian>(field.kernels_per_pixel())?;
    w.write_u64::<LittleEndian>(field.len() as u64)?;
    for k in field.kernels() {
        for v in [
            k.mu_x,
            k.mu_y,
            k.cov.var_x,
            k.cov.var_y,
            k.cov.cov_xy,
            k.color[0],
            k.color[1],
            k.color[2],
        ] {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn read_cgsf<R: Read>(mut r: R) -> Result<GaussianField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CGSF_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8()?;
    if version != CGSF_VERSION {
        return Err(Error::Format(format!("unsupported CGSF version {version}")));
    }
    let width = r.read_u32::<LittleEndian>()?;
    let height = r.read_u32::<LittleEndian>()?;
    let kpp = r.read_u32::<LittleEndian>()?;
    let n = r.read_u64::<LittleEndian>()?;
    // Refuse counts that cannot possibly be backed by data before allocating.
    if n > (u32::MAX as u64) {
        return Err(Error::Format(format!("kernel count {n} is implausible")));
    }
    let mut kernels = Vec::with_capacity(n as usize);
    let mut rec = [0f32; 8];
    for _ in 0..n {
        r.read_f32_into::<LittleEndian>(&mut rec)?;
        let v = rec.map(f64::from);
        kernels.push(GaussianKernel {
            mu_x: v[0],
            mu_y: v[1],
            cov: CovarianceParams {
                var_x: v[2],
                var_y: v[3],
                cov_xy: v[4],
            },
            color: [v[5], v[6], v[7]],
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after kernel records".into()));
    }
    GaussianField::new(kernels, width, height, kpp)
}

pub fn save_cgsf(field: &GaussianField, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cgsf(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_cgsf(path: impl AsRef<Path>) -> Result<GaussianField> {
    read_cgsf(BufReader::new(File::open(path)?))
}

pub fn cgsf_bytes(field: &GaussianField) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + field.len() * 32);
    write_cgsf(field, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// JSON mirror of a CGSF file, at full double precision.
#[derive(Debug, Serialize, Deserialize)]
pub struct FieldJson {
    pub format: String,
    pub version: u8,
    pub lr_width: u32,
    pub lr_height: u32,
    pub kernels_per_pixel: u32,
    pub kernels: Vec<GaussianKernel>,
}

pub fn field_to_json(field: &GaussianField) -> Result<String> {
    let doc = FieldJson {
        format: "CGSF".into(),
        version: CGSF_VERSION,
        lr_width: field.lr_width(),
        lr_height: field.lr_height(),
        kernels_per_pixel: field.kernels_per_pixel(),
        kernels: field.kernels().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn field_from_json(s: &str) -> Result<GaussianField> {
    let doc: FieldJson = serde_json::from_str(s)?;
    if doc.format != "CGSF" || doc.version != CGSF_VERSION {
        return Err(Error::Format(format!(
            "unexpected JSON field format {} v{}",
            doc.format, doc.version
        )));
    }
    GaussianField::new(doc.kernels, doc.lr_width, doc.lr_height, doc.kernels_per_pixel)
}

/// 64-bit FNV-1a, used for field checksums in reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
