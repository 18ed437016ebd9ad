//! Minimal NIfTI-1 single-file reader/writer.
//!
//! Little-endian only, 3D volumes, datatypes uint8 / int16 / float32.
//! Gzip containers are detected by the 0x1F 0x8B prefix.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume, Tissue};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn read_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}

fn read_i32(buf: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn read_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Parsed {
    dims: (usize, usize, usize),
    voxel_size: (f32, f32, f32),
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn parse_header(buf: &[u8]) -> Result<Parsed> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format("file shorter than NIfTI-1 header".into()));
    }
    if read_i32(buf, 0) != 348 {
        return Err(Error::Format("sizeof_hdr != 348".into()));
    }
    if &buf[344..348] != MAGIC {
        return Err(Error::Format("magic is not \"n+1\\0\"".into()));
    }
    let ndim = read_i16(buf, 40);
    if ndim != 3 {
        return Err(Error::Dimension(format!("dim[0] = {ndim}, only 3D supported")));
    }
    let nx = read_i16(buf, 42);
    let ny = read_i16(buf, 44);
    let nz = read_i16(buf, 46);
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(Error::Dimension("non-positive dimension".into()));
    }
    let datatype = read_i16(buf, 70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_FLOAT32) {
        return Err(Error::Unsupported(format!("datatype code {datatype}")));
    }
    let dx = read_f32(buf, 80);
    let dy = read_f32(buf, 84);
    let dz = read_f32(buf, 88);
    let vox_offset = read_f32(buf, 108);
    if vox_offset < DATA_OFFSET as f32 {
        return Err(Error::Format(format!("vox_offset {vox_offset} < 352")));
    }
    Ok(Parsed {
        dims: (nx as usize, ny as usize, nz as usize),
        voxel_size: (dx, dy, dz),
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: read_f32(buf, 112),
        scl_inter: read_f32(buf, 116),
    })
}

/// Load a NIfTI-1 single-file volume as real-valued intensities.
///
/// Integer payloads are converted without rescaling unless the header sets
/// scl_slope != 0, in which case value = raw * scl_slope + scl_inter.
pub fn load_volume(path: &Path) -> Result<ScalarVolume> {
    let buf = read_file(path)?;
    let hdr = parse_header(&buf)?;
    let n = hdr.dims.0 * hdr.dims.1 * hdr.dims.2;
    let bytes_per = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let need = hdr.vox_offset + n * bytes_per;
    if buf.len() < need {
        return Err(Error::Format(format!("payload truncated: have {} bytes, need {need}", buf.len())));
    }
    let payload = &buf[hdr.vox_offset..need];
    let mut data = Vec::with_capacity(n);
    match hdr.datatype {
        DT_UINT8 => data.extend(payload.iter().map(|&b| b as f32)),
        DT_INT16 => {
            for c in payload.chunks_exact(2) {
                data.push(i16::from_le_bytes([c[0], c[1]]) as f32);
            }
        }
        _ => {
            for c in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
        }
    }
    if hdr.scl_slope != 0.0 {
        for v in &mut data {
            *v = *v * hdr.scl_slope + hdr.scl_inter;
        }
    }
    ScalarVolume::new(hdr.dims, hdr.voxel_size, data)
}

/// Load a label volume (uint8 payload with the fixed tissue code table).
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let vol = load_volume(path)?;
    let data: Result<Vec<u8>> = vol
        .data
        .iter()
        .map(|&v| {
            let c = v as u8;
            if v != c as f32 || Tissue::from_code(c).is_none() {
                Err(Error::Validation(format!("value {v} is not a tissue code")))
            } else {
                Ok(c)
            }
        })
        .collect();
    LabelVolume::new(vol.dims, data?)
}

fn build_header(dims: (usize, usize, usize), voxel_size: (f32, f32, f32), datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(dims.0 as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(dims.1 as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(dims.2 as i16).to_le_bytes());
    for k in 4..8 {
        h[40 + 2 * k..42 + 2 * k].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    h[80..84].copy_from_slice(&voxel_size.0.to_le_bytes());
    h[84..88].copy_from_slice(&voxel_size.1.to_le_bytes());
    h[88..92].copy_from_slice(&voxel_size.2.to_le_bytes());
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().map(|e| e == "gz").unwrap_or(false);
    let mut f = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(&mut f, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Save a scalar volume as float32.
pub fn save_volume(vol: &ScalarVolume, path: &Path) -> Result<()> {
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("volume contains non-finite values".into()));
    }
    let mut bytes = build_header(vol.dims, vol.voxel_size, DT_FLOAT32, 32);
    bytes.reserve(vol.data.len() * 4);
    for &v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Save a label volume as uint8.
pub fn save_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let mut bytes = build_header(labels.dims, (1.0, 1.0, 1.0), DT_UINT8, 8);
    bytes.extend_from_slice(&labels.data);
    write_file(path, &bytes)
}
