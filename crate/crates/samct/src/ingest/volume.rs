//! 3D volume IO: minimal NIfTI-1 reader plus npy read/write.
//!
//! Volumes are held as C-order (d0, d1, d2) = (z, y, x) float arrays. NIfTI
//! stores x fastest, so a straight sequential read already yields that
//! layout. Only little-endian files are supported.

use std::io::Read;
use std::path::Path;

use crate::error::{Result, SamctError};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(SamctError::Data(format!(
                "volume buffer {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> SamctError {
    SamctError::Data(format!("{}: {msg}", path.display()))
}

/// Read a `.nii`, `.nii.gz`, or `.npy` volume.
pub fn read_volume(path: &Path) -> Result<Volume3> {
    let name = path.to_string_lossy().to_lowercase();
    let raw = std::fs::read(path).map_err(|e| SamctError::io(path.to_path_buf(), e))?;
    if name.ends_with(".nii.gz") {
        let mut decoder = flate2::read::GzDecoder::new(&raw[..]);
        let mut bytes = Vec::new();
        decoder
            .read_to_end(&mut bytes)
            .map_err(|e| data_err(path, format!("gzip: {e}")))?;
        read_nifti(path, &bytes)
    } else if name.ends_with(".nii") {
        read_nifti(path, &raw)
    } else if name.ends_with(".npy") {
        read_npy(path, &raw)
    } else {
        Err(data_err(path, "unsupported volume format (nii, nii.gz, npy)"))
    }
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}
fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}
fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_nifti(path: &Path, bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < 352 {
        return Err(data_err(path, "truncated NIfTI header"));
    }
    if le_i32(bytes, 0) != 348 {
        return Err(data_err(path, "not a little-endian NIfTI-1 file"));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(data_err(path, "only single-file NIfTI (magic n+1) supported"));
    }
    let ndim = le_i16(bytes, 40);
    if ndim < 3 {
        return Err(data_err(path, format!("volume must be 3D, got {ndim}D")));
    }
    let nx = le_i16(bytes, 42) as usize;
    let ny = le_i16(bytes, 44) as usize;
    let nz = le_i16(bytes, 46) as usize;
    for d in 4..=ndim as usize {
        let extent = le_i16(bytes, 40 + 2 * d);
        if extent > 1 {
            return Err(data_err(path, "4D+ volumes unsupported"));
        }
    }
    let datatype = le_i16(bytes, 70);
    let vox_offset = le_f32(bytes, 108) as usize;
    let scl_slope = le_f32(bytes, 112);
    let scl_inter = le_f32(bytes, 116);
    let n = nx * ny * nz;
    if n == 0 {
        return Err(data_err(path, "empty volume"));
    }
    let elem = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 768 | 16 => 4,
        64 => 8,
        other => return Err(data_err(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let body = bytes
        .get(vox_offset..vox_offset + n * elem)
        .ok_or_else(|| data_err(path, "truncated NIfTI data"))?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * elem;
        let v = match datatype {
            2 => body[off] as f32,
            256 => body[off] as i8 as f32,
            4 => le_i16(body, off) as f32,
            512 => u16::from_le_bytes([body[off], body[off + 1]]) as f32,
            8 => le_i32(body, off) as f32,
            768 => u32::from_le_bytes([body[off], body[off + 1], body[off + 2], body[off + 3]])
                as f32,
            16 => le_f32(body, off),
            64 => f64::from_le_bytes(body[off..off + 8].try_into().unwrap()) as f32,
            _ => unreachable!(),
        };
        data.push(if scl_slope != 0.0 {
            v * scl_slope + scl_inter
        } else {
            v
        });
    }
    // x varies fastest on disk, so sequential order is already (z, y, x).
    Volume3::new([nz, ny, nx], data)
}

fn read_npy(path: &Path, bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err(data_err(path, "not an npy file"));
    }
    let (header, body_off) = match bytes[6] {
        1 => {
            let len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            (&bytes[10..10 + len], 10 + len)
        }
        2 | 3 => {
            let len = le_i32(bytes, 8) as usize;
            (&bytes[12..12 + len], 12 + len)
        }
        v => return Err(data_err(path, format!("unsupported npy version {v}"))),
    };
    let header = std::str::from_utf8(header).map_err(|_| data_err(path, "bad npy header"))?;
    if header.contains("'fortran_order': True") {
        return Err(data_err(path, "fortran-order npy unsupported"));
    }
    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|s| s.split('\'').nth(1))
        .ok_or_else(|| data_err(path, "npy header missing descr"))?;
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| data_err(path, "npy header missing shape"))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| data_err(path, "bad npy shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(data_err(path, format!("volume must be 3D, got {}D", dims.len())));
    }
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(data_err(path, "empty volume"));
    }
    let elem = match descr {
        "|u1" => 1,
        "<i2" | "<u2" => 2,
        "<i4" | "<f4" => 4,
        "<f8" => 8,
        other => return Err(data_err(path, format!("unsupported npy dtype {other}"))),
    };
    let body = bytes
        .get(body_off..body_off + n * elem)
        .ok_or_else(|| data_err(path, "truncated npy data"))?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * elem;
        let v = match descr {
            "|u1" => body[off] as f32,
            "<i2" => le_i16(body, off) as f32,
            "<u2" => u16::from_le_bytes([body[off], body[off + 1]]) as f32,
            "<i4" => le_i32(body, off) as f32,
            "<f4" => le_f32(body, off),
            "<f8" => f64::from_le_bytes(body[off..off + 8].try_into().unwrap()) as f32,
            _ => unreachable!(),
        };
        data.push(v);
    }
    Volume3::new([dims[0], dims[1], dims[2]], data)
}

/// Write an f32 C-order npy volume (v1.0 header).
pub fn write_npy(path: &Path, vol: &Volume3) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        vol.shape[0], vol.shape[1], vol.shape[2]
    );
    let total = 10 + header.len() + 1;
    let pad = (64 - total % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + vol.data.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| SamctError::io(dir.to_path_buf(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| SamctError::io(path.to_path_buf(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.npy");
        let vol = Volume3::new([2, 3, 4], (0..24).map(|i| i as f32 - 5.0).collect()).unwrap();
        write_npy(&p, &vol).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn nifti_reader_parses_handmade_file() {
        // Hand-build a minimal int16 NIfTI: shape (x=2, y=3, z=2), slope 2.
        let mut hdr = vec![0u8; 352];
        hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
        hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
        hdr[42..44].copy_from_slice(&2i16.to_le_bytes()); // nx
        hdr[44..46].copy_from_slice(&3i16.to_le_bytes()); // ny
        hdr[46..48].copy_from_slice(&2i16.to_le_bytes()); // nz
        hdr[70..72].copy_from_slice(&4i16.to_le_bytes()); // int16
        hdr[72..74].copy_from_slice(&16i16.to_le_bytes()); // bitpix
        hdr[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
        hdr[112..116].copy_from_slice(&2f32.to_le_bytes()); // scl_slope
        hdr[116..120].copy_from_slice(&1f32.to_le_bytes()); // scl_inter
        hdr[344..348].copy_from_slice(b"n+1\0");
        for v in 0i16..12 {
            hdr.extend_from_slice(&v.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        std::fs::write(&p, &hdr).unwrap();
        let vol = read_volume(&p).unwrap();
        assert_eq!(vol.shape, [2, 3, 2]); // (z, y, x)
        assert_eq!(vol.get(0, 0, 0), 1.0); // 0*2+1
        assert_eq!(vol.get(0, 0, 1), 3.0); // x fastest
        assert_eq!(vol.get(1, 2, 1), 23.0); // last element 11*2+1
    }

    #[test]
    fn gzipped_nifti_reads() {
        let mut hdr = vec![0u8; 352];
        hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
        hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (off, n) in [(42, 1i16), (44, 1), (46, 1)] {
            hdr[off..off + 2].copy_from_slice(&n.to_le_bytes());
        }
        hdr[70..72].copy_from_slice(&16i16.to_le_bytes()); // f32
        hdr[108..112].copy_from_slice(&352f32.to_le_bytes());
        hdr[344..348].copy_from_slice(b"n+1\0");
        hdr.extend_from_slice(&7.5f32.to_le_bytes());
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        std::io::Write::write_all(&mut gz, &hdr).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii.gz");
        std::fs::write(&p, gz.finish().unwrap()).unwrap();
        let vol = read_volume(&p).unwrap();
        assert_eq!(vol.shape, [1, 1, 1]);
        assert_eq!(vol.data, vec![7.5]);
    }
}
