//! Native volume files and NIfTI-1 ingestion.
//!
//! The native format is one UTF-8 JSON header line followed by the raw
//! little-endian payload in C order (channel, H, W, D).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, BinaryMask, Spacing, Volume};
use crate::error::{Error, Result};

pub const NATIVE_MAGIC: &str = "SAT3DVOL1";

#[derive(Serialize, Deserialize)]
struct NativeHeader {
    magic: String,
    dtype: String,
    shape: [usize; 4],
    spacing: [f64; 3],
}

enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

struct Decoded {
    shape: [usize; 4],
    spacing: Spacing,
    payload: Payload,
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = native_header(v.shape(), v.spacing(), "f32le")?;
    bytes.reserve(v.data().len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path.as_ref(), &bytes)
}

pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let d = m.dims();
    let mut bytes = native_header([1, d[0], d[1], d[2]], m.spacing(), "u8")?;
    bytes.extend_from_slice(m.data());
    write_atomic(path.as_ref(), &bytes)
}

/// Encodes a volume in the native format, in memory.
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut bytes = native_header(v.shape(), v.spacing(), "f32le")?;
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    Ok(bytes)
}

pub fn encode_mask(m: &BinaryMask) -> Result<Vec<u8>> {
    let d = m.dims();
    let mut bytes = native_header([1, d[0], d[1], d[2]], m.spacing(), "u8")?;
    bytes.extend_from_slice(m.data());
    Ok(bytes)
}

fn native_header(shape: [usize; 4], spacing: Spacing, dtype: &str) -> Result<Vec<u8>> {
    let header = NativeHeader { magic: NATIVE_MAGIC.into(), dtype: dtype.into(), shape, spacing: spacing.as_array() };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a native or NIfTI-1 (`.nii`, optionally gzipped) volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path.as_ref())?)
}

/// Reads a label file; any value above 0.5 becomes foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&fs::read(path.as_ref())?)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let d = decode(bytes)?;
    let data = match d.payload {
        Payload::F32(v) => v,
        Payload::U8(v) => v.into_iter().map(f32::from).collect(),
    };
    Volume::new(d.shape, data, d.spacing)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let d = decode(bytes)?;
    if d.shape[0] != 1 {
        return Err(Error::Format(format!("masks have one channel, file has {}", d.shape[0])));
    }
    let data = match d.payload {
        Payload::F32(v) => v.into_iter().map(|x| (x > 0.5) as u8).collect(),
        Payload::U8(v) => v.into_iter().map(|x| (x > 0) as u8).collect(),
    };
    BinaryMask::new([d.shape[1], d.shape[2], d.shape[3]], data, d.spacing)
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        return nifti::decode(&raw);
    }
    if bytes.first() == Some(&b'{') {
        return decode_native(bytes);
    }
    nifti::decode(bytes)
}

fn decode_native(bytes: &[u8]) -> Result<Decoded> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("header line is not newline-terminated".into()))?;
    let header: NativeHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.magic != NATIVE_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    if header.shape.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in {:?}", header.shape)));
    }
    let spacing = Spacing::from_array(header.spacing);
    spacing.validate().map_err(|_| Error::Format(format!("invalid spacing {:?}", header.spacing)))?;
    let n = header.shape[0] * voxel_count([header.shape[1], header.shape[2], header.shape[3]]);
    let body = &bytes[nl + 1..];
    let payload = match header.dtype.as_str() {
        "f32le" => {
            if body.len() != n * 4 {
                return Err(Error::Integrity(format!("expected {} payload bytes, found {}", n * 4, body.len())));
            }
            Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        }
        "u8" => {
            if body.len() != n {
                return Err(Error::Integrity(format!("expected {n} payload bytes, found {}", body.len())));
            }
            Payload::U8(body.to_vec())
        }
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    };
    Ok(Decoded { shape: header.shape, spacing, payload })
}

mod nifti {
    //! Single-file NIfTI-1 reader. Output axes are permuted and flipped so
    //! voxel axes run along +x, +y, +z of the scanner frame (RAS).

    use super::{Decoded, Payload};
    use crate::error::{Error, Result};
    use crate::volgrid::Spacing;

    const HEADER_LEN: usize = 348;

    struct Reader<'a> {
        b: &'a [u8],
        le: bool,
    }

    impl Reader<'_> {
        fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
            let mut a = [0u8; N];
            a.copy_from_slice(&self.b[off..off + N]);
            if !self.le {
                a.reverse();
            }
            a
        }
        fn i16(&self, off: usize) -> i16 {
            i16::from_le_bytes(self.bytes(off))
        }
        fn f32(&self, off: usize) -> f32 {
            f32::from_le_bytes(self.bytes(off))
        }
    }

    pub(super) fn decode(b: &[u8]) -> Result<Decoded> {
        if b.len() < HEADER_LEN {
            return Err(Error::Format("file too short for a NIfTI-1 header".into()));
        }
        let le = match (i32::from_le_bytes([b[0], b[1], b[2], b[3]]), i32::from_be_bytes([b[0], b[1], b[2], b[3]])) {
            (348, _) => true,
            (_, 348) => false,
            _ => return Err(Error::Format("unrecognised file: neither native header nor NIfTI-1".into())),
        };
        if &b[344..347] != b"n+1" {
            return Err(Error::Format("only single-file NIfTI-1 (n+1) is supported".into()));
        }
        let r = Reader { b, le };
        let ndim = r.i16(40);
        if !(1..=7).contains(&ndim) {
            return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
        }
        let mut dim = [1usize; 7];
        for (a, d) in dim.iter_mut().enumerate().take(ndim as usize) {
            let v = r.i16(42 + 2 * a);
            if v < 1 {
                return Err(Error::Format(format!("dim[{}] = {v}", a + 1)));
            }
            *d = v as usize;
        }
        if dim[4..].iter().skip(1).any(|&d| d != 1) {
            return Err(Error::Format("volumes beyond 4-D are not supported".into()));
        }
        let datatype = r.i16(70);
        let pixdim: Vec<f32> = (0..8).map(|a| r.f32(76 + 4 * a)).collect();
        let vox_offset = r.f32(108);
        let (slope, inter) = (r.f32(112), r.f32(116));
        let qform_code = r.i16(252);
        let sform_code = r.i16(254);

        let spacing_raw = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, pixdim[3].abs() as f64];
        let affine = if sform_code > 0 {
            let mut m = [[0.0f64; 3]; 3];
            for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
                for (col, v) in m[row].iter_mut().enumerate() {
                    *v = r.f32(base + 4 * col) as f64;
                }
            }
            m
        } else if qform_code > 0 {
            let (qb, qc, qd) = (r.f32(256) as f64, r.f32(260) as f64, r.f32(264) as f64);
            let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
            let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let rot = [
                [qa * qa + qb * qb - qc * qc - qd * qd, 2.0 * (qb * qc - qa * qd), 2.0 * (qb * qd + qa * qc)],
                [2.0 * (qb * qc + qa * qd), qa * qa + qc * qc - qb * qb - qd * qd, 2.0 * (qc * qd - qa * qb)],
                [2.0 * (qb * qd - qa * qc), 2.0 * (qc * qd + qa * qb), qa * qa + qd * qd - qb * qb - qc * qc],
            ];
            let scale = [spacing_raw[0], spacing_raw[1], qfac * spacing_raw[2]];
            let mut m = [[0.0; 3]; 3];
            for row in 0..3 {
                for col in 0..3 {
                    m[row][col] = rot[row][col] * scale[col];
                }
            }
            m
        } else {
            [[spacing_raw[0], 0.0, 0.0], [0.0, spacing_raw[1], 0.0], [0.0, 0.0, spacing_raw[2]]]
        };
        let (perm, flip) = orientation(&affine);

        let spacing = Spacing::from_array([spacing_raw[perm[0]], spacing_raw[perm[1]], spacing_raw[perm[2]]]);
        spacing.validate().map_err(|_| Error::Format(format!("invalid pixdim {:?}", &pixdim[1..4])))?;

        let (nx, ny, nz, nt) = (dim[0], dim[1], dim[2], dim[3]);
        let n = nx * ny * nz * nt;
        let elem = match datatype {
            2 | 256 => 1,
            4 | 512 => 2,
            8 | 16 | 768 => 4,
            64 => 8,
            other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
        };
        let start = vox_offset.max(HEADER_LEN as f32) as usize;
        let body = b.get(start..).unwrap_or(&[]);
        if body.len() < n * elem {
            return Err(Error::Integrity(format!("header declares {} data bytes, file holds {}", n * elem, body.len())));
        }
        let raw: Vec<f64> = body[..n * elem]
            .chunks_exact(elem)
            .map(|c| {
                let mut a = [0u8; 8];
                a[..elem].copy_from_slice(c);
                if !le {
                    a[..elem].reverse();
                }
                match datatype {
                    2 => a[0] as f64,
                    256 => a[0] as i8 as f64,
                    4 => i16::from_le_bytes([a[0], a[1]]) as f64,
                    512 => u16::from_le_bytes([a[0], a[1]]) as f64,
                    8 => i32::from_le_bytes([a[0], a[1], a[2], a[3]]) as f64,
                    768 => u32::from_le_bytes([a[0], a[1], a[2], a[3]]) as f64,
                    16 => f32::from_le_bytes([a[0], a[1], a[2], a[3]]) as f64,
                    _ => f64::from_le_bytes(a),
                }
            })
            .collect();
        let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);

        // NIfTI stores x fastest; we emit (c, i, j, k) with k fastest after
        // reorientation.
        let src_dims = [nx, ny, nz];
        let out_dims = [src_dims[perm[0]], src_dims[perm[1]], src_dims[perm[2]]];
        let mut out = vec![0f32; n];
        let mut o = 0;
        for c in 0..nt {
            for i in 0..out_dims[0] {
                for j in 0..out_dims[1] {
                    for k in 0..out_dims[2] {
                        let mut src = [0usize; 3];
                        for (axis, idx) in [i, j, k].into_iter().enumerate() {
                            let p = perm[axis];
                            src[p] = if flip[axis] { src_dims[p] - 1 - idx } else { idx };
                        }
                        let mut v = raw[src[0] + nx * (src[1] + ny * (src[2] + nz * c))];
                        if scaled {
                            v = v * slope as f64 + inter as f64;
                        }
                        out[o] = v as f32;
                        o += 1;
                    }
                }
            }
        }
        let payload = if datatype == 2 && !scaled {
            Payload::U8(out.iter().map(|&v| v as u8).collect())
        } else {
            Payload::F32(out)
        };
        Ok(Decoded { shape: [nt, out_dims[0], out_dims[1], out_dims[2]], spacing, payload })
    }

    /// For each output (world) axis, the source voxel axis feeding it and
    /// whether it runs backwards.
    fn orientation(m: &[[f64; 3]; 3]) -> ([usize; 3], [bool; 3]) {
        let mut perm = [usize::MAX; 3];
        let mut flip = [false; 3];
        let mut used = [false; 3];
        // Assign voxel axes greedily by largest absolute direction cosine.
        let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(9);
        for (row, r) in m.iter().enumerate() {
            for (col, v) in r.iter().enumerate() {
                cells.push((v.abs(), row, col));
            }
        }
        cells.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (_, row, col) in cells {
            if perm[row] == usize::MAX && !used[col] {
                perm[row] = col;
                used[col] = true;
                flip[row] = m[row][col] < 0.0;
            }
        }
        (perm, flip)
    }
}
