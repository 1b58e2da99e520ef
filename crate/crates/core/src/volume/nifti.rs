//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reads u8, i16 and f32 payloads in either byte order; always writes a
//! little-endian float32 file with `vox_offset = 352` and the affine stored
//! in the sform rows.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector4};

use super::{DiskDtype, Volume3D};
use crate::error::{Error, Result};

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_VOX_OFFSET: usize = 352;

const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderView<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderView<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if let Endian::Big = self.endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.raw(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Read a NIfTI-1 volume, converting the payload to `f32` and applying
/// `scl_slope`/`scl_inter` when the slope is nonzero.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if is_gzip(&raw) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Corrupt(format!("{}: gzip stream: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_volume(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_volume(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::Format(format!(
            "file has {} bytes, header needs {NIFTI_HEADER_SIZE}",
            bytes.len()
        )));
    }
    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    if magic == MAGIC_PAIR {
        return Err(Error::Unsupported("detached .hdr/.img pairs".into()));
    }

    let le = HeaderView { bytes, endian: Endian::Little };
    let be = HeaderView { bytes, endian: Endian::Big };
    let h = if (1..=7).contains(&le.i16(40)) {
        le
    } else if (1..=7).contains(&be.i16(40)) {
        be
    } else {
        return Err(Error::Format("dim[0] outside 1..=7 in either byte order".into()));
    };
    let sizeof_hdr = h.i32(0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        return Err(Error::Format(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
    }

    let ndim = h.i16(40) as usize;
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3)) {
        let n = h.i16(42 + 2 * a);
        if n < 1 {
            return Err(Error::Format(format!("dim[{}] = {n}", a + 1)));
        }
        *d = n as usize;
    }
    for a in 3..ndim {
        let n = h.i16(42 + 2 * a);
        if n > 1 {
            return Err(Error::Unsupported(format!("{ndim}-D image with dim[{}] = {n}", a + 1)));
        }
    }

    let code = h.i16(70);
    let dtype = DiskDtype::from_nifti_code(code)
        .ok_or_else(|| Error::Unsupported(format!("datatype code {code}")))?;

    let pixdim: [f32; 8] = std::array::from_fn(|i| h.f32(76 + 4 * i));
    let spacing: [f64; 3] = std::array::from_fn(|a| {
        let s = pixdim[a + 1].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });

    let vox_offset = h.f32(108);
    if !(vox_offset >= NIFTI_HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset = {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let need = vox_offset + n * dtype.bytes();
    if bytes.len() < need {
        return Err(Error::Corrupt(format!(
            "payload truncated: have {} bytes, need {need}",
            bytes.len()
        )));
    }

    let slope = h.f32(112);
    let inter = h.f32(116);
    let payload = &bytes[vox_offset..need];
    let pv = HeaderView { bytes: payload, endian: h.endian };
    let mut data: Vec<f32> = match dtype {
        DiskDtype::U8 => payload.iter().map(|&b| b as f32).collect(),
        DiskDtype::I16 => (0..n).map(|i| pv.i16(2 * i) as f32).collect(),
        DiskDtype::F32 => (0..n).map(|i| pv.f32(4 * i)).collect(),
    };
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for x in &mut data {
            *x = *x * slope + inter;
        }
    }
    let mut non_finite = 0usize;
    for x in &mut data {
        if !x.is_finite() {
            *x = 0.0;
            non_finite += 1;
        }
    }
    if non_finite > 0 {
        log::warn!("replaced {non_finite} non-finite voxels with 0");
    }

    let affine = header_affine(&h, &pixdim, spacing);
    if affine.fixed_view::<3, 3>(0, 0).determinant() == 0.0 {
        return Err(Error::Format("affine is singular".into()));
    }
    Ok(Volume3D::from_parts_unchecked(dims, spacing, affine, data, dtype))
}

/// sform when present, then qform, then a bare pixdim scaling.
fn header_affine(h: &HeaderView<'_>, pixdim: &[f32; 8], spacing: [f64; 3]) -> Matrix4<f64> {
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = h.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        return m;
    }
    if qform_code > 0 {
        let b = h.f32(256) as f64;
        let c = h.f32(260) as f64;
        let d = h.f32(264) as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d)).to_rotation_matrix();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
            spacing[0],
            spacing[1],
            spacing[2] * qfac,
        ));
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rot.matrix() * scale));
        m[(0, 3)] = h.f32(268) as f64;
        m[(1, 3)] = h.f32(272) as f64;
        m[(2, 3)] = h.f32(276) as f64;
        return m;
    }
    Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0))
}

/// Serialize `v` as a single-file little-endian float32 NIfTI-1 image.
pub(crate) fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put = |h: &mut [u8], off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // regular
    let dims = v.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &DiskDtype::F32.nifti_code().to_le_bytes());
    put(&mut h, 72, &32i16.to_le_bytes());
    let sp = v.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(NIFTI_VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    h[123] = 2; // xyzt_units: mm
    let (lo, hi) = v.min_max();
    put(&mut h, 124, &hi.to_le_bytes()); // cal_max
    put(&mut h, 128, &lo.to_le_bytes()); // cal_min
    put(&mut h, 254, &1i16.to_le_bytes()); // sform_code: scanner
    let a = v.affine();
    for r in 0..3 {
        for c in 0..4 {
            put(&mut h, 280 + 16 * r + 4 * c, &(a[(r, c)] as f32).to_le_bytes());
        }
    }
    put(&mut h, 344, MAGIC_SINGLE);

    let mut out = h;
    out.reserve(v.len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Write `v`, gzip-compressing when the path ends in `.gz`.
pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let gz = path.extension().is_some_and(|e| e == "gz");
    write_volume_with(v, path, gz)
}

pub fn write_volume_with(v: &Volume3D, path: impl AsRef<Path>, gzip: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = if gzip {
        // default GzBuilder header has mtime 0, so output bytes are reproducible
        let mut enc = GzEncoder::new(w, Compression::new(6));
        enc.write_all(&bytes)
            .and_then(|_| enc.finish())
            .and_then(|mut inner| inner.flush())
    } else {
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}
