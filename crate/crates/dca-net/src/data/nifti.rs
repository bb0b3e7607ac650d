//! Minimal NIfTI-1 volume I/O: single-file `.nii` / `.nii.gz`, 3-D volumes,
//! the common scalar datatypes, optional byte-swapped (foreign-endian)
//! headers, and slope/intercept intensity scaling. Enough to ingest
//! multi-site segmentation datasets; deliberately not a general library.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const SIZEOF_HDR: i32 = 348;
/// Single-file magic "n+1\0".
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
/// Header+data-pair magic "ni1\0" (data expected in the same byte stream).
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Per-axis and total size caps; reject absurd headers before allocating.
const MAX_AXIS: i16 = 4096;
const MAX_VOXELS: u64 = 1 << 28;

struct Cursor<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> Cursor<'a> {
    fn get(&self, off: usize, len: usize) -> Result<&'a [u8]> {
        self.bytes
            .get(off..off + len)
            .ok_or_else(|| Error::Data("truncated NIfTI header".into()))
    }
    fn i16(&self, off: usize) -> Result<i16> {
        let b = self.get(off, 2)?;
        let v = i16::from_le_bytes([b[0], b[1]]);
        Ok(if self.swap { v.swap_bytes() } else { v })
    }
    fn i32(&self, off: usize) -> Result<i32> {
        let b = self.get(off, 4)?;
        let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        Ok(if self.swap { v.swap_bytes() } else { v })
    }
    fn f32(&self, off: usize) -> Result<f32> {
        Ok(f32::from_bits(self.i32(off)? as u32))
    }
}

/// Parse a complete NIfTI-1 byte stream (already decompressed) into a
/// volume in (Z, Y, X) axis order plus voxel spacing in millimetres.
pub fn parse_nifti(bytes: &[u8]) -> Result<(Array3<f32>, (f64, f64, f64))> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Data(format!(
            "NIfTI file too short: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let mut cur = Cursor { bytes, swap: false };
    let sizeof_hdr = cur.i32(0)?;
    if sizeof_hdr != SIZEOF_HDR {
        if sizeof_hdr.swap_bytes() == SIZEOF_HDR {
            cur.swap = true;
        } else {
            return Err(Error::Data(format!(
                "not a NIfTI-1 file (sizeof_hdr = {sizeof_hdr})"
            )));
        }
    }
    let magic: [u8; 4] = cur.get(344, 4)?.try_into().expect("length 4");
    if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
        return Err(Error::Data(format!(
            "unsupported NIfTI magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }

    let ndim = cur.i16(40)?;
    if !(1..=7).contains(&ndim) {
        return Err(Error::Data(format!("invalid NIfTI dimension count {ndim}")));
    }
    let mut dims = [1i16; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        *d = cur.i16(42 + 2 * i)?;
        if *d < 1 || *d > MAX_AXIS {
            return Err(Error::Data(format!("NIfTI axis {} has size {d:?}", i + 1, d = *d)));
        }
    }
    // 3-D volumes only; trailing singleton axes (e.g. a time axis of 1) are
    // tolerated.
    if ndim > 3 && dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Data(format!(
            "only 3-D volumes are supported, got dims {:?}",
            &dims[..ndim as usize]
        )));
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let voxels = (nx as u64) * (ny as u64) * (nz as u64);
    if voxels == 0 || voxels > MAX_VOXELS {
        return Err(Error::Data(format!("implausible volume of {voxels} voxels")));
    }

    let datatype = cur.i16(70)?;
    let bitpix = cur.i16(72)?;
    let elem = match (datatype, bitpix) {
        (DT_UINT8, 8) => 1usize,
        (DT_INT16, 16) => 2,
        (DT_INT32, 32) | (DT_FLOAT32, 32) => 4,
        (DT_FLOAT64, 64) => 8,
        _ => {
            return Err(Error::Data(format!(
                "unsupported NIfTI datatype {datatype} / bitpix {bitpix}"
            )));
        }
    };

    let sx = cur.f32(76 + 4)?;
    let sy = cur.f32(76 + 8)?;
    let sz = cur.f32(76 + 12)?;
    for s in [sx, sy, sz] {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Data(format!("invalid voxel spacing {s}")));
        }
    }

    let vox_offset = cur.f32(108)?;
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Data(format!("invalid vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let needed = voxels as usize * elem;
    let data = bytes
        .get(offset..offset + needed)
        .ok_or_else(|| Error::Data(format!("truncated NIfTI data: need {needed} bytes")))?;

    let mut slope = cur.f32(112)?;
    let mut inter = cur.f32(116)?;
    if slope == 0.0 || !slope.is_finite() || !inter.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }

    let swap = cur.swap;
    let raw: Vec<f32> = match datatype {
        DT_UINT8 => data.iter().map(|&b| b as f32).collect(),
        DT_INT16 => data
            .chunks_exact(2)
            .map(|c| {
                let v = i16::from_le_bytes([c[0], c[1]]);
                (if swap { v.swap_bytes() } else { v }) as f32
            })
            .collect(),
        DT_INT32 => data
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                (if swap { v.swap_bytes() } else { v }) as f32
            })
            .collect(),
        DT_FLOAT32 => data
            .chunks_exact(4)
            .map(|c| {
                let v = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                f32::from_bits(if swap { v.swap_bytes() } else { v })
            })
            .collect(),
        DT_FLOAT64 => data
            .chunks_exact(8)
            .map(|c| {
                let v = u64::from_le_bytes(c.try_into().expect("chunk of 8"));
                f64::from_bits(if swap { v.swap_bytes() } else { v }) as f32
            })
            .collect(),
        _ => unreachable!("datatype validated above"),
    };
    let scaled: Vec<f32> =
        raw.into_iter().map(|v| v * slope + inter).collect();

    // NIfTI stores x fastest; (Z, Y, X) C-order has the same linear layout.
    let volume = Array3::from_shape_vec((nz, ny, nx), scaled)
        .expect("length checked against dims");
    Ok((volume, (sz as f64, sy as f64, sx as f64)))
}

/// Read a `.nii` or `.nii.gz` volume from disk.
pub fn read_nifti(path: &Path) -> Result<(Array3<f32>, (f64, f64, f64))> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip decode failed: {e}", path.display())))?;
        out
    } else {
        bytes
    };
    parse_nifti(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Read a NIfTI mask and coerce it to binary, rejecting other label values.
pub fn read_nifti_mask(path: &Path) -> Result<(Array3<u8>, (f64, f64, f64))> {
    let (vol, spacing) = read_nifti(path)?;
    let mut mask = Array3::<u8>::zeros(vol.dim());
    for (m, &v) in mask.iter_mut().zip(vol.iter()) {
        *m = if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else {
            return Err(Error::Data(format!(
                "{}: non-binary label value {v}",
                path.display()
            )));
        };
    }
    Ok((mask, spacing))
}

/// Write a float32 single-file NIfTI-1 volume ((Z, Y, X) input order);
/// gzip-compresses when the path ends in `.gz`.
pub fn write_nifti(path: &Path, volume: &Array3<f32>, spacing: (f64, f64, f64)) -> Result<()> {
    let (nz, ny, nx) = volume.dim();
    let mut header = vec![0u8; 352];
    header[0..4].copy_from_slice(&SIZEOF_HDR.to_le_bytes());
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    header[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pixdim: [f32; 8] =
        [1.0, spacing.2 as f32, spacing.1 as f32, spacing.0 as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    header[344..348].copy_from_slice(&MAGIC_SINGLE);

    let mut bytes = header;
    bytes.reserve(volume.len() * 4);
    for &v in volume.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if path.extension().is_some_and(|e| e == "gz") {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        bytes = enc.finish().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample_volume() -> (Array3<f32>, (f64, f64, f64)) {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..3 * 4 * 5).map(|_| rng.gen_range(-10.0..10.0)).collect();
        (Array3::from_shape_vec((3, 4, 5), data).unwrap(), (3.0, 0.5, 0.25))
    }

    #[test]
    fn float32_round_trip() {
        let (vol, spacing) = sample_volume();
        let dir = tempfile::tempdir().unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            write_nifti(&path, &vol, spacing).unwrap();
            let (back, sp) = read_nifti(&path).unwrap();
            assert_eq!(back.dim(), vol.dim());
            for (a, b) in vol.iter().zip(back.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
            assert!((sp.0 - spacing.0).abs() < 1e-6);
            assert!((sp.2 - spacing.2).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_order_is_zyx() {
        // A volume whose value encodes its (z, y, x) index must survive the
        // round trip with indices intact.
        let mut vol = Array3::<f32>::zeros((2, 3, 4));
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    vol[(z, y, x)] = (100 * z + 10 * y + x) as f32;
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.nii");
        write_nifti(&path, &vol, (1.0, 1.0, 1.0)).unwrap();
        let (back, _) = read_nifti(&path).unwrap();
        assert_eq!(back[(1, 2, 3)], 123.0);
        assert_eq!(back[(0, 1, 0)], 10.0);
    }

    #[test]
    fn byte_swapped_header_is_understood() {
        let (vol, spacing) = sample_volume();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_nifti(&path, &vol, spacing).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Swap every multi-byte header field this reader touches, plus the
        // voxel data, emulating a big-endian writer.
        let swap4 = |b: &mut [u8], off: usize| b[off..off + 4].reverse();
        let swap2 = |b: &mut [u8], off: usize| b[off..off + 2].reverse();
        swap4(&mut bytes, 0);
        for i in 0..8 {
            swap2(&mut bytes, 40 + 2 * i);
        }
        swap2(&mut bytes, 70);
        swap2(&mut bytes, 72);
        for i in 0..8 {
            swap4(&mut bytes, 76 + 4 * i);
        }
        swap4(&mut bytes, 108);
        swap4(&mut bytes, 112);
        swap4(&mut bytes, 116);
        for i in 0..vol.len() {
            swap4(&mut bytes, 352 + 4 * i);
        }
        let swapped = dir.path().join("swapped.nii");
        std::fs::write(&swapped, &bytes).unwrap();
        let (back, sp) = read_nifti(&swapped).unwrap();
        for (a, b) in vol.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!((sp.0 - spacing.0).abs() < 1e-6);
    }

    #[test]
    fn slope_intercept_scaling_applies() {
        let (vol, spacing) = sample_volume();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_nifti(&path, &vol, spacing).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&5.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let (back, _) = read_nifti(&path).unwrap();
        for (a, b) in vol.iter().zip(back.iter()) {
            assert!((a * 2.0 + 5.0 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn garbage_and_truncation_error_cleanly() {
        assert!(parse_nifti(b"").is_err());
        assert!(parse_nifti(&[0u8; 100]).is_err());
        assert!(parse_nifti(&[0u8; 348]).is_err());
        let (vol, spacing) = sample_volume();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_nifti(&path, &vol, spacing).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(parse_nifti(&bytes[..bytes.len() - 8]).is_err());
        // Absurd axis sizes are rejected before allocation.
        let mut evil = bytes.clone();
        evil[42..44].copy_from_slice(&i16::MAX.to_le_bytes());
        assert!(parse_nifti(&evil).is_err());
    }

    #[test]
    fn mask_reader_enforces_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii");
        let mut mask = Array3::<f32>::zeros((2, 4, 4));
        mask[(0, 1, 1)] = 1.0;
        write_nifti(&path, &mask, (1.0, 1.0, 1.0)).unwrap();
        let (m, _) = read_nifti_mask(&path).unwrap();
        assert_eq!(m[(0, 1, 1)], 1);
        assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), 1);

        mask[(0, 2, 2)] = 3.0;
        write_nifti(&path, &mask, (1.0, 1.0, 1.0)).unwrap();
        assert!(read_nifti_mask(&path).is_err());
    }

    #[test]
    fn int16_datatype_is_read() {
        // Hand-build an int16 file.
        let mut header = vec![0u8; 352];
        header[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dims: [i16; 8] = [3, 2, 2, 2, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        header[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        header[72..74].copy_from_slice(&16i16.to_le_bytes());
        for i in 0..4 {
            header[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
        }
        header[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        header[344..348].copy_from_slice(&MAGIC_SINGLE);
        for v in [-3i16, 0, 7, 100, -100, 5, 1, 2] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        let (vol, _) = parse_nifti(&header).unwrap();
        assert_eq!(vol[(0, 0, 0)], -3.0);
        assert_eq!(vol[(0, 1, 1)], 100.0);
        assert_eq!(vol[(1, 1, 1)], 2.0);
    }
}
