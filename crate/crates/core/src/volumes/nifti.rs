//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only the voxel grid is kept: orientation, spacing and extensions are
//! dropped on read and written as an identity frame with unit spacing.
//! NIfTI stores the first axis fastest; on read it becomes axis 0 of the
//! in-memory grid so that a file with `dim = (144, 192, 160)` loads as a
//! volume of shape `(144, 192, 160)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{voxel_count, LabelMap, Shape3, Volume};
use crate::error::{Error, Result};
use crate::field_algebra::DisplacementField;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

/// `NIFTI_INTENT_VECTOR`
const INTENT_VECTOR: i16 = 1007;

/// The header fields this crate reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub intent_code: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
}

impl NiftiHeader {
    fn for_grid(dims: &[usize], datatype: i16, bitpix: i16, descrip: &str) -> Result<Self> {
        let mut dim = [1i16; 8];
        dim[0] = dims.len() as i16;
        for (slot, &n) in dim[1..].iter_mut().zip(dims) {
            *slot = i16::try_from(n)
                .map_err(|_| Error::Nifti(format!("axis length {n} exceeds the NIfTI-1 limit")))?;
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[0] = 1.0;
        Ok(Self {
            dim,
            datatype,
            bitpix,
            intent_code: 0,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            descrip: descrip.to_string(),
        })
    }

    /// Axis lengths `dim[1..=dim[0]]`.
    pub fn shape(&self) -> Vec<usize> {
        let n = self.dim[0].clamp(0, 7) as usize;
        self.dim[1..=n].iter().map(|&d| d.max(0) as usize).collect()
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = vec![0u8; DATA_OFFSET];
        LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
        buf[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            LittleEndian::write_i16(&mut buf[40 + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut buf[68..], self.intent_code);
        LittleEndian::write_i16(&mut buf[70..], self.datatype);
        LittleEndian::write_i16(&mut buf[72..], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut buf[76 + 4 * i..], *p);
        }
        LittleEndian::write_f32(&mut buf[108..], self.vox_offset);
        LittleEndian::write_f32(&mut buf[112..], self.scl_slope);
        LittleEndian::write_f32(&mut buf[116..], self.scl_inter);
        // xyzt_units: mm, s
        buf[123] = 2 | 8;
        let descrip = self.descrip.as_bytes();
        let n = descrip.len().min(79);
        buf[148..148 + n].copy_from_slice(&descrip[..n]);
        // sform_code = 1 with an identity scanner frame
        LittleEndian::write_i16(&mut buf[254..], 1);
        for (row, base) in [280usize, 296, 312].iter().enumerate() {
            LittleEndian::write_f32(&mut buf[base + 4 * row..], 1.0);
        }
        buf[344..348].copy_from_slice(b"n+1\0");
        buf
    }

    fn decode(raw: &[u8]) -> Result<(Self, bool)> {
        if raw.len() < HEADER_SIZE {
            return Err(Error::Nifti("truncated header".into()));
        }
        let big_endian = if LittleEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
            false
        } else if BigEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
            true
        } else {
            return Err(Error::Nifti("bad sizeof_hdr".into()));
        };
        if &raw[344..347] != b"n+1" {
            return Err(Error::Nifti("only single-file NIfTI-1 (n+1) is supported".into()));
        }
        let i16_at = |o: usize| {
            if big_endian {
                BigEndian::read_i16(&raw[o..])
            } else {
                LittleEndian::read_i16(&raw[o..])
            }
        };
        let f32_at = |o: usize| {
            if big_endian {
                BigEndian::read_f32(&raw[o..])
            } else {
                LittleEndian::read_f32(&raw[o..])
            }
        };
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = i16_at(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(76 + 4 * i);
        }
        let descrip_raw = &raw[148..228];
        let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
        let header = Self {
            dim,
            datatype: i16_at(70),
            bitpix: i16_at(72),
            intent_code: i16_at(68),
            pixdim,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
        };
        if !(1..=7).contains(&header.dim[0]) {
            return Err(Error::Nifti(format!("dim[0] = {} out of range", header.dim[0])));
        }
        Ok((header, big_endian))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut inflated)
            .map_err(|e| Error::io(path, e))?;
        Ok(inflated)
    } else {
        Ok(raw)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

/// Decoded header plus voxel values in file (first-axis-fastest) order.
fn read_nifti(path: &Path) -> Result<(NiftiHeader, Vec<f64>)> {
    let raw = read_file(path)?;
    let (header, big_endian) = NiftiHeader::decode(&raw)?;
    let count: usize = header.shape().iter().product();
    let width = match header.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 | DT_UINT64 => 8,
        other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    };
    let offset = header.vox_offset.max(HEADER_SIZE as f32) as usize;
    let bytes = raw
        .get(offset..offset + count * width)
        .ok_or_else(|| Error::Nifti("voxel data shorter than header dims".into()))?;
    macro_rules! decode {
        ($read:ident) => {
            if big_endian {
                bytes.chunks_exact(width).map(|c| BigEndian::$read(c) as f64).collect()
            } else {
                bytes.chunks_exact(width).map(|c| LittleEndian::$read(c) as f64).collect()
            }
        };
    }
    let mut values: Vec<f64> = match header.datatype {
        DT_UINT8 => bytes.iter().map(|&b| b as f64).collect(),
        DT_INT8 => bytes.iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => decode!(read_i16),
        DT_UINT16 => decode!(read_u16),
        DT_INT32 => decode!(read_i32),
        DT_UINT32 => decode!(read_u32),
        DT_FLOAT32 => decode!(read_f32),
        DT_FLOAT64 => decode!(read_f64),
        DT_INT64 => decode!(read_i64),
        DT_UINT64 => decode!(read_u64),
        _ => unreachable!(),
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok((header, values))
}

/// Spatial shape of a scalar image, allowing trailing singleton axes.
fn scalar_shape(header: &NiftiHeader) -> Result<Shape3> {
    let dims = header.shape();
    if dims.len() < 3 || dims[3..].iter().any(|&n| n != 1) {
        return Err(Error::NonVolumetric(format!(
            "expected a single-channel 3D image, found dims {dims:?}"
        )));
    }
    let shape = [dims[0], dims[1], dims[2]];
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Nifti(format!("empty axis in dims {dims:?}")));
    }
    Ok(shape)
}

/// Reorder first-axis-fastest file data into the row-major grid layout.
fn from_file_order<T: Copy>(shape: Shape3, channels: usize, src: &[T]) -> Vec<T> {
    let [d, h, w] = shape;
    let n = d * h * w;
    let mut out = Vec::with_capacity(src.len());
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                let spatial = x + d * (y + h * z);
                for c in 0..channels {
                    out.push(src[spatial + n * c]);
                }
            }
        }
    }
    out
}

fn to_file_order<T: Copy + Default>(shape: Shape3, channels: usize, src: &[T]) -> Vec<T> {
    let [d, h, w] = shape;
    let n = d * h * w;
    let mut out = vec![T::default(); src.len()];
    let mut i = 0;
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                let spatial = x + d * (y + h * z);
                for c in 0..channels {
                    out[spatial + n * c] = src[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header, values) = read_nifti(path.as_ref())?;
    let shape = scalar_shape(&header)?;
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    Volume::new(shape, from_file_order(shape, 1, &data))
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::for_grid(&volume.shape(), DT_FLOAT32, 32, "volume")?;
    let mut bytes = header.encode();
    for v in to_file_order(volume.shape(), 1, volume.data()) {
        bytes.write_f32::<LittleEndian>(v).expect("in-memory write");
    }
    write_file(path.as_ref(), &bytes)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, values) = read_nifti(path)?;
    let shape = scalar_shape(&header)?;
    let mut data = Vec::with_capacity(values.len());
    for v in values {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Nifti(format!(
                "{}: label value {v} is not a non-negative integer",
                path.display()
            )));
        }
        data.push(v as u32);
    }
    LabelMap::new(shape, from_file_order(shape, 1, &data))
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = NiftiHeader::for_grid(&labels.shape(), DT_INT32, 32, "labels")?;
    let mut bytes = header.encode();
    for v in to_file_order(labels.shape(), 1, labels.data()) {
        let v = i32::try_from(v)
            .map_err(|_| Error::Nifti(format!("label {v} does not fit in int32")))?;
        bytes.write_i32::<LittleEndian>(v).expect("in-memory write");
    }
    write_file(path.as_ref(), &bytes)
}

/// Writes a displacement field as a 4D float32 image `(D, H, W, 3)` whose
/// last axis holds the per-axis displacement in voxels.
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let [d, h, w] = field.shape();
    let mut header = NiftiHeader::for_grid(&[d, h, w, 3], DT_FLOAT32, 32, "displacement (voxels)")?;
    header.intent_code = INTENT_VECTOR;
    let mut bytes = header.encode();
    for v in to_file_order(field.shape(), 3, field.data()) {
        bytes.write_f32::<LittleEndian>(v).expect("in-memory write");
    }
    write_file(path.as_ref(), &bytes)
}

/// Reads a field written by [`save_field`]; also accepts the 5D
/// `(D, H, W, 1, 3)` vector layout.
pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let (header, values) = read_nifti(path.as_ref())?;
    let dims = header.shape();
    let shape = match dims.as_slice() {
        [d, h, w, 3] | [d, h, w, 1, 3] => [*d, *h, *w],
        _ => {
            return Err(Error::NonVolumetric(format!(
                "expected a (D, H, W, 3) displacement field, found dims {dims:?}"
            )))
        }
    };
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    debug_assert_eq!(data.len(), voxel_count(shape) * 3);
    DisplacementField::new(shape, from_file_order(shape, 3, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_encodes_and_decodes() {
        let header = NiftiHeader::for_grid(&[4, 5, 6], DT_FLOAT32, 32, "x").unwrap();
        let (back, big) = NiftiHeader::decode(&header.encode()).unwrap();
        assert!(!big);
        assert_eq!(back, header);
        assert_eq!(back.shape(), vec![4, 5, 6]);
    }

    #[test]
    fn file_order_round_trip() {
        let shape = [2, 3, 4];
        let src: Vec<u32> = (0..24 * 3).collect();
        let file = to_file_order(shape, 3, &src);
        assert_eq!(from_file_order(shape, 3, &file), src);
        // first axis is fastest in file order
        let scalar: Vec<u32> = (0..24).collect();
        let file = to_file_order(shape, 1, &scalar);
        assert_eq!(file[1], scalar[12]);
    }
}
