use super::{IoError, Volume};

const HEADER_SIZE: usize = 348;
const MIN_FILE_SIZE: usize = HEADER_SIZE + 4;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// The header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderSubset {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype_code: i16,
    pub bitpix: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub little_endian: bool,
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, offset: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[offset..offset + N]);
        if !self.little {
            out.reverse();
        }
        out
    }

    fn i16(&self, offset: usize) -> i16 {
        i16::from_le_bytes(self.array(offset))
    }

    fn i32(&self, offset: usize) -> i32 {
        i32::from_le_bytes(self.array(offset))
    }

    fn f32(&self, offset: usize) -> f32 {
        f32::from_le_bytes(self.array(offset))
    }

    fn f64(&self, offset: usize) -> f64 {
        f64::from_le_bytes(self.array(offset))
    }
}

fn datatype_size(code: i16) -> Option<usize> {
    match code {
        DT_UINT8 => Some(1),
        DT_INT16 => Some(2),
        DT_INT32 => Some(4),
        DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

impl NiftiHeaderSubset {
    pub fn parse(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < MIN_FILE_SIZE {
            return Err(IoError::TooShort { len: bytes.len(), need: MIN_FILE_SIZE });
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let little = if le == HEADER_SIZE as i32 {
            true
        } else if be == HEADER_SIZE as i32 {
            false
        } else {
            return Err(IoError::BadHeaderSize);
        };
        let r = Reader { bytes, little };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
            return Err(IoError::BadMagic(magic));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        Ok(NiftiHeaderSubset {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype_code: r.i16(70),
            bitpix: r.i16(72),
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            magic,
            little_endian: little,
        })
    }

    /// Spatial extent `(nx, ny, nz)`; axes past the third must be 1.
    pub fn spatial_dims(&self) -> Result<(usize, usize, usize), IoError> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(IoError::UnsupportedDims(self.dim));
        }
        let ndim = ndim as usize;
        let axis = |i: usize| -> Result<usize, IoError> {
            if i > ndim {
                return Ok(1);
            }
            match self.dim[i] {
                d if d >= 1 => Ok(d as usize),
                _ => Err(IoError::UnsupportedDims(self.dim)),
            }
        };
        for i in 4..=ndim {
            if axis(i)? != 1 {
                return Err(IoError::UnsupportedDims(self.dim));
            }
        }
        Ok((axis(1)?, axis(2)?, axis(3)?))
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope as f64;
        let inter = self.scl_inter as f64;
        if slope == 0.0 || !slope.is_finite() || !inter.is_finite() || (slope == 1.0 && inter == 0.0) {
            None
        } else {
            Some((slope, inter))
        }
    }
}

/// Parses a single-file NIfTI-1 image of one of the five supported datatypes.
///
/// Either byte order is accepted; the order is detected from `sizeof_hdr`.
/// Integer-typed, unscaled, non-negative volumes come back with
/// `label_flag` set.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume, IoError> {
    let header = NiftiHeaderSubset::parse(bytes)?;
    let elem = datatype_size(header.datatype_code)
        .ok_or(IoError::UnsupportedDatatype(header.datatype_code))?;
    let dims = header.spatial_dims()?;
    let count = dims.0 * dims.1 * dims.2;
    let offset = if header.vox_offset >= MIN_FILE_SIZE as f32 {
        header.vox_offset as usize
    } else {
        MIN_FILE_SIZE
    };
    let need = offset + count * elem;
    if bytes.len() < need {
        return Err(IoError::TruncatedPayload { need, have: bytes.len() });
    }
    let r = Reader { bytes, little: header.little_endian };
    let mut voxels = Vec::with_capacity(count);
    for i in 0..count {
        let at = offset + i * elem;
        let v = match header.datatype_code {
            DT_UINT8 => bytes[at] as f64,
            DT_INT16 => r.i16(at) as f64,
            DT_INT32 => r.i32(at) as f64,
            DT_FLOAT32 => r.f32(at) as f64,
            _ => r.f64(at),
        };
        voxels.push(v);
    }
    let scaling = header.scaling();
    if let Some((slope, inter)) = scaling {
        for v in &mut voxels {
            *v = *v * slope + inter;
        }
    }
    let integer_type = matches!(header.datatype_code, DT_UINT8 | DT_INT16 | DT_INT32);
    let label_flag = integer_type && scaling.is_none() && voxels.iter().all(|&v| v >= 0.0);
    Ok(Volume::new(dims, voxels, label_flag))
}

/// Serializes a volume as a little-endian single-file NIfTI-1 image.
///
/// Images are stored as f64. Label volumes use u8 when every code fits,
/// otherwise i16.
pub fn write_nifti(volume: &Volume) -> Result<Vec<u8>, IoError> {
    let dims = volume.dims();
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(IoError::EmptyVolume(dims));
    }
    let to_i16 = |d: usize| i16::try_from(d).map_err(|_| IoError::DimsTooLarge(dims));
    let (nx, ny, nz) = (to_i16(dims.0)?, to_i16(dims.1)?, to_i16(dims.2)?);

    let (datatype, bitpix) = if volume.label_flag() {
        let mut max = 0.0f64;
        for &v in volume.voxels() {
            if v < 0.0 || v.fract() != 0.0 || v > i16::MAX as f64 {
                return Err(IoError::LabelCodeOverflow(v));
            }
            max = max.max(v);
        }
        if max <= u8::MAX as f64 {
            (DT_UINT8, 8)
        } else {
            (DT_INT16, 16)
        }
    } else {
        (DT_FLOAT64, 64)
    };

    let mut out = vec![0u8; MIN_FILE_SIZE];
    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, nx, ny, nz, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        out[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    out[70..72].copy_from_slice(&datatype.to_le_bytes());
    out[72..74].copy_from_slice(&(bitpix as i16).to_le_bytes());
    for i in 0..8 {
        out[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    out[108..112].copy_from_slice(&(MIN_FILE_SIZE as f32).to_le_bytes());
    out[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: mm
    out[123] = 2;
    out[344..348].copy_from_slice(&MAGIC_SINGLE);

    let elem = datatype_size(datatype).unwrap();
    out.reserve(volume.voxels().len() * elem);
    for &v in volume.voxels() {
        match datatype {
            DT_UINT8 => out.push(v as u8),
            DT_INT16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}
