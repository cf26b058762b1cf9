use std::collections::HashSet;

use super::IoError;

const MAGIC: [u8; 4] = *b"MYOT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    I16 = 2,
    I32 = 3,
    U64 = 4,
    F32 = 5,
    F64 = 6,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::U64 | DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, IoError> {
        Ok(match code {
            1 => DType::U8,
            2 => DType::I16,
            3 => DType::I32,
            4 => DType::U64,
            5 => DType::F32,
            6 => DType::F64,
            other => return Err(IoError::UnknownDType(other)),
        })
    }
}

/// An n-dimensional little-endian payload with its element type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    dtype: DType,
    dims: Vec<u64>,
    bytes: Vec<u8>,
}

impl RawTensor {
    /// Panics when `bytes` does not hold exactly `product(dims)` elements.
    pub fn new(dtype: DType, dims: Vec<u64>, bytes: Vec<u8>) -> Self {
        let count: u64 = dims.iter().product();
        assert_eq!(bytes.len() as u64, count * dtype.size() as u64, "payload length mismatch");
        RawTensor { dtype, dims, bytes }
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F64, dims.iter().map(|&d| d as u64).collect(), bytes)
    }

    pub fn from_u8(dims: &[usize], values: &[u8]) -> Self {
        Self::new(DType::U8, dims.iter().map(|&d| d as u64).collect(), values.to_vec())
    }

    pub fn scalar_u64(value: u64) -> Self {
        Self::new(DType::U64, Vec::new(), value.to_le_bytes().to_vec())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_f64(&self) -> Option<Vec<f64>> {
        (self.dtype == DType::F64)
            .then(|| self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_u8(&self) -> Option<Vec<u8>> {
        (self.dtype == DType::U8).then(|| self.bytes.clone())
    }

    pub fn to_scalar_u64(&self) -> Option<u64> {
        (self.dtype == DType::U64 && self.dims.is_empty())
            .then(|| u64::from_le_bytes(self.bytes[..8].try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: RawTensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: RawTensor) -> Self {
        Record { name: name.into(), tensor }
    }
}

pub fn write_container(records: &[Record]) -> Result<Vec<u8>, IoError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(IoError::DuplicateName(r.name.clone()));
        }
        if r.name.len() > u16::MAX as usize {
            return Err(IoError::NameTooLong(r.name.clone()));
        }
        if r.tensor.dims.len() > u8::MAX as usize {
            return Err(IoError::BadRecord { name: r.name.clone(), reason: "rank exceeds 255".into() });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.tensor.dtype as u8);
        out.push(r.tensor.dims.len() as u8);
        for d in &r.tensor.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&r.tensor.bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            IoError::TruncatedPayload { need: self.pos.saturating_add(n), have: self.bytes.len() },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<Record>, IoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4).map_err(|_| IoError::TooShort { len: bytes.len(), need: 12 })?.try_into().unwrap();
    if magic != MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(IoError::VersionMismatch(version));
    }
    let count = cur.u32()?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| IoError::BadRecord {
            name: String::from("<non-utf8>"),
            reason: "name is not valid UTF-8".into(),
        })?;
        if !seen.insert(name.clone()) {
            return Err(IoError::DuplicateName(name));
        }
        let dtype = DType::from_code(cur.u8()?)?;
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()?);
        }
        let len = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
            .and_then(|l| usize::try_from(l).ok())
            .ok_or_else(|| IoError::BadRecord { name: name.clone(), reason: "payload size overflows".into() })?;
        let payload = cur.take(len)?.to_vec();
        records.push(Record { name, tensor: RawTensor { dtype, dims, bytes: payload } });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_round_trips() {
        let bytes = write_container(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(read_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f64_tensor_round_trips_bit_exact() {
        let values = [1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, f64::NAN];
        let rec = Record::new("w", RawTensor::from_f64(&[2, 3], &values));
        let bytes = write_container(std::slice::from_ref(&rec)).unwrap();
        let back = read_container(&bytes).unwrap();
        assert_eq!(back[0].name, "w");
        assert_eq!(back[0].tensor.bytes(), rec.tensor.bytes());
        assert_eq!(back[0].tensor.dims(), &[2, 3]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let r = Record::new("a", RawTensor::scalar_u64(1));
        assert_eq!(write_container(&[r.clone(), r]), Err(IoError::DuplicateName("a".into())));
    }

    #[test]
    fn truncated_container_is_reported() {
        let rec = Record::new("x", RawTensor::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let bytes = write_container(&[rec]).unwrap();
        let err = read_container(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, IoError::TruncatedPayload { .. }));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_container(&[]).unwrap();
        bytes[4] = 2;
        assert_eq!(read_container(&bytes), Err(IoError::VersionMismatch(2)));
        bytes[0] = b'X';
        assert!(matches!(read_container(&bytes), Err(IoError::BadMagic(_))));
    }
}
