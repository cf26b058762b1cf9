//! Volume ingestion (a NIfTI-1 subset) and the little-endian `MYOT` tensor
//! container used for datasets and checkpoints.

mod container;
mod nifti;

pub use container::{read_container, write_container, DType, RawTensor, Record};
pub use nifti::{parse_nifti, write_nifti, NiftiHeaderSubset};

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum IoError {
    #[error("input too short: {len} bytes, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("sizeof_hdr is neither 348 little- nor big-endian")]
    BadHeaderSize,
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dims {0:?}: axes beyond the third must have size 1")]
    UnsupportedDims([i16; 8]),
    #[error("payload truncated: need {need} bytes, have {have}")]
    TruncatedPayload { need: usize, have: usize },
    #[error("label code {0} does not fit a 16-bit integer")]
    LabelCodeOverflow(f64),
    #[error("volume has a zero-length axis: {0:?}")]
    EmptyVolume((usize, usize, usize)),
    #[error("volume dims {0:?} exceed the NIfTI-1 16-bit limit")]
    DimsTooLarge((usize, usize, usize)),
    #[error("duplicate record name {0:?}")]
    DuplicateName(String),
    #[error("container version {0} is not supported")]
    VersionMismatch(u32),
    #[error("unknown container dtype code {0}")]
    UnknownDType(u8),
    #[error("record {0:?} has a name longer than 65535 bytes")]
    NameTooLong(String),
    #[error("record {name:?}: {reason}")]
    BadRecord { name: String, reason: String },
}

/// A 3D scalar grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    voxels: Vec<f64>,
    label_flag: bool,
}

impl Volume {
    /// Panics when `voxels.len()` differs from the product of `dims`.
    pub fn new(dims: (usize, usize, usize), voxels: Vec<f64>, label_flag: bool) -> Self {
        assert_eq!(voxels.len(), dims.0 * dims.1 * dims.2, "voxel count does not match dims");
        Volume { dims, voxels, label_flag }
    }

    /// Builds a volume by stacking equally sized `height × width` slices
    /// along z; grid `x` maps to volume x, grid `y` to volume y.
    pub fn from_slices(slices: &[Grid<f64>], label_flag: bool) -> Self {
        assert!(!slices.is_empty(), "cannot stack zero slices");
        let (h, w) = slices[0].dims();
        let mut voxels = Vec::with_capacity(h * w * slices.len());
        for s in slices {
            assert_eq!(s.dims(), (h, w), "slice dims differ");
            voxels.extend_from_slice(s.as_slice());
        }
        Volume { dims: (w, h, slices.len()), voxels, label_flag }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn label_flag(&self) -> bool {
        self.label_flag
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        let (nx, ny, _) = self.dims;
        self.voxels[x + nx * (y + ny * z)]
    }

    /// Slice `z` as a grid of height `ny` and width `nx`.
    pub fn slice(&self, z: usize) -> Grid<f64> {
        let (nx, ny, nz) = self.dims;
        assert!(z < nz, "slice index out of range");
        let start = nx * ny * z;
        Grid::from_vec(ny, nx, self.voxels[start..start + nx * ny].to_vec())
    }
}
