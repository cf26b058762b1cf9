//! Slice extraction, center cropping, percentile normalization and label
//! decoding into per-class binary masks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Image, Mask};
use crate::volume_io::Volume;

/// Label codes of the five classes, in mask channel order
/// (LV blood pool, RV blood pool, normal myocardium, edema, scar).
pub const LABEL_CODES: [u16; 5] = [500, 600, 200, 1220, 2221];
pub const CLASS_NAMES: [&str; 5] = ["LVBP", "RVBP", "LVNM", "LVME", "LVMS"];
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sequence {
    #[serde(rename = "bSSFP")]
    Bssfp,
    #[serde(rename = "LGE")]
    Lge,
    #[serde(rename = "T2")]
    T2,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::Bssfp, Sequence::Lge, Sequence::T2];

    pub fn name(self) -> &'static str {
        match self {
            Sequence::Bssfp => "bSSFP",
            Sequence::Lge => "LGE",
            Sequence::T2 => "T2",
        }
    }

    /// Lower-case stem used for on-disk file names.
    pub fn file_stem(self) -> &'static str {
        match self {
            Sequence::Bssfp => "bssfp",
            Sequence::Lge => "lge",
            Sequence::T2 => "t2",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sequence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bssfp" => Ok(Sequence::Bssfp),
            "lge" => Ok(Sequence::Lge),
            "t2" => Ok(Sequence::T2),
            other => Err(format!("unknown sequence {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("volume dims differ: {0}")]
    DimMismatch(String),
    #[error("invalid label code {value} at (x={x}, y={y}, z={z})")]
    InvalidLabelCode { value: f64, x: usize, y: usize, z: usize },
    #[error("missing sequence {0}")]
    MissingSequence(Sequence),
}

/// One slice: the three co-registered sequence images plus five mask channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub images: BTreeMap<Sequence, Image>,
    pub masks: [Mask; NUM_CLASSES],
    pub case_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn image(&self, seq: Sequence) -> Result<&Image, PreprocessError> {
        self.images.get(&seq).ok_or(PreprocessError::MissingSequence(seq))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    /// All images share dims, masks are binary and pairwise disjoint.
    pub fn is_valid(&self) -> bool {
        let dims = self.dims();
        self.images.len() == 3
            && self.images.values().all(|g| g.dims() == dims)
            && self.masks.iter().all(|m| m.dims() == dims && m.is_binary())
            && (0..dims.0 * dims.1).all(|i| self.masks.iter().map(|m| m.as_slice()[i] as u32).sum::<u32>() <= 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub i05: f64,
    pub i95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: Image,
    pub params: NormalizationParams,
    /// Set when `i95 == i05`; the image is then all zeros.
    pub degenerate: bool,
}

/// Centered `size × size` window. Larger inputs lose
/// `floor((n - size) / 2)` leading rows/columns; smaller ones are zero-padded
/// with the odd pixel on the high side.
pub fn center_crop<T: Copy + Default>(grid: &Grid<T>, size: usize) -> Grid<T> {
    assert!(size > 0, "crop size must be positive");
    let (h, w) = grid.dims();
    // Signed offset of the output origin inside the input.
    let off = |n: usize| -> isize {
        if n >= size {
            ((n - size) / 2) as isize
        } else {
            -(((size - n) / 2) as isize)
        }
    };
    let (oy, ox) = (off(h), off(w));
    Grid::from_fn(size, size, |y, x| {
        let sy = y as isize + oy;
        let sx = x as isize + ox;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            grid.get(sy as usize, sx as usize)
        } else {
            T::default()
        }
    })
}

/// Inverse placement of [`center_crop`]: maps a `size × size` grid back onto
/// an `height × width` canvas, zero outside the window.
pub fn uncrop<T: Copy + Default>(grid: &Grid<T>, height: usize, width: usize) -> Grid<T> {
    let size = grid.height();
    assert_eq!(grid.width(), size, "uncrop expects a square grid");
    let off = |n: usize| -> isize {
        if n >= size {
            ((n - size) / 2) as isize
        } else {
            -(((size - n) / 2) as isize)
        }
    };
    let (oy, ox) = (off(height), off(width));
    Grid::from_fn(height, width, |y, x| {
        let cy = y as isize - oy;
        let cx = x as isize - ox;
        if cy >= 0 && cx >= 0 && (cy as usize) < size && (cx as usize) < size {
            grid.get(cy as usize, cx as usize)
        } else {
            T::default()
        }
    })
}

/// Percentile of an ascending-sorted slice with linear interpolation at
/// rank `q * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Maps intensities through `(I - I05) / (I95 - I05)` without clamping.
pub fn normalize_percentile(grid: &Image) -> Normalized {
    assert!(!grid.is_empty(), "cannot normalize an empty grid");
    let mut sorted = grid.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let i05 = percentile_sorted(&sorted, 0.05);
    let i95 = percentile_sorted(&sorted, 0.95);
    let params = NormalizationParams { i05, i95 };
    let span = i95 - i05;
    if span == 0.0 {
        let (h, w) = grid.dims();
        return Normalized { image: Grid::zeros(h, w), params, degenerate: true };
    }
    Normalized { image: grid.map(|v| (v - i05) / span), params, degenerate: false }
}

pub fn channel_of_code(code: f64) -> Option<Option<usize>> {
    if code == 0.0 {
        return Some(None);
    }
    LABEL_CODES.iter().position(|&c| c as f64 == code).map(Some)
}

/// Converts one label slice into five indicator channels.
pub fn labels_to_masks(labels: &Image) -> Result<[Mask; NUM_CLASSES], PreprocessError> {
    let (h, w) = labels.dims();
    let mut masks: [Mask; NUM_CLASSES] = std::array::from_fn(|_| Grid::zeros(h, w));
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            match channel_of_code(v) {
                Some(Some(c)) => masks[c].set(y, x, 1),
                Some(None) => {}
                None => return Err(PreprocessError::InvalidLabelCode { value: v, x, y, z: 0 }),
            }
        }
    }
    Ok(masks)
}

/// Checks that every voxel carries one of the known label codes.
pub fn validate_labels(labels: &Volume) -> Result<(), PreprocessError> {
    let (nx, ny, _) = labels.dims();
    for (i, &v) in labels.voxels().iter().enumerate() {
        if channel_of_code(v).is_none() {
            return Err(PreprocessError::InvalidLabelCode { value: v, x: i % nx, y: (i / nx) % ny, z: i / (nx * ny) });
        }
    }
    Ok(())
}

fn check_case_dims(case: &BTreeMap<Sequence, Volume>) -> Result<(usize, usize, usize), PreprocessError> {
    let mut dims = None;
    for seq in Sequence::ALL {
        let v = case.get(&seq).ok_or(PreprocessError::MissingSequence(seq))?;
        match dims {
            None => dims = Some(v.dims()),
            Some(d) if d != v.dims() => {
                return Err(PreprocessError::DimMismatch(format!("{seq} is {:?}, expected {d:?}", v.dims())))
            }
            _ => {}
        }
    }
    Ok(dims.unwrap())
}

/// Cropped, normalized images of every slice of a case.
pub fn extract_images(
    case: &BTreeMap<Sequence, Volume>,
    crop_size: usize,
) -> Result<Vec<BTreeMap<Sequence, Image>>, PreprocessError> {
    let (_, _, nz) = check_case_dims(case)?;
    Ok((0..nz)
        .map(|z| {
            Sequence::ALL
                .iter()
                .map(|&seq| (seq, normalize_percentile(&center_crop(&case[&seq].slice(z), crop_size)).image))
                .collect()
        })
        .collect())
}

/// Splits a case into one training sample per z index.
pub fn extract_slices(
    case_id: &str,
    case: &BTreeMap<Sequence, Volume>,
    labels: &Volume,
    crop_size: usize,
) -> Result<Vec<SliceSample>, PreprocessError> {
    let dims = check_case_dims(case)?;
    if labels.dims() != dims {
        return Err(PreprocessError::DimMismatch(format!("labels are {:?}, images {dims:?}", labels.dims())));
    }
    validate_labels(labels)?;
    let images = extract_images(case, crop_size)?;
    images
        .into_iter()
        .enumerate()
        .map(|(z, images)| {
            let label_slice = center_crop(&labels.slice(z), crop_size);
            let masks = labels_to_masks(&label_slice).map_err(|e| match e {
                PreprocessError::InvalidLabelCode { value, x, y, .. } => {
                    PreprocessError::InvalidLabelCode { value, x, y, z }
                }
                other => other,
            })?;
            Ok(SliceSample { images, masks, case_id: case_id.to_string(), slice_index: z })
        })
        .collect()
}
