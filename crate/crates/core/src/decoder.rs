//! Linear decoder from the five block predictions back to the five classes.
//!
//! With `σ(v) = [v >= 0.5]` and block maps `q0..q4`
//! (LVBP, RVBP, LVEpi, LVMEMS, LVMS):
//!
//! ```text
//! LVBP = σ(q0)
//! RVBP = σ(q1)
//! LVNM = σ(q2 - q0 - q3)
//! LVME = σ(q2 - q0) · σ(q3 - q4)
//! LVMS = σ(q2 - q0) · σ(q4)
//! ```

use thiserror::Error;

use crate::grid::{Grid, Image, Mask};
use crate::preprocess::{LABEL_CODES, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("block grids differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[inline]
fn sigma(v: f64) -> u8 {
    u8::from(v >= 0.5)
}

/// Decodes one pixel.
pub fn decode_pixel(q: [f64; 5]) -> [u8; NUM_CLASSES] {
    let myo = sigma(q[2] - q[0]);
    [
        sigma(q[0]),
        sigma(q[1]),
        sigma(q[2] - q[0] - q[3]),
        myo * sigma(q[3] - q[4]),
        myo * sigma(q[4]),
    ]
}

/// Final class masks, channel order as in [`LABEL_CODES`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMasks {
    pub masks: [Mask; NUM_CLASSES],
}

pub fn decode(blocks: &[Image; 5]) -> Result<DecodedMasks, DecodeError> {
    let dims = blocks[0].dims();
    if let Some(b) = blocks.iter().find(|b| b.dims() != dims) {
        return Err(DecodeError::ShapeMismatch(dims, b.dims()));
    }
    let (h, w) = dims;
    let mut masks: [Mask; NUM_CLASSES] = std::array::from_fn(|_| Grid::zeros(h, w));
    for i in 0..h * w {
        let q = std::array::from_fn(|b| blocks[b].as_slice()[i]);
        for (m, v) in masks.iter_mut().zip(decode_pixel(q)) {
            m.as_mut_slice()[i] = v;
        }
    }
    Ok(DecodedMasks { masks })
}

/// Decodes binary block masks.
pub fn decode_masks(blocks: &[Mask; 5]) -> Result<DecodedMasks, DecodeError> {
    let grids: [Image; 5] = std::array::from_fn(|b| blocks[b].map(f64::from));
    decode(&grids)
}

/// Channel indices from highest to lowest priority when assigning a single
/// label per pixel: MS, ME, NM, RVBP, LVBP.
pub const LABEL_PRIORITY: [usize; NUM_CLASSES] = [4, 3, 2, 1, 0];

/// One label code per pixel (0 for background).
pub fn reassemble(masks: &DecodedMasks) -> Grid<u16> {
    let (h, w) = masks.masks[0].dims();
    Grid::from_fn(h, w, |y, x| {
        LABEL_PRIORITY
            .iter()
            .find(|&&c| masks.masks[c].get(y, x) != 0)
            .map_or(0, |&c| LABEL_CODES[c])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edema_pixel_inside_myocardium() {
        assert_eq!(decode_pixel([0.0, 0.0, 1.0, 1.0, 0.0]), [0, 0, 0, 1, 0]);
    }

    #[test]
    fn blood_pool_suppresses_myocardium() {
        assert_eq!(decode_pixel([1.0, 0.0, 1.0, 0.0, 0.0]), [1, 0, 0, 0, 0]);
    }

    #[test]
    fn zeros_decode_to_zeros() {
        assert_eq!(decode_pixel([0.0; 5]), [0; 5]);
    }

    #[test]
    fn soft_inputs_are_tolerated() {
        // 0.9 - 0.3 = 0.6 counts as myocardium
        assert_eq!(decode_pixel([0.3, 0.0, 0.9, 0.0, 0.7]), [0, 0, 1, 0, 1]);
        assert_eq!(decode_pixel([0.3, 0.0, 0.9, 0.6, 0.7]), [0, 0, 0, 0, 1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut b: [Image; 5] = std::array::from_fn(|_| Grid::zeros(2, 2));
        b[3] = Grid::zeros(3, 2);
        assert!(decode(&b).is_err());
    }

    #[test]
    fn reassemble_priorities() {
        let mut masks: [Mask; 5] = std::array::from_fn(|_| Grid::zeros(1, 3));
        masks[0].set(0, 0, 1);
        masks[3].set(0, 1, 1);
        masks[4].set(0, 1, 1);
        let codes = reassemble(&DecodedMasks { masks });
        assert_eq!(codes.as_slice(), &[500, 2221, 0]);
    }
}
