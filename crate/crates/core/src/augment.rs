//! Random non-rigid warping and quarter-turn rotation of training slices.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Grid, Image, Mask};
use crate::preprocess::{SliceSample, NUM_CLASSES};

/// Side of the coarse displacement lattice.
pub const COARSE_SIZE: usize = 8;
/// Coarse displacements are drawn from `[-MAX_DISPLACEMENT, MAX_DISPLACEMENT]` pixels.
pub const MAX_DISPLACEMENT: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("rotation needs a square grid, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("quarter_turns must be 1, 2 or 3, got {0}")]
    BadQuarterTurns(u8),
}

/// Seeded ChaCha8 stream; identical seeds give identical draws on every
/// platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Image,
    /// Bilinear warp followed by a `>= 0.5` threshold.
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    /// `coarse[(gy * 8 + gx)] = (dx, dy)`.
    coarse: Vec<(f64, f64)>,
    dx: Image,
    dy: Image,
}

impl DisplacementField {
    /// Upsamples an 8×8 lattice of `(dx, dy)` pairs to `h × w` with
    /// align-corners bilinear interpolation.
    pub fn from_coarse(coarse: Vec<(f64, f64)>, h: usize, w: usize) -> Self {
        assert_eq!(coarse.len(), COARSE_SIZE * COARSE_SIZE, "coarse field must be 8x8");
        assert!(h >= COARSE_SIZE && w >= COARSE_SIZE, "field must be at least 8x8");
        let last = (COARSE_SIZE - 1) as f64;
        let mut dx = Grid::zeros(h, w);
        let mut dy = Grid::zeros(h, w);
        for y in 0..h {
            let gy = y as f64 * last / (h - 1) as f64;
            for x in 0..w {
                let gx = x as f64 * last / (w - 1) as f64;
                let sample = |c: usize| {
                    bilinear(COARSE_SIZE, COARSE_SIZE, |r, q| {
                        let v = coarse[r * COARSE_SIZE + q];
                        if c == 0 {
                            v.0
                        } else {
                            v.1
                        }
                    }, gy, gx)
                };
                dx.set(y, x, sample(0));
                dy.set(y, x, sample(1));
            }
        }
        DisplacementField { coarse, dx, dy }
    }

    pub fn zero(h: usize, w: usize) -> Self {
        Self::from_coarse(vec![(0.0, 0.0); COARSE_SIZE * COARSE_SIZE], h, w)
    }

    /// A field with the same displacement everywhere, bypassing the lattice.
    pub fn uniform(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        DisplacementField {
            coarse: vec![(dx, dy); COARSE_SIZE * COARSE_SIZE],
            dx: Grid::filled(h, w, dx),
            dy: Grid::filled(h, w, dy),
        }
    }

    pub fn coarse(&self) -> &[(f64, f64)] {
        &self.coarse
    }

    pub fn dx(&self) -> &Image {
        &self.dx
    }

    pub fn dy(&self) -> &Image {
        &self.dy
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dx.dims()
    }
}

/// Bilinear sample of a `h × w` lattice at fractional `(y, x)`, clamped to
/// the lattice bounds. Exact at integer coordinates and on constant data.
fn bilinear(h: usize, w: usize, at: impl Fn(usize, usize) -> f64, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let row = |r: usize| {
        let a = at(r, x0);
        if fx == 0.0 {
            a
        } else {
            a + fx * (at(r, x0 + 1) - a)
        }
    };
    let top = row(y0);
    if fy == 0.0 {
        top
    } else {
        top + fy * (row(y0 + 1) - top)
    }
}

pub fn gen_field(rng: &mut Rng, h: usize, w: usize) -> DisplacementField {
    let coarse = (0..COARSE_SIZE * COARSE_SIZE)
        .map(|_| {
            let dx = rng.uniform(-MAX_DISPLACEMENT, MAX_DISPLACEMENT);
            let dy = rng.uniform(-MAX_DISPLACEMENT, MAX_DISPLACEMENT);
            (dx, dy)
        })
        .collect();
    DisplacementField::from_coarse(coarse, h, w)
}

/// Backward warp: `out(x, y) = in(x + dx, y + dy)`, clamp-to-edge.
pub fn warp(grid: &Image, field: &DisplacementField, mode: WarpMode) -> Image {
    assert_eq!(grid.dims(), field.dims(), "field dims must match the grid");
    let (h, w) = grid.dims();
    Grid::from_fn(h, w, |y, x| {
        let sy = y as f64 + field.dy.get(y, x);
        let sx = x as f64 + field.dx.get(y, x);
        let v = bilinear(h, w, |r, c| grid.get(r, c), sy, sx);
        match mode {
            WarpMode::Image => v,
            WarpMode::Mask => {
                if v >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    })
}

/// Warps the five mask channels with one field. A pixel claimed by more than
/// one channel keeps the channel with the largest interpolated value; exact
/// ties go to the higher channel index.
pub fn warp_masks(masks: &[Mask; NUM_CLASSES], field: &DisplacementField) -> [Mask; NUM_CLASSES] {
    let soft: Vec<Image> = masks.iter().map(|m| warp(&m.map(f64::from), field, WarpMode::Image)).collect();
    let (h, w) = masks[0].dims();
    let mut out: [Mask; NUM_CLASSES] = std::array::from_fn(|_| Grid::zeros(h, w));
    for i in 0..h * w {
        let mut best: Option<(usize, f64)> = None;
        for (c, s) in soft.iter().enumerate() {
            let v = s.as_slice()[i];
            if v >= 0.5 && best.map_or(true, |(_, b)| v >= b) {
                best = Some((c, v));
            }
        }
        if let Some((c, _)) = best {
            out[c].as_mut_slice()[i] = 1;
        }
    }
    out
}

/// Counter-clockwise rotation by `quarter_turns × 90°`: with a single quarter
/// turn the pixel at `(x, y)` moves to `(y, n - 1 - x)`.
pub fn rotate<T: Copy>(grid: &Grid<T>, quarter_turns: u8) -> Result<Grid<T>, AugmentError> {
    let (h, w) = grid.dims();
    if h != w {
        return Err(AugmentError::NonSquare(h, w));
    }
    if !(1..=3).contains(&quarter_turns) {
        return Err(AugmentError::BadQuarterTurns(quarter_turns));
    }
    let n = h;
    Ok(Grid::from_fn(n, n, |y, x| match quarter_turns {
        1 => grid.get(x, n - 1 - y),
        2 => grid.get(n - 1 - y, n - 1 - x),
        _ => grid.get(n - 1 - x, y),
    }))
}

pub fn warp_sample(sample: &SliceSample, field: &DisplacementField) -> SliceSample {
    SliceSample {
        images: sample.images.iter().map(|(&s, g)| (s, warp(g, field, WarpMode::Image))).collect(),
        masks: warp_masks(&sample.masks, field),
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
    }
}

pub fn rotate_sample(sample: &SliceSample, quarter_turns: u8) -> Result<SliceSample, AugmentError> {
    let mut images = std::collections::BTreeMap::new();
    for (&s, g) in &sample.images {
        images.insert(s, rotate(g, quarter_turns)?);
    }
    let mut masks = sample.masks.clone();
    for m in masks.iter_mut() {
        *m = rotate(m, quarter_turns)?;
    }
    Ok(SliceSample { images, masks, case_id: sample.case_id.clone(), slice_index: sample.slice_index })
}

/// Replaces every sample by `warps_per_slice` warped copies, then appends one
/// randomly rotated copy of every warped sample. The output holds
/// `2 * warps_per_slice * samples.len()` samples.
pub fn augment_dataset(
    samples: &[SliceSample],
    rng: &mut Rng,
    warps_per_slice: usize,
) -> Result<Vec<SliceSample>, AugmentError> {
    assert!(warps_per_slice >= 1, "warps_per_slice must be at least 1");
    let mut warped = Vec::with_capacity(samples.len() * warps_per_slice * 2);
    for sample in samples {
        let (h, w) = sample.dims();
        for _ in 0..warps_per_slice {
            let field = gen_field(rng, h, w);
            warped.push(warp_sample(sample, &field));
        }
    }
    let turns: Vec<u8> = (0..warped.len()).map(|_| 1 + rng.below(3) as u8).collect();
    let mut rotated = Vec::with_capacity(warped.len());
    for (s, &t) in warped.iter().zip(&turns) {
        rotated.push(rotate_sample(s, t)?);
    }
    warped.extend(rotated);
    Ok(warped)
}
