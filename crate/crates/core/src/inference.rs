//! Per-block prediction, ensemble averaging and mask post-processing.

use thiserror::Error;

use crate::blocks::NUM_BLOCKS;
use crate::grid::{Grid, Image, Mask};
use crate::nn::{NnError, Network, Tensor};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("no model for block {0}")]
    MissingModel(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Trained networks per block; blocks with several members are averaged.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub blocks: [Vec<Network>; NUM_BLOCKS],
}

/// Probability maps per block, one grid per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub blocks: [Vec<Image>; NUM_BLOCKS],
}

/// Binary maps per block after thresholding and morphology.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessedPredictions {
    pub blocks: [Vec<Mask>; NUM_BLOCKS],
}

/// Arithmetic mean that does not depend on member order; equal members
/// return their common value unchanged.
pub fn ensemble_mean(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "ensemble of zero members");
    values.sort_by(f64::total_cmp);
    if values[0] == values[values.len() - 1] {
        return values[0];
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pixelwise [`ensemble_mean`] over member outputs.
pub fn average_members(members: &[Image]) -> Result<Image, InferenceError> {
    let first = members.first().ok_or(InferenceError::MissingModel(usize::MAX))?;
    let dims = first.dims();
    if let Some(bad) = members.iter().find(|m| m.dims() != dims) {
        return Err(InferenceError::ShapeMismatch(format!("member {:?} vs {dims:?}", bad.dims())));
    }
    let mut scratch = vec![0.0; members.len()];
    let data = (0..first.len())
        .map(|i| {
            for (s, m) in scratch.iter_mut().zip(members) {
                *s = m.as_slice()[i];
            }
            ensemble_mean(&mut scratch)
        })
        .collect();
    Ok(Grid::from_vec(dims.0, dims.1, data))
}

fn run_model(net: &Network, inputs: &[&Image]) -> Result<Vec<Image>, InferenceError> {
    let batch = Tensor::from_grids(inputs.iter().copied())?;
    let out = net.forward(&batch)?;
    Ok((0..out.batch()).map(|n| out.grid(n, 0)).collect())
}

/// `inputs[s][b]` is the block-`b` input of slice `s`.
pub fn predict_blocks(models: &ModelSet, inputs: &[[Image; NUM_BLOCKS]]) -> Result<RawPredictions, InferenceError> {
    let mut blocks: [Vec<Image>; NUM_BLOCKS] = Default::default();
    for (b, out) in blocks.iter_mut().enumerate() {
        let members = &models.blocks[b];
        if members.is_empty() {
            return Err(InferenceError::MissingModel(b));
        }
        if inputs.is_empty() {
            continue;
        }
        let slice_inputs: Vec<&Image> = inputs.iter().map(|s| &s[b]).collect();
        let per_member: Vec<Vec<Image>> =
            members.iter().map(|m| run_model(m, &slice_inputs)).collect::<Result<_, _>>()?;
        for s in 0..inputs.len() {
            let grids: Vec<Image> = per_member.iter().map(|m| m[s].clone()).collect();
            out.push(average_members(&grids)?);
        }
    }
    Ok(RawPredictions { blocks })
}

/// `1` where `value >= threshold`.
pub fn binarize(grid: &Image, threshold: f64) -> Mask {
    grid.map(|v| u8::from(v >= threshold))
}

/// 4-connected component labels (0 = background), numbered in row-major
/// order of each component's first pixel. Returns labels and sizes.
fn label_components(mask: &Mask, foreground: u8) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = mask.dims();
    let data = mask.as_slice();
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if data[start] != foreground || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if data[q] == foreground && labels[q] == 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest 4-connected foreground component. On equal sizes
/// the component whose first pixel comes first in row-major order wins.
pub fn largest_cc(mask: &Mask) -> Mask {
    let (labels, sizes) = label_components(mask, 1);
    let Some(best) = sizes.iter().enumerate().fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
        Some((_, bs)) if bs >= s => acc,
        _ => Some((i, s)),
    }) else {
        return mask.map(|_| 0);
    };
    let keep = best.0 as u32 + 1;
    let (h, w) = mask.dims();
    Grid::from_vec(h, w, labels.iter().map(|&l| u8::from(l == keep)).collect())
}

/// Fills background regions (4-connected) that do not touch the border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let (labels, sizes) = label_components(mask, 0);
    let mut touches = vec![false; sizes.len() + 1];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                touches[labels[y * w + x] as usize] = true;
            }
        }
    }
    let data = mask.as_slice();
    Grid::from_vec(
        h,
        w,
        (0..h * w).map(|i| if data[i] == 1 || !touches[labels[i] as usize] { 1 } else { 0 }).collect(),
    )
}

/// Blocks whose masks are reduced to one solid component per slice.
pub const SINGLE_COMPONENT_BLOCKS: [usize; 2] = [0, 2];

pub fn postprocess(raw: &RawPredictions) -> PostprocessedPredictions {
    let blocks = std::array::from_fn(|b| {
        raw.blocks[b]
            .iter()
            .map(|g| {
                let m = binarize(g, THRESHOLD);
                if SINGLE_COMPONENT_BLOCKS.contains(&b) {
                    fill_holes(&largest_cc(&m))
                } else {
                    m
                }
            })
            .collect()
    });
    PostprocessedPredictions { blocks }
}
