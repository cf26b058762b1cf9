//! Linear encoder: one (input sequence, binary target) task per block.

use std::collections::BTreeMap;

use crate::grid::{Grid, Image, Mask};
use crate::preprocess::{PreprocessError, Sequence, SliceSample};

pub const NUM_BLOCKS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_id: usize,
    pub name: &'static str,
    pub input_sequence: Sequence,
    pub target_channels: &'static [usize],
}

pub const BLOCK_NAMES: [&str; NUM_BLOCKS] = ["LVBP", "RVBP", "LVEpi", "LVMEMS", "LVMS"];

/// The five blocks. Channel indices follow
/// [`LABEL_CODES`](crate::preprocess::LABEL_CODES).
pub fn default_table() -> [BlockSpec; NUM_BLOCKS] {
    [
        BlockSpec { block_id: 0, name: "LVBP", input_sequence: Sequence::Bssfp, target_channels: &[0] },
        BlockSpec { block_id: 1, name: "RVBP", input_sequence: Sequence::Bssfp, target_channels: &[1] },
        BlockSpec { block_id: 2, name: "LVEpi", input_sequence: Sequence::Bssfp, target_channels: &[0, 2, 3, 4] },
        BlockSpec { block_id: 3, name: "LVMEMS", input_sequence: Sequence::Lge, target_channels: &[3, 4] },
        BlockSpec { block_id: 4, name: "LVMS", input_sequence: Sequence::T2, target_channels: &[4] },
    ]
}

/// Block table plus the input-sequence override hook for the two pathology
/// blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    table: [BlockSpec; NUM_BLOCKS],
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder { table: default_table() }
    }
}

impl Encoder {
    pub fn with_inputs(overrides: &BTreeMap<usize, Sequence>) -> Self {
        let mut table = default_table();
        for (&block, &seq) in overrides {
            if block < NUM_BLOCKS {
                table[block].input_sequence = seq;
            }
        }
        Encoder { table }
    }

    pub fn table(&self) -> &[BlockSpec; NUM_BLOCKS] {
        &self.table
    }

    pub fn spec(&self, block: usize) -> &BlockSpec {
        &self.table[block]
    }

    pub fn target(&self, block: usize, sample: &SliceSample) -> Mask {
        let (h, w) = sample.dims();
        let mut out: Mask = Grid::zeros(h, w);
        for &c in self.table[block].target_channels {
            for (o, &m) in out.as_mut_slice().iter_mut().zip(sample.masks[c].as_slice()) {
                *o = o.saturating_add(m).min(1);
            }
        }
        out
    }

    pub fn encode(&self, samples: &[SliceSample]) -> Result<[BlockDataset; NUM_BLOCKS], PreprocessError> {
        let mut out: [BlockDataset; NUM_BLOCKS] =
            std::array::from_fn(|b| BlockDataset { block_id: b, pairs: Vec::with_capacity(samples.len()) });
        for sample in samples {
            for (b, ds) in out.iter_mut().enumerate() {
                let input = sample.image(self.table[b].input_sequence)?.clone();
                ds.pairs.push((input, self.target(b, sample)));
            }
        }
        Ok(out)
    }

    pub fn encode_inference(&self, images: &BTreeMap<Sequence, Image>) -> Result<[Image; NUM_BLOCKS], PreprocessError> {
        for seq in Sequence::ALL {
            if !images.contains_key(&seq) {
                return Err(PreprocessError::MissingSequence(seq));
            }
        }
        Ok(std::array::from_fn(|b| images[&self.table[b].input_sequence].clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDataset {
    pub block_id: usize,
    pub pairs: Vec<(Image, Mask)>,
}

impl BlockDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> BlockDataset {
        BlockDataset { block_id: self.block_id, pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect() }
    }
}

pub fn encode(samples: &[SliceSample]) -> Result<[BlockDataset; NUM_BLOCKS], PreprocessError> {
    Encoder::default().encode(samples)
}

pub fn encode_inference(images: &BTreeMap<Sequence, Image>) -> Result<[Image; NUM_BLOCKS], PreprocessError> {
    Encoder::default().encode_inference(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::NUM_CLASSES;
    use proptest::prelude::*;

    fn sample_with(masks: [Mask; NUM_CLASSES]) -> SliceSample {
        let (h, w) = masks[0].dims();
        let images = Sequence::ALL
            .iter()
            .enumerate()
            .map(|(k, &s)| (s, Grid::filled(h, w, k as f64)))
            .collect();
        SliceSample { images, masks, case_id: "t".into(), slice_index: 0 }
    }

    fn empty_masks(h: usize, w: usize) -> [Mask; NUM_CLASSES] {
        std::array::from_fn(|_| Grid::zeros(h, w))
    }

    #[test]
    fn epicardium_from_blood_pool_only() {
        let mut m = empty_masks(4, 4);
        m[0].set(1, 1, 1);
        m[0].set(2, 1, 1);
        let ds = encode(&[sample_with(m.clone())]).unwrap();
        assert_eq!(ds[2].pairs[0].1, m[0]);
    }

    #[test]
    fn edema_and_scar_join_in_block_three() {
        let mut m = empty_masks(4, 4);
        m[3].set(0, 0, 1);
        m[4].set(3, 3, 1);
        let ds = encode(&[sample_with(m.clone())]).unwrap();
        assert_eq!(ds[3].pairs[0].1, m[3].union(&m[4]));
        assert_eq!(ds[4].pairs[0].1, m[4]);
    }

    #[test]
    fn empty_masks_give_empty_targets() {
        let ds = encode(&[sample_with(empty_masks(3, 3))]).unwrap();
        assert!(ds.iter().all(|d| d.pairs[0].1.count_ones() == 0));
    }

    #[test]
    fn inference_inputs_follow_table() {
        let s = sample_with(empty_masks(2, 2));
        let inputs = encode_inference(&s.images).unwrap();
        for b in 0..3 {
            assert_eq!(inputs[b], s.images[&Sequence::Bssfp]);
        }
        assert_eq!(inputs[3], s.images[&Sequence::Lge]);
        assert_eq!(inputs[4], s.images[&Sequence::T2]);
        let mut missing = s.images.clone();
        missing.remove(&Sequence::T2);
        assert_eq!(encode_inference(&missing), Err(PreprocessError::MissingSequence(Sequence::T2)));
    }

    #[test]
    fn override_swaps_pathology_inputs() {
        let overrides = BTreeMap::from([(3, Sequence::T2), (4, Sequence::Lge)]);
        let enc = Encoder::with_inputs(&overrides);
        assert_eq!(enc.spec(3).input_sequence, Sequence::T2);
        assert_eq!(enc.spec(4).input_sequence, Sequence::Lge);
    }

    fn disjoint_masks(labels: &[u8], h: usize, w: usize) -> [Mask; NUM_CLASSES] {
        let mut m = empty_masks(h, w);
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                m[(l - 1) as usize].as_mut_slice()[i] = 1;
            }
        }
        m
    }

    proptest! {
        #[test]
        fn containment_and_union_linearity(a in proptest::collection::vec(0u8..6, 36), b in proptest::collection::vec(0u8..6, 36)) {
            let ma = disjoint_masks(&a, 6, 6);
            let ds = encode(&[sample_with(ma.clone())]).unwrap();
            let bp = &ds[0].pairs[0].1;
            let epi = &ds[2].pairs[0].1;
            prop_assert_eq!(&bp.union(epi), epi);
            let ms = &ds[4].pairs[0].1;
            let mems = &ds[3].pairs[0].1;
            prop_assert_eq!(&ms.union(mems), mems);

            // union of two label maps, channelwise; disjointness across
            // channels is not needed for the block-wise union identity.
            let mb = disjoint_masks(&b, 6, 6);
            let mu: [Mask; NUM_CLASSES] = std::array::from_fn(|c| ma[c].union(&mb[c]));
            let enc = Encoder::default();
            let su = sample_with(mu);
            let sa = sample_with(ma);
            let sb = sample_with(mb);
            for blk in 0..NUM_BLOCKS {
                prop_assert_eq!(enc.target(blk, &su), enc.target(blk, &sa).union(&enc.target(blk, &sb)));
            }
        }
    }
}
