//! Slice datasets in the `MYOT` container.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::preprocess::{Sequence, SliceSample, NUM_CLASSES};
use crate::volume_io::{read_container, write_container, RawTensor, Record};

use super::PipelineError;

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    case_id: String,
    slice_index: usize,
}

/// Records: `meta` (JSON), then per sample `s{i}.{bssfp,lge,t2}` as f64
/// `[h, w]` and `s{i}.masks` as u8 `[5, h, w]`.
pub fn encode_dataset(samples: &[SliceSample]) -> Result<Vec<u8>, PipelineError> {
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta { case_id: s.case_id.clone(), slice_index: s.slice_index })
        .collect();
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut records = vec![Record::new("meta", RawTensor::from_u8(&[meta.len()], &meta))];
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.dims();
        for (seq, img) in &s.images {
            records.push(Record::new(format!("s{i}.{}", seq.file_stem()), RawTensor::from_f64(&[h, w], img.as_slice())));
        }
        let masks: Vec<u8> = s.masks.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        records.push(Record::new(format!("s{i}.masks"), RawTensor::from_u8(&[NUM_CLASSES, h, w], &masks)));
    }
    Ok(write_container(&records)?)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SliceSample>, PipelineError> {
    let records = read_container(bytes)?;
    let by_name: BTreeMap<&str, &RawTensor> = records.iter().map(|r| (r.name.as_str(), &r.tensor)).collect();
    let bad = |m: String| PipelineError::Data(m);
    let meta = by_name.get("meta").and_then(|t| t.to_u8()).ok_or_else(|| bad("dataset has no meta record".into()))?;
    let meta: Vec<SampleMeta> = serde_json::from_slice(&meta).map_err(|e| bad(format!("dataset meta: {e}")))?;
    let mut out = Vec::with_capacity(meta.len());
    for (i, m) in meta.into_iter().enumerate() {
        let mut images = BTreeMap::new();
        for seq in Sequence::ALL {
            let name = format!("s{i}.{}", seq.file_stem());
            let t = by_name.get(name.as_str()).ok_or_else(|| bad(format!("missing {name}")))?;
            let dims = t.dims_usize();
            let values = t.to_f64().filter(|_| dims.len() == 2).ok_or_else(|| bad(format!("{name} must be 2D f64")))?;
            images.insert(seq, Grid::from_vec(dims[0], dims[1], values));
        }
        let name = format!("s{i}.masks");
        let t = by_name.get(name.as_str()).ok_or_else(|| bad(format!("missing {name}")))?;
        let dims = t.dims_usize();
        let values = t
            .to_u8()
            .filter(|_| dims.len() == 3 && dims[0] == NUM_CLASSES)
            .ok_or_else(|| bad(format!("{name} must be u8 [5, h, w]")))?;
        let (h, w) = (dims[1], dims[2]);
        let masks = std::array::from_fn(|c| Grid::from_vec(h, w, values[c * h * w..(c + 1) * h * w].to_vec()));
        out.push(SliceSample { images, masks, case_id: m.case_id, slice_index: m.slice_index });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::extract_slices;
    use crate::synth::phantom_case;

    #[test]
    fn dataset_round_trip() {
        let case = phantom_case(2, 0, 32, 2);
        let samples = extract_slices("case_000", &case.images, &case.labels, 32).unwrap();
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);
        assert_eq!(encode_dataset(&decode_dataset(&bytes).unwrap()).unwrap(), bytes);
    }
}
