//! On-disk pipeline: synth → convert → augment → train → predict → evaluate.
//!
//! Every stage writes into `work_dir/<stage>-<hash>`, where the hash covers the
//! settings the stage depends on, the upstream stage hash and the bytes of any
//! input files it reads. Changing a setting therefore never reuses a stale
//! artifact, and rerunning with identical inputs overwrites identical files.

mod config;
mod dataset;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::*;
pub use dataset::{decode_dataset, encode_dataset};

use crate::augment::{augment_dataset, Rng};
use crate::blocks::{Encoder, NUM_BLOCKS};
use crate::decoder::{decode_masks, reassemble};
use crate::inference::{postprocess, predict_blocks, ModelSet};
use crate::metrics::{aggregate, evaluate_case, EmptyConvention, MetricsReport};
use crate::nn::gradcheck::{run_suite, CheckResult};
use crate::nn::Network;
use crate::preprocess::{extract_images, extract_slices, uncrop, Sequence, SliceSample};
use crate::synth::phantom_case;
use crate::trainer::{split, train_block, TrainReport};
use crate::volume_io::{parse_nifti, read_container, write_container, write_nifti, IoError, Volume};

pub const COMMANDS: [&str; 8] = ["synth", "convert", "augment", "train", "predict", "evaluate", "gradcheck", "all"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} failed [{kind}]: {detail}")]
    Stage { stage: &'static str, kind: String, detail: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PipelineError {
    /// Short machine-readable name of the failure, e.g. `DimMismatch`.
    pub fn kind(&self) -> String {
        match self {
            PipelineError::UnknownCommand(_) => "UnknownCommand".into(),
            PipelineError::Config(_) => "ConfigError".into(),
            PipelineError::Stage { kind, .. } => kind.clone(),
            PipelineError::Data(_) => "BadDataset".into(),
            PipelineError::Io(e) => variant_name(e),
        }
    }
}

fn variant_name(e: &impl fmt::Debug) -> String {
    let s = format!("{e:?}");
    let end = s.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(s.len());
    s[..end].to_string()
}

/// Wraps a lower-level error as a failure of `stage`, keeping its variant
/// name as the diagnostic kind.
fn fail<E: fmt::Debug + fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, kind: variant_name(&e), detail: e.to_string() }
}

fn fs_fail<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> PipelineError + 'a {
    move |e| PipelineError::Stage { stage, kind: "IoError".into(), detail: format!("{}: {e}", path.display()) }
}

fn missing(stage: &'static str, what: String) -> PipelineError {
    PipelineError::Stage { stage, kind: "MissingInput".into(), detail: what }
}

fn read(stage: &'static str, path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(fs_fail(stage, path))
}

fn write(stage: &'static str, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(fs_fail(stage, dir))?;
    }
    fs::write(path, bytes).map_err(fs_fail(stage, path))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sorted `case_*` directories below `dir`.
fn case_dirs(stage: &'static str, dir: &Path) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(fs_fail(stage, dir))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(fs_fail(stage, dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("case_") && entry.path().is_dir() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn hash_files(stage: &'static str, paths: &[PathBuf], hasher: &mut Sha256) -> Result<(), PipelineError> {
    for p in paths {
        hasher.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        hasher.update(sha_hex(&read(stage, p)?));
    }
    Ok(())
}

fn stage_hash(parts: &impl Serialize, files: &[PathBuf], stage: &'static str) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(stage);
    h.update(serde_json::to_vec(parts).expect("stage key serializes"));
    hash_files(stage, files, &mut h)?;
    Ok(hex::encode(h.finalize())[..16].to_string())
}

fn sequence_path(case: &Path, seq: Sequence) -> PathBuf {
    case.join(format!("{}.nii", seq.file_stem()))
}

fn labels_path(case: &Path) -> PathBuf {
    case.join("labels.nii")
}

fn read_volume(stage: &'static str, path: &Path) -> Result<Volume, PipelineError> {
    parse_nifti(&read(stage, path)?).map_err(|e| PipelineError::Stage {
        stage,
        kind: variant_name(&e),
        detail: format!("{}: {e}", path.display()),
    })
}

fn read_case(stage: &'static str, case: &Path) -> Result<BTreeMap<Sequence, Volume>, PipelineError> {
    Sequence::ALL.iter().map(|&s| Ok((s, read_volume(stage, &sequence_path(case, s))?))).collect()
}

/// Synthetic phantom cases written as NIfTI under `data_dir/{train,test}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train_cases: Vec<PathBuf>,
    pub test_cases: Vec<PathBuf>,
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthOutput, PipelineError> {
    const STAGE: &str = "synth";
    let s = &cfg.synth;
    if s.n_cases == 0 || s.size < 32 || s.slices == 0 {
        return Err(PipelineError::Config("synth needs n_cases >= 1, size >= 32, slices >= 1".into()));
    }
    let n_train = s.n_cases - s.held_out.min(s.n_cases - 1);
    let mut out = SynthOutput { train_cases: Vec::new(), test_cases: Vec::new() };
    for dir in [cfg.train_dir(), cfg.test_dir()] {
        if dir.exists() {
            for (_, old) in case_dirs(STAGE, &dir)? {
                fs::remove_dir_all(&old).map_err(fs_fail(STAGE, &old))?;
            }
        }
    }
    for i in 0..s.n_cases {
        let case = phantom_case(cfg.seed, i as u64, s.size, s.slices);
        let (root, list) =
            if i < n_train { (cfg.train_dir(), &mut out.train_cases) } else { (cfg.test_dir(), &mut out.test_cases) };
        let dir = root.join(format!("case_{i:03}"));
        for (seq, vol) in &case.images {
            write(STAGE, &sequence_path(&dir, *seq), &write_nifti(vol).map_err(fail(STAGE))?)?;
        }
        write(STAGE, &labels_path(&dir), &write_nifti(&case.labels).map_err(fail(STAGE))?)?;
        log::info!("synth: wrote {}", dir.display());
        list.push(dir);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub hash: String,
}

fn training_inputs(cfg: &PipelineConfig) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let dir = cfg.train_dir();
    if !dir.is_dir() {
        return Err(missing("convert", format!("training data directory {} does not exist", dir.display())));
    }
    let cases = case_dirs("convert", &dir)?;
    if cases.is_empty() {
        return Err(missing("convert", format!("no case_* directories in {}", dir.display())));
    }
    Ok(cases)
}

fn case_files(case: &Path, with_labels: bool) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = Sequence::ALL.iter().map(|&s| sequence_path(case, s)).collect();
    if with_labels {
        v.push(labels_path(case));
    }
    v
}

fn convert_hash(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let cases = training_inputs(cfg)?;
    let files: Vec<PathBuf> = cases.iter().flat_map(|(_, p)| case_files(p, true)).collect();
    stage_hash(&(cfg.crop_size, cases.iter().map(|c| &c.0).collect::<Vec<_>>()), &files, "convert")
}

fn stage_dir(cfg: &PipelineConfig, stage: &str, hash: &str) -> PathBuf {
    cfg.work_dir.join(format!("{stage}-{hash}"))
}

const DATASET_FILE: &str = "dataset.myot";

/// Slices every training case into cropped, normalized samples.
pub fn run_convert(cfg: &PipelineConfig) -> Result<StageOutput, PipelineError> {
    const STAGE: &str = "convert";
    let hash = convert_hash(cfg)?;
    let dir = stage_dir(cfg, STAGE, &hash);
    let mut samples: Vec<SliceSample> = Vec::new();
    for (id, case) in training_inputs(cfg)? {
        let images = read_case(STAGE, &case)?;
        let labels = read_volume(STAGE, &labels_path(&case))?;
        samples.extend(extract_slices(&id, &images, &labels, cfg.crop_size).map_err(fail(STAGE))?);
    }
    log::info!("convert: {} slices", samples.len());
    write(STAGE, &dir.join(DATASET_FILE), &encode_dataset(&samples)?)?;
    Ok(StageOutput { dir, hash })
}

fn augment_hash(cfg: &PipelineConfig) -> Result<(String, String), PipelineError> {
    let up = convert_hash(cfg)?;
    let h = stage_hash(&(&up, cfg.warps_per_slice, cfg.seed), &[], "augment")?;
    Ok((up, h))
}

fn load_dataset(stage: &'static str, path: &Path, upstream: &str) -> Result<Vec<SliceSample>, PipelineError> {
    if !path.is_file() {
        return Err(missing(stage, format!("{} not found; run {upstream} first", path.display())));
    }
    decode_dataset(&read(stage, path)?)
}

pub fn run_augment(cfg: &PipelineConfig) -> Result<StageOutput, PipelineError> {
    const STAGE: &str = "augment";
    let (up, hash) = augment_hash(cfg)?;
    let samples = load_dataset(STAGE, &stage_dir(cfg, "convert", &up).join(DATASET_FILE), "convert")?;
    let mut rng = Rng::new(cfg.seed);
    let augmented = augment_dataset(&samples, &mut rng, cfg.warps_per_slice).map_err(fail(STAGE))?;
    log::info!("augment: {} -> {} samples", samples.len(), augmented.len());
    let dir = stage_dir(cfg, STAGE, &hash);
    write(STAGE, &dir.join(DATASET_FILE), &encode_dataset(&augmented)?)?;
    Ok(StageOutput { dir, hash })
}

fn train_hash(cfg: &PipelineConfig) -> Result<(String, String), PipelineError> {
    let (_, up) = augment_hash(cfg)?;
    let members: Vec<_> =
        (0..NUM_BLOCKS).flat_map(|b| (0..cfg.members(b).len()).map(move |m| (b, m))).map(|(b, m)| cfg.train_config(b, m)).collect();
    let h = stage_hash(&(&up, members, cfg.block_input_overrides()), &[], "train")?;
    Ok((up, h))
}

fn model_path(dir: &Path, block: usize, member: usize) -> PathBuf {
    dir.join(format!("block{block}_m{member}.myot"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub hash: String,
    pub reports: Vec<TrainReport>,
}

/// Trains every member of the selected blocks (all blocks when `only` is
/// `None`) and stores the best checkpoint and per-epoch log of each.
pub fn run_train(cfg: &PipelineConfig, only: Option<usize>) -> Result<TrainOutput, PipelineError> {
    const STAGE: &str = "train";
    if let Some(b) = only {
        if b >= NUM_BLOCKS {
            return Err(PipelineError::Config(format!("block {b} out of range 0..{NUM_BLOCKS}")));
        }
    }
    let (up, hash) = train_hash(cfg)?;
    let samples = load_dataset(STAGE, &stage_dir(cfg, "augment", &up).join(DATASET_FILE), "augment")?;
    let encoder = Encoder::with_inputs(&cfg.block_input_overrides());
    let datasets = encoder.encode(&samples).map_err(fail(STAGE))?;
    drop(samples);
    let dir = stage_dir(cfg, STAGE, &hash);
    let mut reports = Vec::new();
    for (b, ds) in datasets.iter().enumerate() {
        if only.is_some_and(|o| o != b) {
            continue;
        }
        for m in 0..cfg.members(b).len() {
            let tc = cfg.train_config(b, m);
            let (train, val) = split(ds, tc.val_fraction, tc.seed).map_err(fail(STAGE))?;
            log::info!(
                "train: block {b} member {m} ({}) on {} samples, {} validation",
                tc.net.arch,
                train.len(),
                val.len()
            );
            let (net, report) = train_block(&train, &val, &tc).map_err(fail(STAGE))?;
            log::info!("train: block {b} member {m} best val dice {:.4} at epoch {}", report.best_val_dice, report.best_epoch);
            let path = model_path(&dir, b, m);
            write(STAGE, &path, &write_container(&net.to_records()).map_err(fail(STAGE))?)?;
            write(STAGE, &path.with_extension("jsonl"), report.to_json_lines().as_bytes())?;
            reports.push(report);
        }
    }
    Ok(TrainOutput { dir, hash, reports })
}

pub fn load_models(cfg: &PipelineConfig, dir: &Path) -> Result<ModelSet, PipelineError> {
    const STAGE: &str = "predict";
    let mut models = ModelSet::default();
    for (b, slot) in models.blocks.iter_mut().enumerate() {
        for m in 0..cfg.members(b).len() {
            let path = model_path(dir, b, m);
            if !path.is_file() {
                return Err(missing(STAGE, format!("{} not found; run train first", path.display())));
            }
            let records = read_container(&read(STAGE, &path)?).map_err(fail(STAGE))?;
            slot.push(Network::from_records(&records).map_err(fail(STAGE))?);
        }
    }
    Ok(models)
}

fn test_inputs(cfg: &PipelineConfig, stage: &'static str) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let dir = cfg.test_dir();
    if !dir.is_dir() {
        return Err(missing(stage, format!("test data directory {} does not exist", dir.display())));
    }
    case_dirs(stage, &dir)
}

fn predict_hash(cfg: &PipelineConfig) -> Result<(String, String), PipelineError> {
    let (_, up) = train_hash(cfg)?;
    let cases = test_inputs(cfg, "predict")?;
    let files: Vec<PathBuf> = cases.iter().flat_map(|(_, p)| case_files(p, false)).collect();
    let names: Vec<&String> = cases.iter().map(|c| &c.0).collect();
    let h = stage_hash(&(&up, cfg.crop_size, names), &files, "predict")?;
    Ok((up, h))
}

/// Label volume predicted for one case, at the case's original size.
pub fn predict_case(
    models: &ModelSet,
    encoder: &Encoder,
    case: &BTreeMap<Sequence, Volume>,
    crop_size: usize,
) -> Result<Volume, PipelineError> {
    const STAGE: &str = "predict";
    let (nx, ny, _) = case[&Sequence::Bssfp].dims();
    let images = extract_images(case, crop_size).map_err(fail(STAGE))?;
    let inputs = images.iter().map(|s| encoder.encode_inference(s)).collect::<Result<Vec<_>, _>>().map_err(fail(STAGE))?;
    let post = postprocess(&predict_blocks(models, &inputs).map_err(fail(STAGE))?);
    let mut slices = Vec::with_capacity(inputs.len());
    for z in 0..inputs.len() {
        let blocks = std::array::from_fn(|b| post.blocks[b][z].clone());
        let labels = reassemble(&decode_masks(&blocks).map_err(fail(STAGE))?);
        slices.push(uncrop(&labels, ny, nx).map(f64::from));
    }
    Ok(Volume::from_slices(&slices, true))
}

pub fn prediction_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.nii"))
}

/// Writes one predicted label NIfTI per test case.
pub fn run_predict(cfg: &PipelineConfig) -> Result<StageOutput, PipelineError> {
    const STAGE: &str = "predict";
    let (up, hash) = predict_hash(cfg)?;
    let models = load_models(cfg, &stage_dir(cfg, "train", &up))?;
    let encoder = Encoder::with_inputs(&cfg.block_input_overrides());
    let dir = stage_dir(cfg, STAGE, &hash);
    for (id, case) in test_inputs(cfg, STAGE)? {
        let volume = predict_case(&models, &encoder, &read_case(STAGE, &case)?, cfg.crop_size)?;
        write(STAGE, &prediction_path(&dir, &id), &write_nifti(&volume).map_err(fail(STAGE))?)?;
        log::info!("predict: {id}");
    }
    Ok(StageOutput { dir, hash })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutput {
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Scores predictions against the test labels and writes `report.csv` and
/// `report.json`.
pub fn run_evaluate(cfg: &PipelineConfig) -> Result<EvaluateOutput, PipelineError> {
    const STAGE: &str = "evaluate";
    let pred_dir = match &cfg.predictions_dir {
        Some(d) => d.clone(),
        None => stage_dir(cfg, "predict", &predict_hash(cfg)?.1),
    };
    let cases = test_inputs(cfg, STAGE)?;
    let mut files = Vec::new();
    for (id, case) in &cases {
        files.push(labels_path(case));
        files.push(prediction_path(&pred_dir, id));
    }
    for f in &files {
        if !f.is_file() {
            return Err(missing(STAGE, format!("{} not found", f.display())));
        }
    }
    let hash = stage_hash(&(cfg.empty_empty_score, cases.iter().map(|c| &c.0).collect::<Vec<_>>()), &files, STAGE)?;
    let conv = EmptyConvention { both_empty: cfg.empty_empty_score };
    let mut rows = Vec::new();
    for (id, case) in &cases {
        let gt = read_volume(STAGE, &labels_path(case))?;
        let pred = read_volume(STAGE, &prediction_path(&pred_dir, id))?;
        rows.push(evaluate_case(id, &pred, &gt, conv).map_err(fail(STAGE))?);
    }
    let report = aggregate(rows).map_err(fail(STAGE))?;
    let dir = stage_dir(cfg, STAGE, &hash);
    write(STAGE, &dir.join("report.csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write(STAGE, &dir.join("report.json"), &json)?;
    Ok(EvaluateOutput { dir, report })
}

/// Runs the gradient suite; fails when any check exceeds its tolerance.
pub fn run_gradcheck(cfg: &PipelineConfig) -> Result<Vec<CheckResult>, PipelineError> {
    let results = run_suite(cfg.seed);
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        return Err(PipelineError::Stage {
            stage: "gradcheck",
            kind: "GradientMismatch".into(),
            detail: format!("{}: max rel err {:.3e} > {:.0e}", bad.name, bad.max_rel_err, bad.tolerance),
        });
    }
    Ok(results)
}

/// Runs one command and returns a printable summary. `all` chains
/// convert → augment → train → predict → evaluate; `block` limits `train`
/// to one block.
pub fn run(command: &str, cfg: &PipelineConfig, block: Option<usize>) -> Result<String, PipelineError> {
    if !COMMANDS.contains(&command) {
        return Err(PipelineError::UnknownCommand(command.to_string()));
    }
    cfg.validate()?;
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    match command {
        "synth" => {
            let s = run_synth(cfg)?;
            for p in s.train_cases.iter().chain(&s.test_cases) {
                line(p.display().to_string());
            }
        }
        "convert" => line(run_convert(cfg)?.dir.display().to_string()),
        "augment" => line(run_augment(cfg)?.dir.display().to_string()),
        "train" => {
            let t = run_train(cfg, block)?;
            line(t.dir.display().to_string());
            for r in &t.reports {
                line(format!("block {} best_val_dice {:.4} epoch {}", r.block_id, r.best_val_dice, r.best_epoch));
            }
        }
        "predict" => line(run_predict(cfg)?.dir.display().to_string()),
        "evaluate" => {
            let e = run_evaluate(cfg)?;
            line(e.report.to_csv().trim_end().to_string());
            line(e.dir.join("report.csv").display().to_string());
        }
        "gradcheck" => {
            for r in run_gradcheck(cfg)? {
                line(format!("{:<28} max_rel_err {:.3e} (tol {:.0e}, {} entries)", r.name, r.max_rel_err, r.tolerance, r.checked));
            }
        }
        _ => {
            line(run_convert(cfg)?.dir.display().to_string());
            line(run_augment(cfg)?.dir.display().to_string());
            line(run_train(cfg, block)?.dir.display().to_string());
            line(run_predict(cfg)?.dir.display().to_string());
            let e = run_evaluate(cfg)?;
            line(e.report.to_csv().trim_end().to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsError;

    #[test]
    fn diagnostic_kind_is_variant_name() {
        let e = fail::<MetricsError>("evaluate")(MetricsError::DimMismatch((1, 2, 3), (1, 2, 4)));
        assert_eq!(e.kind(), "DimMismatch");
        assert!(e.to_string().contains("DimMismatch"));
        assert_eq!(PipelineError::Config("x".into()).kind(), "ConfigError");
    }

    #[test]
    fn missing_training_data_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { data_dir: tmp.path().join("nope"), work_dir: tmp.path().join("w"), ..Default::default() };
        let e = run_convert(&cfg).unwrap_err();
        assert_eq!(e.kind(), "MissingInput");
    }
}
