//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test -p myops-core --test acceptance -- 2 5`.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use myops_core::augment::{rotate_sample, warp, warp_masks, warp_sample, augment_dataset, DisplacementField, Rng, WarpMode};
use myops_core::blocks::{encode, NUM_BLOCKS};
use myops_core::decoder::{decode, decode_pixel};
use myops_core::inference::{fill_holes, largest_cc, predict_blocks, ModelSet};
use myops_core::metrics::{dice, jaccard};
use myops_core::nn::gradcheck::{run_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use myops_core::nn::{Arch, NetConfig, Network, Tensor};
use myops_core::pipeline::{
    run_augment, run_convert, run_evaluate, run_predict, run_synth, run_train, PipelineConfig,
};
use myops_core::preprocess::{extract_slices, normalize_percentile, SliceSample, NUM_CLASSES};
use myops_core::synth::phantom_set;
use myops_core::trainer::split;
use myops_core::volume_io::{parse_nifti, read_container, write_container, write_nifti, RawTensor, Record, Volume};
use myops_core::{Grid, Image, Mask};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(20);
    let elapsed = start.elapsed();
    for op in ["conv2d", "relu", "sigmoid", "maxpool2", "upsample2", "soft_dice_loss", "unet"] {
        ensure(results.iter().any(|r| r.name.starts_with(op)), || format!("no check covers {op}"))?;
    }
    let mut worst_op = 0.0f64;
    let mut worst_net = 0.0f64;
    for r in &results {
        let limit = if r.name.starts_with("unet") { END_TO_END_TOLERANCE } else { OP_TOLERANCE };
        ensure(r.checked > 0, || format!("{} checked no entries", r.name))?;
        ensure(r.max_rel_err < limit, || format!("{}: {:.3e} >= {limit:.0e}", r.name, r.max_rel_err))?;
        if r.name.starts_with("unet") {
            worst_net = worst_net.max(r.max_rel_err);
        } else {
            worst_op = worst_op.max(r.max_rel_err);
        }
    }
    ensure(OP_TOLERANCE <= 1e-6 && END_TO_END_TOLERANCE <= 1e-5, || "tolerances loosened".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} checks, worst op {worst_op:.2e}, worst network {worst_net:.2e}, {elapsed:.1?}", results.len()))
}

// 2

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let density_a = rng.gen_range(0.0..1.0);
        let density_b = rng.gen_range(0.0..1.0);
        let mut a = vec![0u8; 256];
        let mut b = vec![0u8; 256];
        // a few pairs are empty on one or both sides
        if i % 50 != 0 {
            a.iter_mut().for_each(|v| *v = u8::from(rng.gen_bool(density_a)));
        }
        if i % 70 != 0 {
            b.iter_mut().for_each(|v| *v = u8::from(rng.gen_bool(density_b)));
        }
        let sa: std::collections::HashSet<usize> = (0..256).filter(|&k| a[k] == 1).collect();
        let sb: std::collections::HashSet<usize> = (0..256).filter(|&k| b[k] == 1).collect();
        let inter = sa.intersection(&sb).count() as f64;
        let union = sa.union(&sb).count() as f64;
        let (want_d, want_j) = if union == 0.0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter / (sa.len() + sb.len()) as f64, inter / union)
        };
        let d = dice(&a, &b).map_err(|e| e.to_string())?;
        let j = jaccard(&a, &b).map_err(|e| e.to_string())?;
        ensure(d == want_d, || format!("pair {i}: dice {d} vs {want_d}"))?;
        ensure(j == want_j, || format!("pair {i}: jaccard {j} vs {want_j}"))?;
        let gap = (j - d / (2.0 - d)).abs();
        ensure(gap < 1e-12, || format!("pair {i}: |J - D/(2-D)| = {gap:e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("1000 pairs exact, max |J - D/(2-D)| = {worst:.1e}"))
}

// 3

fn decoder_truth_table() -> Outcome {
    let mut overlaps = Vec::new();
    for bits in 0u8..32 {
        let p: [bool; 5] = std::array::from_fn(|k| bits >> k & 1 == 1);
        let epi_only = p[2] && !p[0];
        let want = [p[0], p[1], epi_only && !p[3], epi_only && p[3] && !p[4], epi_only && p[4]].map(u8::from);
        let q = p.map(|b| if b { 1.0 } else { 0.0 });
        let got = decode_pixel(q);
        ensure(got == want, || format!("input {p:?}: {got:?} vs {want:?}"))?;
        let [_, _, nm, me, ms] = got;
        if nm + me + ms > 1 {
            overlaps.push(p.map(u8::from));
        }
        if !epi_only {
            ensure(me == 0 && ms == 0, || format!("input {p:?}: ME/MS outside myocardium"))?;
        }
    }
    // the whole-grid decoder agrees with the per-pixel one
    let blocks: [Image; 5] = std::array::from_fn(|b| Grid::from_fn(4, 8, |y, x| f64::from(((y * 8 + x) >> b & 1) as u8)));
    let grid = decode(&blocks).map_err(|e| e.to_string())?;
    for i in 0..32 {
        let px = decode_pixel(std::array::from_fn(|b| blocks[b].as_slice()[i]));
        for c in 0..NUM_CLASSES {
            ensure(grid.masks[c].as_slice()[i] == px[c], || format!("grid decode differs at {i}"))?;
        }
    }
    // the formula itself sets NM and MS together when MS is on but ME+MS is off
    ensure(overlaps.is_empty(), || {
        format!("32/32 inputs match the formula and ME/MS stay in myocardium, but NM/MS overlap for inputs {overlaps:?}")
    })?;
    Ok("32/32 inputs match, outputs disjoint, ME/MS confined to myocardium".into())
}

// 4

fn disjoint_binary(s: &SliceSample) -> bool {
    let n = s.masks[0].len();
    s.masks.iter().all(|m| m.is_binary()) && (0..n).all(|i| s.masks.iter().map(|m| m.as_slice()[i]).sum::<u8>() <= 1)
}

fn augmentation_arithmetic() -> Outcome {
    let mut slices = Vec::new();
    for (i, case) in phantom_set(4, 34, 32, 3).iter().enumerate() {
        slices.extend(extract_slices(&format!("case_{i:03}"), &case.images, &case.labels, 32).map_err(|e| e.to_string())?);
    }
    ensure(slices.len() == 102, || format!("{} input slices", slices.len()))?;
    let augmented = augment_dataset(&slices, &mut Rng::new(4), 20).map_err(|e| e.to_string())?;
    ensure(augmented.len() == 4080, || format!("{} augmented samples", augmented.len()))?;
    ensure(augmented.iter().all(disjoint_binary), || "augmented masks not binary/disjoint".into())?;
    let datasets = encode(&augmented).map_err(|e| e.to_string())?;
    for ds in &datasets {
        let (train, val) = split(ds, 0.2, 4).map_err(|e| e.to_string())?;
        ensure((train.len(), val.len()) == (3264, 816), || format!("split {} / {}", train.len(), val.len()))?;
    }
    for s in &slices {
        let (h, w) = s.dims();
        let zero = DisplacementField::zero(h, w);
        let warped = warp_sample(s, &zero);
        // bit-identical, including the sign of zero
        for (seq, img) in &s.images {
            let same = warped.images[seq].as_slice().iter().zip(img.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("zero warp changed {seq}"))?;
            ensure(warp(img, &zero, WarpMode::Image) == *img, || "zero warp changed an image".into())?;
        }
        ensure(warped.masks == s.masks, || "zero warp changed masks".into())?;
        ensure(warp_masks(&s.masks, &zero) == s.masks, || "zero warp changed masks".into())?;
        let mut r = s.clone();
        for _ in 0..4 {
            r = rotate_sample(&r, 1).map_err(|e| e.to_string())?;
        }
        ensure(r == *s, || "four quarter turns are not the identity".into())?;
    }
    Ok("102 slices x 20 warps -> 4080 samples, split 3264/816, zero warp and 4x90 deg exact".into())
}

// 5

fn components(mask: &Mask, fg: u8) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != fg || seen[y * w + x] {
                continue;
            }
            let mut queue = VecDeque::from([(y, x)]);
            seen[y * w + x] = true;
            let mut comp = Vec::new();
            while let Some((cy, cx)) = queue.pop_front() {
                comp.push(cy * w + cx);
                let neighbours = [(cy.wrapping_sub(1), cx), (cy + 1, cx), (cy, cx.wrapping_sub(1)), (cy, cx + 1)];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && !seen[ny * w + nx] && mask.get(ny, nx) == fg {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

fn oracle_largest(mask: &Mask) -> Mask {
    let comps = components(mask, 1);
    let mut keep = vec![0u8; mask.len()];
    // scanning order makes the first-found component win ties
    if let Some(best) = comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }) {
        best.iter().for_each(|&i| keep[i] = 1);
    }
    Grid::from_vec(mask.height(), mask.width(), keep)
}

fn oracle_fill(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    let mut out = mask.clone();
    for comp in components(mask, 0) {
        let on_border = comp.iter().any(|&i| i / w == 0 || i / w == h - 1 || i % w == 0 || i % w == w - 1);
        if !on_border {
            comp.iter().for_each(|&i| out.as_mut_slice()[i] = 1);
        }
    }
    out
}

fn morphology_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..500 {
        let density = rng.gen_range(0.2..0.8);
        let mask: Mask = Grid::from_fn(32, 32, |_, _| u8::from(rng.gen_bool(density)));
        let lcc = largest_cc(&mask);
        let filled = fill_holes(&mask);
        ensure(lcc == oracle_largest(&mask), || format!("mask {i}: largest_cc differs from oracle"))?;
        ensure(filled == oracle_fill(&mask), || format!("mask {i}: fill_holes differs from oracle"))?;
        ensure(largest_cc(&lcc) == lcc, || format!("mask {i}: largest_cc not idempotent"))?;
        ensure(fill_holes(&filled) == filled, || format!("mask {i}: fill_holes not idempotent"))?;
        let subset = lcc.as_slice().iter().zip(mask.as_slice()).all(|(&l, &m)| l <= m);
        let superset = filled.as_slice().iter().zip(mask.as_slice()).all(|(&f, &m)| f >= m);
        ensure(subset, || format!("mask {i}: largest_cc not a subset"))?;
        ensure(superset, || format!("mask {i}: fill_holes not a superset"))?;
    }
    Ok("500 masks match flood-fill oracles; idempotent; subset/superset hold".into())
}

// 6

struct E2eRun {
    report_json: Vec<u8>,
    report_csv: String,
    lvbp: f64,
    epi: f64,
    ms: f64,
    elapsed: Duration,
}

fn desk_run(root: &Path) -> Result<E2eRun, String> {
    let mut cfg = PipelineConfig::default().desk_scale();
    cfg.data_dir = root.join("data");
    cfg.work_dir = root.join("work");
    cfg.seed = 6;
    let start = Instant::now();
    let err = |e: myops_core::pipeline::PipelineError| e.to_string();
    run_synth(&cfg).map_err(err)?;
    run_convert(&cfg).map_err(err)?;
    run_augment(&cfg).map_err(err)?;
    let trained = run_train(&cfg, None).map_err(err)?;
    run_predict(&cfg).map_err(err)?;
    let eval = run_evaluate(&cfg).map_err(err)?;
    let elapsed = start.elapsed();
    for r in &trained.reports {
        eprintln!("  block {} best val dice {:.4} (epoch {})", r.block_id, r.best_val_dice, r.best_epoch);
    }
    let rep = &eval.report;
    let get = |c: &str| rep.mean_dice(c).ok_or(format!("no column {c}"));
    Ok(E2eRun {
        report_json: std::fs::read(eval.dir.join("report.json")).map_err(|e| e.to_string())?,
        report_csv: std::fs::read_to_string(eval.dir.join("report.csv")).map_err(|e| e.to_string())?,
        lvbp: get("LVBP")?,
        epi: get("LVEpi")?,
        ms: get("MS")?,
        elapsed,
    })
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = desk_run(&tmp.path().join("a"))?;
    eprint!("{}", first.report_csv);
    let summary = format!(
        "LVBP {:.3}, LVEpi {:.3}, MS {:.3} in {:.0?}",
        first.lvbp, first.epi, first.ms, first.elapsed
    );
    ensure(first.lvbp >= 0.85, || format!("LVBP dice {:.4} < 0.85 ({summary})", first.lvbp))?;
    ensure(first.epi >= 0.85, || format!("LVEpi dice {:.4} < 0.85 ({summary})", first.epi))?;
    ensure(first.ms >= 0.5, || format!("MS dice {:.4} < 0.5 ({summary})", first.ms))?;
    ensure(first.elapsed < Duration::from_secs(30 * 60), || format!("took {:?}", first.elapsed))?;
    let second = desk_run(&tmp.path().join("b"))?;
    ensure(second.report_json == first.report_json && second.report_csv == first.report_csv, || {
        "rerun with the same seed produced a different report".into()
    })?;
    Ok(format!("{summary}; rerun report bit-identical"))
}

// 7

fn ensemble_behaviour() -> Outcome {
    let nets: Vec<Network> = [(Arch::Unet, 1), (Arch::Unet, 2), (Arch::Unetpp, 3)]
        .iter()
        .map(|&(arch, seed)| Network::new(NetConfig { arch, depth: 2, base_channels: 4, seed }))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<[Image; NUM_BLOCKS]> =
        (0..3).map(|_| std::array::from_fn(|_| Grid::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0)))).collect();
    let with = |members: [&Vec<Network>; NUM_BLOCKS]| ModelSet { blocks: members.map(|m| m.clone()) };
    let single = vec![nets[0].clone()];
    let triple = vec![nets[0].clone(), nets[0].clone(), nets[0].clone()];
    let a = predict_blocks(&with([&single; NUM_BLOCKS]), &inputs).map_err(|e| e.to_string())?;
    let b = predict_blocks(&with([&single, &single, &single, &triple, &triple]), &inputs).map_err(|e| e.to_string())?;
    ensure(a == b, || "three identical members differ from the single model".into())?;
    let bits = |p: &myops_core::inference::RawPredictions| -> Vec<u64> {
        p.blocks.iter().flatten().flat_map(|g| g.as_slice().iter().map(|v| v.to_bits())).collect()
    };
    let mut reference = None;
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let members: Vec<Network> = perm.iter().map(|&i| nets[i].clone()).collect();
        let out = predict_blocks(&with([&single, &single, &single, &members, &members]), &inputs).map_err(|e| e.to_string())?;
        let got = bits(&out);
        match &reference {
            None => reference = Some(got),
            Some(r) => ensure(*r == got, || format!("permutation {perm:?} changed the output"))?,
        }
    }
    Ok("identical members reproduce the single model; all 6 permutations bit-identical".into())
}

// 8

#[derive(serde::Deserialize)]
struct Expected {
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn fixtures_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn io_round_trips() -> Outcome {
    let dir = fixtures_dir();
    let expected: BTreeMap<String, Expected> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    for (name, exp) in &expected {
        let read = |tag: &str| -> Result<Volume, String> {
            let bytes = std::fs::read(dir.join(format!("{name}_{tag}.nii"))).map_err(|e| e.to_string())?;
            parse_nifti(&bytes).map_err(|e| format!("{name}_{tag}: {e}"))
        };
        let le = read("le")?;
        let be = read("be")?;
        ensure(le == be, || format!("{name}: native and byte-swapped differ"))?;
        let (nx, ny, nz) = le.dims();
        let want_dims = (exp.dims[0], exp.dims[1], exp.dims.get(2).copied().unwrap_or(1));
        ensure((nx, ny, nz) == want_dims, || format!("{name}: dims {:?}", le.dims()))?;
        ensure(le.voxels() == exp.values.as_slice(), || format!("{name}: voxel values differ from reference reader"))?;
        let again = parse_nifti(&write_nifti(&le).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(again.voxels() == le.voxels() && again.dims() == le.dims(), || format!("{name}: write/parse changed data"))?;
        ensure(name != "labels_i16" || again.label_flag(), || "label volume lost its label flag".into())?;
    }
    let tricky = [0.0, -0.0, f64::NAN, f64::INFINITY, f64::MIN_POSITIVE / 4.0, 1.0 / 3.0];
    let records = vec![
        Record::new("a", RawTensor::from_f64(&[2, 3], &tricky)),
        Record::new("b", RawTensor::from_u8(&[0], &[])),
        Record::new("c", RawTensor::scalar_u64(u64::MAX)),
    ];
    let bytes = write_container(&records).map_err(|e| e.to_string())?;
    let back = read_container(&bytes).map_err(|e| e.to_string())?;
    ensure(write_container(&back).map_err(|e| e.to_string())? == bytes, || "container bytes changed".into())?;
    let bits: Vec<u64> = back[0].tensor.to_f64().unwrap().iter().map(|v| v.to_bits()).collect();
    ensure(bits == tricky.map(f64::to_bits), || "container f64 payload not bit-exact".into())?;
    for arch in [Arch::Unet, Arch::Unetpp] {
        let net = Network::new(NetConfig { arch, depth: 2, base_channels: 4, seed: 8 }).map_err(|e| e.to_string())?;
        let reloaded = Network::from_records(
            &read_container(&write_container(&net.to_records()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec([2, 1, 16, 16], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y0: Vec<u64> = net.forward(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
        let y1: Vec<u64> = reloaded.forward(&x).unwrap().data().iter().map(|v| v.to_bits()).collect();
        ensure(y0 == y1, || format!("{arch} checkpoint reload changed inference"))?;
    }
    Ok(format!("{} fixtures LE == BE == reference, round trips exact, checkpoints reload bit-identically", expected.len()))
}

// 9

fn normalization_ramp() -> Outcome {
    let ramp: Image = Grid::from_fn(1, 101, |_, x| x as f64);
    let n = normalize_percentile(&ramp);
    ensure(n.params.i05 == 5.0 && n.params.i95 == 95.0, || format!("percentiles {:?}", n.params))?;
    ensure(!n.degenerate, || "ramp flagged degenerate".into())?;
    ensure(n.image.get(0, 5) == 0.0 && n.image.get(0, 95) == 1.0, || "anchors do not map to 0 and 1".into())?;
    ensure(n.image.get(0, 0) == -5.0 / 90.0 && n.image.get(0, 100) == 95.0 / 90.0, || "ends not linear".into())?;
    let constant = normalize_percentile(&Grid::filled(8, 8, 42.0));
    ensure(constant.degenerate, || "constant image not degenerate".into())?;
    ensure(constant.image.as_slice().iter().all(|v| v.is_finite()), || "degenerate output not finite".into())?;
    Ok("i05 = 5, i95 = 95, anchors exact, constant image degenerate".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("decoder truth table", decoder_truth_table),
        ("augmentation arithmetic", augmentation_arithmetic),
        ("morphology oracle", morphology_oracle),
        ("end-to-end desk scale", end_to_end),
        ("ensemble behaviour", ensemble_behaviour),
        ("I/O round trips", io_round_trips),
        ("normalization", normalization_ramp),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{took:.1?}]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
