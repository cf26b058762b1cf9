//! Python module `myops`. Grids cross the boundary as nested lists
//! (`rows[y][x]`), volumes as `(dims, voxels)` with x varying fastest.

use std::fmt::Display;

use myops_core::grid::Grid;
use myops_core::metrics::{dice_with, jaccard_with, EmptyConvention};
use myops_core::nn::{Arch, NetConfig, Network as CoreNetwork, Tensor};
use myops_core::pipeline::PipelineConfig;
use myops_core::volume_io::{read_container, write_container, Volume};
use myops_core::{decoder, inference, nn, pipeline, preprocess, synth, volume_io};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub type Dims = (usize, usize, usize);

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Nested rows to a grid; rows must be non-empty and equally long.
pub fn rows_to_grid<T: Copy>(rows: &[Vec<T>]) -> Result<Grid<T>, String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err("grid must be non-empty".into());
    }
    if rows.iter().any(|r| r.len() != w) {
        return Err("grid rows differ in length".into());
    }
    Ok(Grid::from_vec(h, w, rows.concat()))
}

pub fn grid_to_rows<T: Copy>(grid: &Grid<T>) -> Vec<Vec<T>> {
    grid.as_slice().chunks(grid.width()).map(<[T]>::to_vec).collect()
}

pub fn make_volume(dims: Dims, voxels: Vec<f64>, label_flag: bool) -> Result<Volume, String> {
    if dims.0 * dims.1 * dims.2 != voxels.len() {
        return Err(format!("dims {dims:?} do not match {} voxels", voxels.len()));
    }
    Ok(Volume::new(dims, voxels, label_flag))
}

#[pyfunction]
fn read_nifti(path: &str) -> PyResult<(Dims, Vec<f64>, bool)> {
    let bytes = std::fs::read(path).map_err(value_err)?;
    let v = volume_io::parse_nifti(&bytes).map_err(value_err)?;
    Ok((v.dims(), v.voxels().to_vec(), v.label_flag()))
}

#[pyfunction]
#[pyo3(signature = (path, dims, voxels, label_flag=false))]
fn write_nifti(path: &str, dims: Dims, voxels: Vec<f64>, label_flag: bool) -> PyResult<()> {
    let v = make_volume(dims, voxels, label_flag).map_err(value_err)?;
    let bytes = volume_io::write_nifti(&v).map_err(value_err)?;
    std::fs::write(path, bytes).map_err(value_err)
}

/// Returns `(image, i05, i95, degenerate)`.
#[pyfunction]
fn normalize(image: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64, f64, bool)> {
    let n = preprocess::normalize_percentile(&rows_to_grid(&image).map_err(value_err)?);
    Ok((grid_to_rows(&n.image), n.params.i05, n.params.i95, n.degenerate))
}

/// Masks go back as ints; `u8` sequences would arrive as `bytes`.
fn mask_rows(mask: &Grid<u8>) -> Vec<Vec<u32>> {
    grid_to_rows(mask).into_iter().map(|r| r.into_iter().map(u32::from).collect()).collect()
}

#[pyfunction]
fn decode_pixel(q: [f64; 5]) -> [u32; 5] {
    decoder::decode_pixel(q).map(u32::from)
}

/// Five block maps to one label-code grid.
#[pyfunction]
fn decode_labels(blocks: [Vec<Vec<f64>>; 5]) -> PyResult<Vec<Vec<u16>>> {
    let grids = blocks.iter().map(|b| rows_to_grid(b)).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
    let grids: [Grid<f64>; 5] = grids.try_into().expect("five blocks");
    let masks = decoder::decode(&grids).map_err(value_err)?;
    Ok(grid_to_rows(&decoder::reassemble(&masks)))
}

#[pyfunction]
#[pyo3(signature = (a, b, both_empty=1.0))]
fn dice(a: Vec<u8>, b: Vec<u8>, both_empty: f64) -> PyResult<f64> {
    dice_with(&a, &b, EmptyConvention { both_empty }).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, both_empty=1.0))]
fn jaccard(a: Vec<u8>, b: Vec<u8>, both_empty: f64) -> PyResult<f64> {
    jaccard_with(&a, &b, EmptyConvention { both_empty }).map_err(value_err)
}

#[pyfunction]
fn largest_cc(mask: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u32>>> {
    Ok(mask_rows(&inference::largest_cc(&rows_to_grid(&mask).map_err(value_err)?)))
}

#[pyfunction]
fn fill_holes(mask: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u32>>> {
    Ok(mask_rows(&inference::fill_holes(&rows_to_grid(&mask).map_err(value_err)?)))
}

/// Phantom case as a dict of `(dims, voxels)` keyed by sequence name and
/// `"labels"`.
#[pyfunction]
#[pyo3(signature = (seed, index=0, size=64, slices=2))]
fn phantom<'py>(py: Python<'py>, seed: u64, index: u64, size: usize, slices: usize) -> PyResult<Bound<'py, PyDict>> {
    if size < 32 || slices == 0 {
        return Err(PyValueError::new_err("phantom needs size >= 32 and slices >= 1"));
    }
    let case = synth::phantom_case(seed, index, size, slices);
    let out = PyDict::new(py);
    for (seq, v) in &case.images {
        out.set_item(seq.name(), (v.dims(), v.voxels().to_vec()))?;
    }
    out.set_item("labels", (case.labels.dims(), case.labels.voxels().to_vec()))?;
    Ok(out)
}

/// `(name, max_rel_err, tolerance)` per check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> Vec<(String, f64, f64)> {
    nn::gradcheck::run_suite(seed).into_iter().map(|r| (r.name, r.max_rel_err, r.tolerance)).collect()
}

/// Runs a pipeline command with a TOML config string.
#[pyfunction]
#[pyo3(signature = (command, config="", desk_scale=false, block=None))]
fn run(command: &str, config: &str, desk_scale: bool, block: Option<usize>) -> PyResult<String> {
    let mut cfg = PipelineConfig::from_toml(config).map_err(value_err)?;
    if desk_scale {
        cfg = cfg.desk_scale();
    }
    cfg.apply_env();
    pipeline::run(command, &cfg, block).map_err(|e| PyValueError::new_err(format!("{}: {e}", e.kind())))
}

#[pyclass(module = "myops")]
struct Network {
    inner: CoreNetwork,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (arch="unet", depth=2, base_channels=8, seed=0))]
    fn new(arch: &str, depth: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(value_err)?;
        let inner = CoreNetwork::new(NetConfig { arch, depth, base_channels, seed }).map_err(value_err)?;
        Ok(Network { inner })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.config().arch.to_string()
    }

    /// Probability maps for a batch of single-channel images.
    fn forward(&self, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let grids = images.iter().map(|i| rows_to_grid(i)).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
        let x = Tensor::from_grids(grids.iter()).map_err(value_err)?;
        let y = self.inner.forward(&x).map_err(value_err)?;
        Ok((0..y.batch()).map(|n| grid_to_rows(&y.grid(n, 0))).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let bytes = write_container(&self.inner.to_records()).map_err(value_err)?;
        std::fs::write(path, bytes).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(value_err)?;
        let records = read_container(&bytes).map_err(value_err)?;
        Ok(Network { inner: CoreNetwork::from_records(&records).map_err(value_err)? })
    }
}

#[pymodule]
fn myops(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(write_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(decode_pixel, m)?)?;
    m.add_function(wrap_pyfunction!(decode_labels, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(largest_cc, m)?)?;
    m.add_function(wrap_pyfunction!(fill_holes, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Network>()?;
    Ok(())
}
