//! Python bindings for the droplet-spectrum VAE pipeline.

use std::collections::HashMap;
use std::path::PathBuf;

use dropletscope as ds;
use ds::config::PipelineConfig;
use ds::dsd::{BinGrid, Dsd};
use ds::pipeline::{self, Layout};
use ds::vae::{self, Checkpoint, LatentPoint, TrainConfig, VaeModel};
use ds::viz::{self, RgbCalibration};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ds::Error) -> PyErr {
    match e {
        ds::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        ds::Error::Numeric { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dsd(x: Vec<f64>) -> PyResult<Dsd> {
    Dsd::new(x).map_err(to_py)
}

/// Bin centre diameters in mm.
#[pyfunction]
fn bin_diameters() -> Vec<f64> {
    BinGrid::default().diameters().to_vec()
}

/// Scales a spectrum to unit total mass.
#[pyfunction]
fn normalize(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(ds::dsd::normalize_dsd(&dsd(x)?).map_err(to_py)?.into_vec())
}

/// Mass-weighted mean diameter in mm.
#[pyfunction]
fn mean_diameter(x: Vec<f64>) -> PyResult<f64> {
    ds::dsd::mean_diameter(&dsd(x)?, &BinGrid::default()).map_err(to_py)
}

#[pyfunction]
fn kl_gauss(mu: LatentPoint, logvar: LatentPoint) -> f64 {
    vae::kl_gauss(&mu, &logvar)
}

/// Cloudy cells of one snapshot.
#[pyclass(name = "Snapshot")]
struct PySnapshot {
    inner: ds::snapshot::SnapshotField,
}

#[pymethods]
impl PySnapshot {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ds::snapshot::read_snapshot(&path).map_err(to_py)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        ds::snapshot::write_snapshot(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    #[getter]
    fn aerosol_factor(&self) -> f32 {
        self.inner.aerosol_factor
    }

    #[getter]
    fn dims(&self) -> (u32, u32, u32) {
        (self.inner.dims.nx, self.inner.dims.ny, self.inner.dims.nz)
    }

    /// Cell indices as `(i, j, k)` tuples.
    fn indices(&self) -> Vec<(u32, u32, u32)> {
        self.inner.cells().iter().map(|c| (c.i, c.j, c.k)).collect()
    }

    /// Normalized spectra, one list per cell.
    fn spectra(&self) -> Vec<Vec<f64>> {
        self.inner.cells().iter().map(|c| c.dsd.as_slice().to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Generates one synthetic snapshot; returns it with the per-cell pathway coordinate.
#[pyfunction]
#[pyo3(signature = (time, aerosol_factor = 1.0, seed = 42, overrides = None))]
fn generate_snapshot(
    time: f64,
    aerosol_factor: f32,
    seed: u64,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<(PySnapshot, Vec<f64>)> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(to_py)?;
    }
    cfg.synth.seed = seed;
    let sc = cfg.synth_config(aerosol_factor).map_err(to_py)?;
    let snap = ds::synth::generate_snapshot(time, &sc).map_err(to_py)?;
    Ok((PySnapshot { inner: snap.field }, snap.s_true))
}

/// Trained or freshly initialized VAE.
#[pyclass(name = "Model")]
#[derive(Clone)]
struct PyModel {
    inner: VaeModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (hidden = vec![64, 64], seed = 0))]
    fn new(hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: VaeModel::init(&hidden, vae::Activation::Silu, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: vae::checkpoint_load(&path).map_err(to_py)?.model })
    }

    #[pyo3(signature = (path, beta = 1e-3, seed = 0))]
    fn save(&self, path: PathBuf, beta: f64, seed: u64) -> PyResult<()> {
        let ckpt = Checkpoint { model: self.inner.quantized_f32(), adam: None, beta, seed };
        vae::checkpoint_save(&ckpt, &path).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Posterior mean and log-variance.
    fn encode(&self, x: Vec<f64>) -> PyResult<(LatentPoint, LatentPoint)> {
        vae::encode(&self.inner, &x).map_err(to_py)
    }

    fn decode(&self, z: LatentPoint) -> PyResult<Vec<f64>> {
        vae::decode(&self.inner, &z).map_err(to_py)
    }

    /// Loss and its parts `(loss, recon, kl)` for one spectrum and latent draw.
    #[pyo3(signature = (x, eps = [0.0; 3], beta = 1e-3))]
    fn nelbo(&self, x: Vec<f64>, eps: LatentPoint, beta: f64) -> PyResult<(f64, f64, f64)> {
        let p = vae::nelbo(&self.inner, &x, &[eps], beta).map_err(to_py)?;
        Ok((p.loss, p.recon, p.kl))
    }

    /// Largest relative error between analytic and finite-difference gradients.
    #[pyo3(signature = (n_probes = 100, h = 1e-5, tolerance = 1e-4, seed = 0))]
    fn grad_check(&self, n_probes: usize, h: f64, tolerance: f64, seed: u64) -> PyResult<(f64, bool)> {
        let r = vae::grad_check(&self.inner, n_probes, h, tolerance, seed).map_err(to_py)?;
        Ok((r.max_rel_error, r.passed))
    }
}

/// Trains a model; returns it with per-epoch `(epoch, nelbo, recon, kl)` rows.
#[pyfunction]
#[pyo3(signature = (spectra, epochs = 20, beta = 1e-3, lr = 1e-3, batch_size = 128, seed = 42, hidden = vec![64, 64]))]
fn train(
    py: Python<'_>,
    spectra: Vec<Vec<f64>>,
    epochs: usize,
    beta: f64,
    lr: f64,
    batch_size: usize,
    seed: u64,
    hidden: Vec<usize>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64)>)> {
    let data = spectra.into_iter().map(dsd).collect::<PyResult<Vec<_>>>()?;
    let mut cfg = TrainConfig { beta, batch_size, n_epochs: epochs, seed, hidden, ..TrainConfig::default() };
    cfg.adam.learning_rate = lr;
    let out = py.allow_threads(|| vae::train(&data, &cfg)).map_err(to_py)?;
    let hist = out.history.iter().map(|h| (h.epoch, h.mean_nelbo, h.mean_recon, h.mean_kl)).collect();
    Ok((PyModel { inner: out.model }, hist))
}

/// Percentile calibration of latent codes to RGB.
#[pyclass(name = "Calibration")]
struct PyCalibration {
    inner: RgbCalibration,
}

#[pymethods]
impl PyCalibration {
    #[staticmethod]
    #[pyo3(signature = (points, pct_lo = 1.0, pct_hi = 99.0))]
    fn fit(points: Vec<LatentPoint>, pct_lo: f64, pct_hi: f64) -> PyResult<Self> {
        Ok(Self { inner: viz::calibrate_points(points, pct_lo, pct_hi).map_err(to_py)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RgbCalibration::read(&path).map_err(to_py)? })
    }

    #[getter]
    fn lo(&self) -> LatentPoint {
        self.inner.lo
    }

    #[getter]
    fn hi(&self) -> LatentPoint {
        self.inner.hi
    }

    fn rgb(&self, z: LatentPoint) -> [u8; 3] {
        viz::latent_to_rgb(&z, &self.inner)
    }

    /// Hue in degrees of the RGB color of `z`.
    fn hue(&self, z: LatentPoint) -> f64 {
        ds::compose::rgb_to_hsv(viz::latent_to_rgb(&z, &self.inner)).h
    }
}

/// Reads a latent embedding file as `(time, aerosol_factor, [(i, j, k, z)])`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn read_embedding(path: PathBuf) -> PyResult<(f64, f32, Vec<(u32, u32, u32, [f32; 3])>)> {
    let e = viz::read_embedding(&path).map_err(to_py)?;
    Ok((e.time, e.aerosol_factor, e.records.iter().map(|r| (r.i, r.j, r.k, r.z)).collect()))
}

/// Exact k-nearest-neighbor index over latent points.
#[pyclass(name = "KdTree")]
struct PyKdTree {
    inner: ds::path::KdTree,
}

#[pymethods]
impl PyKdTree {
    #[new]
    fn new(points: Vec<LatentPoint>) -> PyResult<Self> {
        Ok(Self { inner: ds::path::KdTree::new(points).map_err(to_py)? })
    }

    /// `(index, squared distance)` pairs, nearest first.
    fn knn(&self, query: LatentPoint, k: usize) -> Vec<(usize, f64)> {
        self.inner.knn(&query, k).into_iter().map(|n| (n.index, n.d2)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Fits a principal curve to weighted latent points; returns its nodes.
#[pyfunction]
#[pyo3(signature = (points, weights, n_nodes = 16, n_iters = 30))]
fn fit_path(points: Vec<LatentPoint>, weights: Vec<f64>, n_nodes: usize, n_iters: usize) -> PyResult<Vec<LatentPoint>> {
    if points.len() != weights.len() {
        return Err(PyValueError::new_err("points and weights differ in length"));
    }
    let pts: Vec<_> = points
        .into_iter()
        .zip(weights)
        .map(|(z, weight)| ds::path::NoveltyWeightedPoint { z, weight })
        .collect();
    Ok(ds::path::fit_path(&pts, n_nodes, n_iters).map_err(to_py)?.nodes().to_vec())
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    Ok(ds::path::spearman(&x, &y))
}

/// One experiment directory; each method runs the matching CLI stage.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    layout: Layout,
    cfg: PipelineConfig,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (dir, config = None, overrides = None))]
    fn new(dir: PathBuf, config: Option<PathBuf>, overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(p) => PipelineConfig::load(&p).map_err(to_py)?,
            None => PipelineConfig::default(),
        };
        let mut kv: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
        kv.sort();
        for (k, v) in kv {
            cfg.set(&k, &v).map_err(to_py)?;
        }
        cfg.validate().map_err(to_py)?;
        Ok(Self { layout: Layout::new(dir), cfg })
    }

    /// Resolved configuration as `key=value` text.
    fn config(&self) -> String {
        self.cfg.to_text()
    }

    fn gen(&self, py: Python<'_>) -> PyResult<usize> {
        py.allow_threads(|| pipeline::cmd_gen(&self.cfg, &self.layout)).map(|v| v.len()).map_err(to_py)
    }

    fn train(&self, py: Python<'_>) -> PyResult<Vec<f64>> {
        let out = py.allow_threads(|| pipeline::cmd_train(&self.cfg, &self.layout)).map_err(to_py)?;
        Ok(out.history.iter().map(|h| h.mean_nelbo).collect())
    }

    fn embed(&self, py: Python<'_>) -> PyResult<usize> {
        py.allow_threads(|| pipeline::cmd_embed(&self.cfg, &self.layout)).map(|(_, e)| e.len()).map_err(to_py)
    }

    fn calibrate(&self) -> PyResult<PyCalibration> {
        Ok(PyCalibration { inner: pipeline::cmd_calibrate(&self.cfg, &self.layout).map_err(to_py)? })
    }

    fn render(&self) -> PyResult<Vec<PathBuf>> {
        pipeline::cmd_render(&self.cfg, &self.layout).map_err(to_py)
    }

    /// Path nodes and mean diameter (mm) of the averaged spectrum at each node.
    #[pyo3(signature = (waypoints = None))]
    fn trace(&self, py: Python<'_>, waypoints: Option<PathBuf>) -> PyResult<(Vec<LatentPoint>, Vec<f64>)> {
        let t = py
            .allow_threads(|| pipeline::cmd_trace(&self.cfg, &self.layout, waypoints.as_deref()))
            .map_err(to_py)?;
        let grid = BinGrid::default();
        let md = t.spectra.iter().map(|d| ds::dsd::mean_diameter(d, &grid)).collect::<ds::Result<_>>().map_err(to_py)?;
        Ok((t.path.nodes().to_vec(), md))
    }

    fn compose(&self) -> PyResult<(usize, usize)> {
        let img = pipeline::cmd_compose(&self.cfg, &self.layout).map_err(to_py)?;
        Ok((img.width, img.height))
    }

    /// `(aerosol_factor, onset seconds or None)` per run.
    fn onset(&self) -> PyResult<Vec<(f32, Option<f64>)>> {
        pipeline::cmd_onset(&self.cfg, &self.layout).map_err(to_py)
    }
}

#[pymodule]
#[pyo3(name = "dropletscope")]
fn dropletscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bin_diameters, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(mean_diameter, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gauss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_snapshot, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(read_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(fit_path, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_class::<PySnapshot>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCalibration>()?;
    m.add_class::<PyKdTree>()?;
    m.add_class::<PyPipeline>()?;
    Ok(())
}
