//! Python bindings: the model plus the scene pipeline as plain functions
//! over numpy arrays.
//!
//! Images are 2-D f32 arrays, patch batches are `N x 32 x 32 x 3` with
//! `N x 32 x 32` binary labels, everything row-major.

use mssp_core::error::Error;
use mssp_core::eval::evaluate as core_evaluate;
use mssp_core::infer::infer_scene as core_infer;
use mssp_core::layers::{softmax2, Mode};
use mssp_core::model::{
    self, backward, forward, forward_eval, init_params, ModelConfig, ModelParams, SpPool,
};
use mssp_core::optim::{train_loop, TrainConfig};
use mssp_core::plane::Plane;
use mssp_core::sampling::{
    boundary_band as core_boundary_band, sample_patches as core_sample, PatchBatch, SampleSpec,
};
use mssp_core::scene::ScenePair;
use mssp_core::synth::{synth_scene as core_synth, SynthSpec};
use mssp_core::tensor::Tensor;
use ndarray::{Array1, Array2, Array3, Array4};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3,
    PyReadonlyArray4,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(_) | Error::Pgm(_) | Error::Checkpoint(_) => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn plane_from(arr: &PyReadonlyArray2<f32>) -> PyResult<Plane> {
    let view = arr.as_array();
    let (h, w) = (view.shape()[0], view.shape()[1]);
    let data: Vec<f32> = view.iter().copied().collect();
    Plane::from_vec(h, w, data).map_err(to_py)
}

fn plane_to<'py>(py: Python<'py>, p: &Plane) -> Bound<'py, PyArray2<f32>> {
    Array2::from_shape_vec((p.height(), p.width()), p.data().to_vec())
        .unwrap()
        .into_pyarray(py)
}

fn scene_from(
    im1: &PyReadonlyArray2<f32>,
    im2: &PyReadonlyArray2<f32>,
    reference: Option<&PyReadonlyArray2<f32>>,
    window: usize,
) -> PyResult<ScenePair> {
    let reference = reference.map(plane_from).transpose()?;
    let mut scene = ScenePair::new("py", plane_from(im1)?, plane_from(im2)?, reference)
        .map_err(to_py)?;
    scene
        .prepare(window, mssp_core::di::DEFAULT_EPSILON)
        .map_err(to_py)?;
    Ok(scene)
}

fn batch_from(
    inputs: &PyReadonlyArray4<f32>,
    labels: &PyReadonlyArray3<f32>,
) -> PyResult<PatchBatch> {
    let iv = inputs.as_array();
    let lv = labels.as_array();
    let idims: Vec<usize> = iv.shape().to_vec();
    let ldims: Vec<usize> = lv.shape().to_vec();
    let it = Tensor::from_vec(&idims, iv.iter().copied().collect()).map_err(to_py)?;
    let lt = Tensor::from_vec(&ldims, lv.iter().copied().collect()).map_err(to_py)?;
    PatchBatch::new(it, lt).map_err(to_py)
}

/// The network with its parameters and pooling configuration.
#[pyclass]
struct Model {
    params: ModelParams<f32>,
    cfg: ModelConfig,
}

#[pymethods]
impl Model {
    /// He-initialized model, deterministic under the seed.
    #[new]
    #[pyo3(signature = (seed=0, sp_pool="avg"))]
    fn new(seed: u64, sp_pool: &str) -> PyResult<Self> {
        let sp_pool = match sp_pool {
            "avg" => SpPool::Avg,
            "max" => SpPool::Max,
            other => {
                return Err(PyValueError::new_err(format!(
                    "sp_pool must be 'avg' or 'max', got '{other}'"
                )))
            }
        };
        Ok(Model {
            params: init_params(seed),
            cfg: ModelConfig {
                sp_pool,
                ..ModelConfig::default()
            },
        })
    }

    /// Logits for a `N x 32 x 32 x 3` batch. Train mode uses batch statistics
    /// and updates the BN running stats.
    #[pyo3(signature = (batch, train=false))]
    fn forward<'py>(
        &mut self,
        py: Python<'py>,
        batch: PyReadonlyArray4<'py, f32>,
        train: bool,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let view = batch.as_array();
        let dims: Vec<usize> = view.shape().to_vec();
        let t = Tensor::from_vec(&dims, view.iter().copied().collect()).map_err(to_py)?;
        let mode = if train { Mode::Train } else { Mode::Eval };
        let (logits, _) = forward(&mut self.params, &self.cfg, &t, mode).map_err(to_py)?;
        let n = logits.dims()[0];
        let arr = Array4::from_shape_vec((n, 32, 32, 2), logits.into_data()).unwrap();
        Ok(arr.into_pyarray(py))
    }

    /// Per-pixel changed-class probabilities for a batch (eval mode).
    fn predict_proba<'py>(
        &self,
        py: Python<'py>,
        batch: PyReadonlyArray4<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let view = batch.as_array();
        let dims: Vec<usize> = view.shape().to_vec();
        let t = Tensor::from_vec(&dims, view.iter().copied().collect()).map_err(to_py)?;
        let (logits, _) = forward_eval(&self.params, &self.cfg, &t).map_err(to_py)?;
        let probs = softmax2(&logits).map_err(to_py)?;
        let n = probs.dims()[0];
        let changed: Vec<f32> = probs.data().chunks_exact(2).map(|p| p[1]).collect();
        Ok(Array3::from_shape_vec((n, 32, 32), changed)
            .unwrap()
            .into_pyarray(py))
    }

    /// Runs the training loop over a patch pool; returns per-step losses.
    #[pyo3(signature = (inputs, labels, steps, batch=8, lr=0.005, seed=0))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        inputs: PyReadonlyArray4<'py, f32>,
        labels: PyReadonlyArray3<'py, f32>,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let pool = batch_from(&inputs, &labels)?;
        let cfg = TrainConfig {
            steps,
            batch,
            lr,
            seed,
        };
        let history = train_loop(&mut self.params, &self.cfg, &pool, &cfg).map_err(to_py)?;
        let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
        Ok(Array1::from_vec(losses).into_pyarray(py))
    }

    /// Loss gradient norms per parameter tensor for one batch (diagnostic).
    fn grad_norms<'py>(
        &mut self,
        py: Python<'py>,
        inputs: PyReadonlyArray4<'py, f32>,
        labels: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pool = batch_from(&inputs, &labels)?;
        let (logits, trace) =
            forward(&mut self.params, &self.cfg, &pool.inputs, Mode::Train).map_err(to_py)?;
        let (_, d_logits) =
            mssp_core::layers::softmax_xent(&logits, &pool.labels).map_err(to_py)?;
        let grads = backward(&self.params, &trace, &d_logits).map_err(to_py)?;
        let out = PyDict::new(py);
        for (name, g) in grads.iter() {
            let norm: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            out.set_item(name, norm)?;
        }
        Ok(out)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mssp_core::checkpoint::save_checkpoint(&self.params, std::path::Path::new(path))
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, sp_pool="avg"))]
    fn load(path: &str, sp_pool: &str) -> PyResult<Self> {
        let params =
            mssp_core::checkpoint::load_checkpoint(std::path::Path::new(path)).map_err(to_py)?;
        let sp_pool = match sp_pool {
            "avg" => SpPool::Avg,
            "max" => SpPool::Max,
            other => {
                return Err(PyValueError::new_err(format!(
                    "sp_pool must be 'avg' or 'max', got '{other}'"
                )))
            }
        };
        Ok(Model {
            params,
            cfg: ModelConfig {
                sp_pool,
                ..ModelConfig::default()
            },
        })
    }

    #[staticmethod]
    fn param_count() -> usize {
        model::learnable_param_count()
    }
}

/// Neighborhood log-ratio difference image in [0, 1].
#[pyfunction]
#[pyo3(signature = (im1, im2, window=3, epsilon=1e-6))]
fn generate_di<'py>(
    py: Python<'py>,
    im1: PyReadonlyArray2<'py, f32>,
    im2: PyReadonlyArray2<'py, f32>,
    window: usize,
    epsilon: f32,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let di = mssp_core::di::generate_di(&plane_from(&im1)?, &plane_from(&im2)?, window, epsilon)
        .map_err(to_py)?;
    Ok(plane_to(py, &di))
}

/// Morphological gradient band around reference change boundaries.
#[pyfunction]
#[pyo3(signature = (reference, band=2))]
fn boundary_band<'py>(
    py: Python<'py>,
    reference: PyReadonlyArray2<'py, f32>,
    band: usize,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let mask = core_boundary_band(&plane_from(&reference)?, band).map_err(to_py)?;
    Ok(plane_to(py, &mask))
}

/// Synthetic speckled scene pair; returns im1, im2, reference and the
/// realized changed fraction.
#[pyfunction]
#[pyo3(signature = (height=256, width=256, looks=4, n_regions=8, radius_min=10.0, radius_max=18.0, contrast=4.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth_scene<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    looks: u32,
    n_regions: usize,
    radius_min: f64,
    radius_max: f64,
    contrast: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SynthSpec {
        height,
        width,
        looks,
        n_regions,
        radius_min,
        radius_max,
        contrast,
        seed,
    };
    let (scene, meta) = core_synth(&spec).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("im1", plane_to(py, &scene.im1))?;
    out.set_item("im2", plane_to(py, &scene.im2))?;
    out.set_item("reference", plane_to(py, scene.reference.as_ref().unwrap()))?;
    out.set_item("changed_fraction", meta.changed_fraction)?;
    Ok(out)
}

/// Boundary-guided stratified patch sampling. Returns
/// `(inputs, labels, center_mask)`.
#[pyfunction]
#[pyo3(signature = (im1, im2, reference, fraction=0.2, boundary_share=0.5, boundary_band=2, seed=0, window=3))]
#[allow(clippy::too_many_arguments)]
fn sample_patches<'py>(
    py: Python<'py>,
    im1: PyReadonlyArray2<'py, f32>,
    im2: PyReadonlyArray2<'py, f32>,
    reference: PyReadonlyArray2<'py, f32>,
    fraction: f64,
    boundary_share: f64,
    boundary_band: usize,
    seed: u64,
    window: usize,
) -> PyResult<(
    Bound<'py, PyArray4<f32>>,
    Bound<'py, PyArray3<f32>>,
    Bound<'py, PyArray2<f32>>,
)> {
    let scene = scene_from(&im1, &im2, Some(&reference), window)?;
    let spec = SampleSpec {
        fraction,
        boundary_share,
        boundary_band,
        seed,
    };
    let result = core_sample(&scene, &spec).map_err(to_py)?;
    let n = result.batch.len();
    let inputs = Array4::from_shape_vec((n, 32, 32, 3), result.batch.inputs.into_data()).unwrap();
    let labels = Array3::from_shape_vec((n, 32, 32), result.batch.labels.into_data()).unwrap();
    Ok((
        inputs.into_pyarray(py),
        labels.into_pyarray(py),
        plane_to(py, &result.center_mask),
    ))
}

/// Whole-scene stitched inference: `(prob, labels)` planes.
#[pyfunction]
#[pyo3(signature = (model, im1, im2, stride=16, window=3))]
fn infer_scene<'py>(
    py: Python<'py>,
    model: &Model,
    im1: PyReadonlyArray2<'py, f32>,
    im2: PyReadonlyArray2<'py, f32>,
    stride: usize,
    window: usize,
) -> PyResult<(Bound<'py, PyArray2<f32>>, Bound<'py, PyArray2<f32>>)> {
    let scene = scene_from(&im1, &im2, None, window)?;
    let map = core_infer(&model.params, &model.cfg, &scene, stride).map_err(to_py)?;
    Ok((plane_to(py, &map.prob), plane_to(py, &map.labels)))
}

/// Confusion matrix and pFA/pMA/accuracy/kappa of a binary prediction.
#[pyfunction]
#[pyo3(signature = (prediction, reference, exclude=None))]
fn evaluate<'py>(
    py: Python<'py>,
    prediction: PyReadonlyArray2<'py, f32>,
    reference: PyReadonlyArray2<'py, f32>,
    exclude: Option<PyReadonlyArray2<'py, f32>>,
) -> PyResult<Bound<'py, PyDict>> {
    let exclude = exclude.as_ref().map(plane_from).transpose()?;
    let report = core_evaluate(
        &plane_from(&prediction)?,
        &plane_from(&reference)?,
        exclude.as_ref(),
    )
    .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("tp", report.tp)?;
    out.set_item("tn", report.tn)?;
    out.set_item("fa", report.fa)?;
    out.set_item("ma", report.ma)?;
    out.set_item("pfa", report.pfa)?;
    out.set_item("pma", report.pma)?;
    out.set_item("accuracy", report.accuracy)?;
    out.set_item("kappa", report.kappa)?;
    Ok(out)
}

#[pymodule]
fn mssp_net(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_di, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_band, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(sample_patches, m)?)?;
    m.add_function(wrap_pyfunction!(infer_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
