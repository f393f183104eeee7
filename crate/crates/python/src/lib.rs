//! Python bindings. Images and maps cross the boundary as flat row-major
//! lists with explicit height and width.

use depthcast::decoder;
use depthcast::evaluation::{self, EvalConfig};
use depthcast::geometry::{pose_to_matrix, reproject_pixels, CameraIntrinsics, PixelGrid, Pose6DoF, RotationOrder};
use depthcast::pipeline::{forecast_infer, load_checkpoint, min_window_t, window_indices};
use depthcast::synthdata::read_dataset;
use depthcast::{DepthMap, Error, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn depth_map(values: Vec<f64>, height: usize, width: usize) -> PyResult<DepthMap> {
    let t = Tensor::from_vec(&[1, height, width], values).map_err(to_py)?;
    DepthMap::new(t).map_err(to_py)
}

fn rotation_order(name: &str) -> PyResult<RotationOrder> {
    match name {
        "xyz" => Ok(RotationOrder::Xyz),
        "zyx" => Ok(RotationOrder::Zyx),
        _ => Err(PyValueError::new_err(format!("unknown rotation order {name:?}"))),
    }
}

/// Source-view pixel coordinates for every target pixel, as `[u..., v...]`
/// (length `2 * height * width`). Pixels behind the camera are NaN.
#[pyfunction]
#[pyo3(signature = (depth, height, width, intrinsics, pose, order = "xyz"))]
fn reproject(
    depth: Vec<f64>,
    height: usize,
    width: usize,
    intrinsics: (f64, f64, f64, f64),
    pose: Vec<f64>,
    order: &str,
) -> PyResult<Vec<f64>> {
    let (fx, fy, cx, cy) = intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(to_py)?;
    let p = Pose6DoF::from_slice(&pose).map_err(to_py)?;
    let t = pose_to_matrix(&p, rotation_order(order)?).map_err(to_py)?;
    let d = depth_map(depth, height, width)?;
    let coords = reproject_pixels(&PixelGrid::new(height, width), &d, &k, &t).map_err(to_py)?;
    Ok(coords.into_data())
}

#[pyfunction]
#[pyo3(signature = (s, d_min = 0.1, d_max = 100.0))]
fn sigmoid_to_depth(s: Vec<f64>, d_min: f64, d_max: f64) -> PyResult<Vec<f64>> {
    let n = s.len();
    let t = Tensor::from_vec(&[1, 1, n], s).map_err(to_py)?;
    let d = decoder::sigmoid_to_depth(&t, d_min, d_max).map_err(to_py)?;
    Ok(d.values().data().to_vec())
}

/// The seven standard depth metrics as a dict.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, median_scaling = true))]
fn compute_metrics<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    height: usize,
    width: usize,
    median_scaling: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = EvalConfig {
        use_median_scaling: median_scaling,
        ..EvalConfig::default()
    };
    let p = depth_map(pred, height, width)?;
    let g = depth_map(gt, height, width)?;
    let m = evaluation::evaluate_prediction(&p, &g, &cfg).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("abs_rel", m.abs_rel)?;
    out.set_item("sq_rel", m.sq_rel)?;
    out.set_item("rmse", m.rmse)?;
    out.set_item("rmse_log", m.rmse_log)?;
    out.set_item("delta1", m.delta1)?;
    out.set_item("delta2", m.delta2)?;
    out.set_item("delta3", m.delta3)?;
    Ok(out)
}

/// Forecast depth for frame `t + k` of sequence `seq`. Returns
/// `(height, width, values)`.
#[pyfunction]
fn forecast(py: Python<'_>, ckpt: &str, data: &str, seq: usize, t: usize, k: usize) -> PyResult<(usize, usize, Vec<f64>)> {
    py.detach(|| {
        let ck = load_checkpoint(ckpt)?;
        if let Some(tr) = &ck.train {
            if tr.k != k {
                return Err(Error::InvalidArgument(format!("checkpoint was trained for k = {} but k is {k}", tr.k)));
            }
        }
        let interval = ck.train.as_ref().map_or(3, |tr| tr.frame_interval);
        let rec = read_dataset(data)?.load(seq)?;
        if t < min_window_t(interval) || t >= rec.len() {
            return Err(Error::InvalidArgument(format!("t = {t} is out of range for this sequence")));
        }
        let idx = window_indices(t, interval);
        let rgb: Vec<_> = idx.iter().map(|&i| rec.frames[i].clone()).collect();
        let flow: Vec<_> = idx.iter().map(|&i| rec.flows[i].clone()).collect();
        let d = forecast_infer(&ck.inference_view()?, &rgb, &flow)?;
        Ok((d.height(), d.width(), d.values().data().to_vec()))
    })
    .map_err(to_py)
}

/// Runs the built-in checks; returns `(name, passed, detail)` per check.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    depthcast::selftest::run_checks()
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn depthcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(reproject, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_to_depth, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
