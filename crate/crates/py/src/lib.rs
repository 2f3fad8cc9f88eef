//! Python bindings for the video super-resolution pipeline: model
//! construction and inference, image metrics, flow warping, the training
//! schedule, and synthetic dataset generation.

use msvsr::data::FrameSequence;
use msvsr::error::Error;
use msvsr::metrics::{self, ChannelMode};
use msvsr::model::{self, ModelConfig};
use msvsr::params::ParamGroup;
use msvsr::train::{load_checkpoint, lr_at, TrainConfig};
use ndarray::{Array3, Array4, Axis};
use numpy::{PyArray4, PyReadonlyArray3, PyReadonlyArray4, ToPyArray};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn to_py(e: Error) -> PyErr {
    match &e {
        Error::ConfigError(_)
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::InvariantViolation(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Image(_) | Error::NotFound(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<ChannelMode> {
    match mode.to_ascii_lowercase().as_str() {
        "y" => Ok(ChannelMode::Y),
        "rgb" => Ok(ChannelMode::Rgb),
        other => Err(PyValueError::new_err(format!(
            "channel mode must be 'y' or 'rgb', got '{other}'"
        ))),
    }
}

fn frame_of(a: &PyReadonlyArray3<f32>) -> Array3<f32> {
    a.as_array().to_owned()
}

/// A clip array (T, 3, H, W) split into frames.
fn clip_of(a: &PyReadonlyArray4<f32>, name: &str) -> PyResult<FrameSequence> {
    let arr = a.as_array();
    let frames: Vec<Array3<f32>> = arr
        .axis_iter(Axis(0))
        .map(|f| f.to_owned())
        .collect();
    FrameSequence::new(frames, name).map_err(to_py)
}

fn stack_clip(seq: &FrameSequence) -> Array4<f32> {
    let (h, w) = seq.dims();
    let mut out = Array4::zeros((seq.len(), 3, h, w));
    for (i, f) in seq.frames.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(f);
    }
    out
}

/// Multi-stage video super-resolution network.
#[pyclass]
struct Model {
    inner: model::Model<f32>,
}

#[pymethods]
impl Model {
    /// Build a freshly initialized model from a preset name
    /// ("tiny", "pp-msvsr", "pp-msvsr-l").
    #[new]
    #[pyo3(signature = (preset, seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::by_name(preset).map_err(to_py)?;
        let inner = model::Model::new(cfg, seed).map_err(to_py)?;
        Ok(Model { inner })
    }

    /// Load a model from a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path)
            .and_then(|c| c.to_model())
            .map_err(to_py)?;
        Ok(Model { inner })
    }

    /// Super-resolve one clip: (T, 3, H, W) float32 in [0, 1] to
    /// (T, 3, 4H, 4W).
    fn forward<'py>(
        &self,
        py: Python<'py>,
        frames: PyReadonlyArray4<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let clip = clip_of(&frames, "py")?;
        let out = self.inner.forward(&clip).map_err(to_py)?;
        Ok(stack_clip(&out.sr_frames).to_pyarray(py))
    }

    /// Auxiliary-head output for one clip, or an error when the model was
    /// built without the auxiliary branch.
    fn forward_aux<'py>(
        &self,
        py: Python<'py>,
        frames: PyReadonlyArray4<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let clip = clip_of(&frames, "py")?;
        let out = self.inner.forward(&clip).map_err(to_py)?;
        match &out.aux_frames {
            Some(aux) => Ok(stack_clip(aux).to_pyarray(py)),
            None => Err(PyValueError::new_err("model has no auxiliary head")),
        }
    }

    #[getter]
    fn param_count(&self) -> PyResult<usize> {
        Ok(model::model_stats(&self.inner.cfg).map_err(to_py)?.param_count)
    }

    /// Per-module parameter counts.
    fn stats(&self) -> PyResult<Vec<(String, usize)>> {
        Ok(model::model_stats(&self.inner.cfg).map_err(to_py)?.per_module)
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.cfg)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(channels={}, ram={}, lfm={}, aux={})",
            self.inner.cfg.channels,
            self.inner.cfg.use_ram,
            self.inner.cfg.use_lfm,
            self.inner.cfg.use_aux_loss
        )
    }
}

/// Peak signal-to-noise ratio in dB between two (3, H, W) frames in [0, 1].
/// Returns `inf` for identical quantized inputs.
#[pyfunction]
#[pyo3(signature = (a, b, mode = "y"))]
fn psnr(a: PyReadonlyArray3<f32>, b: PyReadonlyArray3<f32>, mode: &str) -> PyResult<f64> {
    let v = metrics::psnr(&frame_of(&a), &frame_of(&b), parse_mode(mode)?).map_err(to_py)?;
    Ok(v.as_finite().unwrap_or(f64::INFINITY))
}

/// Structural similarity between two (3, H, W) frames in [0, 1].
#[pyfunction]
#[pyo3(signature = (a, b, mode = "y"))]
fn ssim(a: PyReadonlyArray3<f32>, b: PyReadonlyArray3<f32>, mode: &str) -> PyResult<f64> {
    metrics::ssim(&frame_of(&a), &frame_of(&b), parse_mode(mode)?).map_err(to_py)
}

/// Backward-warp `src` (N, C, H, W) by optical `flow` (N, 2, H, W),
/// zero-padding reads outside the frame.
#[pyfunction]
fn warp<'py>(
    py: Python<'py>,
    src: PyReadonlyArray4<'py, f32>,
    flow: PyReadonlyArray4<'py, f32>,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let out = msvsr::flow::warp(&src.as_array().to_owned(), &flow.as_array().to_owned())
        .map_err(to_py)?;
    Ok(out.to_pyarray(py))
}

/// Write a synthetic HR dataset under `out` and return the clip ids.
#[pyfunction]
#[pyo3(signature = (out, clips = 2, frames = 10, hr_size = 64, motion = 4, seed = 7))]
fn make_dataset(
    out: PathBuf,
    clips: usize,
    frames: usize,
    hr_size: usize,
    motion: usize,
    seed: u64,
) -> PyResult<Vec<String>> {
    let manifest = msvsr::data::write_synthetic_dataset(&out, clips, frames, hr_size, motion, seed)
        .map_err(to_py)?;
    Ok(manifest.clips)
}

/// Learning rate at `iteration` for the paper or desk schedule;
/// `group` is "main" or "flow".
#[pyfunction]
#[pyo3(signature = (iteration, preset = "paper", group = "main"))]
fn learning_rate(iteration: usize, preset: &str, group: &str) -> PyResult<f64> {
    let cfg = match preset {
        "paper" => TrainConfig::paper(),
        "desk" => TrainConfig::desk(),
        other => {
            return Err(PyValueError::new_err(format!(
                "preset must be 'paper' or 'desk', got '{other}'"
            )))
        }
    };
    let which = match group {
        "main" => ParamGroup::Main,
        "flow" => ParamGroup::Flow,
        other => {
            return Err(PyValueError::new_err(format!(
                "group must be 'main' or 'flow', got '{other}'"
            )))
        }
    };
    lr_at(iteration, &cfg, which).map_err(to_py)
}

#[pymodule]
fn msvsr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    Ok(())
}
