//! Python bindings. The extension module is named `angie`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyFileExistsError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use angie::audio::read_wav;
use angie::config::{PipelineConfig, Preset};
use angie::metrics;
use angie::motion::{self, CholeskyFactor, Mat2, MotionSequence, RegionMotionFrame};
use angie::pipeline::{self as pl, GenerateRequest};
use angie::Error;

pyo3::create_exception!(angie, NumericalError, PyRuntimeError);
pyo3::create_exception!(angie, PrerequisiteError, PyRuntimeError);

pub fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Exists(_) => PyFileExistsError::new_err(msg),
        Error::Numerical { .. } => NumericalError::new_err(msg),
        Error::Prerequisite(_) | Error::Locked(_) => PrerequisiteError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for angie::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

pub fn build_config(
    preset: Option<&str>,
    config_file: Option<&Path>,
    overrides: &BTreeMap<String, String>,
) -> angie::Result<PipelineConfig> {
    let preset = preset.map(str::parse::<Preset>).transpose()?;
    let mut cfg = match config_file {
        Some(path) => PipelineConfig::load(path, preset)?,
        None => PipelineConfig::preset(preset.unwrap_or_default()),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Lower-triangular factor `(l1, l2, l3)` of a 2x2 SPD matrix.
#[pyfunction]
fn cholesky(c: Mat2) -> PyResult<(f64, f64, f64)> {
    let l = motion::cholesky_decompose(&c).py()?;
    let [a, b, d] = l.to_array();
    Ok((a, b, d))
}

#[pyfunction]
fn covariance(l: (f64, f64, f64)) -> Mat2 {
    CholeskyFactor::new(l.0, l.1, l.2).covariance()
}

/// Affine matrix `A = U Sigma^(1/2)` with `A A^T = C` (descending eigenvalues).
#[pyfunction]
fn affine(c: Mat2) -> PyResult<Mat2> {
    motion::affine_from_covariance(&c).py()
}

fn seq_dict<'py>(py: Python<'py>, seq: &MotionSequence) -> PyResult<Bound<'py, PyAny>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("regions", seq.k())?;
    d.set_item("fps", seq.fps())?;
    d.set_item("rows", seq.to_rows())?;
    Ok(d.into_any())
}

/// Reads a motion file into `{"regions", "fps", "rows"}`; each row holds
/// `mu_x, mu_y, l1, l2, l3` per region.
#[pyfunction]
fn read_motion(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    seq_dict(py, &motion::read_motion_file(&path).py()?)
}

#[pyfunction]
fn write_motion(path: PathBuf, regions: usize, fps: f64, rows: Vec<Vec<f64>>) -> PyResult<()> {
    let seq = MotionSequence::from_rows(regions, fps, &rows).py()?;
    seq.validate().py()?;
    motion::write_motion_file(&path, &seq).py()
}

#[pyfunction]
fn fgd(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::fgd(&real, &generated).py()
}

/// Beat consistency between audio peak times and gesture beat times (seconds).
#[pyfunction]
#[pyo3(signature = (audio_peaks, gesture_beats, sigma = metrics::BC_SIGMA))]
fn beat_consistency(audio_peaks: Vec<f64>, gesture_beats: Vec<f64>, sigma: f64) -> PyResult<f64> {
    metrics::beat_consistency_times(&audio_peaks, &gesture_beats, sigma).py()
}

/// Effective flattened configuration.
#[pyfunction]
#[pyo3(signature = (preset = None, config_file = None, overrides = BTreeMap::new()))]
fn config(preset: Option<&str>, config_file: Option<PathBuf>, overrides: BTreeMap<String, String>) -> PyResult<BTreeMap<String, String>> {
    build_config(preset, config_file.as_deref(), &overrides).and_then(|c| c.flatten()).py()
}

fn init_frame(path: &Path) -> angie::Result<Vec<RegionMotionFrame>> {
    let seq = motion::read_motion_file(path)?;
    if seq.is_empty() {
        return Err(Error::Validation(format!("{} has no frames", path.display())));
    }
    Ok(seq.frame(0).to_vec())
}

#[pyclass(name = "Pipeline", module = "angie")]
struct PyPipeline {
    inner: pl::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (work_dir, preset = None, seed = None, config_file = None, overrides = BTreeMap::new(), force = false))]
    fn new(
        work_dir: PathBuf,
        preset: Option<&str>,
        seed: Option<u64>,
        config_file: Option<PathBuf>,
        overrides: BTreeMap<String, String>,
        force: bool,
    ) -> PyResult<Self> {
        let mut cfg = build_config(preset, config_file.as_deref(), &overrides).py()?;
        cfg.work_dir = work_dir.display().to_string();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self { inner: pl::Pipeline::new(cfg, force).py()? })
    }

    #[getter]
    fn digest(&self) -> &str {
        self.inner.digest()
    }

    #[getter]
    fn corpus_dir(&self) -> PathBuf {
        self.inner.corpus_dir()
    }

    fn make_corpus<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.make_corpus()).py()?;
        json_to_py(py, &r.metrics)
    }

    fn train_vq<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.train_vq()).py()?;
        json_to_py(py, &r.metrics)
    }

    fn train_gpt<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.train_gpt()).py()?;
        json_to_py(py, &r.metrics)
    }

    fn train_refine<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.train_refine()).py()?;
        json_to_py(py, &r.metrics)
    }

    /// Generates motion for `audio` (wav) starting from the first frame of
    /// `init`, writing `out` and `out.codes`.
    #[pyo3(signature = (audio, init, out, frames = None, refine = true, onset = None, mfcc = None))]
    #[allow(clippy::too_many_arguments)]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        audio: PathBuf,
        init: PathBuf,
        out: PathBuf,
        frames: Option<usize>,
        refine: bool,
        onset: Option<PathBuf>,
        mfcc: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let g = py
            .detach(|| {
                let req = GenerateRequest {
                    init: init_frame(&init)?,
                    audio: read_wav(&audio)?,
                    frames,
                    onset_file: onset,
                    mfcc_file: mfcc,
                    refine,
                };
                self.inner.generate(&req, &out)
            })
            .py()?;
        let codes: BTreeMap<&str, &Vec<usize>> = g.codes.iter().map(|c| (c.stream.name(), &c.indices)).collect();
        let d = seq_dict(py, &g.motion)?;
        d.set_item("refined", g.refined)?;
        d.set_item("codes", codes)?;
        Ok(d)
    }

    #[pyo3(name = "eval")]
    fn evaluate<'py>(&self, py: Python<'py>, generated: PathBuf, reference: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.eval(&generated, &reference)).py()?;
        let v = serde_json::to_value(&r).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &v)
    }

    #[pyo3(signature = (entry, init, codes = 12))]
    fn inspect_codebook<'py>(&self, py: Python<'py>, entry: usize, init: PathBuf, codes: usize) -> PyResult<Bound<'py, PyAny>> {
        let seq = py.detach(|| self.inner.inspect_codebook(entry, &init_frame(&init)?, codes)).py()?;
        seq_dict(py, &seq)
    }
}

#[pymodule(name = "angie")]
pub fn angie_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cholesky, m)?)?;
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(affine, m)?)?;
    m.add_function(wrap_pyfunction!(read_motion, m)?)?;
    m.add_function(wrap_pyfunction!(write_motion, m)?)?;
    m.add_function(wrap_pyfunction!(fgd, m)?)?;
    m.add_function(wrap_pyfunction!(beat_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_class::<PyPipeline>()?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add("PrerequisiteError", m.py().get_type::<PrerequisiteError>())?;
    Ok(())
}
