//! Python bindings for the `fgcam` explanation engine.
//!
//! Tensors cross the boundary as a shape plus a flat, row-major list of
//! floats, so the module has no dependency on numpy.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fgcam::evaluate::{evaluate_list, EvalConfig, Metric};
use fgcam::metrics::{self, BBox, Curve, EvalRecord};
use fgcam::pipeline::{explain, ExplainRequest, Method};

create_exception!(
    fgcam_py,
    FgcamError,
    PyException,
    "Raised for any engine error; `args[0]` starts with the error code."
);

fn to_py(err: fgcam::Error) -> PyErr {
    FgcamError::new_err(format!("[{}] {err}", err.code()))
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for fgcam::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Dense f32 tensor.
#[pyclass(module = "fgcam_py", name = "Tensor", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: fgcam::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: fgcam::Tensor::new(shape, data).py()?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// A loaded FGM model with batchnorm folded.
#[pyclass(module = "fgcam_py", name = "Model", frozen)]
pub struct PyModel {
    inner: fgcam::ModelGraph,
}

#[pymethods]
impl PyModel {
    /// Load, checksum, validate and fold an FGM file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let model = fgcam::fgm::load_model(path).py()?;
        Ok(PyModel {
            inner: fgcam::model::fold_batchnorm(&model).py()?,
        })
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Name of the last convolutional feature layer.
    #[getter]
    fn feature_layer(&self) -> PyResult<String> {
        Ok(self.inner.feature_layer_name().py()?.to_string())
    }

    /// `(name, kind, output_shape)` for every layer.
    fn inspect(&self) -> PyResult<Vec<(String, String, Vec<usize>)>> {
        let shapes = self.inner.infer_shapes().py()?;
        Ok(self
            .inner
            .layers()
            .iter()
            .zip(shapes)
            .map(|(l, s)| (l.name.clone(), l.kind.tag().to_string(), s))
            .collect())
    }

    /// Load an image file resized to the model input, scaled to [0, 1].
    fn load_image(&self, path: &str) -> PyResult<PyTensor> {
        let [c, h, w] = self.inner.input_shape();
        Ok(PyTensor {
            inner: fgcam::io::load_image(path, c, h, w).py()?.pixels,
        })
    }

    fn preprocess(&self, raw: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.preprocessing().apply(&raw.inner).py()?,
        })
    }

    fn logits(&self, py: Python<'_>, input: &PyTensor) -> PyResult<Vec<f32>> {
        py.detach(|| self.inner.logits(&input.inner)).py()
    }

    fn probabilities(&self, py: Python<'_>, input: &PyTensor) -> PyResult<Vec<f32>> {
        py.detach(|| self.inner.probabilities(&input.inner)).py()
    }
}

/// An explanation map with the forward pass it came from.
#[pyclass(module = "fgcam_py", name = "Explanation", frozen)]
pub struct PyExplanation {
    inner: fgcam::Explanation,
    #[pyo3(get)]
    class_index: usize,
    #[pyo3(get)]
    predicted_class: usize,
    #[pyo3(get)]
    logits: Vec<f32>,
}

#[pymethods]
impl PyExplanation {
    #[getter]
    fn layer(&self) -> String {
        self.inner.layer.clone()
    }

    #[getter]
    fn signed(&self) -> bool {
        self.inner.signed
    }

    #[getter]
    fn map(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.map.clone(),
        }
    }

    /// Write the raw FGMAP01 map file.
    fn save_map(&self, path: &str) -> PyResult<()> {
        fgcam::io::write_raw_map(&self.inner.map, path).py()
    }

    /// Write an 8-bit RGB heatmap PNG.
    fn save_png(&self, path: &str) -> PyResult<()> {
        fgcam::render::save_heatmap(&self.inner, path).py()
    }

    /// Share of the explanation mass inside the half-open box `(x1, y1, x2, y2)`,
    /// after resizing the map to `size = (h, w)` when given.
    #[pyo3(signature = (bbox, size=None))]
    fn proportion(
        &self,
        bbox: (usize, usize, usize, usize),
        size: Option<(usize, usize)>,
    ) -> PyResult<f64> {
        let [mh, mw] = *self.inner.map.shape() else {
            unreachable!("explanations are rank 2")
        };
        let (h, w) = size.unwrap_or((mh, mw));
        let map = fgcam::Tensor::new(vec![h, w], metrics::explanation_at(&self.inner, h, w).py()?)
            .py()?;
        let resized = fgcam::Explanation {
            map,
            ..self.inner.clone()
        };
        let (x1, y1, x2, y2) = bbox;
        metrics::proportion(&resized, &BBox::new(x1, y1, x2, y2, w, h).py()?).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Explanation(layer={:?}, shape={:?}, signed={}, class_index={})",
            self.inner.layer,
            self.inner.map.shape(),
            self.inner.signed,
            self.class_index
        )
    }
}

/// Explain a preprocessed input with one of `grad-cam`, `score-cam`,
/// `layer-cam`, `fg-grad-cam`, `fg-score-cam` or `lrp`.
#[pyfunction(name = "explain")]
#[pyo3(signature = (model, input, method, layer=None, class_index=None, denoise=false, keep_fraction=0.1, signed=false))]
#[allow(clippy::too_many_arguments)]
fn explain_input(
    py: Python<'_>,
    model: &PyModel,
    input: &PyTensor,
    method: &str,
    layer: Option<String>,
    class_index: Option<usize>,
    denoise: bool,
    keep_fraction: f64,
    signed: bool,
) -> PyResult<PyExplanation> {
    let request = ExplainRequest {
        method: method.parse::<Method>().py()?,
        layer,
        class_index,
        denoise,
        keep_fraction,
        signed,
    };
    let out = py
        .detach(|| explain(&model.inner, &input.inner, &request))
        .py()?;
    Ok(PyExplanation {
        inner: out.explanation,
        class_index: out.class_index,
        predicted_class: out.predicted_class,
        logits: out.logits,
    })
}

/// Run a metric over a JSON-lines image list and return the report as a dict.
#[pyfunction]
#[pyo3(signature = (model, listfile, method, metric, layer=None, denoise=false, signed=false, seed=0, sample=None, step_pixels=448, blur_ksize=51, blur_sigma=50.0, retain=0.5))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    listfile: &str,
    method: &str,
    metric: &str,
    layer: Option<String>,
    denoise: bool,
    signed: bool,
    seed: u64,
    sample: Option<usize>,
    step_pixels: usize,
    blur_ksize: usize,
    blur_sigma: f32,
    retain: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut request = ExplainRequest::new(method.parse::<Method>().py()?);
    request.layer = layer;
    request.denoise = denoise;
    request.signed = signed;
    let config = EvalConfig {
        request,
        metric: metric.parse::<Metric>().py()?,
        seed,
        sample,
        step_pixels,
        blur_ksize,
        blur_sigma,
        retain,
    };
    let report = py
        .detach(|| evaluate_list(&model.inner, listfile, &config))
        .py()?;
    let text = serde_json::to_string(&report).map_err(|e| to_py(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `(average_drop, average_increase)` in percent from `(y, o)` score pairs.
#[pyfunction]
fn average_drop_increase(records: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    let records: Vec<EvalRecord> = records
        .into_iter()
        .map(|(y, o)| EvalRecord {
            y,
            o,
            class_index: 0,
        })
        .collect();
    let r = metrics::average_drop_increase(&records).py()?;
    Ok((r.average_drop, r.average_increase))
}

#[pyfunction]
fn auc(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::auc(&Curve::new(xs, ys).py()?))
}

#[pyfunction]
fn overall_score(insertion_auc: f64, deletion_auc: f64) -> f64 {
    metrics::overall_score(insertion_auc, deletion_auc)
}

#[pyfunction]
fn read_map<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let t = fgcam::io::read_raw_map(path).py()?;
    let d = PyDict::new(py);
    d.set_item("shape", t.shape().to_vec())?;
    d.set_item("data", t.into_data())?;
    Ok(d)
}

#[pymodule]
fn fgcam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FgcamError", m.py().get_type::<FgcamError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyExplanation>()?;
    m.add_function(wrap_pyfunction!(explain_input, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_drop_increase, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(overall_score, m)?)?;
    m.add_function(wrap_pyfunction!(read_map, m)?)?;
    m.add(
        "METHODS",
        Method::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
