use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use selfvalnet::anchorgeom::{self, AnchorConfig};
use selfvalnet::diffcore::Tensor;
use selfvalnet::evalkit;
use selfvalnet::harness::{self, weights, HarnessError, SuiteOptions};
use selfvalnet::netmodel::{self, Detection, ModelKind, ModelOutputs, NetConfig};
use selfvalnet::scenesim::{self, ClipSample, SceneObject, SimConfig};
use selfvalnet::selfval::{self, ValidationKind, ValidationMode};
use selfvalnet::training;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io { .. } | HarnessError::Format(_) => PyIOError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(value_err)
}

/// Axis-aligned box in normalized center form.
#[pyclass(name = "BBox", from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox {
    inner: anchorgeom::BBox,
}

#[pymethods]
impl PyBBox {
    #[new]
    fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { inner: anchorgeom::BBox::new(cx, cy, w, h) }
    }

    #[staticmethod]
    fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { inner: anchorgeom::BBox::from_corners(x1, y1, x2, y2) }
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.inner.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.inner.cy
    }
    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }
    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    fn corners(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.inner.corners();
        (a, b, c, d)
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("BBox(cx={}, cy={}, w={}, h={})", b.cx, b.cy, b.w, b.h)
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }
}

#[pyfunction]
fn iou(a: PyBBox, b: PyBBox) -> f64 {
    anchorgeom::iou(&a.inner, &b.inner)
}

#[pyfunction]
fn encode_offsets(gt: PyBBox, anchor: PyBBox) -> PyResult<[f64; 4]> {
    anchorgeom::encode_offsets(&gt.inner, &anchor.inner).map_err(value_err)
}

#[pyfunction]
fn decode_offsets(offsets: [f64; 4], anchor: PyBBox) -> PyBBox {
    PyBBox { inner: anchorgeom::decode_offsets(&offsets, &anchor.inner) }
}

/// Anchors of the `"toy"` or `"ssd300"` layout.
#[pyfunction]
#[pyo3(signature = (layout = "toy"))]
fn generate_anchors(layout: &str) -> PyResult<Vec<PyBBox>> {
    let cfg = match layout {
        "toy" => AnchorConfig::toy(),
        "ssd300" => AnchorConfig::ssd300(),
        other => return Err(value_err(format!("unknown anchor layout {other:?}"))),
    };
    let set = anchorgeom::generate_anchors(&cfg).map_err(value_err)?;
    Ok(set.boxes.into_iter().map(|inner| PyBBox { inner }).collect())
}

#[pyfunction]
fn rescale(v: Vec<f64>) -> PyResult<Vec<f64>> {
    if v.is_empty() {
        return Err(value_err("empty vector"));
    }
    Ok(selfval::rescale(&v))
}

/// Applies self validation to raw head outputs and returns the validated fields.
#[pyfunction]
#[pyo3(signature = (offsets, c_box, c_global, attention, mode = "full-hard", stack_depth = 1))]
fn self_validate<'py>(
    py: Python<'py>,
    offsets: Vec<Vec<f64>>,
    c_box: Vec<Vec<f64>>,
    c_global: Vec<f64>,
    attention: Vec<f64>,
    mode: &str,
    stack_depth: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let a = attention.len();
    let c = c_global.len();
    let raw = ModelOutputs {
        offsets: matrix(offsets)?,
        c_box: matrix(c_box)?,
        c_global: Tensor::new(vec![1, c], c_global).map_err(value_err)?,
        attention: Tensor::new(vec![a, 1], attention).map_err(value_err)?,
    };
    if raw.offsets.shape() != [a, 4] || raw.c_box.shape() != [a, c] {
        return Err(value_err(format!("expected offsets [{a}, 4] and c_box [{a}, {c}]")));
    }
    if stack_depth == 0 {
        return Err(value_err("stack_depth must be at least 1"));
    }
    let v = selfval::self_validate(&raw, ValidationMode::stacked(parse(mode)?, stack_depth));
    let d = PyDict::new(py);
    d.set_item("v_attn", v.v_attn)?;
    d.set_item("a_prime", v.a_prime)?;
    d.set_item("a_tilde", v.a_tilde)?;
    d.set_item("v_class", v.v_class)?;
    d.set_item("c_global_prime", v.c_global_prime)?;
    d.set_item("m", v.m)?;
    Ok(d)
}

fn object_dict<'py>(py: Python<'py>, o: &SceneObject) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("bbox", PyBBox { inner: o.bbox })?;
    d.set_item("class_id", o.class_id)?;
    Ok(d)
}

/// One synthetic clip. Frames and flows are returned flat with their shapes.
#[pyclass(name = "Clip")]
struct PyClip {
    inner: ClipSample,
}

#[pymethods]
impl PyClip {
    #[getter]
    fn frames_shape(&self) -> Vec<usize> {
        self.inner.frames.shape().to_vec()
    }

    fn frames(&self) -> Vec<f64> {
        self.inner.frames.data().to_vec()
    }

    #[getter]
    fn flows_shape(&self) -> Vec<usize> {
        self.inner.flows.shape().to_vec()
    }

    fn flows(&self) -> Vec<f64> {
        self.inner.flows.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.annotations.len()
    }

    /// Objects of frame `t`.
    fn objects<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ann = self.inner.annotations.get(t).ok_or_else(|| value_err(format!("frame {t} out of range")))?;
        ann.objects.iter().map(|o| object_dict(py, o)).collect()
    }

    /// Attended object of frame `t`.
    fn target<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Bound<'py, PyDict>> {
        if t >= self.inner.annotations.len() {
            return Err(value_err(format!("frame {t} out of range")));
        }
        object_dict(py, &self.inner.target(t))
    }

    fn gaze(&self, t: usize) -> PyResult<(f64, f64)> {
        self.inner.annotations.get(t).map(|a| a.gaze).ok_or_else(|| value_err(format!("frame {t} out of range")))
    }
}

/// Renders clip `seed` with the default simulation settings, optionally
/// overridden by a TOML `[sim]` table body.
#[pyfunction]
#[pyo3(signature = (seed, config = None))]
fn synth_clip(seed: u64, config: Option<&str>) -> PyResult<PyClip> {
    let cfg: SimConfig = match config {
        Some(text) => toml::from_str(text).map_err(value_err)?,
        None => SimConfig::default(),
    };
    Ok(PyClip { inner: scenesim::synth_sample(&cfg, seed).map_err(value_err)? })
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("bbox", PyBBox { inner: d.bbox })?;
    out.set_item("class_id", d.class_id)?;
    out.set_item("score", d.score)?;
    Ok(out)
}

/// Detector weights plus architecture.
#[pyclass(name = "Model")]
struct PyModel {
    inner: netmodel::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized toy-resolution model.
    #[new]
    #[pyo3(signature = (classes = 5, kind = "mrnet", seed = 0))]
    fn new(classes: usize, kind: &str, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = parse(kind)?;
        Ok(Self { inner: netmodel::Model::new(NetConfig::toy(classes), kind, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: weights::load(&path).map_err(harness_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        weights::save(&self.inner, &path).map_err(harness_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.values().map(Tensor::len).sum()
    }

    /// Attended-object detection for `clip` under validation `mode`.
    #[pyo3(signature = (clip, mode = "full-hard"))]
    fn detect<'py>(&self, py: Python<'py>, clip: &PyClip, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        let mode = ValidationMode::new(parse(mode)?);
        let raw = self.inner.forward(&clip.inner).map_err(value_err)?;
        let anchors = self.inner.config.anchor_set().map_err(value_err)?;
        let v = selfval::self_validate(&raw, mode);
        detection_dict(py, &netmodel::predict(&v, &raw, &anchors))
    }
}

/// Trains on rendered splits and returns the best model and per-epoch test mAcc.
#[pyfunction]
#[pyo3(signature = (train_count = 64, test_count = 16, epochs = 2, mode = "full-soft", seed = 0))]
fn train(train_count: usize, test_count: usize, epochs: usize, mode: &str, seed: u64) -> PyResult<(PyModel, Vec<f64>)> {
    let sim = SimConfig::default();
    let tr = scenesim::SynthSplit::new(sim.clone(), scenesim::Split::Train, train_count).map_err(value_err)?;
    let te = scenesim::SynthSplit::new(sim.clone(), scenesim::Split::Test, test_count).map_err(value_err)?;
    let schedule = training::TrainSchedule { epochs, seed, ..Default::default() };
    let mut setup = training::TrainSetup::new(NetConfig::toy(sim.classes), schedule);
    let kind: ValidationKind = parse(mode)?;
    setup.train_mode = ValidationMode::new(kind);
    if kind == ValidationKind::None {
        setup.test_mode = ValidationMode::new(kind);
    }
    let out = training::train(&setup, &tr, &te, |_| {}).map_err(|e| harness_err(e.into()))?;
    let curve = out.log.iter().filter_map(|r| r.test.as_ref().map(|m| m.m_acc)).collect();
    Ok((PyModel { inner: out.model }, curve))
}

/// Accuracy sweep over `(det_box, det_class, gt_box, gt_class)` tuples.
#[pyfunction]
fn mean_accuracy<'py>(py: Python<'py>, pairs: Vec<(PyBBox, usize, PyBBox, usize)>) -> PyResult<Bound<'py, PyDict>> {
    let records: Vec<evalkit::EvalRecord> = pairs
        .into_iter()
        .map(|(db, dc, gb, gc)| {
            let gt = SceneObject { bbox: gb.inner, class_id: gc };
            evalkit::EvalRecord {
                detection: Detection { bbox: db.inner, class_id: dc, score: 1.0 },
                gt,
                gaze: (0.5, 0.5),
                objects: vec![gt],
                gt_index: 0,
            }
        })
        .collect();
    let r = evalkit::mean_accuracy(&records).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("acc", r.acc.to_vec())?;
    d.set_item("acc_50", r.acc_50)?;
    d.set_item("acc_75", r.acc_75)?;
    d.set_item("m_acc", r.m_acc)?;
    d.set_item("count", r.count)?;
    Ok(d)
}

#[pyfunction]
fn gaze_hit_score(gaze: (f64, f64), boxes: Vec<PyBBox>, gt_index: usize) -> f64 {
    let objects: Vec<SceneObject> = boxes.iter().map(|b| SceneObject { bbox: b.inner, class_id: 0 }).collect();
    evalkit::gaze_hit_score(gaze, &objects, gt_index)
}

/// Runs the gradient-check suite; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (points = 10, tolerance = 1e-4, seed = 0))]
fn gradcheck(points: usize, tolerance: f64, seed: u64) -> PyResult<(bool, String)> {
    let r = harness::run_suite(&SuiteOptions { points, tolerance, seed, ..SuiteOptions::default() }).map_err(value_err)?;
    Ok((r.pass(), r.to_string()))
}

#[pymodule(name = "selfvalnet")]
fn selfvalnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyClip>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(rescale, m)?)?;
    m.add_function(wrap_pyfunction!(self_validate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(mean_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(gaze_hit_score, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("VALIDATION_MODES", ValidationKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
