//! Python bindings. Structured results cross the boundary as JSON strings or
//! plain tuples so the Python side needs nothing beyond the standard library.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tee_core::backbone::BackboneConfig;
use tee_core::detector::{DetectionSet, Detection, HeadConfig};
use tee_core::geometry::{self, ObjectAnnotation};
use tee_core::metrics::{self, LayerSpec};
use tee_core::synthgen::{self, SceneConfig, SuiteConfig, SyntheticVideo};
use tee_core::teem;
use tee_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidGeometry(_) | Error::Domain(_) | Error::Config(_) | Error::Schema { .. } | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "BoundingBox", frozen)]
#[derive(Clone, Copy)]
struct PyBox(geometry::BoundingBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> PyResult<Self> {
        geometry::BoundingBox::new(x0, y0, x1, y1).map(PyBox).map_err(to_py)
    }

    #[getter]
    fn coords(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.to_array();
        (a, b, c, d)
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.to_array();
        format!("BoundingBox({a}, {b}, {c}, {d})")
    }
}

type AnnTuple = (String, u32, (f64, f64, f64, f64));

fn annotations(objs: Vec<AnnTuple>) -> PyResult<Vec<ObjectAnnotation>> {
    objs.into_iter()
        .map(|(id, class, (x0, y0, x1, y1))| {
            let b = geometry::BoundingBox::new(x0, y0, x1, y1).map_err(to_py)?;
            Ok(ObjectAnnotation::new(id, class, b))
        })
        .collect()
}

/// `(max_mfi, changed)` between two annotated frames.
#[pyfunction]
fn scenery_change(objs_i: Vec<AnnTuple>, objs_j: Vec<AnnTuple>, tau_var: f64) -> PyResult<(f64, bool)> {
    let (m, label) =
        geometry::scenery_change_with_motion(&annotations(objs_i)?, &annotations(objs_j)?, tau_var).map_err(to_py)?;
    Ok((m, label == geometry::SceneryLabel::Changed))
}

#[pyfunction]
fn bin_of(max_mfi: f64) -> PyResult<usize> {
    tee_core::sampler::bin_of(max_mfi).map_err(to_py)
}

#[pyfunction]
fn entropy_bits(probs: Vec<f64>) -> PyResult<f64> {
    teem::entropy_bits(&probs).map_err(to_py)
}

#[pyfunction]
fn conv_macs(cin: usize, cout: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    metrics::mac_count(&LayerSpec::conv(cin, cout, kernel, (out_h, out_w), false))
}

#[pyfunction]
fn fc_macs(inputs: usize, outputs: usize) -> u64 {
    metrics::mac_count(&LayerSpec::fc(inputs, outputs, false))
}

/// Compute report of the reference configuration, as JSON.
#[pyfunction]
fn reference_mac_report() -> PyResult<String> {
    let bb = BackboneConfig::default();
    let teems = tee_core::trainer::teem_configs(&bb, &Default::default());
    let r = metrics::mac_report(&bb, &teems, &HeadConfig::default()).map_err(to_py)?;
    serde_json::to_string(&r).map_err(json_err)
}

#[pyclass(name = "Video", frozen)]
struct PyVideo(SyntheticVideo);

#[pymethods]
impl PyVideo {
    #[getter]
    fn video_id(&self) -> String {
        self.0.video_id.clone()
    }

    #[getter]
    fn size(&self) -> (usize, usize) {
        (self.0.width, self.0.height)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Interleaved RGB bytes of one frame.
    fn frame_rgb(&self, index: usize) -> PyResult<Vec<u8>> {
        self.0
            .frame(index)
            .map(|f| f.image.data.clone())
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range")))
    }

    fn annotations(&self, index: usize) -> PyResult<Vec<AnnTuple>> {
        let f = self
            .0
            .frame(index)
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range")))?;
        Ok(f.annotations
            .iter()
            .map(|a| {
                let [x0, y0, x1, y1] = a.bbox.to_array();
                (a.object_id.clone(), a.class_id, (x0, y0, x1, y1))
            })
            .collect())
    }

    /// `(frame_i, frame_j, max_mfi, changed)` for every pair at `interval`.
    fn label_pairs(&self, interval: usize, tau_var: f64) -> PyResult<Vec<(usize, usize, f64, bool)>> {
        let pairs = synthgen::label_pairs(&self.0, interval, tau_var).map_err(to_py)?;
        Ok(pairs
            .into_iter()
            .map(|p| (p.frame_i, p.frame_j, p.max_mfi, p.label == geometry::SceneryLabel::Changed))
            .collect())
    }
}

/// Renders a scene given as JSON.
#[pyfunction]
fn generate_video(scene_json: &str) -> PyResult<PyVideo> {
    let cfg: SceneConfig = serde_json::from_str(scene_json).map_err(json_err)?;
    synthgen::generate_video(&cfg).map(PyVideo).map_err(to_py)
}

/// The mostly-static evaluation video; `overrides_json` patches the defaults.
#[pyfunction]
#[pyo3(signature = (overrides_json = "{}"))]
fn generate_suite(overrides_json: &str) -> PyResult<PyVideo> {
    let cfg: SuiteConfig = serde_json::from_str(overrides_json).map_err(json_err)?;
    let scene = synthgen::mostly_static_scene(&cfg).map_err(to_py)?;
    synthgen::generate_video(&scene).map(PyVideo).map_err(to_py)
}

type DetTuple = (u32, f64, (f64, f64, f64, f64));

/// `(mAP, per-threshold AP, mIoU)` over frames of `(class, score, box)`
/// detections and `(id, class, box)` annotations.
#[pyfunction]
fn evaluate_detections(
    detections: Vec<Vec<DetTuple>>,
    annotations_per_frame: Vec<Vec<AnnTuple>>,
) -> PyResult<(f64, Vec<f64>, f64)> {
    let sets = detections
        .into_iter()
        .enumerate()
        .map(|(f, ds)| {
            let detections = ds
                .into_iter()
                .map(|(class, score, (x0, y0, x1, y1))| {
                    let b = geometry::BoundingBox::new(x0, y0, x1, y1).map_err(to_py)?;
                    Detection::new(b, class, score).map_err(to_py)
                })
                .collect::<PyResult<Vec<_>>>()?;
            Ok(DetectionSet { frame_index: f, detections })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let anns = annotations_per_frame
        .into_iter()
        .map(annotations)
        .collect::<PyResult<Vec<_>>>()?;
    let ap = metrics::mean_average_precision(&sets, &anns, &metrics::default_iou_thresholds()).map_err(to_py)?;
    let miou = metrics::mean_iou(&sets, &anns).map_err(to_py)?;
    Ok((ap.map, ap.per_threshold, miou))
}

/// Runs the command line in-process and returns its exit status.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    tee_core::cli::run_command(std::iter::once("tee".to_string()).chain(args))
}

#[pymodule]
fn tee_vod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyVideo>()?;
    m.add_function(wrap_pyfunction!(scenery_change, m)?)?;
    m.add_function(wrap_pyfunction!(bin_of, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_function(wrap_pyfunction!(conv_macs, m)?)?;
    m.add_function(wrap_pyfunction!(fc_macs, m)?)?;
    m.add_function(wrap_pyfunction!(reference_mac_report, m)?)?;
    m.add_function(wrap_pyfunction!(generate_video, m)?)?;
    m.add_function(wrap_pyfunction!(generate_suite, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_detections, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
