//! Python module `layoutcrop`.
//!
//! Boxes and heatmaps are exposed as classes; requests, responses and
//! annotation records cross the boundary as plain dicts.

use layoutcrop::geometry::satisfies_aspect;
use layoutcrop::request::RunOptions;
use layoutcrop::scoring::DEFAULT_ALPHA;
use layoutcrop::{AnnotationRecord, AspectRatio, CropRequest, Dims, SearchPoint};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn dims(width: u32, height: u32) -> PyResult<Dims> {
    Dims::new(width, height).map_err(value_err)
}

/// Accepts `"W:H"`, `"1.5"` or a number.
fn aspect(obj: &Bound<'_, PyAny>) -> PyResult<AspectRatio> {
    if let Ok(s) = obj.extract::<String>() {
        return s.parse().map_err(value_err);
    }
    AspectRatio::new(obj.extract::<f64>()?).map_err(value_err)
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

#[pyclass(name = "CropBox", module = "layoutcrop", frozen, eq, hash, skip_from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PyCropBox {
    inner: layoutcrop::CropBox,
}

#[pymethods]
impl PyCropBox {
    #[new]
    fn new(x: u32, y: u32, w: u32, h: u32) -> PyResult<Self> {
        Ok(Self { inner: layoutcrop::CropBox::new(x, y, w, h).map_err(value_err)? })
    }

    #[getter]
    fn x(&self) -> u32 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> u32 {
        self.inner.y
    }

    #[getter]
    fn w(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn h(&self) -> u32 {
        self.inner.height
    }

    fn area(&self) -> u64 {
        self.inner.area()
    }

    fn as_tuple(&self) -> (u32, u32, u32, u32) {
        (self.inner.x, self.inner.y, self.inner.width, self.inner.height)
    }

    fn satisfies_aspect(&self, aspect_ratio: &Bound<'_, PyAny>) -> PyResult<bool> {
        Ok(satisfies_aspect(&self.inner, aspect(aspect_ratio)?))
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("CropBox(x={}, y={}, w={}, h={})", b.x, b.y, b.width, b.height)
    }
}

impl From<layoutcrop::CropBox> for PyCropBox {
    fn from(inner: layoutcrop::CropBox) -> Self {
        Self { inner }
    }
}

#[pyclass(name = "Heatmap", module = "layoutcrop", frozen)]
pub struct PyHeatmap {
    inner: layoutcrop::Heatmap,
}

#[pymethods]
impl PyHeatmap {
    /// Builds a heatmap from a list of equal-length rows of values in [0, 1].
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len() as u32);
        if rows.iter().any(|r| r.len() as u32 != width) {
            return Err(PyValueError::new_err("rows differ in length"));
        }
        let d = dims(width, height)?;
        let inner = layoutcrop::Heatmap::new(d, rows.into_iter().flatten().collect()).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Reads a png, pgm or csv heatmap file.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Self { inner: layoutcrop::heatmaps::load_heatmap(&path).map_err(value_err)? })
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.dims().width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.dims().height
    }

    fn get(&self, x: u32, y: u32) -> PyResult<f64> {
        let d = self.inner.dims();
        if x >= d.width || y >= d.height {
            return Err(PyValueError::new_err(format!("({x}, {y}) outside {d}")));
        }
        Ok(self.inner.get(x, y))
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.inner.values().chunks(self.inner.dims().width as usize).map(<[f64]>::to_vec).collect()
    }

    /// Aesthetic and layout terms of `box` for an image of this heatmap's
    /// size. `layout` is a list of `(x, y, w, h)` or `(x, y, w, h, weight)`.
    #[pyo3(signature = (crop_box, layout=Vec::new(), alpha=DEFAULT_ALPHA))]
    fn score<'py>(&self, py: Python<'py>, crop_box: &PyCropBox, layout: Vec<Vec<f64>>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
        let layout = layout_constraint(&layout)?;
        let weights = layoutcrop::ScoreWeights::with_alpha(alpha);
        let scorer = layoutcrop::HeatmapScorer::new(&self.inner, layout, weights, self.inner.dims());
        let s = layoutcrop::CropScorer::score(&scorer, &crop_box.inner).map_err(value_err)?;
        to_py(py, &s)
    }

    fn __repr__(&self) -> String {
        format!("Heatmap({})", self.inner.dims())
    }
}

fn layout_constraint(regions: &[Vec<f64>]) -> PyResult<Option<layoutcrop::LayoutConstraint>> {
    if regions.is_empty() {
        return Ok(None);
    }
    let parsed = regions
        .iter()
        .map(|r| {
            let (coords, weight) = match r.len() {
                4 => (&r[..4], 1.0),
                5 => (&r[..4], r[4]),
                n => return Err(PyValueError::new_err(format!("layout region needs 4 or 5 numbers, got {n}"))),
            };
            if coords.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(PyValueError::new_err("layout coordinates must be non-negative integers"));
            }
            let c = |i: usize| coords[i] as u32;
            let bx = layoutcrop::CropBox::new(c(0), c(1), c(2), c(3)).map_err(value_err)?;
            Ok(layoutcrop::LayoutRegion { bx, weight })
        })
        .collect::<PyResult<Vec<_>>>()?;
    layoutcrop::LayoutConstraint::new(parsed).map(Some).map_err(value_err)
}

#[pyfunction]
fn iou(a: &PyCropBox, b: &PyCropBox) -> f64 {
    layoutcrop::iou(&a.inner, &b.inner)
}

/// Box of ratio `aspect_ratio` anchored at `(x, y)` for a search step.
#[pyfunction]
fn convert_step(x: u32, y: u32, step: f64, width: u32, height: u32, aspect_ratio: &Bound<'_, PyAny>) -> PyResult<PyCropBox> {
    let b = layoutcrop::convert_step(SearchPoint { x, y, step }, dims(width, height)?, aspect(aspect_ratio)?).map_err(value_err)?;
    Ok(b.into())
}

/// Base `(step_w, step_h)` of the proposal grid.
#[pyfunction]
fn get_step_size(aspect_ratio: &Bound<'_, PyAny>) -> PyResult<(u32, u32)> {
    let s = layoutcrop::get_step_size(aspect(aspect_ratio)?);
    Ok((s.step_w, s.step_h))
}

#[pyfunction]
#[pyo3(signature = (width, height, aspect_ratio, k_start=14, k_end=28))]
fn generate_proposals(width: u32, height: u32, aspect_ratio: &Bound<'_, PyAny>, k_start: u32, k_end: u32) -> PyResult<Vec<PyCropBox>> {
    let set = layoutcrop::generate_proposals(dims(width, height)?, aspect(aspect_ratio)?, k_start, k_end).map_err(value_err)?;
    Ok(set.boxes.into_iter().map(PyCropBox::from).collect())
}

/// Runs a crop request (dict or JSON string) and returns the response dict.
/// File paths in the request are honored.
#[pyfunction]
fn crop<'py>(py: Python<'py>, request: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let req: CropRequest = from_py(request)?;
    let resp = py.detach(|| layoutcrop::run_crop(&req, RunOptions { allow_paths: true })).map_err(value_err)?;
    to_py(py, &resp)
}

/// Average of the record's box indicators on a `width` x `height` grid
/// (the image size when omitted).
#[pyfunction]
#[pyo3(signature = (record, width=None, height=None))]
fn pseudo_heatmap(record: &Bound<'_, PyAny>, width: Option<u32>, height: Option<u32>) -> PyResult<PyHeatmap> {
    let rec: AnnotationRecord = from_py(record)?;
    let d = dims(width.unwrap_or(rec.width), height.unwrap_or(rec.height))?;
    Ok(PyHeatmap { inner: layoutcrop::pseudo_heatmap(&rec, d).map_err(value_err)? })
}

/// The eight layout templates (four strips, four quadrants) of a frame.
#[pyfunction]
fn layout_templates(width: u32, height: u32) -> PyResult<Vec<PyCropBox>> {
    Ok(layoutcrop::layout_templates(dims(width, height)?).into_iter().map(PyCropBox::from).collect())
}

/// Benchmark tuples (dicts) for a list of annotation record dicts.
#[pyfunction]
fn build_benchmark<'py>(py: Python<'py>, records: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let recs: Vec<AnnotationRecord> = from_py(records)?;
    for r in &recs {
        r.validate().map_err(value_err)?;
    }
    to_py(py, &layoutcrop::build_benchmark(&recs))
}

#[pymodule]
#[pyo3(name = "layoutcrop")]
fn layoutcrop_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCropBox>()?;
    m.add_class::<PyHeatmap>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(convert_step, m)?)?;
    m.add_function(wrap_pyfunction!(get_step_size, m)?)?;
    m.add_function(wrap_pyfunction!(generate_proposals, m)?)?;
    m.add_function(wrap_pyfunction!(crop, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(layout_templates, m)?)?;
    m.add_function(wrap_pyfunction!(build_benchmark, m)?)?;
    m.add("DEFAULT_ALPHA", DEFAULT_ALPHA)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_regions_parse() {
        assert!(layout_constraint(&[]).unwrap().is_none());
        let c = layout_constraint(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0, 2.0, 2.0, -0.5]]).unwrap().unwrap();
        assert_eq!(c.regions().len(), 2);
        assert_eq!(c.regions()[1].weight, -0.5);
        assert!(layout_constraint(&[vec![1.0, 2.0, 3.0]]).is_err());
        assert!(layout_constraint(&[vec![1.5, 2.0, 3.0, 4.0]]).is_err());
        assert!(layout_constraint(&[vec![0.0, 0.0, 0.0, 4.0]]).is_err());
    }
}
