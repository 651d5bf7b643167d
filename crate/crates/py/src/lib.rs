//! Python bindings: meshes, viewpoint grids, HOG descriptors, CRF
//! refinement, silhouette flow, the material library, and the batch
//! pipeline entry points.

use std::fs;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;

use shapemat::camera::{build_viewpoint_grid, GridConfig, SphericalPose};
use shapemat::densecrf::{map_labels, mean_field, unary_from_labels, CrfBackend, CrfParams};
use shapemat::flowrefine::{
    compute_flow, encode_coordinate_silhouette, median_flow, FlowParams,
};
use shapemat::hogindex::HogConfig;
use shapemat::img::Mask;
use shapemat::material::{
    finite_difference_error, random_loss_state, reference_library, MaterialLibrary,
};
use shapemat::raster::{render_part_ids, silhouette, LabelKind, LabelMap};
use shapemat::shapelib::SegmentedMesh;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

fn py_to_json(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    let json = obj.py().import("json")?;
    json.call_method1("dumps", (obj,))?.extract()
}

fn rgb_from_bytes(data: &[u8], width: u32, height: u32) -> PyResult<image::RgbImage> {
    let expected = width as usize * height as usize * 3;
    if data.len() != expected {
        return Err(err(format!(
            "rgb buffer holds {} bytes, expected {expected} for {width}x{height}",
            data.len()
        )));
    }
    image::RgbImage::from_raw(width, height, data.to_vec())
        .ok_or_else(|| err("rgb buffer does not match its dimensions"))
}

fn mask_from_bytes(data: &[u8], width: usize, height: usize) -> PyResult<Mask> {
    if data.len() != width * height {
        return Err(err(format!(
            "mask buffer holds {} bytes, expected {} for {width}x{height}",
            data.len(),
            width * height
        )));
    }
    Ok(Mask {
        width,
        height,
        data: data.iter().map(|&b| b != 0).collect(),
    })
}

// ---------------------------------------------------------------------------
// poses and grids

/// Camera pose on the viewing sphere; angles in radians, fov in degrees.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Pose {
    inner: SphericalPose,
}

#[pymethods]
impl Pose {
    #[new]
    fn new(theta: f64, phi: f64, r: f64, fov_x: f64) -> Self {
        Pose {
            inner: SphericalPose { theta, phi, r, fov_x },
        }
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi
    }

    #[getter]
    fn r(&self) -> f64 {
        self.inner.r
    }

    #[getter]
    fn fov_x(&self) -> f64 {
        self.inner.fov_x
    }

    fn __repr__(&self) -> String {
        format!(
            "Pose(theta={}, phi={}, r={}, fov_x={})",
            self.inner.theta, self.inner.phi, self.inner.r, self.inner.fov_x
        )
    }
}

/// Deterministic viewpoint grid; either a named preset or explicit knobs.
#[pyfunction]
#[pyo3(signature = (preset=None, *, n_elevations=None, azimuth_scale=None, phi_min=None, phi_max=None, r=None, fov_x=None))]
#[allow(clippy::too_many_arguments)]
fn grid_poses(
    preset: Option<&str>,
    n_elevations: Option<usize>,
    azimuth_scale: Option<f64>,
    phi_min: Option<f64>,
    phi_max: Option<f64>,
    r: Option<f64>,
    fov_x: Option<f64>,
) -> PyResult<Vec<Pose>> {
    let mut config = match preset {
        Some(name) => GridConfig::preset(name).map_err(err)?,
        None => GridConfig::default(),
    };
    if let Some(v) = n_elevations {
        config.n_elevations = v;
    }
    if let Some(v) = azimuth_scale {
        config.azimuth_scale = v;
    }
    if let Some(v) = phi_min {
        config.phi_min = v;
    }
    if let Some(v) = phi_max {
        config.phi_max = v;
    }
    if let Some(v) = r {
        config.r = v;
    }
    if let Some(v) = fov_x {
        config.fov_x = v;
    }
    let grid = build_viewpoint_grid(&config).map_err(err)?;
    Ok(grid
        .poses
        .into_iter()
        .map(|inner| Pose { inner })
        .collect())
}

// ---------------------------------------------------------------------------
// meshes and label maps

/// Segmented triangle mesh with named material parts.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: SegmentedMesh,
}

#[pymethods]
impl Mesh {
    /// Load `.obj` or mesh JSON, by file extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = fs::read_to_string(&path).map_err(err)?;
        let inner = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("obj"))
        {
            shapemat::shapelib::load_obj(&text).map_err(err)?
        } else {
            shapemat::shapelib::mesh_from_json(&text).map_err(err)?
        };
        Ok(Mesh { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Mesh {
            inner: shapemat::shapelib::mesh_from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        shapemat::shapelib::mesh_to_json(&self.inner).map_err(err)
    }

    /// Ingest normalization: weld, unit cube, synthesized UVs, unit texel
    /// density.
    fn prepare(&self) -> PyResult<Self> {
        Ok(Mesh {
            inner: shapemat::pipeline::prepare_mesh(&self.inner).map_err(err)?,
        })
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.vertices.len()
    }

    #[getter]
    fn num_faces(&self) -> usize {
        self.inner.faces.len()
    }

    #[getter]
    fn material_parts(&self) -> Vec<String> {
        self.inner.material_part_names.clone()
    }

    /// Render part ids over white background; label 0 is background,
    /// part `i` renders as label `i + 1`.
    fn render_part_ids(&self, pose: &Pose, resolution: u32) -> PyResult<Labels> {
        let render = render_part_ids(&self.inner, &pose.inner, resolution).map_err(err)?;
        Ok(Labels {
            inner: render.part_ids,
        })
    }

    /// Foreground mask of the rendered mesh as one byte per pixel (0/1).
    fn render_silhouette(&self, pose: &Pose, resolution: u32) -> PyResult<Vec<u8>> {
        let render = render_part_ids(&self.inner, &pose.inner, resolution).map_err(err)?;
        let mask = silhouette(&render);
        Ok(mask.data.iter().map(|&b| b as u8).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(vertices={}, faces={}, parts={})",
            self.inner.vertices.len(),
            self.inner.faces.len(),
            self.inner.material_part_names.len()
        )
    }
}

/// Per-pixel labeling; 0 is background, parts are 1..=label_count.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Labels {
    inner: LabelMap,
}

#[pymethods]
impl Labels {
    /// Build from a flat row-major label buffer.
    #[staticmethod]
    fn from_list(labels: Vec<u32>, width: usize, height: usize, label_count: u32) -> PyResult<Self> {
        if labels.len() != width * height {
            return Err(err(format!(
                "{} labels do not fill {width}x{height}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > label_count) {
            return Err(err(format!("label {bad} exceeds label_count {label_count}")));
        }
        Ok(Labels {
            inner: LabelMap {
                width,
                height,
                labels,
                label_count,
                label_kind: LabelKind::MaterialPart,
            },
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn label_count(&self) -> u32 {
        self.inner.label_count
    }

    /// Flat row-major labels.
    fn to_list(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    /// Count of pixels per label, indexed 0..=label_count.
    fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.inner.label_count as usize + 1];
        for &l in &self.inner.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn __repr__(&self) -> String {
        format!(
            "Labels({}x{}, label_count={})",
            self.inner.width, self.inner.height, self.inner.label_count
        )
    }
}

// ---------------------------------------------------------------------------
// descriptors, flow, crf

fn hog_config(
    cells_x: Option<usize>,
    cells_y: Option<usize>,
    orientation_bins: Option<usize>,
    signed: Option<bool>,
    working_size: Option<usize>,
    blur_sigma: Option<f32>,
) -> HogConfig {
    let mut c = HogConfig::default();
    if let Some(v) = cells_x {
        c.cells_x = v;
    }
    if let Some(v) = cells_y {
        c.cells_y = v;
    }
    if let Some(v) = orientation_bins {
        c.orientation_bins = v;
    }
    if let Some(v) = signed {
        c.signed = v;
    }
    if let Some(v) = working_size {
        c.working_size = v;
    }
    if let Some(v) = blur_sigma {
        c.blur_sigma = v;
    }
    c
}

/// HOG descriptor of an image file; defaults give 13*13*8 = 1352 values.
#[pyfunction]
#[pyo3(signature = (path, *, cells_x=None, cells_y=None, orientation_bins=None, signed=None, working_size=None, blur_sigma=None))]
fn hog_descriptor(
    path: PathBuf,
    cells_x: Option<usize>,
    cells_y: Option<usize>,
    orientation_bins: Option<usize>,
    signed: Option<bool>,
    working_size: Option<usize>,
    blur_sigma: Option<f32>,
) -> PyResult<Vec<f32>> {
    let image = image::open(&path).map_err(err)?.to_rgb8();
    let config = hog_config(cells_x, cells_y, orientation_bins, signed, working_size, blur_sigma);
    let d = shapemat::hogindex::hog(&image, &config).map_err(err)?;
    Ok(d.values)
}

/// HOG descriptor of a raw RGB buffer (3 bytes per pixel, row major).
#[pyfunction]
#[pyo3(signature = (data, width, height, *, cells_x=None, cells_y=None, orientation_bins=None, signed=None, working_size=None, blur_sigma=None))]
#[allow(clippy::too_many_arguments)]
fn hog_from_rgb(
    data: Vec<u8>,
    width: u32,
    height: u32,
    cells_x: Option<usize>,
    cells_y: Option<usize>,
    orientation_bins: Option<usize>,
    signed: Option<bool>,
    working_size: Option<usize>,
    blur_sigma: Option<f32>,
) -> PyResult<Vec<f32>> {
    let image = rgb_from_bytes(&data, width, height)?;
    let config = hog_config(cells_x, cells_y, orientation_bins, signed, working_size, blur_sigma);
    let d = shapemat::hogindex::hog(&image, &config).map_err(err)?;
    Ok(d.values)
}

/// Dense-CRF refinement of a label map against an RGB guide image.
#[pyfunction]
#[pyo3(signature = (labels, guide_rgb, *, iterations=None, w_appearance=None, w_smoothness=None, theta_alpha=None, theta_beta=None, theta_gamma=None, epsilon=None, backend=None))]
#[allow(clippy::too_many_arguments)]
fn crf_refine(
    labels: &Labels,
    guide_rgb: Vec<u8>,
    iterations: Option<usize>,
    w_appearance: Option<f64>,
    w_smoothness: Option<f64>,
    theta_alpha: Option<f64>,
    theta_beta: Option<f64>,
    theta_gamma: Option<f64>,
    epsilon: Option<f64>,
    backend: Option<&str>,
) -> PyResult<Labels> {
    let guide = rgb_from_bytes(
        &guide_rgb,
        labels.inner.width as u32,
        labels.inner.height as u32,
    )?;
    let mut params = CrfParams::default();
    if let Some(v) = iterations {
        params.iterations = v;
    }
    if let Some(v) = w_appearance {
        params.w_appearance = v;
    }
    if let Some(v) = w_smoothness {
        params.w_smoothness = v;
    }
    if let Some(v) = theta_alpha {
        params.theta_alpha = v;
    }
    if let Some(v) = theta_beta {
        params.theta_beta = v;
    }
    if let Some(v) = theta_gamma {
        params.theta_gamma = v;
    }
    if let Some(v) = epsilon {
        params.epsilon = v;
    }
    let backend = match backend {
        None | Some("accelerated") => CrfBackend::Accelerated,
        Some("reference") => CrfBackend::Reference,
        Some(other) => return Err(err(format!("unknown backend '{other}'"))),
    };
    let unary = unary_from_labels(&labels.inner, params.epsilon).map_err(err)?;
    let marginals = mean_field(&unary, &guide, &params, backend).map_err(err)?;
    Ok(Labels {
        inner: map_labels(&marginals, labels.inner.label_kind),
    })
}

/// Median flow between two binary masks (one byte per pixel, 0 = background),
/// as integer (dx, dy) from src onto dst.
#[pyfunction]
fn flow_median(
    src_mask: Vec<u8>,
    dst_mask: Vec<u8>,
    width: usize,
    height: usize,
) -> PyResult<(i32, i32)> {
    let src = mask_from_bytes(&src_mask, width, height)?;
    let dst = mask_from_bytes(&dst_mask, width, height)?;
    let a = encode_coordinate_silhouette(&src).map_err(err)?;
    let b = encode_coordinate_silhouette(&dst).map_err(err)?;
    let flow = compute_flow(&a, &b, &FlowParams::default()).map_err(err)?;
    Ok(median_flow(&flow, &src))
}

// ---------------------------------------------------------------------------
// material library and loss

/// Tagged material library.
#[pyclass]
struct Library {
    inner: MaterialLibrary,
}

#[pymethods]
impl Library {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Library {
            inner: shapemat::material::load_material_library(&path).map_err(err)?,
        })
    }

    /// Built-in library with the reference per-substance counts.
    #[staticmethod]
    fn reference() -> Self {
        Library {
            inner: reference_library(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records().iter().map(|r| r.id.clone()).collect()
    }

    fn substance_of(&self, index: usize) -> PyResult<String> {
        if index >= self.inner.len() {
            return Err(err(format!(
                "material index {index} out of range ({} materials)",
                self.inner.len()
            )));
        }
        Ok(shapemat::substance::SUBSTANCES[self.inner.substance_of(index)].to_string())
    }
}

/// Relative error between analytic and finite-difference gradients of the
/// multitask loss at one random state.
#[pyfunction]
fn loss_fd_error(seed: u64) -> PyResult<f64> {
    let state = random_loss_state(seed);
    finite_difference_error(&state).map_err(err)
}

// ---------------------------------------------------------------------------
// pipeline

/// Full default pipeline configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let text =
        serde_json::to_string(&shapemat::pipeline::PipelineConfig::default()).map_err(err)?;
    json_to_py(py, &text)
}

/// Run the batch pipeline; `config` must be a complete config dict (start
/// from `default_config()`). Returns the run report as a dict.
#[pyfunction]
#[pyo3(signature = (shapes_dir, exemplars_dir, library_path, out_dir, config=None))]
fn run(
    py: Python<'_>,
    shapes_dir: PathBuf,
    exemplars_dir: PathBuf,
    library_path: PathBuf,
    out_dir: PathBuf,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let config = match config {
        Some(obj) => serde_json::from_str(&py_to_json(obj)?).map_err(err)?,
        None => shapemat::pipeline::PipelineConfig::default(),
    };
    let report =
        shapemat::pipeline::run_pipeline(&shapes_dir, &exemplars_dir, &library_path, &out_dir, &config)
            .map_err(err)?;
    let text = serde_json::to_string(&report).map_err(err)?;
    json_to_py(py, &text)
}

/// Score a directory of descriptors against a truth manifest; returns the
/// evaluation report as a dict.
#[pyfunction]
fn evaluate(
    py: Python<'_>,
    descriptors_dir: PathBuf,
    truth_path: PathBuf,
    library_path: PathBuf,
) -> PyResult<Py<PyAny>> {
    let descriptors = shapemat::pipeline::load_descriptors(&descriptors_dir).map_err(err)?;
    let truth = shapemat::pipeline::load_truth_manifest(&truth_path).map_err(err)?;
    let lib = shapemat::material::load_material_library(&library_path).map_err(err)?;
    let report = shapemat::pipeline::evaluate(&descriptors, &truth, &lib).map_err(err)?;
    let text = serde_json::to_string(&report).map_err(err)?;
    json_to_py(py, &text)
}

/// Write a small self-consistent corpus (shapes, exemplars, library, truth)
/// under `root` for end-to-end experiments.
#[pyfunction]
#[pyo3(signature = (root, *, n_shapes=2, pose_index=2, resolution=256, n_elevations=3, azimuth_scale=8.0))]
fn make_closed_loop_fixture(
    py: Python<'_>,
    root: PathBuf,
    n_shapes: usize,
    pose_index: usize,
    resolution: u32,
    n_elevations: usize,
    azimuth_scale: f64,
) -> PyResult<Py<PyAny>> {
    let grid = GridConfig {
        n_elevations,
        azimuth_scale,
        ..GridConfig::default()
    };
    let fixture =
        shapemat::pipeline::build_closed_loop_fixture(&root, n_shapes, &grid, pose_index, resolution)
            .map_err(err)?;
    let value = serde_json::json!({
        "shapes_dir": fixture.shapes_dir.display().to_string(),
        "exemplars_dir": fixture.exemplars_dir.display().to_string(),
        "library_path": fixture.library_path.display().to_string(),
        "truth_path": fixture.truth_path.display().to_string(),
        "pose_index": fixture.pose_index,
        "shape_ids": fixture.shape_ids,
    });
    json_to_py(py, &value.to_string())
}

#[pymodule]
fn shapemat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<Mesh>()?;
    m.add_class::<Labels>()?;
    m.add_class::<Library>()?;
    m.add_function(wrap_pyfunction!(grid_poses, m)?)?;
    m.add_function(wrap_pyfunction!(hog_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(hog_from_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(crf_refine, m)?)?;
    m.add_function(wrap_pyfunction!(flow_median, m)?)?;
    m.add_function(wrap_pyfunction!(loss_fd_error, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(make_closed_loop_fixture, m)?)?;
    Ok(())
}
