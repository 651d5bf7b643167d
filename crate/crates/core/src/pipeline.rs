//! Batch orchestration: coarse retrieval, silhouette alignment, dense CRF
//! refinement, substance aggregation, and material assignment over a corpus
//! of segmented shapes guided by exemplar photographs.
//!
//! Per-candidate failures mark the candidate and skip its remaining stages;
//! the batch continues. Systemic problems (unreadable inputs, bad config,
//! empty material library) abort the run with an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::{build_viewpoint_grid, CameraError, GridConfig, SphericalPose, ViewpointGrid};
use crate::densecrf::{
    map_labels, mean_field, unary_from_labels, CrfBackend, CrfError, CrfParams,
};
use crate::exemplar::{
    foreground_mask, standardize, Exemplar, ExemplarError, DEFAULT_WHITE_THRESHOLD,
};
use crate::flowrefine::{
    compute_flow, encode_coordinate_silhouette, warp_labels, FlowError, FlowParams,
};
use crate::hogindex::{
    build_reverse_index, hog, invert_index, save_index, CoarseMatch, ExemplarDescriptor,
    HogConfig, HogDescriptor, HogIndexError, RenderingEntry,
};
use crate::img::Mask;
use crate::material::{
    histogram_match, load_material_library, median_color_match, substance_weighted_ranking,
    MaterialError, MaterialLibrary,
};
use crate::raster::{
    render_flat_color, render_part_ids, silhouette, square_crop_labelmap, square_crop_mask,
    LabelKind, LabelMap, RasterError,
};
use crate::shapelib::{
    generate_missing_uvs, load_obj, mesh_from_json, normalize_to_unit_cube, normalize_uv_scale,
    weld_vertices, MeshError, SegmentedMesh,
};
use crate::substance::{
    aggregate_part_substance, substance_index, ColorPriorClassifier, FixtureClassifier,
    PartSubstanceLabeling, SubprocessClassifier, SubstanceClassifier, SubstanceError,
    SubstanceMap, N_SUBSTANCES,
};

pub const CONFIG_VERSION: u32 = 1;

/// Weld tolerance applied during shape ingest, before unit-cube scaling.
pub const INGEST_WELD_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Hog(#[from] HogIndexError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Substance(#[from] SubstanceError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Exemplar(#[from] ExemplarError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffDirection {
    /// Keep matches with distance <= cutoff.
    DiscardAbove,
    /// Keep matches with distance >= cutoff.
    DiscardBelow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierChoice {
    /// Uniform substance belief inside the mask; a neutral baseline.
    Uniform,
    ColorPrior,
    Fixture { dir: PathBuf },
    Subprocess { command: String, id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherChoice {
    Histogram,
    MedianColor,
}

impl MatcherChoice {
    pub fn id(self) -> &'static str {
        match self {
            MatcherChoice::Histogram => "histogram",
            MatcherChoice::MedianColor => "median_color",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub grid: GridConfig,
    pub hog: HogConfig,
    /// Square resolution of the retrieval-stage part-id renders.
    pub render_resolution: u32,
    /// Square resolution of the alignment-stage part-id renders.
    pub align_source_resolution: u32,
    /// Side of the standardized crops the flow and CRF stages run on.
    pub align_size: u32,
    pub top_n: usize,
    pub distance_cutoff: f64,
    pub cutoff_direction: CutoffDirection,
    pub flow: FlowParams,
    pub crf: CrfParams,
    pub crf_backend: CrfBackend,
    pub classifier: ClassifierChoice,
    pub matcher: MatcherChoice,
    /// Ranked alternatives stored per part, including the winner.
    pub max_alternatives: usize,
    pub preview_resolution: u32,
    /// Foreground threshold for exemplar ingest; min channel below it is
    /// foreground.
    pub white_threshold: u8,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            grid: GridConfig::default(),
            hog: HogConfig::default(),
            render_resolution: 128,
            align_source_resolution: 256,
            align_size: 256,
            top_n: 12,
            distance_cutoff: 8.0,
            cutoff_direction: CutoffDirection::DiscardAbove,
            flow: FlowParams::default(),
            crf: CrfParams::default(),
            crf_backend: CrfBackend::Accelerated,
            classifier: ClassifierChoice::ColorPrior,
            matcher: MatcherChoice::Histogram,
            max_alternatives: 12,
            preview_resolution: 256,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.version != CONFIG_VERSION {
            return Err(PipelineError::BadConfig(format!(
                "unsupported config version {} (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        if self.top_n == 0 {
            return Err(PipelineError::BadConfig("top_n must be >= 1".into()));
        }
        if self.max_alternatives == 0 {
            return Err(PipelineError::BadConfig(
                "max_alternatives must be >= 1".into(),
            ));
        }
        if !self.distance_cutoff.is_finite() {
            return Err(PipelineError::BadConfig(
                "distance_cutoff must be finite".into(),
            ));
        }
        for (name, v) in [
            ("render_resolution", self.render_resolution),
            ("align_source_resolution", self.align_source_resolution),
            ("align_size", self.align_size),
            ("preview_resolution", self.preview_resolution),
        ] {
            if v == 0 {
                return Err(PipelineError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        if self.white_threshold == 0 {
            return Err(PipelineError::BadConfig(
                "white_threshold must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the config's canonical JSON encoding.
pub fn config_hash(config: &PipelineConfig) -> Result<String, PipelineError> {
    let bytes = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn write_config(config: &PipelineConfig, path: &Path) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(config)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// candidates and descriptors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Select,
    Flow,
    Refine,
    Substance,
    Material,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Select => "select",
            Stage::Flow => "flow",
            Stage::Refine => "refine",
            Stage::Substance => "substance",
            Stage::Material => "material",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed { reason: String },
    Skipped,
}

/// In-flight record for one (shape, exemplar, pose) retrieval hit.
///
/// Invariant: `stages` lists every stage in order; the first `Failed` entry
/// is followed only by `Skipped` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoShapeCandidate {
    pub shape_id: String,
    pub exemplar_id: String,
    pub pose_index: usize,
    pub pose: SphericalPose,
    pub hog_distance: f64,
    pub refined_parts: Option<LabelMap>,
    pub part_substances: Option<PartSubstanceLabeling>,
    pub stages: Vec<(Stage, StageStatus)>,
}

impl PhotoShapeCandidate {
    pub fn stage_status(&self, stage: Stage) -> Option<&StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| st)
    }

    pub fn failed_stage(&self) -> Option<(Stage, &str)> {
        self.stages.iter().find_map(|(s, st)| match st {
            StageStatus::Failed { reason } => Some((*s, reason.as_str())),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAlternative {
    pub material_id: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PartOutcome {
    Assigned {
        material_id: String,
        substance: String,
        /// Descending probability; includes the winner first.
        alternatives: Vec<RankedAlternative>,
        /// Normalized per-substance confidence for this part.
        substance_confidence: [f64; N_SUBSTANCES],
    },
    Unassigned {
        reason: String,
    },
}

/// One material part of one descriptor; `part_id` is the 0-based material
/// part index of the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorPart {
    pub part_id: u32,
    pub part_name: String,
    #[serde(flatten)]
    pub outcome: PartOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub classifier: String,
    pub matcher: String,
    pub config_hash: String,
    /// Optional wall-clock stamp; absent by default so reruns are
    /// byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

/// Final per-candidate output: every material part carries either an
/// assignment or an explicit unassigned reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoShapeDescriptor {
    pub shape_id: String,
    pub exemplar_id: String,
    pub pose_index: usize,
    pub pose: SphericalPose,
    pub hog_distance: f64,
    pub parts: Vec<DescriptorPart>,
    pub provenance: Provenance,
}

pub fn descriptor_to_bytes(d: &PhotoShapeDescriptor) -> Result<Vec<u8>, PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(d)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Load every `*.json` descriptor under `dir`, sorted by file name.
pub fn load_descriptors(dir: &Path) -> Result<Vec<PhotoShapeDescriptor>, PipelineError> {
    let mut out = Vec::new();
    for path in sorted_files(dir, &["json"])? {
        let text = fs::read_to_string(&path)?;
        out.push(serde_json::from_str(&text)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub selected: usize,
    pub refined: usize,
    pub assigned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub shape_id: String,
    pub exemplar_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub shapes: usize,
    pub exemplars: usize,
    pub renderings: usize,
    pub funnel: Funnel,
    pub zero_candidate_shapes: Vec<String>,
    pub shape_failures: Vec<InputFailure>,
    pub exemplar_failures: Vec<InputFailure>,
    pub candidate_failures: Vec<FailureRecord>,
    pub descriptors_written: usize,
}

pub fn report_to_bytes(r: &RunReport) -> Result<Vec<u8>, PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(r)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone)]
pub struct LoadedShape {
    pub shape_id: String,
    pub mesh: SegmentedMesh,
}

/// Ingest normalization chain: weld, unit cube, synthesized UVs where
/// missing, unit texel density.
pub fn prepare_mesh(mesh: &SegmentedMesh) -> Result<SegmentedMesh, MeshError> {
    let welded = weld_vertices(mesh, INGEST_WELD_EPS)?;
    let boxed = normalize_to_unit_cube(&welded)?;
    let with_uv = generate_missing_uvs(&boxed);
    normalize_uv_scale(&with_uv)
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.as_deref().is_some_and(|e| exts.contains(&e)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load and normalize every `.obj` / `.json` mesh under `dir`.
/// Unparseable files become per-shape failures, not errors.
pub fn load_shapes(dir: &Path) -> Result<(Vec<LoadedShape>, Vec<InputFailure>), PipelineError> {
    let mut shapes = Vec::new();
    let mut failures = Vec::new();
    for path in sorted_files(dir, &["obj", "json"])? {
        let id = file_stem(&path);
        let attempt = || -> Result<SegmentedMesh, PipelineError> {
            let text = fs::read_to_string(&path)?;
            let raw = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
                load_obj(&text)?
            } else {
                mesh_from_json(&text)?
            };
            Ok(prepare_mesh(&raw)?)
        };
        match attempt() {
            Ok(mesh) => shapes.push(LoadedShape {
                shape_id: id,
                mesh,
            }),
            Err(e) => failures.push(InputFailure {
                id,
                reason: e.to_string(),
            }),
        }
    }
    Ok((shapes, failures))
}

/// Load and standardize every image under `dir` to `out_size` crops.
/// Images with no usable foreground become per-exemplar failures.
pub fn load_exemplars(
    dir: &Path,
    out_size: u32,
    white_threshold: u8,
) -> Result<(Vec<Exemplar>, Vec<InputFailure>), PipelineError> {
    let mut exemplars = Vec::new();
    let mut failures = Vec::new();
    for path in sorted_files(dir, &["png", "jpg", "jpeg"])? {
        let id = file_stem(&path);
        let attempt = || -> Result<Exemplar, PipelineError> {
            let image = image::open(&path)?.to_rgb8();
            let mask = foreground_mask(&image, white_threshold)?;
            Ok(standardize(
                &id,
                &path.to_string_lossy(),
                &image,
                &mask,
                out_size,
            )?)
        };
        match attempt() {
            Ok(e) => exemplars.push(e),
            Err(e) => failures.push(InputFailure {
                id,
                reason: e.to_string(),
            }),
        }
    }
    Ok((exemplars, failures))
}

// ---------------------------------------------------------------------------
// retrieval

fn mask_to_image(mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        if mask.get(x as usize, y as usize) {
            image::Rgb([255, 255, 255])
        } else {
            image::Rgb([0, 0, 0])
        }
    })
}

/// Descriptor of a silhouette mask: square crop to the mask bbox, then HOG
/// of the white-on-black image.
pub fn silhouette_descriptor(
    mask: &Mask,
    config: &HogConfig,
) -> Result<HogDescriptor, PipelineError> {
    let cropped = square_crop_mask(mask, mask, config.working_size as u32)?;
    Ok(hog(&mask_to_image(&cropped), config)?)
}

/// Render every shape at every grid pose and describe its silhouette.
/// Poses where a shape has an empty silhouette are skipped.
pub fn build_rendering_entries(
    shapes: &[LoadedShape],
    grid: &ViewpointGrid,
    resolution: u32,
    hog_config: &HogConfig,
) -> Result<Vec<RenderingEntry>, PipelineError> {
    let jobs: Vec<(usize, usize)> = (0..shapes.len())
        .flat_map(|s| (0..grid.poses.len()).map(move |p| (s, p)))
        .collect();
    let entries: Vec<Option<RenderingEntry>> = jobs
        .par_iter()
        .map(|&(s, p)| -> Result<Option<RenderingEntry>, PipelineError> {
            let render = render_part_ids(&shapes[s].mesh, &grid.poses[p], resolution)?;
            let sil = silhouette(&render);
            if !sil.data.iter().any(|&b| b) {
                return Ok(None);
            }
            let descriptor = silhouette_descriptor(&sil, hog_config)?;
            Ok(Some(RenderingEntry {
                shape_id: shapes[s].shape_id.clone(),
                pose_index: p,
                pose: grid.poses[p],
                descriptor,
            }))
        })
        .collect::<Result<_, _>>()?;
    Ok(entries.into_iter().flatten().collect())
}

pub fn exemplar_descriptors(
    exemplars: &[Exemplar],
    hog_config: &HogConfig,
) -> Result<Vec<ExemplarDescriptor>, PipelineError> {
    exemplars
        .par_iter()
        .map(|e| {
            Ok(ExemplarDescriptor {
                exemplar_id: e.id.clone(),
                descriptor: silhouette_descriptor(&e.mask, hog_config)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// selection

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Grouped by shape id (ascending), ascending distance within a shape.
    pub candidates: Vec<CoarseMatch>,
    /// Shapes whose matches were all discarded by the cutoff.
    pub zero_candidate_shapes: Vec<String>,
}

/// Keep each shape's `top_n` closest matches, then apply the distance
/// cutoff. Ordering within a shape is inherited from the inverted index
/// (ascending distance, stable).
pub fn select_candidates(
    inverted: &BTreeMap<String, Vec<CoarseMatch>>,
    top_n: usize,
    distance_cutoff: f64,
    direction: CutoffDirection,
) -> Selection {
    let mut candidates = Vec::new();
    let mut zero = Vec::new();
    for (shape_id, matches) in inverted {
        let kept: Vec<CoarseMatch> = matches
            .iter()
            .take(top_n)
            .filter(|m| match direction {
                CutoffDirection::DiscardAbove => m.distance <= distance_cutoff,
                CutoffDirection::DiscardBelow => m.distance >= distance_cutoff,
            })
            .cloned()
            .collect();
        if kept.is_empty() {
            zero.push(shape_id.clone());
        } else {
            candidates.extend(kept);
        }
    }
    Selection {
        candidates,
        zero_candidate_shapes: zero,
    }
}

// ---------------------------------------------------------------------------
// classifiers

/// Uniform substance belief inside the mask, background outside.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformClassifier;

impl SubstanceClassifier for UniformClassifier {
    fn id(&self) -> &str {
        "uniform"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(
        &self,
        _exemplar_id: &str,
        image: &RgbImage,
        mask: &Mask,
    ) -> Result<SubstanceMap, SubstanceError> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w != mask.width || h != mask.height {
            return Err(SubstanceError::DimensionMismatch(
                w, h, mask.width, mask.height,
            ));
        }
        let mut map = SubstanceMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let px = map.at_mut(x, y);
                if mask.get(x, y) {
                    for c in 0..N_SUBSTANCES {
                        px[c] = 1.0 / N_SUBSTANCES as f64;
                    }
                } else {
                    px[N_SUBSTANCES] = 1.0;
                }
            }
        }
        Ok(map)
    }
}

pub fn make_classifier(choice: &ClassifierChoice) -> Box<dyn SubstanceClassifier> {
    match choice {
        ClassifierChoice::Uniform => Box::new(UniformClassifier),
        ClassifierChoice::ColorPrior => Box::new(ColorPriorClassifier),
        ClassifierChoice::Fixture { dir } => Box::new(FixtureClassifier { dir: dir.clone() }),
        ClassifierChoice::Subprocess { command, id } => Box::new(SubprocessClassifier {
            command: command.clone(),
            classifier_id: id.clone(),
        }),
    }
}

// ---------------------------------------------------------------------------
// per-candidate stages

#[derive(Debug, Clone)]
pub struct ProcessedCandidate {
    pub candidate: PhotoShapeCandidate,
    pub descriptor: PhotoShapeDescriptor,
    pub preview: Option<RgbImage>,
    pub preview_failure: Option<String>,
}

fn align_stage(
    m: &CoarseMatch,
    mesh: &SegmentedMesh,
    exemplar: &Exemplar,
    config: &PipelineConfig,
) -> Result<LabelMap, PipelineError> {
    let render = render_part_ids(mesh, &m.pose, config.align_source_resolution)?;
    let sil = silhouette(&render);
    let cropped_parts = square_crop_labelmap(&render.part_ids, &sil, config.align_size)?;
    let cropped_sil = square_crop_mask(&sil, &sil, config.align_size)?;
    let src = encode_coordinate_silhouette(&cropped_sil)?;
    let dst = encode_coordinate_silhouette(&exemplar.mask)?;
    let flow = compute_flow(&src, &dst, &config.flow)?;
    Ok(warp_labels(&cropped_parts, &flow)?)
}

fn refine_stage(
    warped: &LabelMap,
    exemplar: &Exemplar,
    config: &PipelineConfig,
) -> Result<LabelMap, PipelineError> {
    let unary = unary_from_labels(warped, config.crf.epsilon)?;
    let marginals = mean_field(&unary, &exemplar.image, &config.crf, config.crf_backend)?;
    Ok(map_labels(&marginals, LabelKind::MaterialPart))
}

fn substance_stage(
    refined: &LabelMap,
    exemplar: &Exemplar,
    classifier: &dyn SubstanceClassifier,
) -> Result<PartSubstanceLabeling, PipelineError> {
    let map = classifier.classify(&exemplar.id, &exemplar.image, &exemplar.mask)?;
    Ok(aggregate_part_substance(refined, &map)?)
}

fn part_confidence(labeling: &PartSubstanceLabeling, label: u32) -> [f64; N_SUBSTANCES] {
    let mass = &labeling.mass[label as usize - 1];
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        let mut out = [0.0; N_SUBSTANCES];
        for (o, m) in out.iter_mut().zip(mass) {
            *o = m / total;
        }
        out
    } else {
        [1.0 / N_SUBSTANCES as f64; N_SUBSTANCES]
    }
}

fn material_stage(
    refined: &LabelMap,
    labeling: &PartSubstanceLabeling,
    mesh: &SegmentedMesh,
    exemplar: &Exemplar,
    lib: &MaterialLibrary,
    config: &PipelineConfig,
) -> Result<Vec<DescriptorPart>, PipelineError> {
    assign_parts(
        refined,
        labeling,
        &mesh.material_part_names,
        &exemplar.image,
        lib,
        config.matcher,
        config.max_alternatives,
    )
}

/// Rank and assign a material to every part label of `refined`; parts with
/// no pixels or no rankable material come back `Unassigned` with a reason.
pub fn assign_parts(
    refined: &LabelMap,
    labeling: &PartSubstanceLabeling,
    part_names: &[String],
    image: &RgbImage,
    lib: &MaterialLibrary,
    matcher: MatcherChoice,
    max_alternatives: usize,
) -> Result<Vec<DescriptorPart>, PipelineError> {
    if part_names.len() < refined.label_count as usize {
        return Err(PipelineError::BadConfig(format!(
            "{} part names for {} part labels",
            part_names.len(),
            refined.label_count
        )));
    }
    let mut counts = vec![0usize; refined.label_count as usize + 1];
    for &l in &refined.labels {
        counts[l as usize] += 1;
    }
    let mut parts = Vec::with_capacity(refined.label_count as usize);
    for label in 1..=refined.label_count {
        let part_id = label - 1;
        let part_name = part_names[part_id as usize].clone();
        if counts[label as usize] == 0 {
            parts.push(DescriptorPart {
                part_id,
                part_name,
                outcome: PartOutcome::Unassigned {
                    reason: "no visible pixels after refinement".into(),
                },
            });
            continue;
        }
        let mask = Mask::from_fn(refined.width, refined.height, |x, y| {
            refined.get(x, y) == label
        });
        let scores = match matcher {
            MatcherChoice::Histogram => histogram_match(image, &mask, lib)?,
            MatcherChoice::MedianColor => median_color_match(image, &mask, lib)?,
        };
        let confidence = part_confidence(labeling, label);
        let ranked = substance_weighted_ranking(&scores, &confidence, lib)?;
        match ranked.first() {
            None => parts.push(DescriptorPart {
                part_id,
                part_name,
                outcome: PartOutcome::Unassigned {
                    reason: "no material with nonzero probability".into(),
                },
            }),
            Some(top) => {
                let record = lib.record(top.index);
                parts.push(DescriptorPart {
                    part_id,
                    part_name,
                    outcome: PartOutcome::Assigned {
                        material_id: record.id.clone(),
                        substance: record.substance.clone(),
                        alternatives: ranked
                            .iter()
                            .take(max_alternatives)
                            .map(|r| RankedAlternative {
                                material_id: lib.record(r.index).id.clone(),
                                probability: r.probability,
                            })
                            .collect(),
                        substance_confidence: confidence,
                    },
                });
            }
        }
    }
    Ok(parts)
}

fn all_parts_unassigned(mesh: &SegmentedMesh, reason: &str) -> Vec<DescriptorPart> {
    mesh.material_part_names
        .iter()
        .enumerate()
        .map(|(i, name)| DescriptorPart {
            part_id: i as u32,
            part_name: name.clone(),
            outcome: PartOutcome::Unassigned {
                reason: reason.to_string(),
            },
        })
        .collect()
}

fn preview_colors(parts: &[DescriptorPart], lib: &MaterialLibrary, n_parts: usize) -> Vec<[u8; 3]> {
    let mut colors = vec![[128u8, 128, 128]; n_parts];
    for part in parts {
        if let PartOutcome::Assigned { material_id, .. } = &part.outcome {
            if let Some(i) = lib.index_of(material_id) {
                let m = lib.record(i).signature.median;
                colors[part.part_id as usize] =
                    [m[0], m[1], m[2]].map(|v| v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    colors
}

/// Run the flow, refine, substance, and material stages for one selected
/// match. Stage failures are captured in the candidate, never returned.
pub fn process_candidate(
    m: &CoarseMatch,
    mesh: &SegmentedMesh,
    exemplar: &Exemplar,
    lib: &MaterialLibrary,
    classifier: &dyn SubstanceClassifier,
    config: &PipelineConfig,
    hash: &str,
) -> ProcessedCandidate {
    let mut stages = vec![(Stage::Select, StageStatus::Ok)];
    let mut failure: Option<(Stage, String)> = None;

    let run_stage = |stages: &mut Vec<(Stage, StageStatus)>,
                         failure: &mut Option<(Stage, String)>,
                         stage: Stage,
                         result: Option<Result<(), String>>| {
        match result {
            None => stages.push((stage, StageStatus::Skipped)),
            Some(Ok(())) => stages.push((stage, StageStatus::Ok)),
            Some(Err(reason)) => {
                stages.push((
                    stage,
                    StageStatus::Failed {
                        reason: reason.clone(),
                    },
                ));
                *failure = Some((stage, reason));
            }
        }
    };

    let warped = {
        let r = align_stage(m, mesh, exemplar, config);
        let (v, s) = split(r);
        run_stage(&mut stages, &mut failure, Stage::Flow, Some(s));
        v
    };

    let refined = match (&warped, &failure) {
        (Some(w), None) => {
            let r = refine_stage(w, exemplar, config);
            let (v, s) = split(r);
            run_stage(&mut stages, &mut failure, Stage::Refine, Some(s));
            v
        }
        _ => {
            run_stage(&mut stages, &mut failure, Stage::Refine, None);
            None
        }
    };

    let labeling = match (&refined, &failure) {
        (Some(r), None) => {
            let res = substance_stage(r, exemplar, classifier);
            let (v, s) = split(res);
            run_stage(&mut stages, &mut failure, Stage::Substance, Some(s));
            v
        }
        _ => {
            run_stage(&mut stages, &mut failure, Stage::Substance, None);
            None
        }
    };

    let parts = match (&refined, &labeling, &failure) {
        (Some(r), Some(l), None) => {
            let res = material_stage(r, l, mesh, exemplar, lib, config);
            let (v, s) = split(res);
            run_stage(&mut stages, &mut failure, Stage::Material, Some(s));
            v
        }
        _ => {
            run_stage(&mut stages, &mut failure, Stage::Material, None);
            None
        }
    };

    let parts = match (parts, &failure) {
        (Some(p), _) => p,
        (None, Some((stage, reason))) => {
            all_parts_unassigned(mesh, &format!("{} stage failed: {reason}", stage.name()))
        }
        (None, None) => unreachable!("material stage ran or a failure was recorded"),
    };

    let descriptor = PhotoShapeDescriptor {
        shape_id: m.shape_id.clone(),
        exemplar_id: m.exemplar_id.clone(),
        pose_index: m.pose_index,
        pose: m.pose,
        hog_distance: m.distance,
        parts,
        provenance: Provenance {
            classifier: classifier.id().to_string(),
            matcher: config.matcher.id().to_string(),
            config_hash: hash.to_string(),
            generated_at: None,
        },
    };

    let colors = preview_colors(&descriptor.parts, lib, mesh.material_part_count());
    let (preview, preview_failure) =
        match render_flat_color(mesh, &m.pose, config.preview_resolution, &colors) {
            Ok(img) => (Some(img), None),
            Err(e) => (None, Some(e.to_string())),
        };

    ProcessedCandidate {
        candidate: PhotoShapeCandidate {
            shape_id: m.shape_id.clone(),
            exemplar_id: m.exemplar_id.clone(),
            pose_index: m.pose_index,
            pose: m.pose,
            hog_distance: m.distance,
            refined_parts: refined,
            part_substances: labeling,
            stages,
        },
        descriptor,
        preview,
        preview_failure,
    }
}

fn split<T>(r: Result<T, PipelineError>) -> (Option<T>, Result<(), String>) {
    match r {
        Ok(v) => (Some(v), Ok(())),
        Err(e) => (None, Err(e.to_string())),
    }
}

// ---------------------------------------------------------------------------
// run

/// Execute the full batch into `out_dir`: `config.lock.json`, `index.bin`,
/// `descriptors/*.json`, `previews/*.png`, `report.json`.
pub fn run_pipeline(
    shapes_dir: &Path,
    exemplars_dir: &Path,
    library_path: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let hash = config_hash(config)?;
    let lib = load_material_library(library_path)?;
    if lib.is_empty() {
        return Err(PipelineError::BadConfig(
            "material library is empty; nothing can be assigned".into(),
        ));
    }

    let descriptors_dir = out_dir.join("descriptors");
    let previews_dir = out_dir.join("previews");
    fs::create_dir_all(&descriptors_dir)?;
    fs::create_dir_all(&previews_dir)?;
    write_config(config, &out_dir.join("config.lock.json"))?;

    let (shapes, shape_failures) = load_shapes(shapes_dir)?;
    let (exemplars, exemplar_failures) =
        load_exemplars(exemplars_dir, config.align_size, config.white_threshold)?;

    let grid = build_viewpoint_grid(&config.grid)?;
    let entries = build_rendering_entries(&shapes, &grid, config.render_resolution, &config.hog)?;
    let ex_descriptors = exemplar_descriptors(&exemplars, &config.hog)?;
    let index = build_reverse_index(&ex_descriptors, &entries, config.top_n)?;
    save_index(&index, &out_dir.join("index.bin"))?;
    let inverted = invert_index(&index);

    let mut selection = select_candidates(
        &inverted,
        config.top_n,
        config.distance_cutoff,
        config.cutoff_direction,
    );
    let seen: BTreeSet<&String> = selection
        .candidates
        .iter()
        .map(|c| &c.shape_id)
        .chain(selection.zero_candidate_shapes.iter())
        .collect();
    let missing: Vec<String> = shapes
        .iter()
        .map(|s| &s.shape_id)
        .filter(|id| !seen.contains(id))
        .cloned()
        .collect();
    selection.zero_candidate_shapes.extend(missing);
    selection.zero_candidate_shapes.sort();

    let mesh_by: BTreeMap<&str, &SegmentedMesh> = shapes
        .iter()
        .map(|s| (s.shape_id.as_str(), &s.mesh))
        .collect();
    let exemplar_by: BTreeMap<&str, &Exemplar> =
        exemplars.iter().map(|e| (e.id.as_str(), e)).collect();
    let classifier = make_classifier(&config.classifier);

    let process = |m: &CoarseMatch| -> ProcessedCandidate {
        let mesh = mesh_by[m.shape_id.as_str()];
        let exemplar = exemplar_by[m.exemplar_id.as_str()];
        process_candidate(m, mesh, exemplar, &lib, classifier.as_ref(), config, &hash)
    };
    let processed: Vec<ProcessedCandidate> = if classifier.reentrant() {
        selection.candidates.par_iter().map(process).collect()
    } else {
        selection.candidates.iter().map(process).collect()
    };

    let mut descriptors_written = 0;
    let mut candidate_failures = Vec::new();
    let mut refined = 0;
    let mut assigned = 0;
    for p in &processed {
        let stem = format!("{}--{}", p.descriptor.shape_id, p.descriptor.exemplar_id);
        fs::write(
            descriptors_dir.join(format!("{stem}.json")),
            descriptor_to_bytes(&p.descriptor)?,
        )?;
        descriptors_written += 1;
        if let Some(img) = &p.preview {
            img.save(previews_dir.join(format!("{stem}.png")))?;
        }
        if matches!(
            p.candidate.stage_status(Stage::Refine),
            Some(StageStatus::Ok)
        ) {
            refined += 1;
        }
        if p.descriptor
            .parts
            .iter()
            .any(|part| matches!(part.outcome, PartOutcome::Assigned { .. }))
        {
            assigned += 1;
        }
        if let Some((stage, reason)) = p.candidate.failed_stage() {
            candidate_failures.push(FailureRecord {
                shape_id: p.candidate.shape_id.clone(),
                exemplar_id: p.candidate.exemplar_id.clone(),
                stage: stage.name().to_string(),
                reason: reason.to_string(),
            });
        }
        if let Some(reason) = &p.preview_failure {
            candidate_failures.push(FailureRecord {
                shape_id: p.candidate.shape_id.clone(),
                exemplar_id: p.candidate.exemplar_id.clone(),
                stage: "preview".into(),
                reason: reason.clone(),
            });
        }
    }
    candidate_failures.sort_by(|a, b| {
        (&a.shape_id, &a.exemplar_id, &a.stage).cmp(&(&b.shape_id, &b.exemplar_id, &b.stage))
    });

    let report = RunReport {
        config_hash: hash,
        shapes: shapes.len(),
        exemplars: exemplars.len(),
        renderings: entries.len(),
        funnel: Funnel {
            selected: processed.len(),
            refined,
            assigned,
        },
        zero_candidate_shapes: selection.zero_candidate_shapes,
        shape_failures,
        exemplar_failures,
        candidate_failures,
        descriptors_written,
    };
    fs::write(out_dir.join("report.json"), report_to_bytes(&report)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// evaluation

/// Ground-truth row; `part_id` is the 0-based material part index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub shape_id: String,
    pub exemplar_id: String,
    pub part_id: u32,
    pub material_id: String,
    pub substance: String,
}

pub fn load_truth_manifest(path: &Path) -> Result<Vec<TruthRecord>, PipelineError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFunnel {
    pub candidates: usize,
    /// Candidates with at least one assigned part.
    pub with_assignment: usize,
    /// Candidates with every part assigned.
    pub fully_assigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// None when no (prediction, truth) pair could be scored.
    pub metrics: Option<crate::material::Metrics>,
    pub parts_scored: usize,
    /// Truth rows whose prediction exists but is unassigned; excluded from
    /// the metrics.
    pub parts_unassigned: usize,
    pub funnel: EvalFunnel,
    pub unmatched_truth: Vec<String>,
    pub unmatched_predictions: Vec<String>,
}

fn part_key(shape: &str, exemplar: &str, part: u32) -> String {
    format!("{shape}|{exemplar}|{part}")
}

fn scores_from_part(
    alternatives: &[RankedAlternative],
    confidence: &[f64; N_SUBSTANCES],
    matcher: &str,
    lib: &MaterialLibrary,
) -> Result<crate::material::MaterialScores, PipelineError> {
    // Materials absent from the stored ranking share a finite floor far
    // below any stored log probability; background stays -inf.
    const FLOOR: f64 = -1e9;
    const MIN_P: f64 = 1e-300;
    let mut scores = vec![FLOOR; lib.len() + 1];
    scores[lib.len()] = f64::NEG_INFINITY;
    for alt in alternatives {
        let i = lib.index_of(&alt.material_id).ok_or_else(|| {
            PipelineError::BadConfig(format!(
                "descriptor references unknown material '{}'",
                alt.material_id
            ))
        })?;
        scores[i] = alt.probability.max(MIN_P).ln();
    }
    Ok(crate::material::MaterialScores {
        scores,
        provenance: matcher.to_string(),
        substance_logits: Some(confidence.iter().map(|c| c.max(MIN_P).ln()).collect()),
    })
}

/// Score stored descriptors against a truth manifest. Keys present on only
/// one side are listed and excluded; unassigned parts are counted and
/// excluded.
pub fn evaluate(
    descriptors: &[PhotoShapeDescriptor],
    truth: &[TruthRecord],
    lib: &MaterialLibrary,
) -> Result<EvalReport, PipelineError> {
    let mut by_key: BTreeMap<String, (&PhotoShapeDescriptor, &DescriptorPart)> = BTreeMap::new();
    for d in descriptors {
        for part in &d.parts {
            by_key.insert(part_key(&d.shape_id, &d.exemplar_id, part.part_id), (d, part));
        }
    }

    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut unmatched_truth = Vec::new();
    let mut matched_keys = BTreeSet::new();
    let mut parts_unassigned = 0;
    for t in truth {
        let key = part_key(&t.shape_id, &t.exemplar_id, t.part_id);
        match by_key.get(&key) {
            None => unmatched_truth.push(key),
            Some((d, part)) => {
                matched_keys.insert(key);
                match &part.outcome {
                    PartOutcome::Unassigned { .. } => parts_unassigned += 1,
                    PartOutcome::Assigned {
                        alternatives,
                        substance_confidence,
                        ..
                    } => {
                        let sub = substance_index(&t.substance).ok_or_else(|| {
                            PipelineError::BadConfig(format!(
                                "truth row names unknown substance '{}'",
                                t.substance
                            ))
                        })?;
                        predictions.push(scores_from_part(
                            alternatives,
                            substance_confidence,
                            &d.provenance.matcher,
                            lib,
                        )?);
                        truths.push((t.material_id.clone(), sub));
                    }
                }
            }
        }
    }
    let unmatched_predictions: Vec<String> = by_key
        .keys()
        .filter(|k| !matched_keys.contains(*k))
        .cloned()
        .collect();

    let metrics = if predictions.is_empty() {
        None
    } else {
        Some(crate::material::classifier_metrics(
            &predictions,
            &truths,
            lib,
        )?)
    };

    let with_assignment = descriptors
        .iter()
        .filter(|d| {
            d.parts
                .iter()
                .any(|p| matches!(p.outcome, PartOutcome::Assigned { .. }))
        })
        .count();
    let fully_assigned = descriptors
        .iter()
        .filter(|d| {
            !d.parts.is_empty()
                && d.parts
                    .iter()
                    .all(|p| matches!(p.outcome, PartOutcome::Assigned { .. }))
        })
        .count();

    Ok(EvalReport {
        metrics,
        parts_scored: predictions.len(),
        parts_unassigned,
        funnel: EvalFunnel {
            candidates: descriptors.len(),
            with_assignment,
            fully_assigned,
        },
        unmatched_truth,
        unmatched_predictions,
    })
}

// ---------------------------------------------------------------------------
// closed-loop fixture

/// Paths and ground truth of a self-consistent corpus: every exemplar is a
/// flat-albedo rendering of its own shape at one known grid pose, and the
/// library holds one exactly-matching material per part.
#[derive(Debug, Clone)]
pub struct ClosedLoopFixture {
    pub shapes_dir: PathBuf,
    pub exemplars_dir: PathBuf,
    pub library_path: PathBuf,
    pub truth_path: PathBuf,
    pub truth: Vec<TruthRecord>,
    pub pose_index: usize,
    pub shape_ids: Vec<String>,
}

/// Distinct channel levels; all fall in distinct 16-wide histogram bins and
/// stay below the default white threshold.
const FIXTURE_LEVELS: [u8; 7] = [24, 56, 88, 120, 152, 184, 216];

fn fixture_color(k: usize) -> [u8; 3] {
    [
        FIXTURE_LEVELS[k % 7],
        FIXTURE_LEVELS[(k / 7) % 7],
        FIXTURE_LEVELS[(k / 49) % 7],
    ]
}

fn flat_histogram(color: [u8; 3]) -> Vec<f64> {
    let mut h = vec![0.0; crate::material::HIST_LEN];
    for (c, &v) in color.iter().enumerate() {
        h[c * crate::material::HIST_BINS + (v >> 4) as usize] += 1.0 / 3.0;
    }
    h
}

struct MeshBuilder {
    mesh: SegmentedMesh,
}

impl MeshBuilder {
    fn new() -> Self {
        MeshBuilder {
            mesh: SegmentedMesh {
                vertices: Vec::new(),
                faces: Vec::new(),
                uv: Vec::new(),
                face_material_part: Vec::new(),
                face_object_part: Vec::new(),
                normals: None,
                material_part_names: Vec::new(),
                object_part_names: Vec::new(),
                uv_generated_parts: Vec::new(),
            },
        }
    }

    fn add_box(&mut self, name: &str, center: [f64; 3], size: [f64; 3]) {
        let part = self.mesh.material_part_names.len() as u32;
        self.mesh.material_part_names.push(name.to_string());
        self.mesh.object_part_names.push(name.to_string());
        let base = self.mesh.vertices.len() as u32;
        let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
        for &sz in &[-1.0f64, 1.0] {
            for &sy in &[-1.0f64, 1.0] {
                for &sx in &[-1.0f64, 1.0] {
                    self.mesh.vertices.push([
                        center[0] + sx * h[0],
                        center[1] + sy * h[1],
                        center[2] + sz * h[2],
                    ]);
                }
            }
        }
        // Local corner order: bit0 = +x, bit1 = +y, bit2 = +z.
        let quads: [[u32; 4]; 6] = [
            [4, 5, 7, 6], // +z
            [1, 0, 2, 3], // -z
            [0, 4, 6, 2], // -x
            [5, 1, 3, 7], // +x
            [6, 7, 3, 2], // +y
            [0, 1, 5, 4], // -y
        ];
        for q in quads {
            for tri in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
                self.mesh.faces.push(tri.map(|i| base + i));
                self.mesh.uv.push(None);
                self.mesh.face_material_part.push(part);
                self.mesh.face_object_part.push(part);
            }
        }
    }
}

/// Chair-like test shape; `i` varies the proportions, odd `i` adds a third
/// part.
pub fn fixture_shape(i: usize) -> SegmentedMesh {
    let d = i as f64;
    let mut b = MeshBuilder::new();
    b.add_box(
        "seat",
        [0.0, 0.0, 0.0],
        [1.0, 0.12 + 0.02 * d, 0.72 + 0.03 * d],
    );
    let back_h = 0.75 + 0.06 * d;
    b.add_box(
        "back",
        [0.0, back_h / 2.0, -0.33 - 0.015 * d],
        [1.0, back_h, 0.1],
    );
    if i % 2 == 1 {
        b.add_box("arm", [0.5, 0.2, 0.0], [0.1, 0.4, 0.56 + 0.02 * d]);
    }
    b.mesh
}

/// Write a closed-loop corpus under `root`: `shapes/`, `exemplars/`,
/// `library.json`, `truth.json`.
pub fn build_closed_loop_fixture(
    root: &Path,
    n_shapes: usize,
    grid_config: &GridConfig,
    pose_index: usize,
    exemplar_resolution: u32,
) -> Result<ClosedLoopFixture, PipelineError> {
    let grid = build_viewpoint_grid(grid_config)?;
    if pose_index >= grid.poses.len() {
        return Err(PipelineError::BadConfig(format!(
            "pose_index {pose_index} out of range for a {}-pose grid",
            grid.poses.len()
        )));
    }
    let shapes_dir = root.join("shapes");
    let exemplars_dir = root.join("exemplars");
    fs::create_dir_all(&shapes_dir)?;
    fs::create_dir_all(&exemplars_dir)?;

    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut shape_ids = Vec::new();
    let mut k = 0usize;
    for i in 0..n_shapes {
        let shape_id = format!("shape-{i:02}");
        let mesh = fixture_shape(i);
        fs::write(
            shapes_dir.join(format!("{shape_id}.json")),
            crate::shapelib::mesh_to_json(&mesh)?,
        )?;

        let mut part_colors = Vec::new();
        for (j, _) in mesh.material_part_names.iter().enumerate() {
            let color = fixture_color(k);
            let substance = crate::substance::SUBSTANCES[k % N_SUBSTANCES].to_string();
            let material_id = format!("cl-{i:02}-{j}");
            records.push(crate::material::MaterialRecord {
                id: material_id.clone(),
                name: material_id.clone(),
                substance: substance.clone(),
                scale: 2.0,
                signature: crate::material::MaterialSignature {
                    median: [color[0] as f64, color[1] as f64, color[2] as f64],
                    histogram: flat_histogram(color),
                },
                brdf_meta: serde_json::json!({ "family": substance }),
            });
            truth.push(TruthRecord {
                shape_id: shape_id.clone(),
                exemplar_id: shape_id.clone(),
                part_id: j as u32,
                material_id,
                substance,
            });
            part_colors.push(color);
            k += 1;
        }

        // Exemplars must show the geometry the pipeline will render, so
        // paint the normalized mesh's part-id render with flat albedo.
        let prepared = prepare_mesh(&mesh)?;
        let render = render_part_ids(&prepared, &grid.poses[pose_index], exemplar_resolution)?;
        let image = RgbImage::from_fn(exemplar_resolution, exemplar_resolution, |x, y| {
            match render.part_ids.get(x as usize, y as usize) {
                0 => image::Rgb([255, 255, 255]),
                l => image::Rgb(part_colors[l as usize - 1]),
            }
        });
        image.save(exemplars_dir.join(format!("{shape_id}.png")))?;
        shape_ids.push(shape_id);
    }

    let library_path = root.join("library.json");
    let mut bytes = serde_json::to_vec_pretty(&records)?;
    bytes.push(b'\n');
    fs::write(&library_path, bytes)?;

    let truth_path = root.join("truth.json");
    let mut bytes = serde_json::to_vec_pretty(&truth)?;
    bytes.push(b'\n');
    fs::write(&truth_path, bytes)?;

    Ok(ClosedLoopFixture {
        shapes_dir,
        exemplars_dir,
        library_path,
        truth_path,
        truth,
        pose_index,
        shape_ids,
    })
}
