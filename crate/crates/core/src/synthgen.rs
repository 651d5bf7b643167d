//! Randomized render-configuration sampling for synthetic training data:
//! pose-prior draws, substance-conditioned material assignment, augmentation
//! parameters, renderer-agnostic scene emission with ground-truth label
//! maps, and shape/environment-level train/validation splitting.

use crate::camera::{sample_pose_prior, CameraError, SphericalPose, PHI_MAX, PHI_MIN};
use crate::material::MaterialLibrary;
use crate::raster::{render_part_ids, LabelKind, LabelMap, RasterError};
use crate::shapelib::{uv_density, MeshError, SegmentedMesh};
use crate::substance::{substance_index, N_SUBSTANCES, SUBSTANCES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FOV_RANGE: (f64, f64) = (50.0, 60.0);
pub const R_RANGE: (f64, f64) = (1.3, 1.75);
pub const ENV_SCALE_RANGE: (f64, f64) = (0.9, 1.2);
/// Log2 offset on the UV scale (multiplier 2^delta).
pub const DS_UV_RANGE: (f64, f64) = (-1.0, 0.5);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("part '{part}' has substance '{substance}' with no library material")]
    EmptyMaterialPool { part: String, substance: String },
    #[error("no environment maps to sample from")]
    EmptyEnvMaps,
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("config has {config} part assignments, mesh has {mesh} parts")]
    PartCountMismatch { config: usize, mesh: usize },
    #[error("unknown material id '{0}'")]
    UnknownMaterial(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// UV augmentation: log2 scale offset, rotation, translation, applied in
/// the fixed order scale, rotate, translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvTransform {
    pub delta_s_uv: f64,
    pub delta_theta: f64,
    pub delta_x: f64,
    pub delta_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAssignment {
    /// Mesh material-part id (0-based).
    pub part_id: u32,
    pub material_id: String,
    /// Canonical substance name; always equals the material's substance.
    pub substance: String,
    pub uv_transform: UvTransform,
}

/// One synthetic rendering, fully determined by `rng_seed`. The sampled
/// camera distance and field of view live in `pose.r` / `pose.fov_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub shape_id: String,
    pub pose: SphericalPose,
    pub env_map_id: String,
    pub env_scale: f64,
    pub parts: Vec<PartAssignment>,
    pub rng_seed: u64,
}

impl RenderConfig {
    pub fn fov_x(&self) -> f64 {
        self.pose.fov_x
    }

    pub fn r(&self) -> f64 {
        self.pose.r
    }

    pub fn validate(&self, library: &MaterialLibrary) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if !(FOV_RANGE.0..=FOV_RANGE.1).contains(&self.pose.fov_x) {
            return bad(format!("fov_x {} out of range", self.pose.fov_x));
        }
        if !(R_RANGE.0..=R_RANGE.1).contains(&self.pose.r) {
            return bad(format!("r {} out of range", self.pose.r));
        }
        if !(ENV_SCALE_RANGE.0..=ENV_SCALE_RANGE.1).contains(&self.env_scale) {
            return bad(format!("env_scale {} out of range", self.env_scale));
        }
        for p in &self.parts {
            let t = &p.uv_transform;
            if !(DS_UV_RANGE.0..=DS_UV_RANGE.1).contains(&t.delta_s_uv)
                || !(0.0..=2.0 * std::f64::consts::PI).contains(&t.delta_theta)
                || !(0.0..=1.0).contains(&t.delta_x)
                || !(0.0..=1.0).contains(&t.delta_y)
            {
                return bad(format!("part {} uv transform out of range", p.part_id));
            }
            let idx = library
                .index_of(&p.material_id)
                .ok_or_else(|| SynthError::UnknownMaterial(p.material_id.clone()))?;
            let sub = substance_index(&p.substance)
                .ok_or_else(|| SynthError::BadConfig(format!("substance {}", p.substance)))?;
            if library.substance_of(idx) != sub {
                return bad(format!(
                    "part {}: material {} is not {}",
                    p.part_id, p.material_id, p.substance
                ));
            }
        }
        Ok(())
    }
}

/// Sampling context: the shape, the exemplar it was matched to (provenance
/// only), the empirical pose prior, and the environment-map pool.
#[derive(Debug, Clone)]
pub struct SamplePair<'a> {
    pub shape_id: &'a str,
    pub exemplar_id: Option<&'a str>,
    pub pose_prior: &'a [SphericalPose],
    pub env_maps: &'a [String],
}

/// Per-substance material index pools in library order.
pub fn substance_pools(library: &MaterialLibrary) -> [Vec<usize>; N_SUBSTANCES] {
    let mut pools: [Vec<usize>; N_SUBSTANCES] = Default::default();
    for i in 0..library.len() {
        pools[library.substance_of(i)].push(i);
    }
    pools
}

/// Draw one render configuration. Deterministic in `seed`; the draw order
/// is fixed (pose, fov, r, environment, then per part in id order:
/// material, uv scale, rotation, translation). Every interval is closed.
pub fn sample_render_config(
    pair: &SamplePair,
    part_substances: &[(String, usize)],
    library: &MaterialLibrary,
    seed: u64,
) -> Result<RenderConfig, SynthError> {
    let pools = substance_pools(library);
    sample_with_pools(pair, part_substances, library, &pools, seed)
}

fn sample_with_pools(
    pair: &SamplePair,
    part_substances: &[(String, usize)],
    library: &MaterialLibrary,
    pools: &[Vec<usize>; N_SUBSTANCES],
    seed: u64,
) -> Result<RenderConfig, SynthError> {
    if pair.env_maps.is_empty() {
        return Err(SynthError::EmptyEnvMaps);
    }
    for (name, sub) in part_substances {
        if pools[*sub].is_empty() {
            return Err(SynthError::EmptyMaterialPool {
                part: name.clone(),
                substance: SUBSTANCES[*sub].to_string(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pose = sample_pose_prior(pair.pose_prior, PHI_MIN, PHI_MAX, &mut rng)?;
    pose.fov_x = rng.random_range(FOV_RANGE.0..=FOV_RANGE.1);
    pose.r = rng.random_range(R_RANGE.0..=R_RANGE.1);
    let env_map_id = pair.env_maps[rng.random_range(0..pair.env_maps.len())].clone();
    let env_scale = rng.random_range(ENV_SCALE_RANGE.0..=ENV_SCALE_RANGE.1);

    let mut parts = Vec::with_capacity(part_substances.len());
    for (part_id, (_, sub)) in part_substances.iter().enumerate() {
        let pool = &pools[*sub];
        let material = pool[rng.random_range(0..pool.len())];
        let uv_transform = UvTransform {
            delta_s_uv: rng.random_range(DS_UV_RANGE.0..=DS_UV_RANGE.1),
            delta_theta: rng.random_range(0.0..=2.0 * std::f64::consts::PI),
            delta_x: rng.random_range(0.0..=1.0),
            delta_y: rng.random_range(0.0..=1.0),
        };
        parts.push(PartAssignment {
            part_id: part_id as u32,
            material_id: library.record(material).id.clone(),
            substance: SUBSTANCES[*sub].to_string(),
            uv_transform,
        });
    }
    Ok(RenderConfig {
        shape_id: pair.shape_id.to_string(),
        pose,
        env_map_id,
        env_scale,
        parts,
        rng_seed: seed,
    })
}

fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parallel batch sampling: per-sample rng streams derived from the master
/// seed by index, results ordered by sample index regardless of schedule.
pub fn sample_batch(
    pair: &SamplePair,
    part_substances: &[(String, usize)],
    library: &MaterialLibrary,
    count: usize,
    master_seed: u64,
) -> Result<Vec<RenderConfig>, SynthError> {
    let pools = substance_pools(library);
    (0..count)
        .into_par_iter()
        .map(|i| {
            sample_with_pools(
                pair,
                part_substances,
                library,
                &pools,
                derive_seed(master_seed, i as u64),
            )
        })
        .collect()
}

pub const SCENE_FORMAT: &str = "shapemat-scene";
pub const SCENE_VERSION: u32 = 1;
pub const UV_ORDER: &str = "scale-rotate-translate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
    pub fov_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEnvironment {
    pub id: String,
    pub scale: f64,
}

/// Final UV mapping for the renderer: `scale` already folds the part's
/// density normalization, the material's log UV scale, and the sampled
/// 2^delta augmentation into one multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneUvTransform {
    pub order: String,
    pub scale: f64,
    pub rotate_rad: f64,
    pub translate: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePart {
    pub part_id: u32,
    pub name: String,
    pub material_id: String,
    pub substance: String,
    pub uv_transform: SceneUvTransform,
    pub brdf_meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub format: String,
    pub version: u32,
    pub shape_id: String,
    pub rng_seed: u64,
    pub camera: SceneCamera,
    pub environment: SceneEnvironment,
    pub parts: Vec<ScenePart>,
}

/// Scene description plus ground-truth label maps.
#[derive(Debug, Clone)]
pub struct SceneEmission {
    pub scene: SceneDoc,
    pub scene_bytes: Vec<u8>,
    pub material_map: LabelMap,
    pub substance_map: LabelMap,
}

/// Emit the renderer-agnostic scene JSON and render ground-truth material
/// and substance label maps (labels are library index + 1 and substance
/// index + 1; 0 is background).
pub fn emit_scene(
    config: &RenderConfig,
    mesh: &SegmentedMesh,
    library: &MaterialLibrary,
    resolution: u32,
) -> Result<SceneEmission, SynthError> {
    config.validate(library)?;
    if config.parts.len() != mesh.material_part_count() {
        return Err(SynthError::PartCountMismatch {
            config: config.parts.len(),
            mesh: mesh.material_part_count(),
        });
    }

    let mut parts = Vec::with_capacity(config.parts.len());
    for p in &config.parts {
        let idx = library
            .index_of(&p.material_id)
            .ok_or_else(|| SynthError::UnknownMaterial(p.material_id.clone()))?;
        let record = library.record(idx);
        let stats = uv_density(mesh, p.part_id)?;
        if stats.density <= 0.0 {
            return Err(SynthError::BadConfig(format!(
                "part {} has non-positive uv density",
                p.part_id
            )));
        }
        let scale = (1.0 / stats.density.sqrt())
            * record.scale.ln()
            * p.uv_transform.delta_s_uv.exp2();
        parts.push(ScenePart {
            part_id: p.part_id,
            name: mesh.material_part_names[p.part_id as usize].clone(),
            material_id: p.material_id.clone(),
            substance: p.substance.clone(),
            uv_transform: SceneUvTransform {
                order: UV_ORDER.to_string(),
                scale,
                rotate_rad: p.uv_transform.delta_theta,
                translate: [p.uv_transform.delta_x, p.uv_transform.delta_y],
            },
            brdf_meta: record.brdf_meta.clone(),
        });
    }
    let scene = SceneDoc {
        format: SCENE_FORMAT.to_string(),
        version: SCENE_VERSION,
        shape_id: config.shape_id.clone(),
        rng_seed: config.rng_seed,
        camera: SceneCamera {
            theta: config.pose.theta,
            phi: config.pose.phi,
            r: config.pose.r,
            fov_x: config.pose.fov_x,
        },
        environment: SceneEnvironment {
            id: config.env_map_id.clone(),
            scale: config.env_scale,
        },
        parts,
    };
    let mut scene_bytes = serde_json::to_vec_pretty(&scene)?;
    scene_bytes.push(b'\n');

    let render = render_part_ids(mesh, &config.pose, resolution)?;
    let size = resolution as usize;
    let mut material_map = LabelMap::new(size, size, library.len() as u32, LabelKind::MaterialPart);
    let mut substance_map = LabelMap::new(size, size, N_SUBSTANCES as u32, LabelKind::Substance);
    let part_material: Vec<u32> = config
        .parts
        .iter()
        .map(|p| library.index_of(&p.material_id).unwrap() as u32 + 1)
        .collect();
    let part_substance: Vec<u32> = config
        .parts
        .iter()
        .map(|p| substance_index(&p.substance).unwrap() as u32 + 1)
        .collect();
    for (i, &label) in render.part_ids.labels.iter().enumerate() {
        if label != 0 {
            material_map.labels[i] = part_material[label as usize - 1];
            substance_map.labels[i] = part_substance[label as usize - 1];
        }
    }
    Ok(SceneEmission {
        scene,
        scene_bytes,
        material_map,
        substance_map,
    })
}

/// Parse and check a scene document: format marker, version, closed
/// sampling intervals, canonical substances, fixed UV order.
pub fn validate_scene(bytes: &[u8]) -> Result<SceneDoc, SynthError> {
    let doc: SceneDoc = serde_json::from_slice(bytes)?;
    let bad = |m: String| Err(SynthError::BadConfig(m));
    if doc.format != SCENE_FORMAT {
        return bad(format!("format '{}'", doc.format));
    }
    if doc.version != SCENE_VERSION {
        return bad(format!("version {}", doc.version));
    }
    if !(FOV_RANGE.0..=FOV_RANGE.1).contains(&doc.camera.fov_x) {
        return bad(format!("camera fov_x {}", doc.camera.fov_x));
    }
    if !(R_RANGE.0..=R_RANGE.1).contains(&doc.camera.r) {
        return bad(format!("camera r {}", doc.camera.r));
    }
    if !(ENV_SCALE_RANGE.0..=ENV_SCALE_RANGE.1).contains(&doc.environment.scale) {
        return bad(format!("environment scale {}", doc.environment.scale));
    }
    if !(0.0..=2.0 * std::f64::consts::PI).contains(&doc.camera.theta)
        || !(PHI_MIN..=PHI_MAX).contains(&doc.camera.phi)
    {
        return bad("camera angles out of range".into());
    }
    for p in &doc.parts {
        if substance_index(&p.substance).is_none() {
            return bad(format!("part {}: substance '{}'", p.part_id, p.substance));
        }
        let t = &p.uv_transform;
        if t.order != UV_ORDER {
            return bad(format!("part {}: uv order '{}'", p.part_id, t.order));
        }
        if !t.scale.is_finite()
            || t.scale <= 0.0
            || !(0.0..=2.0 * std::f64::consts::PI).contains(&t.rotate_rad)
            || !(0.0..=1.0).contains(&t.translate[0])
            || !(0.0..=1.0).contains(&t.translate[1])
        {
            return bad(format!("part {}: uv transform values", p.part_id));
        }
    }
    Ok(doc)
}

/// Shape- and environment-level train/validation split: holdout counts are
/// `round(n * fraction)` clamped to `[0, n]`; membership never splits a
/// shape's renderings across sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_shapes: Vec<String>,
    pub validation_shapes: Vec<String>,
    pub train_env_maps: Vec<String>,
    pub validation_env_maps: Vec<String>,
}

impl SplitManifest {
    /// True when a (shape, environment) rendering belongs to training.
    pub fn is_training_pair(&self, shape_id: &str, env_map_id: &str) -> bool {
        self.train_shapes.iter().any(|s| s == shape_id)
            && self.train_env_maps.iter().any(|e| e == env_map_id)
    }
}

fn split_list(items: &[String], fraction: f64, rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    use rand::seq::SliceRandom;
    let k = ((items.len() as f64 * fraction).round() as usize).min(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut validation: Vec<String> = order[..k].iter().map(|&i| items[i].clone()).collect();
    let mut train: Vec<String> = order[k..].iter().map(|&i| items[i].clone()).collect();
    validation.sort();
    train.sort();
    (train, validation)
}

pub fn split_train_validation(
    shapes: &[String],
    env_maps: &[String],
    holdout_fraction: f64,
    seed: u64,
) -> SplitManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_shapes, validation_shapes) = split_list(shapes, holdout_fraction, &mut rng);
    let (train_env_maps, validation_env_maps) = split_list(env_maps, holdout_fraction, &mut rng);
    SplitManifest {
        train_shapes,
        validation_shapes,
        train_env_maps,
        validation_env_maps,
    }
}
