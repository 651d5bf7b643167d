//! Segmented triangle meshes: loading, validation, normalization, and UV
//! texel-density math.
//!
//! A [`SegmentedMesh`] carries two part labelings per face: *material parts*
//! (faces that share one material assignment, from `usemtl` statements) and
//! *object parts* (structural groups, from `g` statements). All pipeline
//! stages address geometry through material part ids, which are contiguous
//! `0..part_count`.

mod obj;

pub use obj::load_obj;

use crate::geom::{self, Vec2, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("mesh has zero extent; all vertices coincide")]
    ZeroExtent,
    #[error("unknown material part id {0}")]
    UnknownPart(u32),
    #[error("material part {0} has faces without UV coordinates")]
    MissingUvs(u32),
    #[error("material part {0} has zero world-space area")]
    ZeroWorldArea(u32),
    #[error("material scale {0} must be > 1 (UV factor is log(scale))")]
    InvalidMaterialScale(f64),
    #[error("negative weld distance {0}")]
    NegativeEps(f64),
    #[error("mesh JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported mesh format version {0}")]
    Version(u32),
    #[error("mesh structure: face {face}: {message}")]
    Structure { face: usize, message: String },
}

/// Triangle mesh segmented into material and object parts.
///
/// Invariants maintained by every operation in this module:
/// * face vertex indices are in range,
/// * material part ids form the contiguous set `0..material_part_names.len()`,
/// * `uv`, when present for a face, stores one UV pair per corner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-face corner UVs; `None` marks a face without texture coordinates.
    pub uv: Vec<Option<[Vec2; 3]>>,
    pub face_material_part: Vec<u32>,
    pub face_object_part: Vec<u32>,
    /// Per-vertex unit normals when the source file provided them.
    pub normals: Option<Vec<Vec3>>,
    pub material_part_names: Vec<String>,
    pub object_part_names: Vec<String>,
    /// Parts whose UVs were synthesized by planar projection rather than
    /// loaded from the source file.
    #[serde(default)]
    pub uv_generated_parts: Vec<u32>,
}

/// UV texel density of one material part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartSurfaceStats {
    pub part_id: u32,
    /// World-space surface area in model units squared.
    pub area_world: f64,
    /// UV-space area in UV units squared.
    pub area_uv: f64,
    /// `area_uv / area_world`.
    pub density: f64,
}

impl SegmentedMesh {
    pub fn material_part_count(&self) -> usize {
        self.material_part_names.len()
    }

    /// True when at least one face lacks UV coordinates.
    pub fn needs_uv(&self) -> bool {
        self.uv.iter().any(|c| c.is_none())
    }

    pub fn face_ids_of_part(&self, part_id: u32) -> impl Iterator<Item = usize> + '_ {
        self.face_material_part
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == part_id)
            .map(|(i, _)| i)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        if self.vertices.is_empty() {
            return None;
        }
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.faces[face];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        geom::normalize(geom::cross(geom::sub(b, a), geom::sub(c, a)))
    }

    pub fn total_world_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_world_area(f)).sum()
    }

    fn face_world_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        geom::triangle_area(
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        )
    }

    fn face_uv_area(&self, face: usize) -> Option<f64> {
        self.uv[face].map(|uv| geom::triangle_area_2d(uv[0], uv[1], uv[2]))
    }
}

/// Merge vertices closer than `eps` and drop faces that become degenerate.
///
/// The first-seen vertex of a cluster keeps its position; merged clusters are
/// always pairwise farther than `eps` apart afterwards. Zero-area faces are
/// removed rather than reported, since they are routine in CAD exports.
pub fn weld_vertices(mesh: &SegmentedMesh, eps: f64) -> Result<SegmentedMesh, MeshError> {
    if eps < 0.0 {
        return Err(MeshError::NegativeEps(eps));
    }

    let cell = if eps > 0.0 { eps } else { 1.0 };
    let key_of = |v: &Vec3| -> (i64, i64, i64) {
        (
            (v[0] / cell).floor() as i64,
            (v[1] / cell).floor() as i64,
            (v[2] / cell).floor() as i64,
        )
    };

    // representative index per grid cell; clusters chain onto the first hit
    let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    let mut remap = vec![0u32; mesh.vertices.len()];
    let mut kept: Vec<Vec3> = Vec::new();
    let mut kept_src: Vec<usize> = Vec::new();

    for (vi, v) in mesh.vertices.iter().enumerate() {
        let (kx, ky, kz) = key_of(v);
        let mut found: Option<u32> = None;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(reps) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &r in reps {
                            let d = geom::sub(*v, kept[r as usize]);
                            let dist = geom::norm(d);
                            let close = if eps > 0.0 { dist <= eps } else { dist == 0.0 };
                            if close {
                                found = Some(r);
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        match found {
            Some(r) => remap[vi] = r,
            None => {
                let r = kept.len() as u32;
                kept.push(*v);
                kept_src.push(vi);
                grid.entry((kx, ky, kz)).or_default().push(r);
                remap[vi] = r;
            }
        }
    }

    let normals = mesh
        .normals
        .as_ref()
        .map(|ns| kept_src.iter().map(|&src| ns[src]).collect::<Vec<_>>());

    let mut out = SegmentedMesh {
        vertices: kept,
        faces: Vec::new(),
        uv: Vec::new(),
        face_material_part: Vec::new(),
        face_object_part: Vec::new(),
        normals,
        material_part_names: mesh.material_part_names.clone(),
        object_part_names: mesh.object_part_names.clone(),
        uv_generated_parts: mesh.uv_generated_parts.clone(),
    };

    for (fi, face) in mesh.faces.iter().enumerate() {
        let mapped = [
            remap[face[0] as usize],
            remap[face[1] as usize],
            remap[face[2] as usize],
        ];
        if mapped[0] == mapped[1] || mapped[1] == mapped[2] || mapped[0] == mapped[2] {
            continue;
        }
        let area = geom::triangle_area(
            out.vertices[mapped[0] as usize],
            out.vertices[mapped[1] as usize],
            out.vertices[mapped[2] as usize],
        );
        if area == 0.0 {
            continue;
        }
        out.faces.push(mapped);
        out.uv.push(mesh.uv[fi]);
        out.face_material_part.push(mesh.face_material_part[fi]);
        out.face_object_part.push(mesh.face_object_part[fi]);
    }
    Ok(out)
}

/// Translate and uniformly scale so the bounding box is centered in
/// `[0,1]^3` with its longest axis spanning exactly 1.
pub fn normalize_to_unit_cube(mesh: &SegmentedMesh) -> Result<SegmentedMesh, MeshError> {
    let (lo, hi) = mesh.aabb().ok_or(MeshError::EmptyMesh)?;
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let longest = extent[0].max(extent[1]).max(extent[2]);
    if longest <= 0.0 {
        return Err(MeshError::ZeroExtent);
    }
    let s = 1.0 / longest;
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let mut out = mesh.clone();
    for v in out.vertices.iter_mut() {
        for a in 0..3 {
            v[a] = (v[a] - center[a]) * s + 0.5;
        }
    }
    Ok(out)
}

/// UV texel density of one material part: UV area over world area.
pub fn uv_density(mesh: &SegmentedMesh, part_id: u32) -> Result<PartSurfaceStats, MeshError> {
    if part_id as usize >= mesh.material_part_count() {
        return Err(MeshError::UnknownPart(part_id));
    }
    let mut area_world = 0.0;
    let mut area_uv = 0.0;
    let mut any = false;
    for f in mesh.face_ids_of_part(part_id) {
        any = true;
        area_world += mesh.face_world_area(f);
        match mesh.face_uv_area(f) {
            Some(a) => area_uv += a,
            None => return Err(MeshError::MissingUvs(part_id)),
        }
    }
    if !any || area_world <= 0.0 {
        return Err(MeshError::ZeroWorldArea(part_id));
    }
    Ok(PartSurfaceStats {
        part_id,
        area_world,
        area_uv,
        density: area_uv / area_world,
    })
}

/// Rescale every part's UVs so its recomputed density equals 1.
///
/// Density is an area ratio, so UV lengths are scaled by `1/sqrt(D)`.
pub fn normalize_uv_scale(mesh: &SegmentedMesh) -> Result<SegmentedMesh, MeshError> {
    let mut factors = Vec::with_capacity(mesh.material_part_count());
    for part in 0..mesh.material_part_count() as u32 {
        let stats = uv_density(mesh, part)?;
        if stats.density <= 0.0 {
            return Err(MeshError::MissingUvs(part));
        }
        factors.push(1.0 / stats.density.sqrt());
    }
    let mut out = mesh.clone();
    scale_part_uvs(&mut out, |part| factors[part as usize]);
    Ok(out)
}

/// Multiply one part's UVs by `log(material_scale)`.
///
/// Scales at or below 1 are rejected: the factor would be non-positive.
pub fn apply_material_uv_scale(
    mesh: &SegmentedMesh,
    part_id: u32,
    material_scale: f64,
) -> Result<SegmentedMesh, MeshError> {
    if part_id as usize >= mesh.material_part_count() {
        return Err(MeshError::UnknownPart(part_id));
    }
    if material_scale <= 1.0 {
        return Err(MeshError::InvalidMaterialScale(material_scale));
    }
    let factor = material_scale.ln();
    let mut out = mesh.clone();
    scale_part_uvs(&mut out, |part| if part == part_id { factor } else { 1.0 });
    Ok(out)
}

fn scale_part_uvs(mesh: &mut SegmentedMesh, factor: impl Fn(u32) -> f64) {
    for (fi, uv) in mesh.uv.iter_mut().enumerate() {
        if let Some(corners) = uv {
            let f = factor(mesh.face_material_part[fi]);
            if f != 1.0 {
                for c in corners.iter_mut() {
                    c[0] *= f;
                    c[1] *= f;
                }
            }
        }
    }
}

/// Synthesize UVs for parts that lack them by planar projection along the
/// part's dominant normal. Parts that already have full UVs are untouched;
/// generated parts are recorded in `uv_generated_parts`.
pub fn generate_missing_uvs(mesh: &SegmentedMesh) -> SegmentedMesh {
    let mut out = mesh.clone();
    for part in 0..mesh.material_part_count() as u32 {
        let face_ids: Vec<usize> = mesh.face_ids_of_part(part).collect();
        if face_ids.is_empty() || face_ids.iter().all(|&f| mesh.uv[f].is_some()) {
            continue;
        }
        // Orient face normals against the largest face before averaging so
        // opposite-facing sheets do not cancel out.
        let largest = face_ids
            .iter()
            .copied()
            .max_by(|&a, &b| {
                mesh.face_world_area(a)
                    .partial_cmp(&mesh.face_world_area(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let seed = mesh.face_normal(largest);
        let mut dominant = [0.0; 3];
        for &f in &face_ids {
            let mut n = mesh.face_normal(f);
            if geom::dot(n, seed) < 0.0 {
                n = geom::scale(n, -1.0);
            }
            dominant = geom::add(dominant, geom::scale(n, mesh.face_world_area(f)));
        }
        let n = if geom::norm(dominant) > 1e-12 {
            geom::normalize(dominant)
        } else {
            [0.0, 0.0, 1.0]
        };
        let helper = if n[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let u_axis = geom::normalize(geom::cross(helper, n));
        let v_axis = geom::cross(n, u_axis);

        for &f in &face_ids {
            let mut corners = [[0.0; 2]; 3];
            for (ci, corner) in corners.iter_mut().enumerate() {
                let p = mesh.vertices[mesh.faces[f][ci] as usize];
                *corner = [geom::dot(p, u_axis), geom::dot(p, v_axis)];
            }
            out.uv[f] = Some(corners);
        }
        out.uv_generated_parts.push(part);
    }
    out.uv_generated_parts.sort_unstable();
    out.uv_generated_parts.dedup();
    out
}

const MESH_FORMAT: &str = "shapemat-mesh";
const MESH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MeshFile {
    format: String,
    version: u32,
    mesh: SegmentedMesh,
}

/// Serialize to the versioned pipeline hand-off JSON schema.
pub fn mesh_to_json(mesh: &SegmentedMesh) -> Result<String, MeshError> {
    Ok(serde_json::to_string(&MeshFile {
        format: MESH_FORMAT.to_string(),
        version: MESH_VERSION,
        mesh: mesh.clone(),
    })?)
}

pub fn mesh_from_json(text: &str) -> Result<SegmentedMesh, MeshError> {
    let file: MeshFile = serde_json::from_str(text)?;
    if file.version != MESH_VERSION {
        return Err(MeshError::Version(file.version));
    }
    check_structure(&file.mesh)?;
    Ok(file.mesh)
}

/// Structural invariants a hand-off document must satisfy; loaded OBJ
/// meshes satisfy them by construction.
fn check_structure(mesh: &SegmentedMesh) -> Result<(), MeshError> {
    let fail = |face: usize, message: String| Err(MeshError::Structure { face, message });
    let n_faces = mesh.faces.len();
    for (name, len) in [
        ("uv", mesh.uv.len()),
        ("face_material_part", mesh.face_material_part.len()),
        ("face_object_part", mesh.face_object_part.len()),
    ] {
        if len != n_faces {
            return fail(n_faces, format!("{name} has {len} entries for {n_faces} faces"));
        }
    }
    if let Some(normals) = &mesh.normals {
        if normals.len() != mesh.vertices.len() {
            return fail(0, format!("{} normals for {} vertices", normals.len(), mesh.vertices.len()));
        }
    }
    let n_vertices = mesh.vertices.len() as u32;
    for (f, face) in mesh.faces.iter().enumerate() {
        if let Some(&i) = face.iter().find(|&&i| i >= n_vertices) {
            return fail(f, format!("vertex index {i} out of range ({n_vertices} vertices)"));
        }
        if mesh.face_material_part[f] as usize >= mesh.material_part_names.len() {
            return fail(f, format!("material part {} unnamed", mesh.face_material_part[f]));
        }
        if mesh.face_object_part[f] as usize >= mesh.object_part_names.len() {
            return fail(f, format!("object part {} unnamed", mesh.face_object_part[f]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
