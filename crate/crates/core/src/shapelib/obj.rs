//! Wavefront OBJ loader restricted to triangle-friendly polygonal data.
//!
//! Faces are fan-triangulated. `usemtl` blocks define material parts and `g`
//! statements define object parts; both id spaces are allocated in order of
//! first appearance. Free-form geometry keywords are rejected.

use super::{MeshError, SegmentedMesh};
use crate::geom::{Vec2, Vec3};
use std::collections::HashMap;

const DEFAULT_PART: &str = "default";

struct CornerRef {
    v: usize,
    vt: Option<usize>,
    vn: Option<usize>,
}

/// Parse OBJ text into a [`SegmentedMesh`].
///
/// Supported statements: `v`, `vt`, `vn`, `f`, `usemtl`, `g`. Ignored:
/// `o`, `s`, `mtllib`, comments, blank lines. Free-form geometry
/// (`cstype`, `curv`, `surf`, ...) fails with a line-numbered error, as do
/// zero, out-of-range, or malformed face indices.
pub fn load_obj(text: &str) -> Result<SegmentedMesh, MeshError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut texcoords: Vec<Vec2> = Vec::new();
    let mut normals_in: Vec<Vec3> = Vec::new();

    let mut mesh = SegmentedMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        uv: Vec::new(),
        face_material_part: Vec::new(),
        face_object_part: Vec::new(),
        normals: None,
        material_part_names: Vec::new(),
        object_part_names: Vec::new(),
        uv_generated_parts: Vec::new(),
    };

    let mut material_ids: HashMap<String, u32> = HashMap::new();
    let mut object_ids: HashMap<String, u32> = HashMap::new();
    let mut cur_material: Option<u32> = None;
    let mut cur_object: Option<u32> = None;

    // OBJ corners triple-index positions/uv/normals; pipeline vertices carry
    // a single normal, so corners are deduplicated on the full triple.
    let mut corner_cache: HashMap<(usize, Option<usize>, Option<usize>), u32> = HashMap::new();
    let mut vertex_normals: Vec<Option<Vec3>> = Vec::new();
    let mut any_normals = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut tokens = stripped.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        match keyword {
            "v" => positions.push(parse_vec3(&mut tokens, line, "v")?),
            "vn" => normals_in.push(parse_vec3(&mut tokens, line, "vn")?),
            "vt" => {
                let u = parse_float(tokens.next(), line, "vt")?;
                let v = parse_float(tokens.next(), line, "vt")?;
                texcoords.push([u, v]);
            }
            "f" => {
                let corners: Vec<CornerRef> = tokens
                    .map(|t| parse_corner(t, line, positions.len(), texcoords.len(), normals_in.len()))
                    .collect::<Result<_, _>>()?;
                if corners.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        message: format!("face has {} corners; need at least 3", corners.len()),
                    });
                }
                let material = *cur_material.get_or_insert_with(|| {
                    intern(&mut material_ids, &mut mesh.material_part_names, DEFAULT_PART)
                });
                let object = *cur_object.get_or_insert_with(|| {
                    intern(&mut object_ids, &mut mesh.object_part_names, DEFAULT_PART)
                });

                let mut indices = Vec::with_capacity(corners.len());
                for c in &corners {
                    let key = (c.v, c.vt, c.vn);
                    let idx = *corner_cache.entry(key).or_insert_with(|| {
                        let idx = mesh.vertices.len() as u32;
                        mesh.vertices.push(positions[c.v]);
                        vertex_normals.push(c.vn.map(|n| normals_in[n]));
                        idx
                    });
                    indices.push(idx);
                }
                if corners.iter().any(|c| c.vn.is_some()) {
                    any_normals = true;
                }

                for i in 1..corners.len() - 1 {
                    mesh.faces.push([indices[0], indices[i], indices[i + 1]]);
                    let uv = match (corners[0].vt, corners[i].vt, corners[i + 1].vt) {
                        (Some(a), Some(b), Some(c)) => {
                            Some([texcoords[a], texcoords[b], texcoords[c]])
                        }
                        _ => None,
                    };
                    mesh.uv.push(uv);
                    mesh.face_material_part.push(material);
                    mesh.face_object_part.push(object);
                }
            }
            "usemtl" => {
                let name = tokens.next().unwrap_or(DEFAULT_PART);
                cur_material = Some(intern(&mut material_ids, &mut mesh.material_part_names, name));
            }
            "g" => {
                let name = tokens.next().unwrap_or(DEFAULT_PART);
                cur_object = Some(intern(&mut object_ids, &mut mesh.object_part_names, name));
            }
            "o" | "s" | "mtllib" | "usemap" | "maplib" => {}
            "cstype" | "curv" | "curv2" | "surf" | "parm" | "trim" | "hole" | "scrv" | "sp"
            | "end" | "deg" | "bmat" | "step" | "con" => {
                return Err(MeshError::Parse {
                    line,
                    message: format!("free-form geometry statement '{keyword}' is not supported"),
                });
            }
            "p" | "l" => {
                return Err(MeshError::Parse {
                    line,
                    message: format!("non-polygonal element '{keyword}' is not supported"),
                });
            }
            other => {
                return Err(MeshError::Parse {
                    line,
                    message: format!("unrecognized statement '{other}'"),
                });
            }
        }
    }

    if mesh.faces.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    if any_normals {
        mesh.normals = Some(
            vertex_normals
                .into_iter()
                .map(|n| n.unwrap_or([0.0, 0.0, 0.0]))
                .collect(),
        );
    }
    Ok(mesh)
}

fn intern(ids: &mut HashMap<String, u32>, names: &mut Vec<String>, name: &str) -> u32 {
    if let Some(&id) = ids.get(name) {
        return id;
    }
    let id = names.len() as u32;
    names.push(name.to_string());
    ids.insert(name.to_string(), id);
    id
}

fn parse_float(
    token: Option<&str>,
    line: usize,
    keyword: &str,
) -> Result<f64, MeshError> {
    let t = token.ok_or_else(|| MeshError::Parse {
        line,
        message: format!("'{keyword}' is missing a coordinate"),
    })?;
    t.parse::<f64>().map_err(|_| MeshError::Parse {
        line,
        message: format!("'{keyword}' has non-numeric coordinate '{t}'"),
    })
}

fn parse_vec3<'a>(
    tokens: &mut impl Iterator<Item = &'a str>,
    line: usize,
    keyword: &str,
) -> Result<Vec3, MeshError> {
    Ok([
        parse_float(tokens.next(), line, keyword)?,
        parse_float(tokens.next(), line, keyword)?,
        parse_float(tokens.next(), line, keyword)?,
    ])
}

/// Resolve one `f` corner token (`v`, `v/vt`, `v//vn`, `v/vt/vn`) to
/// zero-based indices. OBJ indices are 1-based; negatives count back from
/// the current end of the respective list.
fn parse_corner(
    token: &str,
    line: usize,
    n_pos: usize,
    n_tex: usize,
    n_norm: usize,
) -> Result<CornerRef, MeshError> {
    let mut fields = token.split('/');
    let v = resolve_index(fields.next(), line, token, n_pos, true)?
        .expect("position index is mandatory");
    let vt = resolve_index(fields.next(), line, token, n_tex, false)?;
    let vn = resolve_index(fields.next(), line, token, n_norm, false)?;
    if fields.next().is_some() {
        return Err(MeshError::Parse {
            line,
            message: format!("face corner '{token}' has too many '/' fields"),
        });
    }
    Ok(CornerRef { v, vt, vn })
}

fn resolve_index(
    field: Option<&str>,
    line: usize,
    token: &str,
    len: usize,
    required: bool,
) -> Result<Option<usize>, MeshError> {
    let field = match field {
        Some(f) if !f.is_empty() => f,
        _ if required => {
            return Err(MeshError::Parse {
                line,
                message: format!("face corner '{token}' is missing a vertex index"),
            })
        }
        _ => return Ok(None),
    };
    let raw: i64 = field.parse().map_err(|_| MeshError::Parse {
        line,
        message: format!("face corner '{token}' has non-integer index '{field}'"),
    })?;
    let resolved: i64 = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        len as i64 + raw
    } else {
        return Err(MeshError::Parse {
            line,
            message: format!("face corner '{token}' uses index 0; OBJ indices are 1-based"),
        });
    };
    if resolved < 0 || resolved >= len as i64 {
        return Err(MeshError::Parse {
            line,
            message: format!(
                "face corner '{token}' index {raw} is out of range (list has {len} entries)"
            ),
        });
    }
    Ok(Some(resolved as usize))
}
