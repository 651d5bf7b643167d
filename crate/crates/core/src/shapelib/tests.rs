use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;

const QUAD_OBJ: &str = "\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 0.5 0
vt 0.5 0.5
vt 0 0.5
usemtl seat
f 1/1 2/2 3/3 4/4
";

fn quad_mesh() -> SegmentedMesh {
    load_obj(QUAD_OBJ).unwrap()
}

#[test]
fn quad_fan_triangulates_into_two_faces_one_part() {
    let mesh = quad_mesh();
    assert_eq!(mesh.faces.len(), 2);
    assert_eq!(mesh.material_part_count(), 1);
    assert_eq!(mesh.material_part_names, vec!["seat".to_string()]);
    assert_eq!(mesh.face_material_part, vec![0, 0]);
    assert!(!mesh.needs_uv());
}

#[test]
fn usemtl_blocks_become_distinct_parts_in_order() {
    let text = "\
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
usemtl frame
f 1 2 3
usemtl cushion
f 1 2 4
";
    let mesh = load_obj(text).unwrap();
    assert_eq!(mesh.material_part_names, vec!["frame", "cushion"]);
    assert_eq!(mesh.face_material_part, vec![0, 1]);
}

#[test]
fn group_statements_become_object_parts() {
    let text = "\
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
g legs
usemtl wood
f 1 2 3
g top
f 1 2 4
";
    let mesh = load_obj(text).unwrap();
    assert_eq!(mesh.object_part_names, vec!["legs", "top"]);
    assert_eq!(mesh.face_object_part, vec![0, 1]);
    assert_eq!(mesh.face_material_part, vec![0, 0]);
}

#[test]
fn face_index_zero_is_an_error_naming_the_line() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n";
    let err = load_obj(text).unwrap_err();
    match err {
        MeshError::Parse { line, ref message } => {
            assert_eq!(line, 4);
            assert!(message.contains("1-based"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn face_index_out_of_range_is_an_error() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n";
    let err = load_obj(text).unwrap_err();
    match err {
        MeshError::Parse { line, .. } => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn negative_indices_resolve_relative_to_current_end() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n";
    let mesh = load_obj(text).unwrap();
    assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    assert_eq!(mesh.vertices[2], [0.0, 1.0, 0.0]);
}

#[test]
fn freeform_geometry_is_rejected() {
    let text = "v 0 0 0\ncstype bezier\n";
    let err = load_obj(text).unwrap_err();
    match err {
        MeshError::Parse { line, ref message } => {
            assert_eq!(line, 2);
            assert!(message.contains("cstype"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_uvs_set_needs_uv_instead_of_failing() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
    let mesh = load_obj(text).unwrap();
    assert!(mesh.needs_uv());
    assert_eq!(mesh.uv, vec![None]);
}

#[test]
fn comments_and_ignored_statements_pass_through() {
    let text = "\
# chair scan
mtllib chairs.mtl
o chair01
s off
v 0 0 0
v 1 0 0
v 0 1 0
f 1 2 3
";
    let mesh = load_obj(text).unwrap();
    assert_eq!(mesh.faces.len(), 1);
    assert_eq!(mesh.material_part_names, vec!["default"]);
}

/// Axis-aligned unit cube as 6 quads with 4 private vertices each.
fn cube_24_vertex_obj() -> String {
    let quads: [[[f64; 3]; 4]; 6] = [
        [[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]],
        [[0., 0., 1.], [1., 0., 1.], [1., 1., 1.], [0., 1., 1.]],
        [[0., 0., 0.], [1., 0., 0.], [1., 0., 1.], [0., 0., 1.]],
        [[0., 1., 0.], [1., 1., 0.], [1., 1., 1.], [0., 1., 1.]],
        [[0., 0., 0.], [0., 1., 0.], [0., 1., 1.], [0., 0., 1.]],
        [[1., 0., 0.], [1., 1., 0.], [1., 1., 1.], [1., 0., 1.]],
    ];
    let mut text = String::new();
    for quad in &quads {
        for v in quad {
            text.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
    }
    for q in 0..6 {
        let base = q * 4 + 1;
        text.push_str(&format!("f {} {} {} {}\n", base, base + 1, base + 2, base + 3));
    }
    text
}

#[test]
fn welding_fuses_duplicated_cube_corners_to_eight() {
    let mesh = load_obj(&cube_24_vertex_obj()).unwrap();
    assert_eq!(mesh.vertices.len(), 24);
    let welded = weld_vertices(&mesh, 1e-6).unwrap();
    assert_eq!(welded.vertices.len(), 8);
    assert_eq!(welded.faces.len(), 12);
    // first-seen position survives verbatim
    assert_eq!(welded.vertices[0], [0.0, 0.0, 0.0]);
}

#[test]
fn welding_drops_faces_made_degenerate() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 1 0.0000001\nf 1 2 3\nf 1 3 4\n";
    let mesh = load_obj(text).unwrap();
    let welded = weld_vertices(&mesh, 1e-3).unwrap();
    assert_eq!(welded.vertices.len(), 3);
    assert_eq!(welded.faces.len(), 1);
}

#[test]
fn welding_rejects_negative_eps() {
    let mesh = quad_mesh();
    assert!(matches!(
        weld_vertices(&mesh, -0.5),
        Err(MeshError::NegativeEps(_))
    ));
}

#[test]
fn unit_cube_normalization_centers_and_scales() {
    let text = "\
v 0 0 0
v 4 0 0
v 4 2 0
v 0 2 1
f 1 2 3
f 1 3 4
";
    let mesh = load_obj(text).unwrap();
    let out = normalize_to_unit_cube(&mesh).unwrap();
    let (lo, hi) = out.aabb().unwrap();
    assert_relative_eq!(hi[0] - lo[0], 1.0, epsilon = 1e-12);
    assert_relative_eq!(hi[1] - lo[1], 0.5, epsilon = 1e-12);
    assert_relative_eq!(hi[2] - lo[2], 0.25, epsilon = 1e-12);
    for a in 0..3 {
        assert_relative_eq!(lo[a] + hi[a], 1.0, epsilon = 1e-12);
        assert!(lo[a] >= 0.0 && hi[a] <= 1.0);
    }
}

#[test]
fn zero_extent_mesh_is_rejected() {
    let mut mesh = quad_mesh();
    for v in mesh.vertices.iter_mut() {
        *v = [0.25, 0.25, 0.25];
    }
    assert!(matches!(
        normalize_to_unit_cube(&mesh),
        Err(MeshError::ZeroExtent)
    ));
}

#[test]
fn uv_density_is_uv_area_over_world_area() {
    // unit world quad, UVs covering [0, 0.5]^2
    let stats = uv_density(&quad_mesh(), 0).unwrap();
    assert_relative_eq!(stats.area_world, 1.0, epsilon = 1e-12);
    assert_relative_eq!(stats.area_uv, 0.25, epsilon = 1e-12);
    assert_relative_eq!(stats.density, 0.25, epsilon = 1e-12);
}

#[test]
fn uv_density_requires_uvs() {
    let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
    let mesh = load_obj(text).unwrap();
    assert!(matches!(uv_density(&mesh, 0), Err(MeshError::MissingUvs(0))));
}

#[test]
fn uv_density_unknown_part_is_rejected() {
    assert!(matches!(
        uv_density(&quad_mesh(), 3),
        Err(MeshError::UnknownPart(3))
    ));
}

#[test]
fn normalize_uv_scale_yields_unit_density() {
    let out = normalize_uv_scale(&quad_mesh()).unwrap();
    let stats = uv_density(&out, 0).unwrap();
    assert!((stats.density - 1.0).abs() <= 1e-6);
}

#[test]
fn material_uv_scale_multiplies_by_log_scale() {
    let mesh = quad_mesh();
    let e = std::f64::consts::E;

    // scale e: factor ln(e) = 1, UVs unchanged
    let out = apply_material_uv_scale(&mesh, 0, e).unwrap();
    assert_relative_eq!(
        uv_density(&out, 0).unwrap().density,
        0.25,
        epsilon = 1e-12
    );

    // scale e^2: factor 2, area scales by 4
    let out = apply_material_uv_scale(&mesh, 0, e * e).unwrap();
    assert_relative_eq!(uv_density(&out, 0).unwrap().density, 1.0, epsilon = 1e-9);

    // scale 10: factor ln(10)
    let out = apply_material_uv_scale(&mesh, 0, 10.0).unwrap();
    let want = 0.25 * 10.0_f64.ln().powi(2);
    assert_relative_eq!(uv_density(&out, 0).unwrap().density, want, epsilon = 1e-9);
}

#[test]
fn material_uv_scale_rejects_scale_at_or_below_one() {
    let mesh = quad_mesh();
    assert!(matches!(
        apply_material_uv_scale(&mesh, 0, 1.0),
        Err(MeshError::InvalidMaterialScale(_))
    ));
    assert!(matches!(
        apply_material_uv_scale(&mesh, 0, 0.5),
        Err(MeshError::InvalidMaterialScale(_))
    ));
}

#[test]
fn planar_uv_generation_fills_gaps_and_records_parts() {
    let text = "\
v 0 0 0
v 1 0 0
v 0 1 0
usemtl bare
f 1 2 3
";
    let mesh = load_obj(text).unwrap();
    let out = generate_missing_uvs(&mesh);
    assert!(!out.needs_uv());
    assert_eq!(out.uv_generated_parts, vec![0]);
    // projection along +z preserves in-plane area
    let stats = uv_density(&out, 0).unwrap();
    assert_relative_eq!(stats.density, 1.0, epsilon = 1e-9);
}

#[test]
fn json_round_trip_preserves_mesh() {
    let mesh = quad_mesh();
    let text = mesh_to_json(&mesh).unwrap();
    let back = mesh_from_json(&text).unwrap();
    assert_eq!(back.vertices, mesh.vertices);
    assert_eq!(back.faces, mesh.faces);
    assert_eq!(back.uv, mesh.uv);
    assert_eq!(back.material_part_names, mesh.material_part_names);
}

#[test]
fn json_version_mismatch_is_rejected() {
    let mesh = quad_mesh();
    let text = mesh_to_json(&mesh).unwrap().replace("\"version\":1", "\"version\":9");
    assert!(matches!(mesh_from_json(&text), Err(MeshError::Version(9))));
}

#[test]
fn json_structural_violations_are_rejected() {
    let mut bad_index = quad_mesh();
    bad_index.faces[1][2] = 99;
    let err = mesh_from_json(&mesh_to_json(&bad_index).unwrap()).unwrap_err();
    assert!(matches!(err, MeshError::Structure { face: 1, .. }), "{err}");

    let mut short_parts = quad_mesh();
    short_parts.face_material_part.pop();
    let err = mesh_from_json(&mesh_to_json(&short_parts).unwrap()).unwrap_err();
    assert!(matches!(err, MeshError::Structure { .. }), "{err}");

    let mut unnamed_part = quad_mesh();
    unnamed_part.face_object_part[0] = 7;
    let err = mesh_from_json(&mesh_to_json(&unnamed_part).unwrap()).unwrap_err();
    assert!(matches!(err, MeshError::Structure { face: 0, .. }), "{err}");
}

fn arb_mesh() -> impl Strategy<Value = SegmentedMesh> {
    (
        proptest::collection::vec(
            ([-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0]).prop_map(|v| v),
            3..20,
        ),
        proptest::collection::vec((0usize..20, 0usize..20, 0usize..20), 1..24),
    )
        .prop_filter_map("faces must be non-degenerate and in range", |(vs, fs)| {
            let faces: Vec<[u32; 3]> = fs
                .into_iter()
                .filter(|(a, b, c)| {
                    *a < vs.len() && *b < vs.len() && *c < vs.len() && a != b && b != c && a != c
                })
                .map(|(a, b, c)| [a as u32, b as u32, c as u32])
                .collect();
            if faces.is_empty() {
                return None;
            }
            let n = faces.len();
            Some(SegmentedMesh {
                vertices: vs,
                faces,
                uv: vec![None; n],
                face_material_part: vec![0; n],
                face_object_part: vec![0; n],
                normals: None,
                material_part_names: vec!["default".into()],
                object_part_names: vec!["default".into()],
                uv_generated_parts: Vec::new(),
            })
        })
}

proptest! {
    #[test]
    fn unit_cube_normalization_is_idempotent(mesh in arb_mesh()) {
        let Ok(once) = normalize_to_unit_cube(&mesh) else {
            return Ok(()); // degenerate extent, rejected by contract
        };
        let twice = normalize_to_unit_cube(&once).unwrap();
        let (lo, hi) = once.aabb().unwrap();
        prop_assert!(lo.iter().all(|&c| c >= -1e-9));
        prop_assert!(hi.iter().all(|&c| c <= 1.0 + 1e-9));
        let longest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        prop_assert!((longest - 1.0).abs() < 1e-9);
        for (a, b) in once.vertices.iter().zip(twice.vertices.iter()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn welded_vertices_are_pairwise_separated(mesh in arb_mesh(), eps in 0.0f64..0.5) {
        let welded = weld_vertices(&mesh, eps).unwrap();
        for i in 0..welded.vertices.len() {
            for j in (i + 1)..welded.vertices.len() {
                let d = crate::geom::norm(crate::geom::sub(
                    welded.vertices[i],
                    welded.vertices[j],
                ));
                prop_assert!(d > eps || (eps == 0.0 && d > 0.0));
            }
        }
        for f in &welded.faces {
            prop_assert!(f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
            prop_assert!(f.iter().all(|&i| (i as usize) < welded.vertices.len()));
        }
    }
}
