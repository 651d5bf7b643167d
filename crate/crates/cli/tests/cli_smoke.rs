//! Drives the compiled binary through every verb against small synthetic
//! corpora and checks exit codes plus the files each verb writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shapemat::camera::GridConfig;
use shapemat::img::Mask;
use shapemat::material::{MaterialRecord, MaterialSignature, HIST_BINS, HIST_LEN};
use shapemat::pipeline::{build_closed_loop_fixture, fixture_shape};
use shapemat::raster::{write_mask_png, LabelKind, LabelMap};

fn shapemat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapemat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = shapemat(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_err(args: &[&str]) -> String {
    let out = shapemat(args);
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded: {}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stderr).expect("utf8 stderr")
}

fn read_json(path: &Path) -> Value {
    let text = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn small_grid() -> GridConfig {
    GridConfig {
        n_elevations: 3,
        azimuth_scale: 8.0,
        ..GridConfig::default()
    }
}

/// Histogram with all mass in the bins of one flat color.
fn flat_histogram(color: [u8; 3]) -> Vec<f64> {
    let mut h = vec![0.0; HIST_LEN];
    for (c, &v) in color.iter().enumerate() {
        h[c * HIST_BINS + (v >> 4) as usize] += 1.0 / 3.0;
    }
    h
}

fn material(id: &str, substance: &str, color: [u8; 3]) -> MaterialRecord {
    MaterialRecord {
        id: id.to_string(),
        name: id.to_string(),
        substance: substance.to_string(),
        scale: 2.0,
        signature: MaterialSignature {
            median: [color[0] as f64, color[1] as f64, color[2] as f64],
            histogram: flat_histogram(color),
        },
        brdf_meta: serde_json::json!({}),
    }
}

fn write_library(path: &Path, records: &[MaterialRecord]) {
    fs::write(path, serde_json::to_vec_pretty(records).unwrap()).unwrap();
}

#[test]
fn grid_preset_counts_and_bad_preset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.json");
    run_ok(&["grid", "--preset", "paper456", "--out", out.to_str().unwrap()]);
    let grid = read_json(&out);
    assert_eq!(grid["poses"].as_array().unwrap().len(), 456);
    assert_eq!(grid["config"]["n_elevations"].as_u64(), Some(10));

    let stderr = run_err(&["grid", "--preset", "nope"]);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}

#[test]
fn grid_flag_overrides_change_pose_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.json");
    run_ok(&[
        "grid",
        "--n-elevations",
        "3",
        "--azimuth-scale",
        "8",
        "--grid-fov",
        "48",
        "--out",
        out.to_str().unwrap(),
    ]);
    let grid = read_json(&out);
    assert_eq!(grid["poses"].as_array().unwrap().len(), 22);
    assert_eq!(grid["poses"][0]["fov_x"].as_f64(), Some(48.0));
}

#[test]
fn loss_check_fd_passes_and_respects_tolerance() {
    let stdout = run_ok(&["loss", "check", "--fd", "--states", "25", "--seed", "1"]);
    assert!(stdout.contains("finite-difference"), "stdout: {stdout}");
    run_err(&[
        "loss", "check", "--fd", "--states", "5", "--tolerance", "1e-18",
    ]);
    run_err(&["loss", "check"]);
}

#[test]
fn ingest_normalizes_shapes_and_standardizes_exemplars() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_closed_loop_fixture(dir.path(), 1, &small_grid(), 2, 192).unwrap();

    let raw_shapes = dir.path().join("raw-shapes");
    fs::create_dir_all(&raw_shapes).unwrap();
    fs::write(
        raw_shapes.join("chair.json"),
        shapemat::shapelib::mesh_to_json(&fixture_shape(0)).unwrap(),
    )
    .unwrap();
    let out_shapes = dir.path().join("norm-shapes");
    let stdout = run_ok(&[
        "ingest",
        "--shapes",
        raw_shapes.to_str().unwrap(),
        "--out-shapes",
        out_shapes.to_str().unwrap(),
    ]);
    assert!(stdout.contains("1 normalized"), "stdout: {stdout}");
    let mesh = shapemat::shapelib::mesh_from_json(
        &fs::read_to_string(out_shapes.join("chair.json")).unwrap(),
    )
    .unwrap();
    for v in &mesh.vertices {
        for c in v {
            assert!((0.0..=1.0).contains(c), "vertex outside unit cube: {v:?}");
        }
    }

    // A byte-identical copy must be dropped as a near duplicate.
    let src = fixture.exemplars_dir.join("shape-00.png");
    fs::copy(&src, fixture.exemplars_dir.join("shape-00-copy.png")).unwrap();
    let out_ex = dir.path().join("std-exemplars");
    let stdout = run_ok(&[
        "ingest",
        "--exemplars",
        fixture.exemplars_dir.to_str().unwrap(),
        "--out-exemplars",
        out_ex.to_str().unwrap(),
        "--exemplar-size",
        "128",
    ]);
    assert!(stdout.contains("1 kept, 1 removed"), "stdout: {stdout}");
    let manifest = read_json(&out_ex.join("manifest.json"));
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 2);
    // "shape-00-copy.png" sorts before "shape-00.png", so the copy is kept.
    let removed: Vec<&Value> = entries
        .iter()
        .filter(|e| !e["removed_by"].is_null())
        .collect();
    assert_eq!(removed.len(), 1);
    assert_eq!(removed[0]["id"].as_str(), Some("shape-00"));
    assert_eq!(removed[0]["removed_by"].as_str(), Some("shape-00-copy"));
    assert!(out_ex.join("shape-00-copy.png").exists());
    assert!(out_ex.join("masks/shape-00-copy.png").exists());

    run_err(&["ingest"]);
}

#[test]
fn index_build_query_invert_dump_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    build_closed_loop_fixture(dir.path(), 2, &small_grid(), 2, 192).unwrap();
    let index = dir.path().join("index.bin");
    let shapes = dir.path().join("shapes");
    let exemplars = dir.path().join("exemplars");

    run_ok(&[
        "index",
        "build",
        "--shapes",
        shapes.to_str().unwrap(),
        "--exemplars",
        exemplars.to_str().unwrap(),
        "--out",
        index.to_str().unwrap(),
        "--k",
        "4",
        "--render-resolution",
        "96",
        "--exemplar-size",
        "128",
        "--n-elevations",
        "3",
        "--azimuth-scale",
        "8",
    ]);
    assert!(index.exists());

    let stdout = run_ok(&[
        "index",
        "query",
        "--index",
        index.to_str().unwrap(),
        "--exemplar-id",
        "shape-00",
    ]);
    let hits: Value = serde_json::from_str(&stdout).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 4);
    assert_eq!(hits[0]["shape_id"].as_str(), Some("shape-00"));
    assert_eq!(hits[0]["pose_index"].as_u64(), Some(2));

    let inv_path = dir.path().join("inverted.json");
    run_ok(&[
        "index",
        "invert",
        "--index",
        index.to_str().unwrap(),
        "--out",
        inv_path.to_str().unwrap(),
    ]);
    let inverted = read_json(&inv_path);
    let map = inverted.as_object().unwrap();
    assert!(map.contains_key("shape-00") && map.contains_key("shape-01"));
    for matches in map.values() {
        let d: Vec<f64> = matches
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["distance"].as_f64().unwrap())
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]), "not ascending: {d:?}");
    }

    let dump_path = dir.path().join("dump.json");
    run_ok(&[
        "index",
        "dump",
        "--index",
        index.to_str().unwrap(),
        "--out",
        dump_path.to_str().unwrap(),
    ]);
    let dump = read_json(&dump_path);
    assert_eq!(dump["entries"].as_array().unwrap().len(), 2);

    run_err(&[
        "index",
        "query",
        "--index",
        index.to_str().unwrap(),
        "--exemplar-id",
        "missing",
    ]);
}

#[test]
fn align_recovers_translation_and_warps_labels() {
    let dir = tempfile::tempdir().unwrap();
    let square = |x0: usize, y0: usize| {
        Mask::from_fn(64, 64, move |x, y| {
            (x0..x0 + 24).contains(&x) && (y0..y0 + 24).contains(&y)
        })
    };
    let render = square(14, 18);
    let exemplar = square(20, 21);
    let render_path = dir.path().join("render.png");
    let exemplar_path = dir.path().join("exemplar.png");
    write_mask_png(&render, &render_path).unwrap();
    write_mask_png(&exemplar, &exemplar_path).unwrap();

    let mut labels = LabelMap::new(64, 64, 1, LabelKind::MaterialPart);
    for y in 18..42 {
        for x in 14..38 {
            labels.labels[y * 64 + x] = 1;
        }
    }
    let labels_path = dir.path().join("labels.json");
    fs::write(&labels_path, serde_json::to_vec(&labels).unwrap()).unwrap();

    let flow_path = dir.path().join("flow.flo");
    let warped_path = dir.path().join("warped.json");
    let stdout = run_ok(&[
        "align",
        "--render-mask",
        render_path.to_str().unwrap(),
        "--exemplar-mask",
        exemplar_path.to_str().unwrap(),
        "--labels",
        labels_path.to_str().unwrap(),
        "--flow-out",
        flow_path.to_str().unwrap(),
        "--warped-out",
        warped_path.to_str().unwrap(),
    ]);
    assert!(stdout.contains("median flow: (6, 3)"), "stdout: {stdout}");
    assert!(flow_path.exists());
    let warped: LabelMap =
        serde_json::from_str(&fs::read_to_string(&warped_path).unwrap()).unwrap();
    // The warped map must cover the exemplar square's center.
    assert_eq!(warped.labels[33 * 64 + 32], 1);

    let stdout = run_ok(&[
        "align",
        "--render-mask",
        render_path.to_str().unwrap(),
        "--exemplar-mask",
        exemplar_path.to_str().unwrap(),
        "--direction",
        "exemplar-to-render",
    ]);
    assert!(stdout.contains("median flow: (-6, -3)"), "stdout: {stdout}");
}

#[test]
fn assign_matches_flat_parts_to_library() {
    let dir = tempfile::tempdir().unwrap();
    let dark = [24u8, 24, 24];
    let warm = [152u8, 88, 56];
    let image = image::RgbImage::from_fn(64, 64, |x, y| {
        if (8..30).contains(&x) && (8..56).contains(&y) {
            image::Rgb(dark)
        } else if (34..60).contains(&x) && (8..56).contains(&y) {
            image::Rgb(warm)
        } else {
            image::Rgb([255, 255, 255])
        }
    });
    let image_path = dir.path().join("photo.png");
    image.save(&image_path).unwrap();

    let mut parts = LabelMap::new(64, 64, 2, LabelKind::MaterialPart);
    for y in 8..56 {
        for x in 8..30 {
            parts.labels[y * 64 + x] = 1;
        }
        for x in 34..60 {
            parts.labels[y * 64 + x] = 2;
        }
    }
    let parts_path = dir.path().join("parts.json");
    fs::write(&parts_path, serde_json::to_vec(&parts).unwrap()).unwrap();

    let library_path = dir.path().join("library.json");
    write_library(
        &library_path,
        &[
            material("m-dark", "leather", dark),
            material("m-warm", "metal", warm),
            material("m-off", "fabric", [216, 216, 216]),
        ],
    );

    let out_path = dir.path().join("assigned.json");
    run_ok(&[
        "assign",
        "--exemplar",
        image_path.to_str().unwrap(),
        "--parts",
        parts_path.to_str().unwrap(),
        "--library",
        library_path.to_str().unwrap(),
        "--part-names",
        "seat,back",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let assigned = read_json(&out_path);
    let rows = assigned.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["part_name"].as_str(), Some("seat"));
    assert_eq!(rows[0]["status"].as_str(), Some("assigned"));
    assert_eq!(rows[0]["material_id"].as_str(), Some("m-dark"));
    assert_eq!(rows[1]["material_id"].as_str(), Some("m-warm"));
}

#[test]
fn run_then_evaluate_closed_loop() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = build_closed_loop_fixture(dir.path(), 2, &small_grid(), 2, 256).unwrap();
    let out = dir.path().join("run");

    let stdout = run_ok(&[
        "run",
        "--shapes",
        fixture.shapes_dir.to_str().unwrap(),
        "--exemplars",
        fixture.exemplars_dir.to_str().unwrap(),
        "--library",
        fixture.library_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n-elevations",
        "3",
        "--azimuth-scale",
        "8",
        "--render-resolution",
        "96",
        "--align-size",
        "128",
        "--top-n",
        "3",
        "--classifier",
        "uniform",
        "--preview-resolution",
        "96",
    ]);
    assert!(out.join("config.lock.json").exists());
    assert!(out.join("index.bin").exists());
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["shapes"].as_u64(), Some(2));
    assert_eq!(report["exemplars"].as_u64(), Some(2));
    let written = report["descriptors_written"].as_u64().unwrap();
    assert!(written >= 2, "report: {report}");
    let descriptors: Vec<_> = fs::read_dir(out.join("descriptors"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(descriptors.len() as u64, written);
    assert!(out.join("previews").read_dir().unwrap().next().is_some());
    assert!(stdout.contains("config hash"), "stdout: {stdout}");

    // Self matches must recover the exemplar's grid pose exactly.
    for id in &fixture.shape_ids {
        let d = read_json(&out.join(format!("descriptors/{id}--{id}.json")));
        assert_eq!(d["pose_index"].as_u64(), Some(2), "descriptor: {d}");
    }

    let eval_path = dir.path().join("eval.json");
    let stdout = run_ok(&[
        "evaluate",
        "--descriptors",
        out.join("descriptors").to_str().unwrap(),
        "--truth",
        fixture.truth_path.to_str().unwrap(),
        "--library",
        fixture.library_path.to_str().unwrap(),
        "--out",
        eval_path.to_str().unwrap(),
    ]);
    assert!(stdout.contains("mtl@1"), "stdout: {stdout}");
    let eval = read_json(&eval_path);
    assert_eq!(eval["metrics"]["mtl_at_1"].as_f64(), Some(1.0), "eval: {eval}");
    assert_eq!(eval["parts_scored"].as_u64(), Some(5));
}

#[test]
fn synthgen_sample_is_deterministic_and_emits_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mesh_path = dir.path().join("stool.json");
    fs::write(
        &mesh_path,
        shapemat::shapelib::mesh_to_json(&fixture_shape(0)).unwrap(),
    )
    .unwrap();
    let library_path = dir.path().join("library.json");
    write_library(
        &library_path,
        &[
            material("m-a", "leather", [24, 24, 24]),
            material("m-b", "leather", [56, 56, 56]),
            material("m-c", "metal", [152, 88, 56]),
        ],
    );

    let out1 = dir.path().join("s1");
    let stdout = run_ok(&[
        "synthgen",
        "sample",
        "--shape",
        mesh_path.to_str().unwrap(),
        "--library",
        library_path.to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "9",
        "--out",
        out1.to_str().unwrap(),
        "--part-substances",
        "leather,metal",
        "--emit-scenes",
        "--resolution",
        "64",
    ]);
    assert!(stdout.contains("3 configs"), "stdout: {stdout}");
    let configs = read_json(&out1.join("configs.json"));
    let configs = configs.as_array().unwrap();
    assert_eq!(configs.len(), 3);
    for c in configs {
        assert_eq!(c["shape_id"].as_str(), Some("stool"));
        assert_eq!(c["parts"].as_array().unwrap().len(), 2);
    }
    for i in 0..3 {
        assert!(out1.join(format!("stool-{i:05}.scene.json")).exists());
        assert!(out1.join(format!("stool-{i:05}.materials.png")).exists());
        assert!(out1.join(format!("stool-{i:05}.substances.png")).exists());
    }

    let out2 = dir.path().join("s2");
    run_ok(&[
        "synthgen",
        "sample",
        "--shape",
        mesh_path.to_str().unwrap(),
        "--library",
        library_path.to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "9",
        "--out",
        out2.to_str().unwrap(),
        "--part-substances",
        "leather,metal",
    ]);
    assert_eq!(
        fs::read(out1.join("configs.json")).unwrap(),
        fs::read(out2.join("configs.json")).unwrap()
    );
}

#[test]
fn systemic_failures_exit_nonzero() {
    let stderr = run_err(&[
        "evaluate",
        "--descriptors",
        "/nonexistent/descriptors",
        "--truth",
        "/nonexistent/truth.json",
        "--library",
        "/nonexistent/library.json",
    ]);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}
