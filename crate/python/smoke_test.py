#!/usr/bin/env python3
"""End-to-end smoke test for the shapemat_py extension module.

Build the module first:

    cargo build -p shapemat-py --release

The script locates the compiled library under target/, exposes it as
`shapemat_py`, and drives the main types and operations, ending with a
tiny closed-loop pipeline run.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / "release" / "libshapemat_py.so",
        REPO / "target" / "debug" / "libshapemat_py.so",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("build the extension first: cargo build -p shapemat-py --release")
    stage = Path(tempfile.mkdtemp(prefix="shapemat-py-"))
    shutil.copy2(built[0], stage / "shapemat_py.so")
    sys.path.insert(0, str(stage))
    import shapemat_py

    return shapemat_py


def main():
    sm = import_module()
    checks = 0

    def ok(name, cond):
        nonlocal checks
        if not cond:
            sys.exit(f"FAIL {name}")
        checks += 1
        print(f"ok {name}")

    # Viewpoint grid: the default preset has 456 unique poses in band.
    poses = sm.grid_poses("paper456")
    ok("grid: 456 poses", len(poses) == 456)
    ok(
        "grid: poses unique",
        len({(p.theta, p.phi) for p in poses}) == 456,
    )
    ok(
        "grid: elevation band",
        all(math.pi / 4 - 1e-12 <= p.phi <= 9 * math.pi / 16 + 1e-12 for p in poses),
    )

    # HOG: default configuration yields 13*13*8 = 1352 dimensions.
    rgb = bytes([255, 255, 255] * (64 * 64))
    d = sm.hog_from_rgb(rgb, 64, 64)
    ok("hog: 1352 dims", len(d) == 1352)

    tmp = Path(tempfile.mkdtemp(prefix="shapemat-smoke-"))

    # Mesh: build a fixture corpus, load a mesh, normalize, render.
    fixture = sm.make_closed_loop_fixture(str(tmp / "fixture"), n_shapes=2)
    mesh_path = Path(fixture["shapes_dir"]) / f"{fixture['shape_ids'][0]}.json"
    mesh = sm.Mesh.load(str(mesh_path))
    ok("mesh: loads with parts", mesh.material_parts == ["seat", "back"])
    prepared = mesh.prepare()
    ok("mesh: normalization keeps topology", prepared.num_faces == mesh.num_faces)
    pose = poses[0]
    labels = prepared.render_part_ids(sm.Pose(pose.theta, pose.phi, pose.r, pose.fov_x), 96)
    counts = labels.counts()
    ok("render: both parts visible", len(counts) == 3 and counts[1] > 0 and counts[2] > 0)

    # CRF: a flat guide image must preserve a clean two-region labeling.
    w = h = 48
    flat = []
    lab = []
    for y in range(h):
        for x in range(w):
            left = x < w // 2
            flat.extend([40, 40, 40] if left else [200, 200, 200])
            lab.append(1 if left else 2)
    noisy = sm.Labels.from_list(lab, w, h, 2)
    refined = sm.crf_refine(noisy, bytes(flat), iterations=3)
    ok("crf: labels preserved", refined.to_list() == lab)

    # Flow: recover a pure translation between two silhouettes.
    def square(x0, y0):
        m = bytearray(64 * 64)
        for y in range(y0, y0 + 20):
            for x in range(x0, x0 + 20):
                m[y * 64 + x] = 1
        return bytes(m)

    ok("flow: exact translation", sm.flow_median(square(12, 16), square(17, 20), 64, 64) == (5, 4))

    # Loss: analytic gradients agree with finite differences.
    ok("loss: gradients match", max(sm.loss_fd_error(s) for s in range(20)) < 1e-5)

    # Library: reference counts per substance.
    lib = sm.Library.reference()
    by_substance = {}
    for i in range(len(lib)):
        s = lib.substance_of(i)
        by_substance[s] = by_substance.get(s, 0) + 1
    ok("library: 453 reference materials", len(lib) == 453)
    ok(
        "library: substance counts",
        by_substance
        == {"leather": 48, "fabric": 154, "metal": 86, "wood": 105, "plastic": 60},
    )

    # Pipeline: close the loop on the fixture corpus.
    config = sm.default_config()
    config["grid"]["n_elevations"] = 3
    config["grid"]["azimuth_scale"] = 8.0
    config["render_resolution"] = 96
    config["align_size"] = 128
    config["top_n"] = 3
    config["classifier"] = {"kind": "uniform"}
    config["preview_resolution"] = 96
    out = tmp / "run"
    report = sm.run(
        fixture["shapes_dir"],
        fixture["exemplars_dir"],
        fixture["library_path"],
        str(out),
        config,
    )
    ok("pipeline: all descriptors written", report["descriptors_written"] >= 2)
    ok("pipeline: no candidate failures", report["candidate_failures"] == [])
    for shape_id in fixture["shape_ids"]:
        desc = json.loads((out / "descriptors" / f"{shape_id}--{shape_id}.json").read_text())
        ok(f"pipeline: {shape_id} exact pose", desc["pose_index"] == fixture["pose_index"])

    ev = sm.evaluate(str(out / "descriptors"), fixture["truth_path"], fixture["library_path"])
    ok("pipeline: perfect material top-1", ev["metrics"]["mtl_at_1"] == 1.0)

    shutil.rmtree(tmp)
    print(f"\nall {checks} checks passed")


if __name__ == "__main__":
    main()
