//! Deterministic software rasterizer: part-ID maps, depth, silhouettes, and
//! flat-shaded color previews.
//!
//! Perspective rasterization samples pixel centers `(x + 0.5, y + 0.5)` with
//! the origin at the top-left. No antialiasing: label maps must stay crisp.
//! Depth ties resolve to the lower face index, and faces are processed in
//! index order, so identical inputs give byte-identical outputs.

use crate::camera::{Camera, SphericalPose};
use crate::geom::{self, Vec3};
use crate::img::Mask;
use crate::shapelib::SegmentedMesh;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("resolution {0} below minimum of 16")]
    BadResolution(u32),
    #[error("expected {expected} part colors, got {got}")]
    ColorCount { expected: usize, got: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask is {mask_w}x{mask_h} but target is {img_w}x{img_h}")]
    MaskSizeMismatch {
        mask_w: usize,
        mask_h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("label {0} does not fit 16-bit PNG output")]
    LabelOverflow(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    MaterialPart,
    Substance,
}

/// Per-pixel integer labeling with reserved background label 0.
///
/// Invariant: every label is `<= label_count` where non-background labels
/// are `1..=label_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub label_count: u32,
    pub label_kind: LabelKind,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, label_count: u32, label_kind: LabelKind) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![0; width * height],
            label_count,
            label_kind,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        debug_assert!(x < self.width && y < self.height);
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u32) {
        debug_assert!(x < self.width && y < self.height);
        self.labels[y * self.width + x] = label;
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// One render: part labels, camera-space depth (+inf off-object), and an
/// optional color pass.
///
/// Invariant: `part_ids` background pixels are exactly the `+inf` depth
/// pixels.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub part_ids: LabelMap,
    pub depth: Vec<f32>,
    pub color: Option<RgbImage>,
}

struct ScreenVertex {
    x: f64,
    y: f64,
    inv_depth: f64,
}

struct FragmentBuffer {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    face: Vec<i64>,
}

impl FragmentBuffer {
    fn new(width: usize, height: usize) -> Self {
        FragmentBuffer {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            face: vec![-1; width * height],
        }
    }
}

/// Rasterize `faces` (indices into the mesh) in ascending order. Coverage is
/// decided by barycentric sign at the pixel center; strict depth comparison
/// keeps the earlier (lower-index) face on exact ties. Faces touching the
/// eye plane are skipped, which never occurs for normalized meshes orbited
/// from outside the unit cube.
fn rasterize_faces(
    mesh: &SegmentedMesh,
    camera: &Camera,
    faces: impl Iterator<Item = usize>,
    buf: &mut FragmentBuffer,
) {
    let (w, h) = (buf.width, buf.height);
    for fi in faces {
        let idx = mesh.faces[fi];
        let mut sv: [ScreenVertex; 3] = [
            ScreenVertex { x: 0.0, y: 0.0, inv_depth: 0.0 },
            ScreenVertex { x: 0.0, y: 0.0, inv_depth: 0.0 },
            ScreenVertex { x: 0.0, y: 0.0, inv_depth: 0.0 },
        ];
        let mut visible = true;
        for (k, &vi) in idx.iter().enumerate() {
            match camera.project(mesh.vertices[vi as usize]) {
                Some((px, py, depth)) => {
                    sv[k] = ScreenVertex {
                        x: px,
                        y: py,
                        inv_depth: 1.0 / depth,
                    };
                }
                None => {
                    visible = false;
                    break;
                }
            }
        }
        if !visible {
            continue;
        }

        let area2 = (sv[1].x - sv[0].x) * (sv[2].y - sv[0].y)
            - (sv[1].y - sv[0].y) * (sv[2].x - sv[0].x);
        if area2 == 0.0 {
            continue;
        }

        let min_x = sv.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let max_x = sv.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = sv.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let max_y = sv.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil() as i64).min(w as i64 - 1);
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let y1 = ((max_y - 0.5).ceil() as i64).min(h as i64 - 1);
        if x1 < x0 as i64 || y1 < y0 as i64 {
            continue;
        }

        for py in y0..=(y1 as usize) {
            let sy = py as f64 + 0.5;
            for px in x0..=(x1 as usize) {
                let sx = px as f64 + 0.5;
                let l0 = ((sv[1].x - sx) * (sv[2].y - sy) - (sv[1].y - sy) * (sv[2].x - sx))
                    / area2;
                let l1 = ((sv[2].x - sx) * (sv[0].y - sy) - (sv[2].y - sy) * (sv[0].x - sx))
                    / area2;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let inv_d = l0 * sv[0].inv_depth + l1 * sv[1].inv_depth + l2 * sv[2].inv_depth;
                if inv_d <= 0.0 {
                    continue;
                }
                let depth = 1.0 / inv_d;
                let at = py * w + px;
                if depth < buf.depth[at] {
                    buf.depth[at] = depth;
                    buf.face[at] = fi as i64;
                }
            }
        }
    }
}

fn mesh_center(mesh: &SegmentedMesh) -> Result<Vec3, RasterError> {
    let (lo, hi) = mesh.aabb().ok_or(RasterError::EmptyMesh)?;
    Ok([
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ])
}

fn check_inputs(mesh: &SegmentedMesh, resolution: u32) -> Result<(), RasterError> {
    if mesh.faces.is_empty() {
        return Err(RasterError::EmptyMesh);
    }
    if resolution < 16 {
        return Err(RasterError::BadResolution(resolution));
    }
    Ok(())
}

/// Z-buffered part-ID render: covered pixels take their face's material part
/// id + 1, background stays 0. Backface culling is off; thin parts are often
/// single-sided.
pub fn render_part_ids(
    mesh: &SegmentedMesh,
    pose: &SphericalPose,
    resolution: u32,
) -> Result<RenderOutput, RasterError> {
    check_inputs(mesh, resolution)?;
    let target = mesh_center(mesh)?;
    let camera = Camera::from_pose(pose, target, resolution, resolution);
    let size = resolution as usize;
    let mut buf = FragmentBuffer::new(size, size);
    rasterize_faces(mesh, &camera, 0..mesh.faces.len(), &mut buf);

    let mut part_ids = LabelMap::new(
        size,
        size,
        mesh.material_part_count() as u32,
        LabelKind::MaterialPart,
    );
    let mut depth = vec![f32::INFINITY; size * size];
    for at in 0..size * size {
        if buf.face[at] >= 0 {
            part_ids.labels[at] = mesh.face_material_part[buf.face[at] as usize] + 1;
            depth[at] = buf.depth[at] as f32;
        }
    }
    Ok(RenderOutput {
        part_ids,
        depth,
        color: None,
    })
}

/// Foreground mask: every non-background label.
pub fn silhouette(render: &RenderOutput) -> Mask {
    Mask {
        width: render.part_ids.width,
        height: render.part_ids.height,
        data: render.part_ids.labels.iter().map(|&l| l != 0).collect(),
    }
}

/// Flat-shaded preview: each covered pixel is its part's albedo scaled by
/// the Lambert term `max(0, n.l)` with a directional light down the view
/// axis; background is white, matching the product-photo convention.
///
/// Unlike the ID pass this pass culls back faces, so geometry facing away
/// from the camera leaves the background untouched.
pub fn render_flat_color(
    mesh: &SegmentedMesh,
    pose: &SphericalPose,
    resolution: u32,
    part_colors: &[[u8; 3]],
) -> Result<RgbImage, RasterError> {
    check_inputs(mesh, resolution)?;
    if part_colors.len() != mesh.material_part_count() {
        return Err(RasterError::ColorCount {
            expected: mesh.material_part_count(),
            got: part_colors.len(),
        });
    }
    let target = mesh_center(mesh)?;
    let camera = Camera::from_pose(pose, target, resolution, resolution);
    let eye = pose.position(target);
    let light = geom::normalize(geom::sub(eye, target));

    let front_faces: Vec<usize> = (0..mesh.faces.len())
        .filter(|&fi| {
            let n = mesh.face_normal(fi);
            let v0 = mesh.vertices[mesh.faces[fi][0] as usize];
            geom::dot(n, geom::sub(eye, v0)) > 0.0
        })
        .collect();

    let size = resolution as usize;
    let mut buf = FragmentBuffer::new(size, size);
    rasterize_faces(mesh, &camera, front_faces.into_iter(), &mut buf);

    let shade: Vec<f64> = (0..mesh.faces.len())
        .map(|fi| geom::dot(mesh.face_normal(fi), light).clamp(0.0, 1.0))
        .collect();

    let mut out = RgbImage::from_pixel(resolution, resolution, image::Rgb([255, 255, 255]));
    for py in 0..size {
        for px in 0..size {
            let at = py * size + px;
            if buf.face[at] >= 0 {
                let fi = buf.face[at] as usize;
                let albedo = part_colors[mesh.face_material_part[fi] as usize];
                let s = shade[fi];
                let rgb = [
                    (albedo[0] as f64 * s).round() as u8,
                    (albedo[1] as f64 * s).round() as u8,
                    (albedo[2] as f64 * s).round() as u8,
                ];
                out.put_pixel(px as u32, py as u32, image::Rgb(rgb));
            }
        }
    }
    Ok(out)
}

/// Square crop region around a mask: `(x, y, side)` of the square whose side
/// is the longer edge of the tight bounding rect, centered on that rect. The
/// square may extend past the image; samplers pad with background there.
pub fn mask_square_bbox(mask: &Mask) -> Option<(i64, i64, i64)> {
    let mut min_x = usize::MAX;
    let mut max_x = 0usize;
    let mut min_y = usize::MAX;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                any = true;
                min_x = min_x.min(x);
                max_x = max_x.max(x);
                min_y = min_y.min(y);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    let w = (max_x - min_x + 1) as i64;
    let h = (max_y - min_y + 1) as i64;
    let side = w.max(h);
    let x = min_x as i64 - (side - w) / 2;
    let y = min_y as i64 - (side - h) / 2;
    Some((x, y, side))
}

fn check_mask_size(
    mask: &Mask,
    img_w: usize,
    img_h: usize,
    out_size: u32,
) -> Result<(), RasterError> {
    if mask.width != img_w || mask.height != img_h {
        return Err(RasterError::MaskSizeMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            img_w,
            img_h,
        });
    }
    if out_size == 0 {
        return Err(RasterError::BadResolution(out_size));
    }
    Ok(())
}

/// Crop a label map to the mask's square bbox and resample to
/// `out_size x out_size` with nearest-neighbor, so no new label can appear.
/// Regions outside the source become background.
pub fn square_crop_labelmap(
    map: &LabelMap,
    mask: &Mask,
    out_size: u32,
) -> Result<LabelMap, RasterError> {
    check_mask_size(mask, map.width, map.height, out_size)?;
    let (bx, by, side) = mask_square_bbox(mask).ok_or(RasterError::EmptyMask)?;
    let n = out_size as usize;
    let mut out = LabelMap::new(n, n, map.label_count, map.label_kind);
    for oy in 0..n {
        for ox in 0..n {
            let sx = bx as f64 + (ox as f64 + 0.5) / n as f64 * side as f64 - 0.5;
            let sy = by as f64 + (oy as f64 + 0.5) / n as f64 * side as f64 - 0.5;
            let ix = sx.round() as i64;
            let iy = sy.round() as i64;
            if ix >= 0 && iy >= 0 && (ix as usize) < map.width && (iy as usize) < map.height {
                out.set(ox, oy, map.get(ix as usize, iy as usize));
            }
        }
    }
    Ok(out)
}

/// Crop an RGB image to the mask's square bbox and resample to
/// `out_size x out_size` bilinearly; out-of-image samples read as white.
pub fn square_crop_image(
    image: &RgbImage,
    mask: &Mask,
    out_size: u32,
) -> Result<RgbImage, RasterError> {
    check_mask_size(mask, image.width() as usize, image.height() as usize, out_size)?;
    let (bx, by, side) = mask_square_bbox(mask).ok_or(RasterError::EmptyMask)?;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let sample = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            255.0
        } else {
            image.get_pixel(x as u32, y as u32).0[c] as f64
        }
    };
    let mut out = RgbImage::new(out_size, out_size);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let sx = bx as f64 + (ox as f64 + 0.5) / out_size as f64 * side as f64 - 0.5;
            let sy = by as f64 + (oy as f64 + 0.5) / out_size as f64 * side as f64 - 0.5;
            let fx = sx.floor();
            let fy = sy.floor();
            let tx = sx - fx;
            let ty = sy - fy;
            let mut rgb = [0u8; 3];
            for (c, chan) in rgb.iter_mut().enumerate() {
                let v00 = sample(fx as i64, fy as i64, c);
                let v10 = sample(fx as i64 + 1, fy as i64, c);
                let v01 = sample(fx as i64, fy as i64 + 1, c);
                let v11 = sample(fx as i64 + 1, fy as i64 + 1, c);
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                *chan = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, image::Rgb(rgb));
        }
    }
    Ok(out)
}

/// Crop a mask with the same geometry as [`square_crop_labelmap`].
pub fn square_crop_mask(mask_img: &Mask, mask: &Mask, out_size: u32) -> Result<Mask, RasterError> {
    let as_map = LabelMap {
        width: mask_img.width,
        height: mask_img.height,
        labels: mask_img.data.iter().map(|&b| b as u32).collect(),
        label_count: 1,
        label_kind: LabelKind::MaterialPart,
    };
    let cropped = square_crop_labelmap(&as_map, mask, out_size)?;
    Ok(Mask {
        width: cropped.width,
        height: cropped.height,
        data: cropped.labels.iter().map(|&l| l != 0).collect(),
    })
}

/// Write a label map as 16-bit grayscale PNG (raw label values).
pub fn write_labelmap_png16(map: &LabelMap, path: &std::path::Path) -> Result<(), RasterError> {
    let mut pixels = Vec::with_capacity(map.labels.len());
    for &l in &map.labels {
        if l > u16::MAX as u32 {
            return Err(RasterError::LabelOverflow(l));
        }
        pixels.push(l as u16);
    }
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(map.width as u32, map.height as u32, pixels)
            .expect("buffer size matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Write a mask as 8-bit grayscale PNG (0 or 255).
pub fn write_mask_png(mask: &Mask, path: &std::path::Path) -> Result<(), RasterError> {
    let img = image::GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("buffer size matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Serialize depth to PFM (grayscale, little-endian, rows bottom-up).
pub fn depth_to_pfm(depth: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(depth.len(), width * height);
    let mut out = Vec::with_capacity(depth.len() * 4 + 32);
    out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
    for y in (0..height).rev() {
        for x in 0..width {
            out.extend_from_slice(&depth[y * width + x].to_le_bytes());
        }
    }
    out
}

pub fn write_depth_pfm(
    depth: &[f32],
    width: usize,
    height: usize,
    path: &std::path::Path,
) -> Result<(), RasterError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&depth_to_pfm(depth, width, height))?;
    Ok(())
}
