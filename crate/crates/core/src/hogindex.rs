//! HOG descriptors and the coarse-alignment retrieval index.
//!
//! Descriptors are gradient-orientation histograms on a 13x13 cell grid with
//! 8 unsigned orientation bins, computed at a 104x104 working resolution
//! (8 px per cell), giving 1352 dimensions. Retrieval is an exact linear
//! scan: per exemplar, the top-k nearest shape renderings by descriptor L2
//! distance form a reverse index, which inverts into per-shape candidate
//! exemplar lists.

use crate::camera::SphericalPose;
use crate::img::{self, GrayF32};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HogIndexError {
    #[error("image {w}x{h} is smaller than one descriptor cell ({cell_w}x{cell_h})")]
    ImageTooSmall {
        w: u32,
        h: u32,
        cell_w: usize,
        cell_h: usize,
    },
    #[error("invalid descriptor config: {0}")]
    BadConfig(String),
    #[error("descriptor lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rendering set is empty")]
    EmptyRenderings,
    #[error("k must be >= 1")]
    BadK,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file: {0}")]
    Format(String),
}

/// Descriptor layout knobs. The default reproduces the 1352-dimensional
/// configuration: 13 x 13 x 8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub cells_x: usize,
    pub cells_y: usize,
    pub orientation_bins: usize,
    /// Signed gradients span [0, 2pi); unsigned fold into [0, pi).
    pub signed: bool,
    /// Square working resolution the image is resampled to before gradients.
    pub working_size: usize,
    /// Gaussian blur applied at working resolution, before gradients.
    pub blur_sigma: f32,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            cells_x: 13,
            cells_y: 13,
            orientation_bins: 8,
            signed: false,
            working_size: 104,
            blur_sigma: 0.1,
        }
    }
}

impl HogConfig {
    pub fn descriptor_len(&self) -> usize {
        self.cells_x * self.cells_y * self.orientation_bins
    }

    fn validate(&self) -> Result<(), HogIndexError> {
        if self.cells_x == 0 || self.cells_y == 0 || self.orientation_bins == 0 {
            return Err(HogIndexError::BadConfig(
                "cells and orientation_bins must be positive".into(),
            ));
        }
        if self.working_size < self.cells_x || self.working_size < self.cells_y {
            return Err(HogIndexError::BadConfig(
                "working_size must cover at least one pixel per cell".into(),
            ));
        }
        Ok(())
    }
}

/// Block-normalized orientation-histogram descriptor.
///
/// Invariant: `values.len() == config.descriptor_len()` and all entries
/// are >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogDescriptor {
    pub values: Vec<f32>,
    pub config: HogConfig,
}

impl HogDescriptor {
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Unit-normalized copy; all-zero descriptors stay zero.
    pub fn normalized(&self) -> HogDescriptor {
        let n = self.l2_norm();
        if n == 0.0 {
            return self.clone();
        }
        HogDescriptor {
            values: self.values.iter().map(|&v| (v as f64 / n) as f32).collect(),
            config: self.config,
        }
    }
}

/// L2 distance between descriptors of equal length.
pub fn l2_distance(a: &HogDescriptor, b: &HogDescriptor) -> Result<f64, HogIndexError> {
    if a.values.len() != b.values.len() {
        return Err(HogIndexError::LengthMismatch(a.values.len(), b.values.len()));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Compute the descriptor of an RGB image.
///
/// Pipeline: grayscale, resample to the working resolution, Gaussian blur,
/// central-difference gradients, per-cell orientation histograms with
/// bilinear vote sharing in space and orientation, then L2-hys block
/// normalization (2x2 cell blocks, clip 0.2) averaged over the blocks
/// containing each cell. A constant image yields the all-zero descriptor.
pub fn hog(image: &RgbImage, config: &HogConfig) -> Result<HogDescriptor, HogIndexError> {
    config.validate()?;
    let cell_w = (config.working_size / config.cells_x).max(1);
    let cell_h = (config.working_size / config.cells_y).max(1);
    if (image.width() as usize) < cell_w || (image.height() as usize) < cell_h {
        return Err(HogIndexError::ImageTooSmall {
            w: image.width(),
            h: image.height(),
            cell_w,
            cell_h,
        });
    }
    let gray = img::rgb_to_gray(image);
    hog_gray(&gray, config)
}

/// Descriptor of a single-channel image; entry point for silhouette inputs.
pub fn hog_gray(gray: &GrayF32, config: &HogConfig) -> Result<HogDescriptor, HogIndexError> {
    config.validate()?;
    let ws = config.working_size;
    let resized = img::resize_bilinear(gray, ws, ws);
    let smooth = img::gaussian_blur(&resized, config.blur_sigma);

    let (cx, cy, nb) = (config.cells_x, config.cells_y, config.orientation_bins);
    let cell_w = ws as f64 / cx as f64;
    let cell_h = ws as f64 / cy as f64;
    let period = if config.signed {
        2.0 * std::f64::consts::PI
    } else {
        std::f64::consts::PI
    };
    let bin_width = period / nb as f64;

    let mut hist = vec![0.0f64; cx * cy * nb];
    for y in 0..ws {
        for x in 0..ws {
            let gx = (smooth.get_clamped(x as isize + 1, y as isize)
                - smooth.get_clamped(x as isize - 1, y as isize)) as f64;
            let gy = (smooth.get_clamped(x as isize, y as isize + 1)
                - smooth.get_clamped(x as isize, y as isize - 1)) as f64;
            let mag = (gx * gx + gy * gy).sqrt();
            // resampling on a constant image leaves sub-ulp ripples; votes
            // this small are numeric noise, not structure (0..255 scale)
            if mag < 1e-3 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(period);

            // orientation: linear vote between the two nearest bins
            let ob = angle / bin_width - 0.5;
            let ob0 = ob.floor();
            let of = ob - ob0;
            let b0 = (ob0 as i64).rem_euclid(nb as i64) as usize;
            let b1 = (b0 + 1) % nb;

            // space: bilinear vote over the four nearest cells
            let fx = (x as f64 + 0.5) / cell_w - 0.5;
            let fy = (y as f64 + 0.5) / cell_h - 0.5;
            let cx0 = fx.floor() as i64;
            let cy0 = fy.floor() as i64;
            let wx1 = fx - cx0 as f64;
            let wy1 = fy - cy0 as f64;
            for (dc, wxc) in [(0i64, 1.0 - wx1), (1, wx1)] {
                for (dr, wyc) in [(0i64, 1.0 - wy1), (1, wy1)] {
                    let (ccx, ccy) = (cx0 + dc, cy0 + dr);
                    if ccx < 0 || ccy < 0 || ccx >= cx as i64 || ccy >= cy as i64 {
                        continue;
                    }
                    let at = (ccy as usize * cx + ccx as usize) * nb;
                    let w = mag * wxc * wyc;
                    hist[at + b0] += w * (1.0 - of);
                    hist[at + b1] += w * of;
                }
            }
        }
    }

    Ok(HogDescriptor {
        values: block_normalize(&hist, cx, cy, nb),
        config: *config,
    })
}

/// L2-hys over 2x2 cell blocks; each cell's final vector is the average of
/// its normalized copies from every block containing it. Configs with a
/// single cell row or column fall back to per-cell normalization.
fn block_normalize(hist: &[f64], cx: usize, cy: usize, nb: usize) -> Vec<f32> {
    const EPS: f64 = 1e-12;
    const CLIP: f64 = 0.2;

    let cell = |x: usize, y: usize| &hist[(y * cx + x) * nb..(y * cx + x + 1) * nb];

    let mut acc = vec![0.0f64; cx * cy * nb];
    let mut copies = vec![0u32; cx * cy];

    let mut apply_block = |cells: &[(usize, usize)]| {
        let sq: f64 = cells
            .iter()
            .flat_map(|&(x, y)| cell(x, y).iter())
            .map(|&v| v * v)
            .sum();
        let norm = (sq + EPS).sqrt();
        let mut block: Vec<f64> = cells
            .iter()
            .flat_map(|&(x, y)| cell(x, y).iter().map(move |&v| (v / norm).min(CLIP)))
            .collect();
        let sq2: f64 = block.iter().map(|&v| v * v).sum();
        let norm2 = (sq2 + EPS).sqrt();
        for v in block.iter_mut() {
            *v /= norm2;
        }
        for (ci, &(x, y)) in cells.iter().enumerate() {
            let at = (y * cx + x) * nb;
            for b in 0..nb {
                acc[at + b] += block[ci * nb + b];
            }
            copies[y * cx + x] += 1;
        }
    };

    if cx >= 2 && cy >= 2 {
        for by in 0..cy - 1 {
            for bx in 0..cx - 1 {
                apply_block(&[(bx, by), (bx + 1, by), (bx, by + 1), (bx + 1, by + 1)]);
            }
        }
    } else {
        for y in 0..cy {
            for x in 0..cx {
                apply_block(&[(x, y)]);
            }
        }
    }

    let mut out = Vec::with_capacity(cx * cy * nb);
    for y in 0..cy {
        for x in 0..cx {
            let n = copies[y * cx + x].max(1) as f64;
            let at = (y * cx + x) * nb;
            for b in 0..nb {
                out.push((acc[at + b] / n) as f32);
            }
        }
    }
    out
}

/// One rendering in the retrieval set: a shape seen from one grid pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderingEntry {
    pub shape_id: String,
    pub pose_index: usize,
    pub pose: SphericalPose,
    pub descriptor: HogDescriptor,
}

/// Query descriptor tagged with its exemplar id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarDescriptor {
    pub exemplar_id: String,
    pub descriptor: HogDescriptor,
}

/// Best-matching rendering for one exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub shape_id: String,
    pub pose_index: usize,
    pub pose: SphericalPose,
    pub exemplar_id: String,
    pub distance: f64,
}

/// One reverse-index hit: a rendering at its distance from the exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHit {
    pub shape_id: String,
    pub pose_index: usize,
    pub pose: SphericalPose,
    pub distance: f64,
}

/// Exemplar -> top-k nearest renderings, in exemplar input order.
///
/// Invariant: every hit list is ascending by distance and at most k long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseIndex {
    pub k: usize,
    pub config: HogConfig,
    pub entries: Vec<(String, Vec<IndexHit>)>,
}

impl ReverseIndex {
    pub fn hits_for(&self, exemplar_id: &str) -> Option<&[IndexHit]> {
        self.entries
            .iter()
            .find(|(id, _)| id == exemplar_id)
            .map(|(_, hits)| hits.as_slice())
    }
}

fn hit_key(h: &IndexHit) -> (u64, &str, usize) {
    (h.distance.to_bits(), h.shape_id.as_str(), h.pose_index)
}

fn top_k_hits(
    query: &HogDescriptor,
    renderings: &[RenderingEntry],
    k: usize,
) -> Result<Vec<IndexHit>, HogIndexError> {
    let mut hits = Vec::with_capacity(renderings.len());
    for r in renderings {
        hits.push(IndexHit {
            shape_id: r.shape_id.clone(),
            pose_index: r.pose_index,
            pose: r.pose,
            distance: l2_distance(query, &r.descriptor)?,
        });
    }
    // non-negative distances order correctly by IEEE bit pattern; the
    // (shape_id, pose_index) tail makes ties deterministic
    hits.sort_by(|a, b| hit_key(a).cmp(&hit_key(b)));
    hits.truncate(k);
    Ok(hits)
}

/// Nearest rendering by L2 distance; ties resolve to the lowest
/// (shape_id, pose_index).
pub fn coarse_match(
    exemplar_id: &str,
    query: &HogDescriptor,
    renderings: &[RenderingEntry],
) -> Result<CoarseMatch, HogIndexError> {
    if renderings.is_empty() {
        return Err(HogIndexError::EmptyRenderings);
    }
    let best = top_k_hits(query, renderings, 1)?.remove(0);
    Ok(CoarseMatch {
        shape_id: best.shape_id,
        pose_index: best.pose_index,
        pose: best.pose,
        exemplar_id: exemplar_id.to_string(),
        distance: best.distance,
    })
}

/// Exact top-k reverse index, parallel over exemplars.
pub fn build_reverse_index(
    exemplars: &[ExemplarDescriptor],
    renderings: &[RenderingEntry],
    k: usize,
) -> Result<ReverseIndex, HogIndexError> {
    if k < 1 {
        return Err(HogIndexError::BadK);
    }
    let config = exemplars
        .first()
        .map(|e| e.descriptor.config)
        .or_else(|| renderings.first().map(|r| r.descriptor.config))
        .unwrap_or_default();
    let entries: Result<Vec<_>, HogIndexError> = exemplars
        .par_iter()
        .map(|e| Ok((e.exemplar_id.clone(), top_k_hits(&e.descriptor, renderings, k)?)))
        .collect();
    Ok(ReverseIndex {
        k,
        config,
        entries: entries?,
    })
}

/// Invert exemplar->renderings into shape -> candidate exemplars.
///
/// A (shape, exemplar) pair appears iff the exemplar's top-k holds at least
/// one rendering of that shape; only the closest pose per pair survives.
/// Per-shape lists are ascending by (distance, exemplar_id, pose_index).
pub fn invert_index(index: &ReverseIndex) -> BTreeMap<String, Vec<CoarseMatch>> {
    let mut out: BTreeMap<String, Vec<CoarseMatch>> = BTreeMap::new();
    for (exemplar_id, hits) in &index.entries {
        let mut seen_shapes: Vec<&str> = Vec::new();
        for hit in hits {
            // hits are ascending, so the first occurrence is the closest pose
            if seen_shapes.contains(&hit.shape_id.as_str()) {
                continue;
            }
            seen_shapes.push(&hit.shape_id);
            out.entry(hit.shape_id.clone()).or_default().push(CoarseMatch {
                shape_id: hit.shape_id.clone(),
                pose_index: hit.pose_index,
                pose: hit.pose,
                exemplar_id: exemplar_id.clone(),
                distance: hit.distance,
            });
        }
    }
    for matches in out.values_mut() {
        matches.sort_by(|a, b| {
            (a.distance.to_bits(), &a.exemplar_id, a.pose_index)
                .cmp(&(b.distance.to_bits(), &b.exemplar_id, b.pose_index))
        });
    }
    out
}

const INDEX_MAGIC: &[u8; 8] = b"SMHIDX01";

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, HogIndexError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, HogIndexError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, HogIndexError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(HogIndexError::Format(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| HogIndexError::Format("non-utf8 string".into()))
}

/// Serialize the index to the versioned little-endian binary format.
pub fn write_index(index: &ReverseIndex, w: &mut impl Write) -> Result<(), HogIndexError> {
    w.write_all(INDEX_MAGIC)?;
    let c = &index.config;
    write_u32(w, c.cells_x as u32)?;
    write_u32(w, c.cells_y as u32)?;
    write_u32(w, c.orientation_bins as u32)?;
    w.write_all(&[c.signed as u8])?;
    write_u32(w, c.working_size as u32)?;
    write_f64(w, c.blur_sigma as f64)?;
    write_u32(w, index.k as u32)?;
    write_u32(w, index.entries.len() as u32)?;
    for (exemplar_id, hits) in &index.entries {
        write_str(w, exemplar_id)?;
        write_u32(w, hits.len() as u32)?;
        for h in hits {
            write_str(w, &h.shape_id)?;
            write_u32(w, h.pose_index as u32)?;
            write_f64(w, h.pose.theta)?;
            write_f64(w, h.pose.phi)?;
            write_f64(w, h.pose.r)?;
            write_f64(w, h.pose.fov_x)?;
            write_f64(w, h.distance)?;
        }
    }
    Ok(())
}

pub fn read_index(r: &mut impl Read) -> Result<ReverseIndex, HogIndexError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(HogIndexError::Format("bad magic; not an index file".into()));
    }
    let cells_x = read_u32(r)? as usize;
    let cells_y = read_u32(r)? as usize;
    let orientation_bins = read_u32(r)? as usize;
    let mut signed = [0u8; 1];
    r.read_exact(&mut signed)?;
    let working_size = read_u32(r)? as usize;
    let blur_sigma = read_f64(r)? as f32;
    let config = HogConfig {
        cells_x,
        cells_y,
        orientation_bins,
        signed: signed[0] != 0,
        working_size,
        blur_sigma,
    };
    let k = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let exemplar_id = read_str(r)?;
        let n_hits = read_u32(r)? as usize;
        let mut hits = Vec::with_capacity(n_hits);
        for _ in 0..n_hits {
            let shape_id = read_str(r)?;
            let pose_index = read_u32(r)? as usize;
            let pose = SphericalPose {
                theta: read_f64(r)?,
                phi: read_f64(r)?,
                r: read_f64(r)?,
                fov_x: read_f64(r)?,
            };
            let distance = read_f64(r)?;
            hits.push(IndexHit {
                shape_id,
                pose_index,
                pose,
                distance,
            });
        }
        entries.push((exemplar_id, hits));
    }
    Ok(ReverseIndex { k, config, entries })
}

pub fn save_index(index: &ReverseIndex, path: &std::path::Path) -> Result<(), HogIndexError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_index(index, &mut file)
}

pub fn load_index(path: &std::path::Path) -> Result<ReverseIndex, HogIndexError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_index(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk_image(w: u32, h: u32, cx: f64, cy: f64, r: f64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if (dx * dx + dy * dy).sqrt() <= r {
                image::Rgb([30, 30, 30])
            } else {
                image::Rgb([255, 255, 255])
            }
        })
    }

    fn stripe_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, _| {
            if (x / 8) % 2 == 0 {
                image::Rgb([0, 0, 0])
            } else {
                image::Rgb([255, 255, 255])
            }
        })
    }

    #[test]
    fn default_config_has_1352_dimensions() {
        let config = HogConfig::default();
        assert_eq!(config.descriptor_len(), 1352);
        let d = hog(&disk_image(64, 64, 32.0, 32.0, 14.0), &config).unwrap();
        assert_eq!(d.values.len(), 1352);
        assert!(d.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let img = RgbImage::from_pixel(64, 64, image::Rgb([128, 128, 128]));
        let d = hog(&img, &HogConfig::default()).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
        assert!(d.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(matches!(
            hog(&img, &HogConfig::default()),
            Err(HogIndexError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn one_pixel_translation_stays_near() {
        let config = HogConfig::default();
        let base = hog(&disk_image(64, 64, 28.0, 30.0, 12.0), &config).unwrap();
        let shifted = hog(&disk_image(64, 64, 29.0, 30.0, 12.0), &config).unwrap();
        let unrelated = hog(&stripe_image(64, 64), &config).unwrap();
        let d_near = l2_distance(&base, &shifted).unwrap();
        let d_far = l2_distance(&base, &unrelated).unwrap();
        assert!(
            d_near < 0.15 * d_far,
            "near {d_near} vs far {d_far} ratio {}",
            d_near / d_far
        );
    }

    #[test]
    fn hog_is_deterministic() {
        let img = disk_image(64, 64, 30.0, 26.0, 13.0);
        let a = hog(&img, &HogConfig::default()).unwrap();
        let b = hog(&img, &HogConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    fn fake_descriptor(values: Vec<f32>) -> HogDescriptor {
        HogDescriptor {
            values,
            config: HogConfig::default(),
        }
    }

    fn pose(i: usize) -> SphericalPose {
        SphericalPose {
            theta: i as f64 * 0.1,
            phi: 1.0,
            r: 1.5,
            fov_x: 55.0,
        }
    }

    fn entry(shape: &str, i: usize, values: Vec<f32>) -> RenderingEntry {
        RenderingEntry {
            shape_id: shape.to_string(),
            pose_index: i,
            pose: pose(i),
            descriptor: fake_descriptor(values),
        }
    }

    #[test]
    fn matching_own_rendering_returns_distance_zero() {
        let renderings = vec![
            entry("a", 0, vec![1.0, 0.0]),
            entry("b", 1, vec![0.0, 1.0]),
        ];
        let m = coarse_match("e", &fake_descriptor(vec![0.0, 1.0]), &renderings).unwrap();
        assert_eq!(m.shape_id, "b");
        assert_eq!(m.distance, 0.0);
    }

    #[test]
    fn nearer_of_two_candidates_wins() {
        let renderings = vec![
            entry("a", 0, vec![3.0, 0.0]),
            entry("b", 1, vec![5.0, 0.0]),
        ];
        let m = coarse_match("e", &fake_descriptor(vec![0.0, 0.0]), &renderings).unwrap();
        assert_eq!(m.shape_id, "a");
        assert_eq!(m.distance, 3.0);
    }

    #[test]
    fn empty_rendering_set_is_an_error() {
        assert!(matches!(
            coarse_match("e", &fake_descriptor(vec![1.0]), &[]),
            Err(HogIndexError::EmptyRenderings)
        ));
    }

    fn random_descriptor(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        (0..dim).map(|_| rng.random_range(0.0f32..1.0)).collect()
    }

    #[test]
    fn coarse_match_equals_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let renderings: Vec<RenderingEntry> = (0..100)
            .map(|i| entry(&format!("s{:02}", i % 10), i, random_descriptor(&mut rng, 16)))
            .collect();
        let query = fake_descriptor(random_descriptor(&mut rng, 16));

        // independent oracle: plain scan keeping the first strict minimum
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, r) in renderings.iter().enumerate() {
            let d: f64 = query
                .values
                .iter()
                .zip(&r.descriptor.values)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }

        let m = coarse_match("e", &query, &renderings).unwrap();
        assert_eq!(m.shape_id, renderings[best].shape_id);
        assert_eq!(m.pose_index, renderings[best].pose_index);
        assert!((m.distance - best_d).abs() < 1e-12);
    }

    #[test]
    fn k1_index_agrees_with_coarse_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let renderings: Vec<RenderingEntry> = (0..30)
            .map(|i| entry(&format!("s{i}"), i, random_descriptor(&mut rng, 8)))
            .collect();
        let exemplars: Vec<ExemplarDescriptor> = (0..6)
            .map(|i| ExemplarDescriptor {
                exemplar_id: format!("e{i}"),
                descriptor: fake_descriptor(random_descriptor(&mut rng, 8)),
            })
            .collect();
        let index = build_reverse_index(&exemplars, &renderings, 1).unwrap();
        for e in &exemplars {
            let hits = index.hits_for(&e.exemplar_id).unwrap();
            assert_eq!(hits.len(), 1);
            let m = coarse_match(&e.exemplar_id, &e.descriptor, &renderings).unwrap();
            assert_eq!(hits[0].shape_id, m.shape_id);
            assert_eq!(hits[0].pose_index, m.pose_index);
            assert_eq!(hits[0].distance, m.distance);
        }
    }

    #[test]
    fn oversized_k_returns_all_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let renderings: Vec<RenderingEntry> = (0..12)
            .map(|i| entry(&format!("s{i}"), i, random_descriptor(&mut rng, 8)))
            .collect();
        let exemplars = vec![ExemplarDescriptor {
            exemplar_id: "e0".into(),
            descriptor: fake_descriptor(random_descriptor(&mut rng, 8)),
        }];
        let index = build_reverse_index(&exemplars, &renderings, 100).unwrap();
        let hits = index.hits_for("e0").unwrap();
        assert_eq!(hits.len(), 12);
        for w in hits.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
    }

    #[test]
    fn index_matches_brute_force_topk_on_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let renderings: Vec<RenderingEntry> = (0..200)
            .map(|i| entry(&format!("s{:02}", i % 25), i, random_descriptor(&mut rng, 12)))
            .collect();
        let exemplars: Vec<ExemplarDescriptor> = (0..50)
            .map(|i| ExemplarDescriptor {
                exemplar_id: format!("e{:02}", i),
                descriptor: fake_descriptor(random_descriptor(&mut rng, 12)),
            })
            .collect();
        let k = 7;
        let index = build_reverse_index(&exemplars, &renderings, k).unwrap();

        for e in &exemplars {
            // oracle: full sort of all pairs
            let mut all: Vec<(f64, &str, usize)> = renderings
                .iter()
                .map(|r| {
                    let d: f64 = e
                        .descriptor
                        .values
                        .iter()
                        .zip(&r.descriptor.values)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    (d, r.shape_id.as_str(), r.pose_index)
                })
                .collect();
            all.sort_by(|a, b| {
                (a.0.to_bits(), a.1, a.2).cmp(&(b.0.to_bits(), b.1, b.2))
            });
            let hits = index.hits_for(&e.exemplar_id).unwrap();
            assert_eq!(hits.len(), k);
            for (hit, want) in hits.iter().zip(&all) {
                assert_eq!(hit.shape_id, want.1);
                assert_eq!(hit.pose_index, want.2);
                assert!((hit.distance - want.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inversion_maps_top1_shape_to_exemplar() {
        let renderings = vec![
            entry("shape_a", 0, vec![0.0, 0.0]),
            entry("shape_b", 1, vec![9.0, 9.0]),
        ];
        let exemplars = vec![ExemplarDescriptor {
            exemplar_id: "ex".into(),
            descriptor: fake_descriptor(vec![0.1, 0.0]),
        }];
        let index = build_reverse_index(&exemplars, &renderings, 1).unwrap();
        let inverted = invert_index(&index);
        assert_eq!(inverted.len(), 1);
        let matches = &inverted["shape_a"];
        assert_eq!(matches.len(), 1);
        assert_eq!(matches[0].exemplar_id, "ex");
        assert!(!inverted.contains_key("shape_b"));
    }

    #[test]
    fn inversion_keeps_only_closest_pose_per_shape() {
        let renderings = vec![
            entry("a", 0, vec![1.0, 0.0]),
            entry("a", 1, vec![2.0, 0.0]),
            entry("b", 2, vec![3.0, 0.0]),
        ];
        let exemplars = vec![ExemplarDescriptor {
            exemplar_id: "ex".into(),
            descriptor: fake_descriptor(vec![0.0, 0.0]),
        }];
        let index = build_reverse_index(&exemplars, &renderings, 3).unwrap();
        let inverted = invert_index(&index);
        assert_eq!(inverted["a"].len(), 1);
        assert_eq!(inverted["a"][0].pose_index, 0);
        assert_eq!(inverted["b"][0].pose_index, 2);
    }

    #[test]
    fn inversion_preserves_pair_multiset_after_pose_dedup() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let renderings: Vec<RenderingEntry> = (0..60)
            .map(|i| entry(&format!("s{}", i % 8), i, random_descriptor(&mut rng, 6)))
            .collect();
        let exemplars: Vec<ExemplarDescriptor> = (0..10)
            .map(|i| ExemplarDescriptor {
                exemplar_id: format!("e{i}"),
                descriptor: fake_descriptor(random_descriptor(&mut rng, 6)),
            })
            .collect();
        let index = build_reverse_index(&exemplars, &renderings, 9).unwrap();

        let mut from_index: Vec<(String, String)> = Vec::new();
        for (eid, hits) in &index.entries {
            let mut seen: Vec<&str> = Vec::new();
            for h in hits {
                if !seen.contains(&h.shape_id.as_str()) {
                    seen.push(&h.shape_id);
                    from_index.push((h.shape_id.clone(), eid.clone()));
                }
            }
        }
        from_index.sort();

        let inverted = invert_index(&index);
        let mut from_inverted: Vec<(String, String)> = inverted
            .iter()
            .flat_map(|(shape, ms)| {
                ms.iter().map(move |m| (shape.clone(), m.exemplar_id.clone()))
            })
            .collect();
        from_inverted.sort();

        assert_eq!(from_index, from_inverted);
    }

    #[test]
    fn identity_retrieval_for_index_member() {
        let img = disk_image(64, 64, 30.0, 32.0, 15.0);
        let config = HogConfig::default();
        let d = hog(&img, &config).unwrap();
        let renderings = vec![
            RenderingEntry {
                shape_id: "self".into(),
                pose_index: 0,
                pose: pose(0),
                descriptor: d.clone(),
            },
            entry("other", 1, vec![0.5; 1352]),
        ];
        let m = coarse_match("q", &hog(&img, &config).unwrap(), &renderings).unwrap();
        assert_eq!(m.shape_id, "self");
        assert_eq!(m.distance, 0.0);
    }

    #[test]
    fn binary_round_trip_preserves_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let renderings: Vec<RenderingEntry> = (0..20)
            .map(|i| entry(&format!("s{i}"), i, random_descriptor(&mut rng, 4)))
            .collect();
        let exemplars: Vec<ExemplarDescriptor> = (0..5)
            .map(|i| ExemplarDescriptor {
                exemplar_id: format!("e{i}"),
                descriptor: fake_descriptor(random_descriptor(&mut rng, 4)),
            })
            .collect();
        let index = build_reverse_index(&exemplars, &renderings, 4).unwrap();

        let mut bytes = Vec::new();
        write_index(&index, &mut bytes).unwrap();
        let back = read_index(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, index);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOTANIDX++++++++".to_vec();
        assert!(matches!(
            read_index(&mut bytes.as_slice()),
            Err(HogIndexError::Format(_))
        ));
    }
}
