//! Exemplar photograph ingestion: foreground masking against near-white
//! backgrounds, square cropping to a standard resolution, and greedy
//! HOG-distance duplicate removal.

use crate::hogindex::{self, HogConfig, HogDescriptor};
use crate::img::Mask;
use crate::raster;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Background threshold: a pixel is background when its darkest channel is
/// at least this bright. Product photos have near-white, not pure-white,
/// backgrounds.
pub const DEFAULT_WHITE_THRESHOLD: u8 = 247;

/// Standard exemplar resolution.
pub const DEFAULT_EXEMPLAR_SIZE: u32 = 1000;

/// Descriptors for dedup are computed on this downscale and unit-normalized
/// so the distance threshold is scale-meaningful.
pub const DEDUP_WORKING_SIZE: u32 = 256;

/// Default dedup L2 distance threshold on unit-normalized descriptors.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ExemplarError {
    #[error("no foreground: every pixel is at or above the white threshold")]
    NoForeground,
    #[error("image is {w}x{h}; masks and images must be non-empty")]
    EmptyImage { w: u32, h: u32 },
    #[error("crop: {0}")]
    Crop(#[from] raster::RasterError),
    #[error("descriptor: {0}")]
    Descriptor(#[from] hogindex::HogIndexError),
}

/// A standardized exemplar photograph: square image, binary foreground
/// mask of identical size, and source provenance.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub id: String,
    pub image: RgbImage,
    pub mask: Mask,
    pub source_uri: String,
}

/// Manifest row for ingest runs; `removed_by` names the kept exemplar that
/// shadowed this one during dedup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_uri: String,
    pub removed_by: Option<String>,
}

/// Dedup removal record: `removed` was within `distance` of `kept_by`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedPair {
    pub removed: String,
    pub kept_by: String,
    pub distance: f64,
}

/// Threshold the near-white background away and keep meaningful foreground
/// components.
///
/// A pixel is foreground iff `min(R, G, B) < white_threshold`. The largest
/// 4-connected component always survives; smaller components survive only at
/// >= 0.1% of the image area, dropping isolated specks.
pub fn foreground_mask(image: &RgbImage, white_threshold: u8) -> Result<Mask, ExemplarError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(ExemplarError::EmptyImage {
            w: image.width(),
            h: image.height(),
        });
    }
    let raw: Vec<bool> = image
        .pixels()
        .map(|p| p.0.iter().copied().min().unwrap() < white_threshold)
        .collect();

    // label 4-connected components
    let mut component = vec![u32::MAX; w * h];
    let mut sizes: Vec<usize> = Vec::new();
    for start in 0..w * h {
        if !raw[start] || component[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        let mut stack = vec![start];
        component[start] = id;
        while let Some(at) = stack.pop() {
            size += 1;
            let (x, y) = (at % w, at / w);
            let mut visit = |nx: i64, ny: i64| {
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let n = ny as usize * w + nx as usize;
                    if raw[n] && component[n] == u32::MAX {
                        component[n] = id;
                        stack.push(n);
                    }
                }
            };
            visit(x as i64 - 1, y as i64);
            visit(x as i64 + 1, y as i64);
            visit(x as i64, y as i64 - 1);
            visit(x as i64, y as i64 + 1);
        }
        sizes.push(size);
    }
    if sizes.is_empty() {
        return Err(ExemplarError::NoForeground);
    }

    let largest = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(i, &s)| (s, usize::MAX - i))
        .map(|(i, _)| i as u32)
        .unwrap();
    let min_size = ((w * h) as f64 * 0.001).ceil() as usize;
    let keep: Vec<bool> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| i as u32 == largest || s >= min_size)
        .collect();

    let data = component
        .iter()
        .map(|&c| c != u32::MAX && keep[c as usize])
        .collect();
    Ok(Mask {
        width: w,
        height: h,
        data,
    })
}

/// Square-crop the image and mask around the mask and resize to
/// `out_size` (bilinear for the image, nearest-neighbor for the mask).
pub fn standardize(
    id: &str,
    source_uri: &str,
    image: &RgbImage,
    mask: &Mask,
    out_size: u32,
) -> Result<Exemplar, ExemplarError> {
    let cropped_image = raster::square_crop_image(image, mask, out_size)?;
    let cropped_mask = raster::square_crop_mask(mask, mask, out_size)?;
    Ok(Exemplar {
        id: id.to_string(),
        image: cropped_image,
        mask: cropped_mask,
        source_uri: source_uri.to_string(),
    })
}

/// Dedup descriptor: HOG of the image downscaled to
/// [`DEDUP_WORKING_SIZE`], unit-normalized.
pub fn dedup_descriptor(image: &RgbImage) -> Result<HogDescriptor, ExemplarError> {
    let small = image::imageops::resize(
        image,
        DEDUP_WORKING_SIZE,
        DEDUP_WORKING_SIZE,
        image::imageops::FilterType::Triangle,
    );
    Ok(hogindex::hog(&small, &HogConfig::default())?.normalized())
}

/// Greedy duplicate removal in input order: an exemplar is dropped iff its
/// descriptor is within `threshold` of an already-kept one, so the first
/// occurrence always survives.
pub fn dedup(
    exemplars: Vec<Exemplar>,
    threshold: f64,
) -> Result<(Vec<Exemplar>, Vec<RemovedPair>), ExemplarError> {
    let descriptors: Result<Vec<HogDescriptor>, ExemplarError> = exemplars
        .par_iter()
        .map(|e| dedup_descriptor(&e.image))
        .collect();
    let descriptors = descriptors?;

    let mut kept: Vec<Exemplar> = Vec::new();
    let mut kept_desc: Vec<HogDescriptor> = Vec::new();
    let mut removed: Vec<RemovedPair> = Vec::new();
    for (exemplar, desc) in exemplars.into_iter().zip(descriptors) {
        let mut shadowed: Option<(usize, f64)> = None;
        for (ki, kd) in kept_desc.iter().enumerate() {
            let d = hogindex::l2_distance(&desc, kd)?;
            if d < threshold {
                shadowed = Some((ki, d));
                break;
            }
        }
        match shadowed {
            Some((ki, d)) => removed.push(RemovedPair {
                removed: exemplar.id,
                kept_by: kept[ki].id.clone(),
                distance: d,
            }),
            None => {
                kept.push(exemplar);
                kept_desc.push(desc);
            }
        }
    }
    Ok((kept, removed))
}

/// Manifest covering both kept and removed exemplars.
pub fn manifest(kept: &[Exemplar], removed: &[RemovedPair]) -> Vec<ManifestEntry> {
    let mut entries: Vec<ManifestEntry> = kept
        .iter()
        .map(|e| ManifestEntry {
            id: e.id.clone(),
            source_uri: e.source_uri.clone(),
            removed_by: None,
        })
        .collect();
    for r in removed {
        entries.push(ManifestEntry {
            id: r.removed.clone(),
            source_uri: String::new(),
            removed_by: Some(r.kept_by.clone()),
        });
    }
    entries
}
