//! Substance layer: canonical substance set, per-pixel substance
//! distributions from pluggable classifiers, remapping of arbitrary
//! classifier vocabularies onto the canonical set, and part-level substance
//! assignment by pixel overlap.

use crate::img::Mask;
use crate::raster::LabelMap;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Canonical substances, in fixed channel order.
pub const SUBSTANCES: [&str; 5] = ["leather", "fabric", "metal", "wood", "plastic"];
pub const N_SUBSTANCES: usize = 5;
/// Channel index of the background class in a `SubstanceMap`.
pub const BACKGROUND_CHANNEL: usize = N_SUBSTANCES;
/// Channels per pixel: the five substances plus background.
pub const MAP_CHANNELS: usize = N_SUBSTANCES + 1;

pub const LEATHER: usize = 0;
pub const FABRIC: usize = 1;
pub const METAL: usize = 2;
pub const WOOD: usize = 3;
pub const PLASTIC: usize = 4;

/// Index of a canonical substance by name.
pub fn substance_index(name: &str) -> Option<usize> {
    SUBSTANCES.iter().position(|&s| s == name)
}

#[derive(Debug, Error)]
pub enum SubstanceError {
    #[error("alias target '{0}' is not a canonical substance")]
    BadAlias(String),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("classifier '{classifier}' failed for exemplar '{exemplar}': {message}")]
    Plugin {
        classifier: String,
        exemplar: String,
        message: String,
    },
    #[error("substance map file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The canonical substance vocabulary plus an alias table folding
/// classifier-specific names (e.g. carpet) into canonical targets.
#[derive(Debug, Clone)]
pub struct SubstanceSet {
    aliases: BTreeMap<String, usize>,
}

impl Default for SubstanceSet {
    fn default() -> Self {
        let mut set = SubstanceSet {
            aliases: BTreeMap::new(),
        };
        set.add_alias("carpet", "fabric").unwrap();
        set
    }
}

impl SubstanceSet {
    pub fn empty() -> Self {
        SubstanceSet {
            aliases: BTreeMap::new(),
        }
    }

    pub fn add_alias(&mut self, name: &str, target: &str) -> Result<(), SubstanceError> {
        let idx =
            substance_index(target).ok_or_else(|| SubstanceError::BadAlias(target.into()))?;
        self.aliases.insert(name.to_string(), idx);
        Ok(())
    }

    /// Canonical channel for a label name: direct substances first, then
    /// aliases; None for anything else.
    pub fn resolve(&self, name: &str) -> Option<usize> {
        substance_index(name).or_else(|| self.aliases.get(name).copied())
    }
}

/// Per-pixel probability distribution over the five substances plus
/// background, pixel-major, `MAP_CHANNELS` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SubstanceMap {
    pub fn new(width: usize, height: usize) -> Self {
        SubstanceMap {
            width,
            height,
            data: vec![0.0; width * height * MAP_CHANNELS],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * MAP_CHANNELS;
        &self.data[base..base + MAP_CHANNELS]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let base = (y * self.width + x) * MAP_CHANNELS;
        &mut self.data[base..base + MAP_CHANNELS]
    }

    /// Max row-sum deviation from 1.
    pub fn normalization_error(&self) -> f64 {
        self.data
            .chunks_exact(MAP_CHANNELS)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Classifier output before canonical remapping: a distribution over an
/// arbitrary label vocabulary, pixel-major.
#[derive(Debug, Clone)]
pub struct RawSubstanceMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<String>,
    pub data: Vec<f64>,
}

impl RawSubstanceMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.labels.len();
        &self.data[base..base + self.labels.len()]
    }
}

/// Remap result: the canonical map plus the pixels whose entire mass fell
/// outside the canonical set (made uniform over the substances).
#[derive(Debug, Clone)]
pub struct RemapOutcome {
    pub map: SubstanceMap,
    pub flagged_pixels: Vec<usize>,
}

/// Fold aliases into canonical channels, zero everything non-canonical,
/// renormalize. The literal label "background" passes through to the
/// background channel. Rows with no surviving mass become uniform over the
/// substances and are flagged.
pub fn remap_substances(raw: &RawSubstanceMap, set: &SubstanceSet) -> RemapOutcome {
    let n_raw = raw.labels.len();
    let targets: Vec<Option<usize>> = raw
        .labels
        .iter()
        .map(|name| {
            if name == "background" {
                Some(BACKGROUND_CHANNEL)
            } else {
                set.resolve(name)
            }
        })
        .collect();

    let mut map = SubstanceMap::new(raw.width, raw.height);
    let mut flagged = Vec::new();
    for p in 0..raw.width * raw.height {
        let row = &raw.data[p * n_raw..(p + 1) * n_raw];
        debug_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-4);
        let out = &mut map.data[p * MAP_CHANNELS..(p + 1) * MAP_CHANNELS];
        for (v, target) in row.iter().zip(&targets) {
            if let Some(t) = target {
                out[*t] += v;
            }
        }
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            for v in out.iter_mut() {
                *v /= total;
            }
        } else {
            for v in out.iter_mut().take(N_SUBSTANCES) {
                *v = 1.0 / N_SUBSTANCES as f64;
            }
            flagged.push(p);
        }
    }
    RemapOutcome {
        map,
        flagged_pixels: flagged,
    }
}

/// Substance assigned to one material part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartSubstance {
    Known(usize),
    Unknown,
}

/// Per-part substance labels with the overlap evidence behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct PartSubstanceLabeling {
    /// Indexed by part id - 1 (part ids are 1-based; 0 is background).
    pub labels: Vec<PartSubstance>,
    /// Per-part pixel counts of the per-pixel argmax substance.
    pub histograms: Vec<[u64; N_SUBSTANCES]>,
    /// Per-part summed probability mass per substance (tiebreaker).
    pub mass: Vec<[f64; N_SUBSTANCES]>,
    /// Part ids labeled `Unknown` (no substance-foreground pixels).
    pub unknown_parts: Vec<u32>,
}

impl PartSubstanceLabeling {
    pub fn label_of(&self, part_id: u32) -> Option<PartSubstance> {
        self.labels.get(part_id as usize - 1).copied()
    }
}

/// Label each material part with the substance of most overlap: majority of
/// per-pixel argmax substances over the part's pixels. Pixels whose argmax
/// is background support no substance. Count ties resolve to the substance
/// with higher summed probability mass, then lexicographically by name.
/// Parts with no supporting pixels become `Unknown` and are reported.
pub fn aggregate_part_substance(
    parts: &LabelMap,
    substances: &SubstanceMap,
) -> Result<PartSubstanceLabeling, SubstanceError> {
    if parts.width != substances.width || parts.height != substances.height {
        return Err(SubstanceError::DimensionMismatch(
            parts.width,
            parts.height,
            substances.width,
            substances.height,
        ));
    }
    let n_parts = parts.label_count as usize;
    let mut histograms = vec![[0u64; N_SUBSTANCES]; n_parts];
    let mut mass = vec![[0.0f64; N_SUBSTANCES]; n_parts];

    for (p, &part) in parts.labels.iter().enumerate() {
        if part == 0 {
            continue;
        }
        let row = &substances.data[p * MAP_CHANNELS..(p + 1) * MAP_CHANNELS];
        let slot = part as usize - 1;
        for s in 0..N_SUBSTANCES {
            mass[slot][s] += row[s];
        }
        let mut argmax = 0usize;
        for c in 1..MAP_CHANNELS {
            if row[c] > row[argmax] {
                argmax = c;
            }
        }
        if argmax != BACKGROUND_CHANNEL {
            histograms[slot][argmax] += 1;
        }
    }

    let mut labels = Vec::with_capacity(n_parts);
    let mut unknown_parts = Vec::new();
    for part in 0..n_parts {
        let hist = &histograms[part];
        if hist.iter().all(|&c| c == 0) {
            labels.push(PartSubstance::Unknown);
            unknown_parts.push(part as u32 + 1);
            continue;
        }
        let mut best = 0usize;
        for s in 1..N_SUBSTANCES {
            let better = hist[s] > hist[best]
                || (hist[s] == hist[best]
                    && (mass[part][s] > mass[part][best]
                        || (mass[part][s] == mass[part][best]
                            && SUBSTANCES[s] < SUBSTANCES[best])));
            if better {
                best = s;
            }
        }
        labels.push(PartSubstance::Known(best));
    }

    Ok(PartSubstanceLabeling {
        labels,
        histograms,
        mass,
        unknown_parts,
    })
}

/// Per-pixel substance classification over a standardized exemplar.
/// Implementations declare reentrancy; the pipeline serializes calls to
/// non-reentrant ones.
pub trait SubstanceClassifier: Send + Sync {
    fn id(&self) -> &str;
    fn reentrant(&self) -> bool;
    fn classify(
        &self,
        exemplar_id: &str,
        image: &RgbImage,
        mask: &Mask,
    ) -> Result<SubstanceMap, SubstanceError>;
}

/// Reads precomputed substance maps from `dir/{exemplar_id}.smap`.
pub struct FixtureClassifier {
    pub dir: PathBuf,
}

impl SubstanceClassifier for FixtureClassifier {
    fn id(&self) -> &str {
        "fixture"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(
        &self,
        exemplar_id: &str,
        _image: &RgbImage,
        _mask: &Mask,
    ) -> Result<SubstanceMap, SubstanceError> {
        let path = self.dir.join(format!("{exemplar_id}.smap"));
        read_substance_map(&path).map_err(|e| SubstanceError::Plugin {
            classifier: "fixture".into(),
            exemplar: exemplar_id.into(),
            message: e.to_string(),
        })
    }
}

/// Coarse color heuristic for demos: achromatic pixels split by luminance
/// (bright plastic, mid metal, dark leather), brown-family pixels go to
/// wood, remaining dark pixels to leather, the colorful rest to fabric.
/// The winning substance gets 0.7, the others split the remainder.
pub struct ColorPriorClassifier;

const COLOR_PRIOR_WIN: f64 = 0.7;

impl SubstanceClassifier for ColorPriorClassifier {
    fn id(&self) -> &str {
        "color-prior"
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
                w,
                h,
                mask.width,
                mask.height,
            ));
        }
        let mut map = SubstanceMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let out = map.at_mut(x, y);
                if !mask.get(x, y) {
                    out[BACKGROUND_CHANNEL] = 1.0;
                    continue;
                }
                let [r, g, b] = image.get_pixel(x as u32, y as u32).0;
                let (r, g, b) = (r as f64, g as f64, b as f64);
                let lum = (r + g + b) / 3.0;
                let spread = r.max(g).max(b) - r.min(g).min(b);
                let winner = if spread < 18.0 && lum > 230.0 {
                    PLASTIC
                } else if spread < 18.0 && lum < 60.0 {
                    LEATHER
                } else if spread < 18.0 {
                    METAL
                } else if r > b + 20.0 && g > b && g < r && (50.0..=210.0).contains(&lum) {
                    WOOD
                } else if lum < 80.0 {
                    LEATHER
                } else {
                    FABRIC
                };
                let rest = (1.0 - COLOR_PRIOR_WIN) / (N_SUBSTANCES - 1) as f64;
                for s in 0..N_SUBSTANCES {
                    out[s] = if s == winner { COLOR_PRIOR_WIN } else { rest };
                }
            }
        }
        Ok(map)
    }
}

/// External classifier invoked as a subprocess: the command is run with two
/// arguments, the exemplar image path (PNG) and the output map path, and
/// must exit 0 after writing a substance map there.
pub struct SubprocessClassifier {
    pub command: String,
    pub classifier_id: String,
}

impl SubstanceClassifier for SubprocessClassifier {
    fn id(&self) -> &str {
        &self.classifier_id
    }

    fn reentrant(&self) -> bool {
        false
    }

    fn classify(
        &self,
        exemplar_id: &str,
        image: &RgbImage,
        _mask: &Mask,
    ) -> Result<SubstanceMap, SubstanceError> {
        let fail = |message: String| SubstanceError::Plugin {
            classifier: self.classifier_id.clone(),
            exemplar: exemplar_id.into(),
            message,
        };
        let dir = std::env::temp_dir().join(format!(
            "shapemat-classify-{}-{}",
            std::process::id(),
            exemplar_id.replace(['/', '\\'], "_")
        ));
        std::fs::create_dir_all(&dir)?;
        let image_path = dir.join("exemplar.png");
        let map_path = dir.join("out.smap");
        image
            .save(&image_path)
            .map_err(|e| fail(format!("writing exemplar image: {e}")))?;
        let status = std::process::Command::new(&self.command)
            .arg(&image_path)
            .arg(&map_path)
            .status()
            .map_err(|e| fail(format!("spawning '{}': {e}", self.command)))?;
        if !status.success() {
            return Err(fail(format!("exit status {status}")));
        }
        let map = read_substance_map(&map_path).map_err(|e| fail(e.to_string()))?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok(map)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    channels: Vec<String>,
}

const MAP_MAGIC: &[u8; 8] = b"SMSUBM01";

fn channel_names() -> Vec<String> {
    SUBSTANCES
        .iter()
        .map(|s| s.to_string())
        .chain(std::iter::once("background".to_string()))
        .collect()
}

/// Write the float binary at `path` and a JSON sidecar naming the channels
/// at `{path}.json`.
pub fn write_substance_map(map: &SubstanceMap, path: &Path) -> Result<(), SubstanceError> {
    let mut bytes: Vec<u8> = Vec::with_capacity(8 + 8 + map.data.len() * 4);
    bytes.extend_from_slice(MAP_MAGIC);
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    for &v in &map.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar = MapSidecar {
        format: "shapemat-substance-map".into(),
        version: 1,
        width: map.width,
        height: map.height,
        channels: channel_names(),
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_substance_map(path: &Path) -> Result<SubstanceMap, SubstanceError> {
    let sidecar: MapSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if sidecar.channels != channel_names() {
        return Err(SubstanceError::Format(format!(
            "unexpected channels {:?}",
            sidecar.channels
        )));
    }
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAP_MAGIC {
        return Err(SubstanceError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let width = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let height = u32::from_le_bytes(b4) as usize;
    if width != sidecar.width || height != sidecar.height {
        return Err(SubstanceError::Format(
            "sidecar dimensions disagree with binary header".into(),
        ));
    }
    let n = width * height * MAP_CHANNELS;
    if n > 1 << 28 {
        return Err(SubstanceError::Format("implausible size".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Ok(SubstanceMap {
        width,
        height,
        data,
    })
}

/// Serialization helper used where a trait object must be written (never
/// read back); the binary format is the portable representation.
pub fn write_substance_map_to(
    map: &SubstanceMap,
    w: &mut impl Write,
) -> Result<(), SubstanceError> {
    w.write_all(MAP_MAGIC)?;
    w.write_all(&(map.width as u32).to_le_bytes())?;
    w.write_all(&(map.height as u32).to_le_bytes())?;
    for &v in &map.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}
