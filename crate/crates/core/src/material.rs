//! Material library, color-signature baseline matchers, substance-weighted
//! ranking, and the multitask loss mathematics with analytic gradients.

use crate::img::Mask;
use crate::substance::{substance_index, N_SUBSTANCES, SUBSTANCES};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const HIST_BINS: usize = 16;
/// Signature histogram length: three color channels, 16 bins each.
pub const HIST_LEN: usize = 3 * HIST_BINS;

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("material '{id}': unknown substance tag '{substance}'")]
    UnknownSubstance { id: String, substance: String },
    #[error("duplicate material id '{0}'")]
    DuplicateId(String),
    #[error("material '{id}': scale {scale} must exceed 1")]
    BadScale { id: String, scale: f64 },
    #[error("material '{id}': bad signature: {reason}")]
    BadSignature { id: String, reason: String },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("dimension mismatch: image {0}x{1} vs mask {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("aligned lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score vector has {got} entries, library implies {expected}")]
    ScoreLength { expected: usize, got: usize },
    #[error("unknown material id '{0}'")]
    UnknownId(String),
    #[error("target index {0} out of range for {1} classes")]
    TargetOutOfRange(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Color signature measured from a reference swatch render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSignature {
    pub median: [f64; 3],
    /// 3x16 bins, channel-major, sums to 1 (each channel block to 1/3).
    pub histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecord {
    pub id: String,
    pub name: String,
    pub substance: String,
    /// UV scale value, > 1.
    pub scale: f64,
    pub signature: MaterialSignature,
    /// Free-form rendering metadata passed through to scene emission.
    pub brdf_meta: serde_json::Value,
}

/// Immutable after load; lookups by id and cached substance indices.
#[derive(Debug, Clone)]
pub struct MaterialLibrary {
    records: Vec<MaterialRecord>,
    by_id: BTreeMap<String, usize>,
    substance_idx: Vec<usize>,
}

impl MaterialLibrary {
    pub fn from_records(records: Vec<MaterialRecord>) -> Result<Self, MaterialError> {
        let mut by_id = BTreeMap::new();
        let mut substance_idx = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let s = substance_index(&r.substance).ok_or_else(|| {
                MaterialError::UnknownSubstance {
                    id: r.id.clone(),
                    substance: r.substance.clone(),
                }
            })?;
            substance_idx.push(s);
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(MaterialError::DuplicateId(r.id.clone()));
            }
            if !(r.scale > 1.0) {
                return Err(MaterialError::BadScale {
                    id: r.id.clone(),
                    scale: r.scale,
                });
            }
            if r.signature.histogram.len() != HIST_LEN {
                return Err(MaterialError::BadSignature {
                    id: r.id.clone(),
                    reason: format!("histogram length {}", r.signature.histogram.len()),
                });
            }
            let sum: f64 = r.signature.histogram.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MaterialError::BadSignature {
                    id: r.id.clone(),
                    reason: format!("histogram sums to {sum}"),
                });
            }
        }
        Ok(MaterialLibrary {
            records,
            by_id,
            substance_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, i: usize) -> &MaterialRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[MaterialRecord] {
        &self.records
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Cached canonical substance index of material `i`.
    pub fn substance_of(&self, i: usize) -> usize {
        self.substance_idx[i]
    }

    /// Index of the background class in score vectors (one past the
    /// materials).
    pub fn background_index(&self) -> usize {
        self.records.len()
    }

    pub fn substance_counts(&self) -> [usize; N_SUBSTANCES] {
        let mut counts = [0usize; N_SUBSTANCES];
        for &s in &self.substance_idx {
            counts[s] += 1;
        }
        counts
    }
}

/// Load and validate a JSON manifest (array of records). Per-substance
/// counts are logged; an empty manifest loads but warns.
pub fn load_material_library(path: &Path) -> Result<MaterialLibrary, MaterialError> {
    let records: Vec<MaterialRecord> = serde_json::from_slice(&std::fs::read(path)?)?;
    let lib = MaterialLibrary::from_records(records)?;
    if lib.is_empty() {
        log::warn!("material manifest {} is empty", path.display());
    } else {
        let c = lib.substance_counts();
        log::info!(
            "loaded {} materials ({} leather, {} fabric, {} metal, {} wood, {} plastic)",
            lib.len(),
            c[0],
            c[1],
            c[2],
            c[3],
            c[4]
        );
    }
    Ok(lib)
}

/// Per-substance sizes of the reference library: leather, fabric, metal,
/// wood, plastic.
pub const REFERENCE_COUNTS: [usize; N_SUBSTANCES] = [48, 154, 86, 105, 60];

/// Deterministic reference library: 453 records with synthetic signatures.
/// Medians are substance-themed with a per-record seeded jitter; histograms
/// concentrate around the median's bins.
pub fn reference_library() -> MaterialLibrary {
    use rand::{Rng, SeedableRng};
    let base: [[f64; 3]; N_SUBSTANCES] = [
        [72.0, 44.0, 32.0],    // leather: dark warm brown
        [150.0, 110.0, 150.0], // fabric: varied mid tones
        [168.0, 170.0, 176.0], // metal: achromatic
        [139.0, 90.0, 43.0],   // wood: brown
        [200.0, 190.0, 180.0], // plastic: light neutral
    ];
    let families = ["leather", "cloth", "metal", "wood", "plastic"];
    let mut records = Vec::new();
    for (s, &count) in REFERENCE_COUNTS.iter().enumerate() {
        for k in 0..count {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                0x5EED_0000 + (s as u64) * 1000 + k as u64,
            );
            let mut median = [0.0f64; 3];
            for (c, m) in median.iter_mut().enumerate() {
                let jitter: f64 = rng.random_range(-44.0..44.0);
                *m = (base[s][c] + jitter).clamp(8.0, 247.0).round();
            }
            let id = format!("{}-{:03}", SUBSTANCES[s], k + 1);
            let name = format!(
                "{} {}",
                SUBSTANCES[s]
                    .chars()
                    .enumerate()
                    .map(|(i, ch)| if i == 0 { ch.to_ascii_uppercase() } else { ch })
                    .collect::<String>(),
                k + 1
            );
            let scale = 1.25 + rng.random_range(0..8) as f64 * 0.25;
            let histogram = histogram_around_median(&median);
            let family = families[s.min(families.len() - 1)];
            records.push(MaterialRecord {
                id: id.clone(),
                name,
                substance: SUBSTANCES[s].to_string(),
                scale,
                signature: MaterialSignature { median, histogram },
                brdf_meta: serde_json::json!({
                    "family": family,
                    "albedo_map": format!("maps/{id}_albedo.png"),
                }),
            });
        }
    }
    MaterialLibrary::from_records(records).expect("reference library is valid")
}

/// Histogram with 0.7 mass in each channel's median bin and 0.15 in each
/// neighbor (edge mass folded inward), scaled so the total is 1.
fn histogram_around_median(median: &[f64; 3]) -> Vec<f64> {
    let mut h = vec![0.0f64; HIST_LEN];
    for (c, &m) in median.iter().enumerate() {
        let bin = ((m as usize) >> 4).min(HIST_BINS - 1);
        let block = &mut h[c * HIST_BINS..(c + 1) * HIST_BINS];
        block[bin] += 0.7;
        if bin > 0 {
            block[bin - 1] += 0.15;
        } else {
            block[bin] += 0.15;
        }
        if bin + 1 < HIST_BINS {
            block[bin + 1] += 0.15;
        } else {
            block[bin] += 0.15;
        }
    }
    for v in h.iter_mut() {
        *v /= 3.0;
    }
    h
}

/// Serialize the reference library manifest; stable bytes for a given
/// serde_json version (pretty, field order fixed by declaration).
pub fn reference_manifest_bytes() -> Vec<u8> {
    let lib = reference_library();
    let mut bytes = serde_json::to_vec_pretty(lib.records()).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Classifier scores over materials plus a trailing background entry.
/// Material entries are finite; the background entry may be -inf (it is
/// filtered from every ranking). `substance_logits` is an optional
/// substance-head channel used by metrics when present.
#[derive(Debug, Clone)]
pub struct MaterialScores {
    pub scores: Vec<f64>,
    pub provenance: String,
    pub substance_logits: Option<Vec<f64>>,
}

impl MaterialScores {
    fn check(&self, lib: &MaterialLibrary) -> Result<(), MaterialError> {
        if self.scores.len() != lib.len() + 1 {
            return Err(MaterialError::ScoreLength {
                expected: lib.len() + 1,
                got: self.scores.len(),
            });
        }
        Ok(())
    }
}

fn masked_channels(
    image: &RgbImage,
    mask: &Mask,
) -> Result<[Vec<u8>; 3], MaterialError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w != mask.width || h != mask.height {
        return Err(MaterialError::DimensionMismatch(w, h, mask.width, mask.height));
    }
    let mut chans: [Vec<u8>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let px = image.get_pixel(x as u32, y as u32).0;
                for c in 0..3 {
                    chans[c].push(px[c]);
                }
            }
        }
    }
    if chans[0].is_empty() {
        return Err(MaterialError::EmptyMask);
    }
    Ok(chans)
}

/// Per-channel median of the masked pixels (lower median for even counts).
pub fn measure_median(image: &RgbImage, mask: &Mask) -> Result<[f64; 3], MaterialError> {
    let mut chans = masked_channels(image, mask)?;
    let mut median = [0.0f64; 3];
    for (c, chan) in chans.iter_mut().enumerate() {
        chan.sort_unstable();
        median[c] = chan[(chan.len() - 1) / 2] as f64;
    }
    Ok(median)
}

/// Normalized 3x16 histogram of the masked pixels (total mass 1).
pub fn measure_histogram(image: &RgbImage, mask: &Mask) -> Result<Vec<f64>, MaterialError> {
    let chans = masked_channels(image, mask)?;
    let n = chans[0].len();
    let mut h = vec![0.0f64; HIST_LEN];
    for (c, chan) in chans.iter().enumerate() {
        for &v in chan {
            h[c * HIST_BINS + (v >> 4) as usize] += 1.0;
        }
    }
    for v in h.iter_mut() {
        *v /= (3 * n) as f64;
    }
    Ok(h)
}

/// Signature for a material from its rendered swatch.
pub fn signature_from_swatch(
    image: &RgbImage,
    mask: &Mask,
) -> Result<MaterialSignature, MaterialError> {
    Ok(MaterialSignature {
        median: measure_median(image, mask)?,
        histogram: measure_histogram(image, mask)?,
    })
}

/// Baseline matcher: score(m) = -|median(masked pixels) - m.median|_2.
/// Deliberately blind to specular highlights skewing the median.
pub fn median_color_match(
    image: &RgbImage,
    mask: &Mask,
    lib: &MaterialLibrary,
) -> Result<MaterialScores, MaterialError> {
    let med = measure_median(image, mask)?;
    let mut scores: Vec<f64> = lib
        .records()
        .iter()
        .map(|r| {
            let d2: f64 = med
                .iter()
                .zip(&r.signature.median)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            -d2.sqrt()
        })
        .collect();
    scores.push(f64::NEG_INFINITY);
    Ok(MaterialScores {
        scores,
        provenance: "median-color".into(),
        substance_logits: None,
    })
}

const CHI2_SMOOTHING: f64 = 1e-10;

pub fn chi_squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d / (x + y + CHI2_SMOOTHING)
        })
        .sum()
}

/// Histogram matcher: score(m) = -chi2(hist(masked pixels), m.histogram).
pub fn histogram_match(
    image: &RgbImage,
    mask: &Mask,
    lib: &MaterialLibrary,
) -> Result<MaterialScores, MaterialError> {
    let h = measure_histogram(image, mask)?;
    let mut scores: Vec<f64> = lib
        .records()
        .iter()
        .map(|r| -chi_squared(&h, &r.signature.histogram))
        .collect();
    scores.push(f64::NEG_INFINITY);
    Ok(MaterialScores {
        scores,
        provenance: "histogram".into(),
        substance_logits: None,
    })
}

/// Softmax tolerant of -inf entries (they get probability 0).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Material indices sorted by descending score; ties resolve by id;
/// background filtered.
pub fn rank_materials(
    scores: &MaterialScores,
    lib: &MaterialLibrary,
) -> Result<Vec<usize>, MaterialError> {
    scores.check(lib)?;
    let mut order: Vec<usize> = (0..lib.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then_with(|| lib.record(a).id.cmp(&lib.record(b).id))
    });
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedMaterial {
    pub index: usize,
    pub probability: f64,
}

/// p(m) proportional to softmax(scores)(m) * conf(q_m), renormalized over
/// materials, descending, ties by id. Zero-probability entries are dropped
/// (a one-hot confidence yields a single-substance ranking).
pub fn substance_weighted_ranking(
    scores: &MaterialScores,
    substance_conf: &[f64; N_SUBSTANCES],
    lib: &MaterialLibrary,
) -> Result<Vec<RankedMaterial>, MaterialError> {
    scores.check(lib)?;
    let probs = softmax(&scores.scores);
    let mut weighted: Vec<RankedMaterial> = (0..lib.len())
        .map(|i| RankedMaterial {
            index: i,
            probability: probs[i] * substance_conf[lib.substance_of(i)],
        })
        .collect();
    let total: f64 = weighted.iter().map(|r| r.probability).sum();
    if total > 0.0 {
        for r in weighted.iter_mut() {
            r.probability /= total;
        }
    }
    weighted.retain(|r| r.probability > 0.0);
    weighted.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| lib.record(a.index).id.cmp(&lib.record(b.index).id))
    });
    Ok(weighted)
}

/// Substance distribution implied by material scores: softmax mass summed
/// per substance, background excluded, renormalized.
pub fn implied_substance(
    scores: &MaterialScores,
    lib: &MaterialLibrary,
) -> Result<[f64; N_SUBSTANCES], MaterialError> {
    scores.check(lib)?;
    let probs = softmax(&scores.scores);
    let mut out = [0.0f64; N_SUBSTANCES];
    for i in 0..lib.len() {
        out[lib.substance_of(i)] += probs[i];
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for v in out.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Numerically stable cross entropy; gradient = softmax(logits) - one_hot.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), MaterialError> {
    if target >= logits.len() {
        return Err(MaterialError::TargetOutOfRange(target, logits.len()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&x| (x - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

pub const DEFAULT_S_M: f64 = 0.0;
pub const DEFAULT_S_S: f64 = -1.0;

#[derive(Debug, Clone)]
pub struct MultitaskLossState {
    pub material_logits: Vec<f64>,
    pub substance_logits: Vec<f64>,
    pub material_target: usize,
    pub substance_target: usize,
    /// Log variances of the two task noise terms.
    pub s_m: f64,
    pub s_s: f64,
    /// Weight of the substance term in the fixed variant.
    pub lambda: f64,
}

impl MultitaskLossState {
    fn check(&self) -> Result<(), MaterialError> {
        if self.material_target >= self.material_logits.len() {
            return Err(MaterialError::TargetOutOfRange(
                self.material_target,
                self.material_logits.len(),
            ));
        }
        if self.substance_target >= self.substance_logits.len() {
            return Err(MaterialError::TargetOutOfRange(
                self.substance_target,
                self.substance_logits.len(),
            ));
        }
        Ok(())
    }
}

/// L_mat + lambda * L_sub.
pub fn multitask_loss_fixed(state: &MultitaskLossState) -> Result<f64, MaterialError> {
    state.check()?;
    let (l_mat, _) = cross_entropy(&state.material_logits, state.material_target)?;
    let (l_sub, _) = cross_entropy(&state.substance_logits, state.substance_target)?;
    Ok(l_mat + state.lambda * l_sub)
}

#[derive(Debug, Clone)]
pub struct MultitaskGradients {
    pub material_logits: Vec<f64>,
    pub substance_logits: Vec<f64>,
    pub s_m: f64,
    pub s_s: f64,
}

/// Homoscedastic-uncertainty weighting:
/// L = L_mat*exp(-s_m) + s_m + L_sub*exp(-s_s) + s_s.
/// dL/ds_m = -L_mat*exp(-s_m) + 1; logit gradients scale by exp(-s).
pub fn multitask_loss_uncertainty(
    state: &MultitaskLossState,
) -> Result<(f64, MultitaskGradients), MaterialError> {
    state.check()?;
    let (l_mat, g_mat) = cross_entropy(&state.material_logits, state.material_target)?;
    let (l_sub, g_sub) = cross_entropy(&state.substance_logits, state.substance_target)?;
    let (wm, ws) = ((-state.s_m).exp(), (-state.s_s).exp());
    let loss = l_mat * wm + state.s_m + l_sub * ws + state.s_s;
    let grads = MultitaskGradients {
        material_logits: g_mat.into_iter().map(|g| g * wm).collect(),
        substance_logits: g_sub.into_iter().map(|g| g * ws).collect(),
        s_m: -l_mat * wm + 1.0,
        s_s: -l_sub * ws + 1.0,
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mtl_at_1: f64,
    pub mtl_at_5: f64,
    /// None when no prediction carries a substance-logit channel.
    pub sub_at_1: Option<f64>,
    pub sub_mtl_at_1: f64,
}

/// Top-1/top-5 material precision, substance-head precision over the
/// predictions that carry the channel, and precision of the substance
/// implied by the material ranking.
pub fn classifier_metrics(
    predictions: &[MaterialScores],
    truths: &[(String, usize)],
    lib: &MaterialLibrary,
) -> Result<Metrics, MaterialError> {
    if predictions.len() != truths.len() {
        return Err(MaterialError::LengthMismatch(
            predictions.len(),
            truths.len(),
        ));
    }
    let n = predictions.len();
    let (mut top1, mut top5, mut sub_hits, mut sub_total, mut sub_mtl) = (0, 0, 0, 0, 0);
    for (pred, (truth_id, truth_sub)) in predictions.iter().zip(truths) {
        let truth_idx = lib
            .index_of(truth_id)
            .ok_or_else(|| MaterialError::UnknownId(truth_id.clone()))?;
        let order = rank_materials(pred, lib)?;
        if order.first() == Some(&truth_idx) {
            top1 += 1;
        }
        if order.iter().take(5).any(|&i| i == truth_idx) {
            top5 += 1;
        }
        if let Some(sl) = &pred.substance_logits {
            sub_total += 1;
            let argmax = (0..sl.len())
                .max_by(|&a, &b| sl[a].total_cmp(&sl[b]))
                .unwrap();
            if argmax == *truth_sub {
                sub_hits += 1;
            }
        }
        let implied = implied_substance(pred, lib)?;
        let argmax = (0..N_SUBSTANCES)
            .max_by(|&a, &b| implied[a].total_cmp(&implied[b]))
            .unwrap();
        if argmax == *truth_sub {
            sub_mtl += 1;
        }
    }
    Ok(Metrics {
        mtl_at_1: top1 as f64 / n as f64,
        mtl_at_5: top5 as f64 / n as f64,
        sub_at_1: if sub_total > 0 {
            Some(sub_hits as f64 / sub_total as f64)
        } else {
            None
        },
        sub_mtl_at_1: sub_mtl as f64 / n as f64,
    })
}

/// Max relative error between analytic and central-difference gradients of
/// the uncertainty loss over all coordinates of `state`.
pub fn finite_difference_error(state: &MultitaskLossState) -> Result<f64, MaterialError> {
    let (_, grads) = multitask_loss_uncertainty(state)?;
    let eval = |s: &MultitaskLossState| multitask_loss_uncertainty(s).map(|(l, _)| l);
    let mut max_rel: f64 = 0.0;
    let mut check = |x: f64, analytic: f64, set: &mut dyn FnMut(&mut MultitaskLossState, f64)| {
        let h = 1e-6 * x.abs().max(1.0);
        let mut sp = state.clone();
        set(&mut sp, x + h);
        let fp = eval(&sp).unwrap();
        set(&mut sp, x - h);
        let fm = eval(&sp).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    };
    for i in 0..state.material_logits.len() {
        check(
            state.material_logits[i],
            grads.material_logits[i],
            &mut |s, v| s.material_logits[i] = v,
        );
    }
    for i in 0..state.substance_logits.len() {
        check(
            state.substance_logits[i],
            grads.substance_logits[i],
            &mut |s, v| s.substance_logits[i] = v,
        );
    }
    check(state.s_m, grads.s_m, &mut |s, v| s.s_m = v);
    check(state.s_s, grads.s_s, &mut |s, v| s.s_s = v);
    Ok(max_rel)
}

/// Random state for gradient checking.
pub fn random_loss_state(seed: u64) -> MultitaskLossState {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_mat = rng.random_range(2..20);
    let n_sub = N_SUBSTANCES;
    MultitaskLossState {
        material_logits: (0..n_mat).map(|_| rng.random_range(-5.0..5.0)).collect(),
        substance_logits: (0..n_sub).map(|_| rng.random_range(-5.0..5.0)).collect(),
        material_target: rng.random_range(0..n_mat),
        substance_target: rng.random_range(0..n_sub),
        s_m: rng.random_range(-2.0..2.0),
        s_s: rng.random_range(-2.0..2.0),
        lambda: rng.random_range(0.0..2.0),
    }
}
