//! Fine alignment, step 1: regularized discrete flow between
//! coordinate-encoded silhouettes, used to warp a projected part map onto an
//! exemplar.
//!
//! Silhouettes are encoded as RGB with red carrying the mask and green/blue
//! carrying normalized x/y coordinates, so mask-boundary gradient magnitudes
//! vary with position and anchor otherwise ambiguous straight edges. Flow is
//! discrete and integer: truncated-L1 data and pairwise terms, minimized
//! coarse-to-fine by exact chain dynamic programming over rows and columns
//! with the cross-direction couplings frozen (block coordinate descent), so
//! the objective never increases within a level. Each level starts from the
//! better of the upsampled coarser flow and zero flow, which guarantees the
//! returned energy is at most the zero-flow energy.

use crate::img::{GrayF32, Mask};
use crate::raster::LabelMap;
use image::RgbImage;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid flow params: {0}")]
    BadParams(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("flo file: {0}")]
    Format(String),
}

/// RGB silhouette with coordinates baked into the channels:
/// red = 255 inside the mask, green = round(255 x / width),
/// blue = round(255 y / height), all zero outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSilhouette {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<[f32; 3]>,
}

impl CoordinateSilhouette {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// Foreground = red channel set.
    pub fn mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[0] > 0.0).collect(),
        }
    }
}

/// Encode a mask with positional channels.
pub fn encode_coordinate_silhouette(mask: &Mask) -> Result<CoordinateSilhouette, FlowError> {
    if !mask.any() {
        return Err(FlowError::EmptyMask);
    }
    let (w, h) = (mask.width, mask.height);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                data.push([
                    255.0,
                    (255.0 * x as f64 / w as f64).round() as f32,
                    (255.0 * y as f64 / h as f64).round() as f32,
                ]);
            } else {
                data.push([0.0, 0.0, 0.0]);
            }
        }
    }
    Ok(CoordinateSilhouette {
        width: w,
        height: h,
        data,
    })
}

/// Mask-only encoding (no positional channels); the baseline the coordinate
/// trick is measured against.
pub fn plain_silhouette(mask: &Mask) -> Result<CoordinateSilhouette, FlowError> {
    if !mask.any() {
        return Err(FlowError::EmptyMask);
    }
    Ok(CoordinateSilhouette {
        width: mask.width,
        height: mask.height,
        data: mask
            .data
            .iter()
            .map(|&m| if m { [255.0, 0.0, 0.0] } else { [0.0; 3] })
            .collect(),
    })
}

/// Per-pixel descriptor grid, row-major, `dim` floats per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DescriptorGrid {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.width + x) * self.dim;
        &self.data[base..base + self.dim]
    }
}

const SIFT_GRID: usize = 4;
const SIFT_BINS: usize = 8;
/// Descriptor dimensionality: 4x4 spatial cells x 8 orientation bins.
pub const DESCRIPTOR_DIM: usize = SIFT_GRID * SIFT_GRID * SIFT_BINS;

/// Entry scale applied after normalization. Calibrated on silhouette
/// fixtures so the default data truncation (40) clips mismatched pairs
/// (median L1 ~ 40) but not corresponding ones (median L1 ~ 13).
const DESCRIPTOR_SCALE: f64 = 8.0;

/// Dense SIFT-like descriptors: per pixel, gradient-orientation histograms
/// over a 4x4 cell window, L2-normalized with clamping at 0.2, renormalized,
/// then scaled by `DESCRIPTOR_SCALE`. Constant images give all-zero
/// descriptors.
pub fn dense_descriptors(image: &CoordinateSilhouette, cell_size: usize) -> DescriptorGrid {
    let (w, h) = (image.width, image.height);
    let gray = GrayF32 {
        width: w,
        height: h,
        data: image
            .data
            .iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
    };

    let mut mag = vec![0.0f64; w * h];
    let mut ori = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = (gray.get_clamped(x as isize + 1, y as isize)
                - gray.get_clamped(x as isize - 1, y as isize)) as f64;
            let gy = (gray.get_clamped(x as isize, y as isize + 1)
                - gray.get_clamped(x as isize, y as isize - 1)) as f64;
            let m = (gx * gx + gy * gy).sqrt();
            if m >= 1e-3 {
                mag[y * w + x] = m;
                ori[y * w + x] = gy.atan2(gx).rem_euclid(2.0 * std::f64::consts::PI);
            }
        }
    }

    let cell = cell_size.max(1) as i64;
    let half = SIFT_GRID as i64 / 2;
    let bin_width = 2.0 * std::f64::consts::PI / SIFT_BINS as f64;
    let mut data = vec![0.0f32; w * h * DESCRIPTOR_DIM];

    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut desc = [0.0f64; DESCRIPTOR_DIM];
            for cy in -half..SIFT_GRID as i64 - half {
                for cx in -half..SIFT_GRID as i64 - half {
                    let cell_idx = ((cy + half) * SIFT_GRID as i64 + (cx + half)) as usize;
                    for dy in 0..cell {
                        for dx in 0..cell {
                            let sx = x + cx * cell + dx;
                            let sy = y + cy * cell + dy;
                            if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                                continue;
                            }
                            let at = sy as usize * w + sx as usize;
                            let m = mag[at];
                            if m == 0.0 {
                                continue;
                            }
                            // linear vote between the two nearest bins
                            let ob = ori[at] / bin_width - 0.5;
                            let ob0 = ob.floor();
                            let of = ob - ob0;
                            let b0 = (ob0 as i64).rem_euclid(SIFT_BINS as i64) as usize;
                            let b1 = (b0 + 1) % SIFT_BINS;
                            desc[cell_idx * SIFT_BINS + b0] += m * (1.0 - of);
                            desc[cell_idx * SIFT_BINS + b1] += m * of;
                        }
                    }
                }
            }
            let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in desc.iter_mut() {
                    *v = (*v / norm).min(0.2);
                }
                let norm2 = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
                let base = (y as usize * w + x as usize) * DESCRIPTOR_DIM;
                for (k, v) in desc.iter().enumerate() {
                    data[base + k] = (v / norm2 * DESCRIPTOR_SCALE) as f32;
                }
            }
        }
    }

    DescriptorGrid {
        width: w,
        height: h,
        dim: DESCRIPTOR_DIM,
        data,
    }
}

/// Flow objective weights and search schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowParams {
    /// Truncation of the per-pixel descriptor L1 data cost.
    pub t: f64,
    /// Per-pixel displacement magnitude cost: eta * (|u| + |v|).
    pub eta: f64,
    /// Slope of the pairwise truncated-L1 smoothness.
    pub alpha: f64,
    /// Pairwise truncation.
    pub d: f64,
    /// Pyramid levels; 1 = single-scale.
    pub levels: usize,
    /// Search window half-width at the coarsest level.
    pub coarse_window: usize,
    /// Search window half-width at every finer level.
    pub refine_window: usize,
    /// Row+column sweep rounds per level.
    pub iterations: usize,
    /// Descriptor spatial cell size in pixels.
    pub cell_size: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            t: 40.0,
            eta: 0.005,
            alpha: 2.0,
            d: 40.0,
            levels: 3,
            coarse_window: 11,
            refine_window: 3,
            iterations: 2,
            cell_size: 4,
        }
    }
}

impl FlowParams {
    fn validate(&self) -> Result<(), FlowError> {
        if self.levels == 0 || self.iterations == 0 {
            return Err(FlowError::BadParams("levels and iterations must be >= 1".into()));
        }
        if self.coarse_window == 0 {
            return Err(FlowError::BadParams("coarse_window must be >= 1".into()));
        }
        if !(self.t >= 0.0 && self.eta >= 0.0 && self.alpha >= 0.0 && self.d >= 0.0) {
            return Err(FlowError::BadParams("weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Upper bound on |u| and |v| of any returned flow, in finest-level
    /// pixels: each level contributes its window scaled by its pyramid
    /// stride.
    pub fn max_displacement(&self) -> i64 {
        let mut bound = (self.coarse_window as i64) << (self.levels - 1);
        for level in 0..self.levels - 1 {
            bound += (self.refine_window as i64) << level;
        }
        bound
    }
}

/// Energy bookkeeping for one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelEnergy {
    /// Energy of the level's starting flow (best of the candidate below
    /// and zero flow).
    pub init: f64,
    /// Energy after the level's sweeps.
    pub after: f64,
    /// Energy of the level's non-zero init candidate: the upsampled coarser
    /// flow, or at the coarsest level the best constant translation.
    pub upsampled: f64,
}

/// Integer displacement field with its exact final objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<i32>,
    pub v: Vec<i32>,
    /// The true objective of (u, v) at the finest level.
    pub energy: f64,
    /// Set when >= 1% of pixels sit on the displacement bound, a sign the
    /// window was too small for the actual offset.
    pub window_limited: bool,
    pub level_energies: Vec<LevelEnergy>,
}

impl FlowField {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (i32, i32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }
}

/// Median (u, v) over the mask's pixels (ties resolve downward).
pub fn median_flow(flow: &FlowField, mask: &Mask) -> (i32, i32) {
    let mut us: Vec<i32> = Vec::new();
    let mut vs: Vec<i32> = Vec::new();
    for y in 0..flow.height {
        for x in 0..flow.width {
            if mask.get(x, y) {
                let (u, v) = flow.at(x, y);
                us.push(u);
                vs.push(v);
            }
        }
    }
    if us.is_empty() {
        return (0, 0);
    }
    us.sort_unstable();
    vs.sort_unstable();
    (us[us.len() / 2], vs[vs.len() / 2])
}

fn truncated_l1(diff: f64, alpha: f64, d: f64) -> f64 {
    (alpha * diff.abs()).min(d)
}

/// Truncated descriptor L1 distance; targets outside the image cost the
/// full truncation value.
fn data_cost(src: &DescriptorGrid, dst: &DescriptorGrid, x: i64, y: i64, tx: i64, ty: i64, t: f64) -> f64 {
    if tx < 0 || ty < 0 || tx >= dst.width as i64 || ty >= dst.height as i64 {
        return t;
    }
    let a = src.at(x as usize, y as usize);
    let b = dst.at(tx as usize, ty as usize);
    let mut acc = 0.0f64;
    for (&p, &q) in a.iter().zip(b) {
        acc += (p as f64 - q as f64).abs();
        if acc >= t {
            return t;
        }
    }
    acc
}

/// Exact objective of an integer flow.
pub fn flow_energy(
    src: &DescriptorGrid,
    dst: &DescriptorGrid,
    u: &[i32],
    v: &[i32],
    params: &FlowParams,
) -> f64 {
    let (w, h) = (src.width, src.height);
    let mut e = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            e += data_cost(
                src,
                dst,
                x as i64,
                y as i64,
                x as i64 + u[i] as i64,
                y as i64 + v[i] as i64,
                params.t,
            );
            e += params.eta * (u[i].abs() as f64 + v[i].abs() as f64);
            if x + 1 < w {
                e += truncated_l1((u[i] - u[i + 1]) as f64, params.alpha, params.d);
                e += truncated_l1((v[i] - v[i + 1]) as f64, params.alpha, params.d);
            }
            if y + 1 < h {
                e += truncated_l1((u[i] - u[i + w]) as f64, params.alpha, params.d);
                e += truncated_l1((v[i] - v[i + w]) as f64, params.alpha, params.d);
            }
        }
    }
    e
}

/// Lower envelope of `cost[s'] + alpha |s - s'|` capped at `min(cost) + d`,
/// with argmin tracking for backtracking. Exact in O(states).
fn truncated_l1_envelope(cost: &[f64], alpha: f64, d: f64) -> (Vec<f64>, Vec<usize>) {
    let n = cost.len();
    let mut out = cost.to_vec();
    let mut parent: Vec<usize> = (0..n).collect();
    for s in 1..n {
        if out[s - 1] + alpha < out[s] {
            out[s] = out[s - 1] + alpha;
            parent[s] = parent[s - 1];
        }
    }
    for s in (0..n.saturating_sub(1)).rev() {
        if out[s + 1] + alpha < out[s] {
            out[s] = out[s + 1] + alpha;
            parent[s] = parent[s + 1];
        }
    }
    let (mut min_s, mut min_v) = (0usize, cost[0]);
    for (s, &c) in cost.iter().enumerate().skip(1) {
        if c < min_v {
            min_v = c;
            min_s = s;
        }
    }
    for s in 0..n {
        if min_v + d < out[s] {
            out[s] = min_v + d;
            parent[s] = min_s;
        }
    }
    (out, parent)
}

struct LevelSolver<'a> {
    src: &'a DescriptorGrid,
    dst: &'a DescriptorGrid,
    params: &'a FlowParams,
    window: i64,
    bound: i64,
    w: usize,
    h: usize,
}

impl LevelSolver<'_> {
    /// Exact chain DP over one line of the component `own` (u when
    /// `horizontal_u`), with the other component and the off-line couplings
    /// frozen into the unary. `line` indexes a row when `along_x`, else a
    /// column. New states are centered on the current value, clamped to the
    /// global bound.
    #[allow(clippy::too_many_arguments)]
    fn sweep_line(
        &self,
        own: &mut [i32],
        other: &[i32],
        own_is_u: bool,
        along_x: bool,
        line: usize,
    ) {
        let (w, h) = (self.w, self.h);
        let len = if along_x { w } else { h };
        let idx = |k: usize| if along_x { line * w + k } else { k * w + line };

        // candidate states per pixel: current value +/- window, each clamped
        let n_states = (2 * self.window + 1) as usize;
        let base: Vec<i64> = (0..len).map(|i| own[idx(i)] as i64).collect();
        let state_of = |i: usize, s: usize| -> i64 {
            (base[i] + s as i64 - self.window).clamp(-self.bound, self.bound)
        };

        let mut unary = vec![0.0f64; len * n_states];
        for i in 0..len {
            let at = idx(i);
            let (x, y) = (at % w, at / w);
            for s in 0..n_states {
                let val = state_of(i, s);
                let (uu, vv) = if own_is_u {
                    (val, other[at] as i64)
                } else {
                    (other[at] as i64, val)
                };
                let mut c = data_cost(
                    self.src,
                    self.dst,
                    x as i64,
                    y as i64,
                    x as i64 + uu,
                    y as i64 + vv,
                    self.params.t,
                );
                c += self.params.eta * val.abs() as f64;
                // frozen couplings perpendicular to the sweep direction
                let mut frozen = |nx: i64, ny: i64| {
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let nat = ny as usize * w + nx as usize;
                        c += truncated_l1(
                            (val - own[nat] as i64) as f64,
                            self.params.alpha,
                            self.params.d,
                        );
                    }
                };
                if along_x {
                    frozen(x as i64, y as i64 - 1);
                    frozen(x as i64, y as i64 + 1);
                } else {
                    frozen(x as i64 - 1, y as i64);
                    frozen(x as i64 + 1, y as i64);
                }
                unary[i * n_states + s] = c;
            }
        }

        // forward chain DP; transitions pay for the *value* difference, and
        // neighboring pixels may expose different candidate sets, so the
        // envelope runs over a shared value axis
        let value_span = (2 * self.bound + 1) as usize;
        let mut msg = vec![f64::INFINITY; len * n_states];
        let mut parent = vec![0usize; len * n_states];
        for s in 0..n_states {
            msg[s] = unary[s];
        }
        let mut value_cost = vec![f64::INFINITY; value_span];
        for i in 1..len {
            value_cost.iter_mut().for_each(|c| *c = f64::INFINITY);
            let mut value_src = vec![0usize; value_span];
            for s in 0..n_states {
                let val = (state_of(i - 1, s) + self.bound) as usize;
                if msg[(i - 1) * n_states + s] < value_cost[val] {
                    value_cost[val] = msg[(i - 1) * n_states + s];
                    value_src[val] = s;
                }
            }
            let (env, env_parent) =
                truncated_l1_envelope(&value_cost, self.params.alpha, self.params.d);
            for s in 0..n_states {
                let val = (state_of(i, s) + self.bound) as usize;
                msg[i * n_states + s] = unary[i * n_states + s] + env[val];
                parent[i * n_states + s] = value_src[env_parent[val]];
            }
        }

        // backtrack
        let mut best_s = 0usize;
        let mut best = f64::INFINITY;
        for s in 0..n_states {
            let m = msg[(len - 1) * n_states + s];
            if m < best {
                best = m;
                best_s = s;
            }
        }
        let mut states = vec![0usize; len];
        states[len - 1] = best_s;
        for i in (1..len).rev() {
            states[i - 1] = parent[i * n_states + states[i]];
        }
        for i in 0..len {
            own[idx(i)] = state_of(i, states[i]) as i32;
        }
    }

    fn sweep_all(&self, u: &mut [i32], v: &mut [i32]) {
        for _ in 0..self.params.iterations {
            for y in 0..self.h {
                self.sweep_line(u, v, true, true, y);
            }
            for x in 0..self.w {
                self.sweep_line(u, v, true, false, x);
            }
            for y in 0..self.h {
                self.sweep_line(v, u, false, true, y);
            }
            for x in 0..self.w {
                self.sweep_line(v, u, false, false, x);
            }
        }
    }
}

fn downsample(image: &CoordinateSilhouette, factor: usize) -> CoordinateSilhouette {
    if factor == 1 {
        return image.clone();
    }
    let w = (image.width / factor).max(4);
    let h = (image.height / factor).max(4);
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let plane = GrayF32 {
            width: image.width,
            height: image.height,
            data: image.data.iter().map(|p| p[c]).collect(),
        };
        channels.push(crate::img::resize_bilinear(&plane, w, h));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        data.push([channels[0].data[i], channels[1].data[i], channels[2].data[i]]);
    }
    CoordinateSilhouette {
        width: w,
        height: h,
        data,
    }
}

/// Coarse-to-fine discrete flow from `src` to `dst`.
///
/// The returned energy is the exact objective of the returned flow at the
/// finest level, and is never worse than the zero-flow energy.
pub fn compute_flow(
    src: &CoordinateSilhouette,
    dst: &CoordinateSilhouette,
    params: &FlowParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    if src.width != dst.width || src.height != dst.height {
        return Err(FlowError::DimensionMismatch(
            src.width, src.height, dst.width, dst.height,
        ));
    }

    let bound = params.max_displacement();
    let mut u: Vec<i32> = Vec::new();
    let mut v: Vec<i32> = Vec::new();
    let mut prev_dims = (0usize, 0usize);
    let mut level_energies = Vec::with_capacity(params.levels);

    for level in (0..params.levels).rev() {
        let factor = 1usize << level;
        let s_img = downsample(src, factor);
        let d_img = downsample(dst, factor);
        let sd = dense_descriptors(&s_img, params.cell_size);
        let dd = dense_descriptors(&d_img, params.cell_size);
        let (w, h) = (sd.width, sd.height);

        let (mut lu, mut lv) = if u.is_empty() {
            // coarsest level: joint discrete window search for the best
            // constant translation, evaluated on the exact objective
            // (smoothness of a constant field is zero)
            let win = params.coarse_window as i64;
            let mut best = (0i64, 0i64, f64::INFINITY);
            for tv in -win..=win {
                for tu in -win..=win {
                    let mut c =
                        (w * h) as f64 * params.eta * (tu.abs() + tv.abs()) as f64;
                    for y in 0..h as i64 {
                        for x in 0..w as i64 {
                            c += data_cost(&sd, &dd, x, y, x + tu, y + tv, params.t);
                            if c >= best.2 {
                                break;
                            }
                        }
                        if c >= best.2 {
                            break;
                        }
                    }
                    if c < best.2 {
                        best = (tu, tv, c);
                    }
                }
            }
            (
                vec![best.0 as i32; w * h],
                vec![best.1 as i32; w * h],
            )
        } else {
            // upsample: nearest parent, doubled displacement
            let (pw, ph) = prev_dims;
            let mut lu = vec![0i32; w * h];
            let mut lv = vec![0i32; w * h];
            for y in 0..h {
                for x in 0..w {
                    let px = (x * pw / w).min(pw - 1);
                    let py = (y * ph / h).min(ph - 1);
                    lu[y * w + x] = (u[py * pw + px] * 2).clamp(-(bound as i32), bound as i32);
                    lv[y * w + x] = (v[py * pw + px] * 2).clamp(-(bound as i32), bound as i32);
                }
            }
            (lu, lv)
        };

        let upsampled_energy = flow_energy(&sd, &dd, &lu, &lv, params);
        let zero = vec![0i32; w * h];
        let zero_energy = flow_energy(&sd, &dd, &zero, &zero, params);
        if zero_energy < upsampled_energy {
            lu = zero.clone();
            lv = zero;
        }
        let init_energy = upsampled_energy.min(zero_energy);

        let solver = LevelSolver {
            src: &sd,
            dst: &dd,
            params,
            window: if level == params.levels - 1 {
                params.coarse_window as i64
            } else {
                params.refine_window.max(1) as i64
            },
            bound,
            w,
            h,
        };
        solver.sweep_all(&mut lu, &mut lv);

        let after = flow_energy(&sd, &dd, &lu, &lv, params);
        level_energies.push(LevelEnergy {
            init: init_energy,
            after,
            upsampled: upsampled_energy,
        });

        u = lu;
        v = lv;
        prev_dims = (w, h);
    }
    level_energies.reverse();

    let (w, h) = prev_dims;
    let on_bound = u
        .iter()
        .zip(&v)
        .filter(|(&uu, &vv)| uu.unsigned_abs() as i64 >= bound || vv.unsigned_abs() as i64 >= bound)
        .count();
    let energy = level_energies.first().map(|l| l.after).unwrap_or(0.0);

    Ok(FlowField {
        width: w,
        height: h,
        u,
        v,
        energy,
        window_limited: on_bound * 100 >= w * h,
        level_energies,
    })
}

/// Backward-warp a label map: `out(p) = map(p - w(p))` when the source lies
/// in bounds, else background. Nearest-neighbor lookup, so no label that is
/// absent from the input can appear.
pub fn warp_labels(map: &LabelMap, flow: &FlowField) -> Result<LabelMap, FlowError> {
    if map.width != flow.width || map.height != flow.height {
        return Err(FlowError::DimensionMismatch(
            map.width,
            map.height,
            flow.width,
            flow.height,
        ));
    }
    let mut out = LabelMap::new(map.width, map.height, map.label_count, map.label_kind);
    for y in 0..map.height {
        for x in 0..map.width {
            let (u, v) = flow.at(x, y);
            let sx = x as i64 - u as i64;
            let sy = y as i64 - v as i64;
            if sx >= 0 && sy >= 0 && (sx as usize) < map.width && (sy as usize) < map.height {
                out.set(x, y, map.get(sx as usize, sy as usize));
            }
        }
    }
    Ok(out)
}

const FLO_MAGIC: f32 = 202021.25;

/// Middlebury .flo encoding of the integer flow.
pub fn write_flo(flow: &FlowField, w: &mut impl Write) -> Result<(), FlowError> {
    w.write_all(&FLO_MAGIC.to_le_bytes())?;
    w.write_all(&(flow.width as i32).to_le_bytes())?;
    w.write_all(&(flow.height as i32).to_le_bytes())?;
    for i in 0..flow.u.len() {
        w.write_all(&(flow.u[i] as f32).to_le_bytes())?;
        w.write_all(&(flow.v[i] as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flo(r: &mut impl Read) -> Result<FlowField, FlowError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if f32::from_le_bytes(b4) != FLO_MAGIC {
        return Err(FlowError::Format("bad magic; not a .flo file".into()));
    }
    r.read_exact(&mut b4)?;
    let width = i32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let height = i32::from_le_bytes(b4);
    if width <= 0 || height <= 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(FlowError::Format(format!("implausible size {width}x{height}")));
    }
    let n = width as usize * height as usize;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        u.push(f32::from_le_bytes(b4).round() as i32);
        r.read_exact(&mut b4)?;
        v.push(f32::from_le_bytes(b4).round() as i32);
    }
    Ok(FlowField {
        width: width as usize,
        height: height as usize,
        u,
        v,
        energy: f64::NAN,
        window_limited: false,
        level_energies: Vec::new(),
    })
}

/// Flow visualization: hue = direction, saturation = magnitude relative to
/// the field maximum, full value everywhere.
pub fn flow_to_hsv_image(flow: &FlowField) -> RgbImage {
    let max_mag = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| ((u * u + v * v) as f64).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    RgbImage::from_fn(flow.width as u32, flow.height as u32, |x, y| {
        let (u, v) = flow.at(x as usize, y as usize);
        let mag = ((u * u + v * v) as f64).sqrt() / max_mag;
        let hue = (v as f64).atan2(u as f64).rem_euclid(2.0 * std::f64::consts::PI)
            / (2.0 * std::f64::consts::PI)
            * 360.0;
        let (r, g, b) = hsv_to_rgb(hue, mag, 1.0);
        image::Rgb([r, g, b])
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    )
}
