//! Spherical camera model, deterministic viewpoint grids, and pose-prior
//! sampling with jitter.
//!
//! Cameras orbit a target point on a sphere: `theta` is azimuth around the
//! vertical (+y) axis and `phi` is inclination measured from the zenith, so
//! `phi = pi/2` is eye level and larger values dip below it. The default grid
//! spans `[pi/4, 9pi/16]`: overhead to slightly below eye level, the band
//! where product photos live.

use crate::geom::{self, Mat4, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PHI_MIN: f64 = std::f64::consts::FRAC_PI_4;
pub const PHI_MAX: f64 = 9.0 * std::f64::consts::PI / 16.0;

/// Azimuth jitter half-width used by pose-prior sampling.
pub const JITTER_THETA: f64 = std::f64::consts::PI / 12.0;
/// Inclination jitter half-width used by pose-prior sampling.
pub const JITTER_PHI: f64 = std::f64::consts::PI / 24.0;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("grid config needs n_elevations >= 1, got {0}")]
    NoElevations(usize),
    #[error("grid config needs azimuth_scale > 0, got {0}")]
    BadAzimuthScale(f64),
    #[error("elevation {phi} rounds to zero azimuths (azimuth_scale {scale})")]
    EmptyRing { phi: f64, scale: f64 },
    #[error("phi range [{0}, {1}] is empty or reversed")]
    BadPhiRange(f64, f64),
    #[error("unknown grid preset '{0}'")]
    UnknownPreset(String),
    #[error("pose prior needs at least one empirical pose")]
    EmptyPrior,
}

/// Camera pose on the viewing sphere.
///
/// Invariants: `r > 0`, `0 < fov_x < 180`, `theta` in `[0, 2pi)`, `phi`
/// within the configured inclination range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    /// Azimuth in radians, `[0, 2pi)`.
    pub theta: f64,
    /// Inclination from the zenith in radians.
    pub phi: f64,
    /// Distance from the target in model units.
    pub r: f64,
    /// Horizontal field of view in degrees.
    pub fov_x: f64,
}

impl SphericalPose {
    /// World-space camera position for a given orbit target.
    pub fn position(&self, target: Vec3) -> Vec3 {
        let sp = self.phi.sin();
        geom::add(
            target,
            [
                self.r * sp * self.theta.cos(),
                self.r * self.phi.cos(),
                self.r * sp * self.theta.sin(),
            ],
        )
    }
}

/// Viewpoint grid configuration: ring layout plus the pose attributes shared
/// by every generated camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_elevations: usize,
    /// Each ring at inclination `phi` holds `round(azimuth_scale * sin phi)`
    /// azimuths.
    pub azimuth_scale: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub r: f64,
    pub fov_x: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_elevations: 10,
            azimuth_scale: 50.0,
            phi_min: PHI_MIN,
            phi_max: PHI_MAX,
            r: 1.5,
            fov_x: 55.0,
        }
    }
}

impl GridConfig {
    /// The 456-pose preset: 10 elevation rings over the default inclination
    /// band with `round(50 sin phi)` azimuths per ring, giving ring counts
    /// 35+39+42+45+47+49+50+50+50+49 = 456.
    pub fn paper456() -> Self {
        GridConfig::default()
    }

    pub fn preset(name: &str) -> Result<Self, CameraError> {
        match name {
            "paper456" => Ok(GridConfig::paper456()),
            other => Err(CameraError::UnknownPreset(other.to_string())),
        }
    }
}

/// Ordered, duplicate-free pose list generated from a [`GridConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointGrid {
    pub config: GridConfig,
    pub poses: Vec<SphericalPose>,
}

impl ViewpointGrid {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Build the deterministic viewpoint grid for `config`.
///
/// Elevations are an inclusive linspace over `[phi_min, phi_max]`
/// (`n_elevations = 1` sits at `phi_min`); each ring's azimuths are uniform
/// in `[0, 2pi)` starting at 0. A ring whose azimuth count rounds to zero is
/// a config error.
pub fn build_viewpoint_grid(config: &GridConfig) -> Result<ViewpointGrid, CameraError> {
    if config.n_elevations < 1 {
        return Err(CameraError::NoElevations(config.n_elevations));
    }
    if !(config.azimuth_scale > 0.0) {
        return Err(CameraError::BadAzimuthScale(config.azimuth_scale));
    }
    if !(config.phi_min <= config.phi_max) {
        return Err(CameraError::BadPhiRange(config.phi_min, config.phi_max));
    }

    let mut poses = Vec::new();
    for i in 0..config.n_elevations {
        let t = if config.n_elevations == 1 {
            0.0
        } else {
            i as f64 / (config.n_elevations - 1) as f64
        };
        let phi = config.phi_min + t * (config.phi_max - config.phi_min);
        let n_az = (config.azimuth_scale * phi.sin()).round() as i64;
        if n_az < 1 {
            return Err(CameraError::EmptyRing {
                phi,
                scale: config.azimuth_scale,
            });
        }
        for j in 0..n_az {
            poses.push(SphericalPose {
                theta: 2.0 * std::f64::consts::PI * j as f64 / n_az as f64,
                phi,
                r: config.r,
                fov_x: config.fov_x,
            });
        }
    }
    Ok(ViewpointGrid {
        config: *config,
        poses,
    })
}

/// Right-handed look-at view transform: world to camera space, camera at the
/// pose's spherical offset from `target`, looking down -z, +y up on screen.
pub fn pose_to_view_transform(pose: &SphericalPose, target: Vec3) -> Mat4 {
    let eye = pose.position(target);
    look_at(eye, target, [0.0, 1.0, 0.0])
}

pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Mat4 {
    let f = geom::normalize(geom::sub(target, eye));
    let mut s = geom::cross(f, up);
    if geom::norm(s) < 1e-12 {
        // forward parallel to up; fall back to a fixed lateral axis
        s = geom::cross(f, [1.0, 0.0, 0.0]);
    }
    let s = geom::normalize(s);
    let u = geom::cross(s, f);

    let mut m = [[0.0; 4]; 4];
    for c in 0..3 {
        m[c][0] = s[c];
        m[c][1] = u[c];
        m[c][2] = -f[c];
    }
    m[3][0] = -geom::dot(s, eye);
    m[3][1] = -geom::dot(u, eye);
    m[3][2] = geom::dot(f, eye);
    m[3][3] = 1.0;
    Mat4 { m }
}

/// Perspective projection from a horizontal field of view.
///
/// Clip-space convention matches GL: visible depth maps to `[-1, 1]`,
/// `w_clip = -z_camera`.
pub fn projection_matrix(fov_x_deg: f64, aspect: f64, near: f64, far: f64) -> Mat4 {
    let tan_half_x = (fov_x_deg.to_radians() * 0.5).tan();
    let mut m = [[0.0; 4]; 4];
    m[0][0] = 1.0 / tan_half_x;
    m[1][1] = aspect / tan_half_x;
    m[2][2] = -(far + near) / (far - near);
    m[2][3] = -1.0;
    m[3][2] = -2.0 * far * near / (far - near);
    Mat4 { m }
}

/// Full camera: view + projection + viewport, as used by the rasterizer.
#[derive(Debug, Clone)]
pub struct Camera {
    pub view: Mat4,
    pub proj: Mat4,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn from_pose(
        pose: &SphericalPose,
        target: Vec3,
        width: u32,
        height: u32,
    ) -> Camera {
        let aspect = width as f64 / height as f64;
        Camera {
            view: pose_to_view_transform(pose, target),
            proj: projection_matrix(pose.fov_x, aspect, 0.01, 100.0),
            width,
            height,
        }
    }

    /// Project a world point to pixel coordinates and camera-space depth
    /// (distance along the view axis, positive in front). `None` when the
    /// point is at or behind the eye plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let v = self.view.transform_point(p);
        let depth = -v[2];
        if depth <= 1e-12 {
            return None;
        }
        let clip = self.proj.transform_point([v[0], v[1], v[2]]);
        let ndc_x = clip[0] / clip[3];
        let ndc_y = clip[1] / clip[3];
        let px = (ndc_x + 1.0) * 0.5 * self.width as f64;
        let py = (1.0 - ndc_y) * 0.5 * self.height as f64;
        Some((px, py, depth))
    }
}

/// Draw one empirical pose uniformly, then jitter azimuth by
/// `U[-pi/12, pi/12]` and inclination by `U[-pi/24, pi/24]`; theta wraps mod
/// 2pi, phi clamps to `[phi_min, phi_max]`.
pub fn sample_pose_prior(
    empirical: &[SphericalPose],
    phi_min: f64,
    phi_max: f64,
    rng: &mut impl Rng,
) -> Result<SphericalPose, CameraError> {
    if empirical.is_empty() {
        return Err(CameraError::EmptyPrior);
    }
    let base = empirical[rng.random_range(0..empirical.len())];
    let theta = base.theta + rng.random_range(-JITTER_THETA..=JITTER_THETA);
    let phi = base.phi + rng.random_range(-JITTER_PHI..=JITTER_PHI);
    Ok(SphericalPose {
        theta: theta.rem_euclid(2.0 * std::f64::consts::PI),
        phi: phi.clamp(phi_min, phi_max),
        ..base
    })
}
