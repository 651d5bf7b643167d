//! Small 3D math helpers shared by the mesh and rasterizer modules.

pub type Vec2 = [f64; 2];
pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Area of the 3D triangle (a, b, c).
pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Area of the 2D triangle (a, b, c).
pub fn triangle_area_2d(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
}

/// Column-major 4x4 transform acting on homogeneous points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4 {
    /// m[col][row]
    pub m: [[f64; 4]; 4],
}

impl Mat4 {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, col) in m.iter_mut().enumerate() {
            col[i] = 1.0;
        }
        Mat4 { m }
    }

    pub fn mul(&self, rhs: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for (c, out_col) in out.iter_mut().enumerate() {
            for (r, out_val) in out_col.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.m[k][r] * rhs.m[c][k];
                }
                *out_val = acc;
            }
        }
        Mat4 { m: out }
    }

    /// Transform a point (w = 1), returning the homogeneous result.
    pub fn transform_point(&self, p: Vec3) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (r, out_val) in out.iter_mut().enumerate() {
            *out_val = self.m[0][r] * p[0] + self.m[1][r] * p[1] + self.m[2][r] * p[2] + self.m[3][r];
        }
        out
    }

    /// Transform a direction (w = 0).
    pub fn transform_dir(&self, d: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (r, out_val) in out.iter_mut().enumerate() {
            *out_val = self.m[0][r] * d[0] + self.m[1][r] * d[1] + self.m[2][r] * d[2];
        }
        out
    }
}
