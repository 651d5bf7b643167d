//! Float image planes and the resampling/filter primitives shared by the
//! descriptor, flow, and CRF modules.

use image::RgbImage;

/// Binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayF32 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayF32 {
    pub fn new(width: usize, height: usize) -> Self {
        GrayF32 {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayF32 {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped lookup; coordinates outside the image read the nearest edge.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }
}

/// Luma conversion with Rec. 601 weights, output in [0, 255].
pub fn rgb_to_gray(image: &RgbImage) -> GrayF32 {
    let (w, h) = image.dimensions();
    GrayF32::from_fn(w as usize, h as usize, |x, y| {
        let p = image.get_pixel(x as u32, y as u32);
        0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
    })
}

/// Separable Gaussian blur with kernel radius `ceil(4 sigma)`, edge-clamped.
///
/// A non-positive sigma returns the input unchanged.
pub fn gaussian_blur(src: &GrayF32, sigma: f32) -> GrayF32 {
    if sigma <= 0.0 {
        return src.clone();
    }
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    let mut tmp = GrayF32::new(src.width, src.height);
    for y in 0..src.height {
        for x in 0..src.width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xi = x as isize + ki as isize - radius;
                acc += k * src.get_clamped(xi, y as isize);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = GrayF32::new(src.width, src.height);
    for y in 0..src.height {
        for x in 0..src.width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yi = y as isize + ki as isize - radius;
                acc += k * tmp.get_clamped(x as isize, yi);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Bilinear resample to `(width, height)` using pixel-center alignment.
pub fn resize_bilinear(src: &GrayF32, width: usize, height: usize) -> GrayF32 {
    assert!(width > 0 && height > 0, "target size must be positive");
    let sx = src.width as f32 / width as f32;
    let sy = src.height as f32 / height as f32;
    GrayF32::from_fn(width, height, |x, y| {
        let fx = (x as f32 + 0.5) * sx - 0.5;
        let fy = (y as f32 + 0.5) * sy - 0.5;
        let x0 = fx.floor() as isize;
        let y0 = fy.floor() as isize;
        let tx = fx - x0 as f32;
        let ty = fy - y0 as f32;
        let v00 = src.get_clamped(x0, y0);
        let v10 = src.get_clamped(x0 + 1, y0);
        let v01 = src.get_clamped(x0, y0 + 1);
        let v11 = src.get_clamped(x0 + 1, y0 + 1);
        v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty
    })
}
