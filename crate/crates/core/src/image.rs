//! Normalized image planes shared by every stage of the pipeline.
//!
//! All storage is row-major `f64`. [`RgbImage`] interleaves channels (`H×W×3`);
//! [`Plane`] is a single channel and doubles as the mask representation.

use crate::error::{ensure, Error, Result};
use crate::nn::reflect_index;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height >= 1 && width >= 1, || {
            format!("image must be at least 1x1, got {height}x{width}")
        })?;
        ensure(data.len() == height * width * 3, || {
            format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Checks finiteness and the `[0,1]` range.
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("image contains non-finite value {v}")));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("image value {v} outside [0,1]")));
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::validation(format!("image contains non-finite value {v}"))),
            None => Ok(()),
        }
    }

    pub fn channel(&self, c: usize) -> Plane {
        let data = self.data.iter().skip(c).step_by(3).copied().collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn from_channels(r: &Plane, g: &Plane, b: &Plane) -> Result<Self> {
        same_dims(r.dims(), g.dims(), "green channel")?;
        same_dims(r.dims(), b.dims(), "blue channel")?;
        let data = r
            .data
            .iter()
            .zip(&g.data)
            .zip(&b.data)
            .flat_map(|((r, g), b)| [*r, *g, *b])
            .collect();
        RgbImage::new(r.height, r.width, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &RgbImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x))
    }

    pub fn transform(&self, t: Geometric) -> Self {
        let (h, w) = t.output_dims(self.height, self.width);
        Self::from_fn(h, w, |y, x| {
            let (sy, sx) = t.source(y, x, self.height, self.width);
            self.pixel(sy, sx)
        })
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        let planes: Vec<Plane> = (0..3).map(|c| self.channel(c).resize_bilinear(h, w)).collect();
        RgbImage::from_channels(&planes[0], &planes[1], &planes[2]).expect("matching dims")
    }
}

/// A single `H×W` channel. Used for luminance, chroma and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height >= 1 && width >= 1, || {
            format!("plane must be at least 1x1, got {height}x{width}")
        })?;
        ensure(data.len() == height * width, || {
            format!("plane data length {} does not match {height}x{width}", data.len())
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Finite and within `[0,1]`.
    pub fn validate(&self) -> Result<()> {
        self.ensure_finite()?;
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::validation(format!("plane value {v} outside [0,1]"))),
            None => Ok(()),
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::validation(format!("plane contains non-finite value {v}"))),
            None => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }

    pub fn transform(&self, t: Geometric) -> Self {
        let (h, w) = t.output_dims(self.height, self.width);
        Self::from_fn(h, w, |y, x| {
            let (sy, sx) = t.source(y, x, self.height, self.width);
            self.get(sy, sx)
        })
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        let coord = |o: usize, scale: f64, n: usize| {
            let c = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (c.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, c - i0 as f64)
        };
        Self::from_fn(h, w, |y, x| {
            let (y0, y1, fy) = coord(y, sy, self.height);
            let (x0, x1, fx) = coord(x, sx, self.width);
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bot = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / h as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / w as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    /// Separable Gaussian filter truncated at `radius`, reflect borders.
    pub fn gaussian_blur(&self, sigma: f64, radius: usize) -> Self {
        if radius == 0 || sigma <= 0.0 {
            return self.clone();
        }
        let r = radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let taps: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
        let (h, w) = self.dims();
        let rows = Self::from_fn(h, w, |y, x| {
            taps.iter()
                .enumerate()
                .map(|(k, t)| t * self.get(y, reflect_index(x as isize + k as isize - r, w)))
                .sum()
        });
        Self::from_fn(h, w, |y, x| {
            taps.iter()
                .enumerate()
                .map(|(k, t)| t * rows.get(reflect_index(y as isize + k as isize - r, h), x))
                .sum()
        })
    }

    pub fn threshold(&self, t: f64) -> Self {
        self.map(|v| if v > t { 1.0 } else { 0.0 })
    }
}

/// Luminance component of a decoupled image.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane(pub Plane);

impl std::ops::Deref for LumaPlane {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

/// Blue- and red-difference planes of a decoupled image, neutral at 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaPlanes {
    pub cb: Plane,
    pub cr: Plane,
}

impl ChromaPlanes {
    pub fn new(cb: Plane, cr: Plane) -> Result<Self> {
        same_dims(cb.dims(), cr.dims(), "cr plane")?;
        Ok(Self { cb, cr })
    }

    pub fn neutral(height: usize, width: usize) -> Self {
        Self {
            cb: Plane::filled(height, width, 0.5),
            cr: Plane::filled(height, width, 0.5),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.cb.dims()
    }
}

/// One of the eight dihedral transforms: `rot` quarter turns clockwise, then an optional
/// horizontal flip, then an optional vertical flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometric {
    pub rot: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Geometric {
    pub const IDENTITY: Geometric = Geometric {
        rot: 0,
        hflip: false,
        vflip: false,
    };

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel for output pixel `(y, x)` of an `h×w` input.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let y = if self.vflip { oh - 1 - y } else { y };
        let x = if self.hflip { ow - 1 - x } else { x };
        match self.rot % 4 {
            0 => (y, x),
            1 => (h - 1 - x, y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (x, w - 1 - y),
        }
    }
}

pub(crate) fn same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    ensure(a == b, || {
        format!("{what} has dims {}x{}, expected {}x{}", b.0, b.1, a.0, a.1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Plane {
        Plane::from_fn(h, w, |y, x| (y * w + x) as f64)
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let p = ramp(3, 5);
        let mut q = p.clone();
        for _ in 0..4 {
            q = q.transform(Geometric {
                rot: 1,
                ..Geometric::IDENTITY
            });
        }
        assert_eq!(p, q);
    }

    #[test]
    fn rot90_moves_top_left_to_top_right() {
        let p = ramp(2, 3);
        let r = p.transform(Geometric {
            rot: 1,
            ..Geometric::IDENTITY
        });
        assert_eq!(r.dims(), (3, 2));
        // clockwise: old bottom-left lands at the new top-left
        assert_eq!(r.get(0, 0), p.get(1, 0));
        assert_eq!(r.get(0, 1), p.get(0, 0));
    }

    #[test]
    fn bilinear_identity_resize() {
        let p = ramp(4, 4);
        assert_eq!(p.resize_bilinear(4, 4), p);
    }

    #[test]
    fn bilinear_downsample_averages_pairs() {
        let p = Plane::new(1, 2, vec![0.0, 1.0]).unwrap();
        let r = p.resize_bilinear(1, 1);
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(RgbImage::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Plane::new(0, 2, vec![]).is_err());
    }
}
