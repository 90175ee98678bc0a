//! Physical shadow formation as a synthetic data generator.
//!
//! A lit pixel sees direct and ambient light, `I = (S_d + S_a)·A`. Inside a cast shadow
//! the direct term is blocked and the ambient term attenuated, `I = a·S_a·A`. Camera
//! degradation (blur, sensor noise, quantization) is then applied to the shadowed region.
//! Shadings and albedo are stored per RGB channel.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{self, Triplet};
use crate::error::{ensure, Error, Result};
use crate::image::{same_dims, Plane, RgbImage};

/// Floor of the Retinex illumination estimate.
pub const RETINEX_EPS: f64 = 1e-3;
/// Smoothing applied to the max-channel illumination estimate.
pub const RETINEX_SIGMA: f64 = 2.0;

/// Discretized scene. `direct` and `ambient` are non-negative shadings (may exceed 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub albedo: RgbImage,
    pub direct: RgbImage,
    pub ambient: RgbImage,
    pub attenuation: Plane,
    pub mask: Plane,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        self.albedo.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        self.albedo.validate()?;
        for (what, s) in [("direct shading", &self.direct), ("ambient shading", &self.ambient)] {
            same_dims(d, s.dims(), what)?;
            s.ensure_finite()?;
            ensure(s.data().iter().all(|v| *v >= 0.0), || format!("{what} has negative values"))?;
        }
        same_dims(d, self.attenuation.dims(), "attenuation")?;
        self.attenuation.validate()?;
        same_dims(d, self.mask.dims(), "shadow mask")?;
        ensure(self.mask.data().iter().all(|v| *v == 0.0 || *v == 1.0), || {
            "shadow mask must be binary".into()
        })
    }

    /// A scene with every field spatially constant.
    pub fn constant(h: usize, w: usize, albedo: [f64; 3], direct: [f64; 3], ambient: [f64; 3], a: f64) -> Self {
        Self {
            albedo: RgbImage::filled(h, w, albedo),
            direct: RgbImage::filled(h, w, direct),
            ambient: RgbImage::filled(h, w, ambient),
            attenuation: Plane::filled(h, w, a),
            mask: Plane::filled(h, w, 1.0),
        }
    }
}

pub fn render_lit(scene: &Scene) -> Result<RgbImage> {
    scene.validate()?;
    let (a, d, s) = (scene.albedo.data(), scene.direct.data(), scene.ambient.data());
    let data = (0..a.len()).map(|i| ((d[i] + s[i]) * a[i]).clamp(0.0, 1.0)).collect();
    let (h, w) = scene.dims();
    RgbImage::new(h, w, data)
}

pub fn render_shadow(scene: &Scene) -> Result<RgbImage> {
    let mut img = render_lit(scene)?;
    let (h, w) = scene.dims();
    for y in 0..h {
        for x in 0..w {
            if scene.mask.get(y, x) == 1.0 {
                let a = scene.attenuation.get(y, x);
                let alb = scene.albedo.pixel(y, x);
                let amb = scene.ambient.pixel(y, x);
                img.set_pixel(y, x, std::array::from_fn(|c| (a * amb[c] * alb[c]).clamp(0.0, 1.0)));
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Standard deviation of additive Gaussian sensor noise.
    pub noise_std: f64,
    /// Quantizer depth in bits, 1..=16.
    pub quant_bits: u32,
    /// Gaussian blur radius in pixels; σ is half the radius.
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.01,
            quant_bits: 8,
            blur_radius: 0,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// No blur, no noise, 16-bit quantization.
    pub fn clean() -> Self {
        Self {
            noise_std: 0.0,
            quant_bits: 16,
            blur_radius: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.noise_std.is_finite() && self.noise_std >= 0.0, || {
            format!("noise_std {} must be finite and >= 0", self.noise_std)
        })?;
        ensure((1..=16).contains(&self.quant_bits), || {
            format!("quant_bits {} outside 1..=16", self.quant_bits)
        })
    }
}

/// Blur, then noise (seeded), then quantization, then clamping.
pub fn apply_degradation(img: &RgbImage, cfg: &DegradationConfig) -> Result<RgbImage> {
    cfg.validate()?;
    img.ensure_finite()?;
    let r = cfg.blur_radius;
    let blurred: Vec<Plane> = (0..3)
        .map(|c| img.channel(c).gaussian_blur(r as f64 / 2.0, r))
        .collect();
    let mut out = RgbImage::from_channels(&blurred[0], &blurred[1], &blurred[2])?;
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for v in out.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let levels = ((1u32 << cfg.quant_bits) - 1) as f64;
    Ok(out.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels))
}

/// Illumination/reflectance factorization of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinexPair {
    pub illumination: Plane,
    pub reflectance: RgbImage,
}

/// Illumination = Gaussian-smoothed per-pixel max channel, floored at [`RETINEX_EPS`];
/// reflectance = image / illumination.
pub fn retinex_decompose(img: &RgbImage) -> Result<RetinexPair> {
    img.validate()?;
    let (h, w) = img.dims();
    let max = Plane::from_fn(h, w, |y, x| img.pixel(y, x).into_iter().fold(0.0, f64::max));
    let radius = (3.0 * RETINEX_SIGMA).ceil() as usize;
    let illumination = max
        .gaussian_blur(RETINEX_SIGMA, radius)
        .map(|v| v.max(RETINEX_EPS));
    let reflectance = RgbImage::from_fn(h, w, |y, x| {
        let l = illumination.get(y, x);
        img.pixel(y, x).map(|v| v / l)
    });
    Ok(RetinexPair {
        illumination,
        reflectance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub bins: usize,
    /// Histograms cover `[-range, range]`; values outside land in the edge bins.
    pub range: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self { bins: 64, range: 1.0 }
    }
}

/// Distribution of `reflectance(shadow) − reflectance(shadow-free)` inside shadow masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub bins: usize,
    pub range: f64,
    /// Per channel (R, G, B) bin counts.
    pub histograms: [Vec<usize>; 3],
    pub mean: [f64; 3],
    pub median: [f64; 3],
    pub samples: usize,
}

pub const CHANNEL_NAMES: [&str; 3] = ["R", "G", "B"];

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn color_bias_analysis(pairs: &[(RgbImage, RgbImage, Plane)], cfg: &BiasConfig) -> Result<BiasReport> {
    ensure(cfg.bins >= 1 && cfg.range > 0.0, || "bias histogram needs bins >= 1 and range > 0".into())?;
    let mut diffs: [Vec<f64>; 3] = Default::default();
    for (shadow, free, mask) in pairs {
        same_dims(shadow.dims(), free.dims(), "shadow-free image")?;
        same_dims(shadow.dims(), mask.dims(), "mask")?;
        let rs = retinex_decompose(shadow)?.reflectance;
        let rf = retinex_decompose(free)?.reflectance;
        for (i, m) in mask.data().iter().enumerate() {
            if *m > 0.5 {
                for (c, d) in diffs.iter_mut().enumerate() {
                    d.push(rs.data()[3 * i + c] - rf.data()[3 * i + c]);
                }
            }
        }
    }
    let samples = diffs[0].len();
    if samples == 0 {
        return Err(Error::NoSamples("no masked pixels in the analyzed pairs".into()));
    }
    let width = 2.0 * cfg.range / cfg.bins as f64;
    let histograms = std::array::from_fn(|c| {
        let mut h = vec![0usize; cfg.bins];
        for v in &diffs[c] {
            let b = ((v + cfg.range) / width).floor().clamp(0.0, (cfg.bins - 1) as f64);
            h[b as usize] += 1;
        }
        h
    });
    let mean = std::array::from_fn(|c| diffs[c].iter().sum::<f64>() / samples as f64);
    let median = std::array::from_fn(|c| median(&mut diffs[c]));
    Ok(BiasReport {
        bins: cfg.bins,
        range: cfg.range,
        histograms,
        mean,
        median,
        samples,
    })
}

impl BiasReport {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = 2.0 * self.range / self.bins as f64;
        (-self.range + b as f64 * width, -self.range + (b + 1) as f64 * width)
    }

    /// `channel  bin_left  bin_right  count`, tab-separated, with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("channel\tbin_left\tbin_right\tcount\n");
        for (c, hist) in self.histograms.iter().enumerate() {
            for (b, n) in hist.iter().enumerate() {
                let (l, r) = self.bin_edges(b);
                writeln!(out, "{}\t{l:.6}\t{r:.6}\t{n}", CHANNEL_NAMES[c]).expect("writing to a String");
            }
        }
        out
    }

    /// Three stacked bar charts (R, G, B) on a white background; the zero bin edge is a
    /// gray vertical line.
    pub fn plot(&self) -> RgbImage {
        const PANEL: usize = 80;
        let bar = 4;
        let (h, w) = (3 * PANEL, self.bins * bar);
        let peak = self
            .histograms
            .iter()
            .flat_map(|h| h.iter().copied())
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let colors = [[0.85, 0.1, 0.1], [0.1, 0.6, 0.1], [0.1, 0.2, 0.85]];
        let zero_col = self.bins * bar / 2;
        RgbImage::from_fn(h, w, |y, x| {
            let c = y / PANEL;
            let height = (self.histograms[c][x / bar] as f64 / peak * (PANEL - 4) as f64).round() as usize;
            let from_bottom = PANEL - 1 - y % PANEL;
            if from_bottom < height && x % bar != bar - 1 {
                colors[c]
            } else if x == zero_col {
                [0.6; 3]
            } else {
                [1.0; 3]
            }
        })
    }
}

/// Scene sampler parameters for synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Range of the shadow attenuation `a`.
    pub attenuation: (f64, f64),
    /// Fraction of total light that is ambient.
    pub ambient_fraction: (f64, f64),
    /// Extra blue weight of the ambient light (sky tint).
    pub ambient_blue_tint: (f64, f64),
    /// Number of blobs composing the shadow mask.
    pub blobs: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            attenuation: (0.6, 0.9),
            ambient_fraction: (0.3, 0.45),
            ambient_blue_tint: (0.1, 0.3),
            blobs: (1, 3),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Smooth random albedo: a per-channel base color modulated by a few low-frequency waves.
fn random_albedo(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.85));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.5..3.0) * std::f64::consts::TAU / h as f64;
            let fx = rng.random_range(0.5..3.0) * std::f64::consts::TAU / w as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
            (fy, fx, phase, amp)
        })
        .collect();
    RgbImage::from_fn(h, w, |y, x| {
        std::array::from_fn(|c| {
            let m: f64 = waves
                .iter()
                .map(|(fy, fx, p, a)| a[c] * (fy * y as f64 + fx * x as f64 + p).sin())
                .sum();
            (base[c] + m).clamp(0.05, 0.95)
        })
    })
}

/// Union of random ellipses, each covering a sizable part of the frame.
fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, blobs: (usize, usize)) -> Plane {
    let n = if blobs.1 > blobs.0 {
        rng.random_range(blobs.0..=blobs.1)
    } else {
        blobs.0.max(1)
    };
    let ellipses: Vec<(f64, f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8) * h as f64;
            let cx = rng.random_range(0.2..0.8) * w as f64;
            let ry = rng.random_range(0.12..0.3) * h as f64;
            let rx = rng.random_range(0.12..0.3) * w as f64;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            (cy, cx, ry, rx, theta)
        })
        .collect();
    Plane::from_fn(h, w, |y, x| {
        let inside = ellipses.iter().any(|&(cy, cx, ry, rx, t)| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * t.cos() + dy * t.sin();
            let v = -dx * t.sin() + dy * t.cos();
            (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        });
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// Random scene: smooth albedo, direct light complementing sky-tinted ambient light, an
/// elliptical blob mask and a gently varying attenuation field.
pub fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &SceneConfig) -> Scene {
    let albedo = random_albedo(rng, h, w);
    let frac = uniform(rng, cfg.ambient_fraction);
    let tint = uniform(rng, cfg.ambient_blue_tint);
    let cool: [f64; 3] = [1.0 - tint, 1.0 - tint / 2.0, 1.0 + tint];
    // total light per channel is 1, so lit pixels equal the albedo
    let ambient: [f64; 3] = std::array::from_fn(|c| frac * cool[c]);
    let direct: [f64; 3] = std::array::from_fn(|c| (1.0 - ambient[c]).max(0.0));
    let a0 = uniform(rng, cfg.attenuation);
    let (gy, gx) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let attenuation = Plane::from_fn(h, w, |y, x| {
        (a0 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5)).clamp(0.0, 1.0)
    });
    Scene {
        albedo,
        direct: RgbImage::filled(h, w, direct),
        ambient: RgbImage::filled(h, w, ambient),
        attenuation,
        mask: random_mask(rng, h, w, cfg.blobs),
    }
}

/// Seed of sample `index` of a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Scene and clean renders of one synthetic sample.
pub fn synth_sample(seed: u64, index: usize, h: usize, w: usize, cfg: &SceneConfig) -> Result<(Scene, RgbImage, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let scene = random_scene(&mut rng, h, w, cfg);
    let lit = render_lit(&scene)?;
    let shadow = render_shadow(&scene)?;
    Ok((scene, lit, shadow))
}

/// Shadow input: the degradation is applied to the shadowed pixels only.
pub fn degrade_shadow(shadow: &RgbImage, mask: &Plane, cfg: &DegradationConfig) -> Result<RgbImage> {
    let degraded = apply_degradation(shadow, cfg)?;
    let (h, w) = shadow.dims();
    Ok(RgbImage::from_fn(h, w, |y, x| {
        if mask.get(y, x) > 0.5 {
            degraded.pixel(y, x)
        } else {
            shadow.pixel(y, x)
        }
    }))
}

/// Number of digits in generated sample ids.
const ID_WIDTH: usize = 4;

pub fn sample_id(index: usize) -> String {
    format!("{index:0ID_WIDTH$}")
}

/// Renders `n` triplets into the dataset layout under `out` and returns them.
pub fn generate_dataset(
    n: usize,
    (h, w): (usize, usize),
    degradation: &DegradationConfig,
    scene: &SceneConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<Triplet>> {
    ensure(n >= 1, || "dataset size must be at least 1".into())?;
    ensure(h >= 1 && w >= 1, || format!("image size {h}x{w} must be positive"))?;
    degradation.validate()?;
    let triplets: Vec<Triplet> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (scene, lit, shadow) = synth_sample(seed, i, h, w, scene)?;
            let cfg = DegradationConfig {
                seed: sample_seed(degradation.seed ^ seed, i),
                ..degradation.clone()
            };
            let t = Triplet {
                id: sample_id(i),
                shadow: data_io::quantize8(&degrade_shadow(&shadow, &scene.mask, &cfg)?),
                gt: Some(data_io::quantize8(&lit)),
                mask: scene.mask,
            };
            data_io::write_triplet(out, &t)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    Ok(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn render_lit_examples() {
        let s = Scene::constant(3, 4, [0.5; 3], [0.0; 3], [1.0; 3], 1.0);
        assert!(render_lit(&s).unwrap().data().iter().all(|v| *v == 0.5));
        let s = Scene::constant(2, 2, [0.8; 3], [0.6; 3], [0.4; 3], 1.0);
        assert!(render_lit(&s).unwrap().data().iter().all(|v| close(*v, 0.8, 1e-12)));
        let s = Scene::constant(2, 2, [0.0; 3], [0.6; 3], [0.4; 3], 1.0);
        assert!(render_lit(&s).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn render_shadow_examples() {
        let mut s = Scene::constant(2, 3, [0.8; 3], [0.3; 3], [0.4; 3], 0.5);
        assert!(render_shadow(&s).unwrap().data().iter().all(|v| close(*v, 0.16, 1e-12)));
        s.mask = Plane::filled(2, 3, 0.0);
        assert_eq!(render_shadow(&s).unwrap(), render_lit(&s).unwrap());
        let s = Scene::constant(2, 3, [0.7; 3], [0.0; 3], [0.9; 3], 1.0);
        assert_eq!(render_shadow(&s).unwrap(), render_lit(&s).unwrap());
    }

    #[test]
    fn invalid_scene_rejected() {
        let mut s = Scene::constant(2, 2, [0.5; 3], [0.5; 3], [0.5; 3], 0.5);
        s.mask = Plane::filled(2, 2, 0.5);
        assert!(render_lit(&s).is_err());
        let mut s = Scene::constant(2, 2, [0.5; 3], [0.5; 3], [0.5; 3], 0.5);
        s.attenuation = Plane::filled(2, 3, 0.5);
        assert!(render_shadow(&s).is_err());
    }

    #[test]
    fn degradation_examples() {
        let img = RgbImage::from_fn(9, 7, |y, x| [y as f64 / 9.0, x as f64 / 7.0, 0.123456]);
        let near = apply_degradation(&img, &DegradationConfig::clean()).unwrap();
        let lsb = 1.0 / 65535.0;
        assert!(near.max_abs_diff(&img) <= lsb);
        let one_bit = DegradationConfig {
            quant_bits: 1,
            ..DegradationConfig::default()
        };
        assert!(apply_degradation(&img, &one_bit)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0 || *v == 1.0));
        let noisy = DegradationConfig {
            noise_std: 0.05,
            blur_radius: 2,
            seed: 9,
            ..DegradationConfig::default()
        };
        assert_eq!(apply_degradation(&img, &noisy).unwrap(), apply_degradation(&img, &noisy).unwrap());
        let bad = DegradationConfig {
            quant_bits: 0,
            ..DegradationConfig::default()
        };
        assert!(apply_degradation(&img, &bad).is_err());
    }

    #[test]
    fn retinex_examples() {
        let gray = RgbImage::filled(10, 10, [0.4; 3]);
        let r = retinex_decompose(&gray).unwrap();
        assert!(r.illumination.data().iter().all(|v| close(*v, 0.4, 1e-12)));
        assert!(r.reflectance.data().iter().all(|v| close(*v, 1.0, 1e-12)));
        let black = retinex_decompose(&RgbImage::filled(5, 5, [0.0; 3])).unwrap();
        assert!(black.illumination.data().iter().all(|v| *v == RETINEX_EPS));
        assert!(black.reflectance.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bias_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_scene(&mut rng, 24, 24, &SceneConfig::default());
        let lit = render_lit(&s).unwrap();
        let r = color_bias_analysis(&[(lit.clone(), lit.clone(), s.mask.clone())], &BiasConfig::default()).unwrap();
        assert_eq!(r.mean, [0.0; 3]);
        assert_eq!(r.samples, s.mask.data().iter().filter(|v| **v > 0.5).count());
        let zero_bin = r.bins / 2;
        for h in &r.histograms {
            assert_eq!(h[zero_bin], r.samples);
        }
        assert_eq!(r.to_tsv().lines().count(), 1 + 3 * r.bins);
        assert_eq!(r.plot().dims(), (240, 4 * r.bins));
        let empty = Plane::filled(24, 24, 0.0);
        assert!(matches!(
            color_bias_analysis(&[(lit.clone(), lit, empty)], &BiasConfig::default()),
            Err(Error::NoSamples(_))
        ));
    }

    #[test]
    fn blue_ambient_biases_blue() {
        let (h, w) = (16, 16);
        let mut s = Scene::constant(h, w, [0.6, 0.5, 0.4], [0.7, 0.7, 0.6], [0.2, 0.25, 0.4], 0.8);
        s.mask = Plane::from_fn(h, w, |_, x| if x < 8 { 1.0 } else { 0.0 });
        let pair = (render_shadow(&s).unwrap(), render_lit(&s).unwrap(), s.mask.clone());
        let r = color_bias_analysis(&[pair], &BiasConfig::default()).unwrap();
        assert!(r.mean[2] > r.mean[0]);
    }

    #[test]
    fn generated_dataset_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DegradationConfig::default();
        let sc = SceneConfig::default();
        let ts = generate_dataset(3, (32, 24), &cfg, &sc, 7, dir.path()).unwrap();
        let scanned = data_io::scan_dataset(dir.path()).unwrap();
        assert_eq!(scanned.len(), 3);
        for (i, t) in ts.iter().enumerate() {
            let (_, lit, _) = synth_sample(7, i, 32, 24, &sc).unwrap();
            assert_eq!(t.gt.as_ref().unwrap(), &data_io::quantize8(&lit));
            let inside = |img: &RgbImage| {
                let (l, _) = crate::colorspace::decouple(img).unwrap();
                let sel: Vec<f64> = l.data().iter().zip(t.mask.data()).filter(|(_, m)| **m > 0.5).map(|(v, _)| *v).collect();
                sel.iter().sum::<f64>() / sel.len() as f64
            };
            assert!(inside(&t.shadow) < inside(t.gt.as_ref().unwrap()));
            assert_eq!(&data_io::load_triplet(&scanned[i]).unwrap(), t);
        }
        assert!(generate_dataset(0, (8, 8), &cfg, &sc, 7, dir.path()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn constant_field_ratio(alb in 0.05f64..1.0, sd in 0.0f64..0.6, sa in 0.01f64..0.4, a in 0.0f64..1.0) {
            let mut s = Scene::constant(3, 3, [alb; 3], [sd; 3], [sa; 3], a);
            s.mask = Plane::from_fn(3, 3, |y, _| if y == 1 { 1.0 } else { 0.0 });
            let (lit, sh) = (render_lit(&s).unwrap(), render_shadow(&s).unwrap());
            for i in 0..9 {
                let ratio = sh.data()[i] / lit.data()[i];
                let expected = if s.mask.data()[i / 3] == 1.0 { a * sa / (sd + sa) } else { 1.0 };
                prop_assert!((ratio - expected).abs() <= 1e-6);
                prop_assert!(sh.data()[i] <= lit.data()[i]);
            }
        }

        #[test]
        fn degradation_stays_in_range(seed in 0u64..1000, std in 0.0f64..0.5, bits in 1u32..=16, r in 0usize..3) {
            let img = RgbImage::from_fn(6, 5, |y, x| [(y * x) as f64 / 30.0, 0.5, 1.0]);
            let out = apply_degradation(&img, &DegradationConfig { noise_std: std, quant_bits: bits, blur_radius: r, seed }).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn retinex_reconstructs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
            let r = retinex_decompose(&img).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let l = r.illumination.get(y, x);
                    if l > RETINEX_EPS {
                        for (c, v) in img.pixel(y, x).iter().enumerate() {
                            prop_assert!((r.reflectance.pixel(y, x)[c] * l - v).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
