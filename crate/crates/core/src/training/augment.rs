//! Training-sample augmentation: dihedral transforms, mixup, color jitter and cropping.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::colorspace::{KB, KG, KR};
use crate::data_io::Triplet;
use crate::error::{ensure, Error, Result};
use crate::image::{same_dims, Geometric, Plane, RgbImage};

/// A training triplet with its ground truth present.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shadow: RgbImage,
    pub gt: RgbImage,
    pub mask: Plane,
}

impl TryFrom<Triplet> for Sample {
    type Error = Error;

    fn try_from(t: Triplet) -> Result<Self> {
        t.validate()?;
        let gt = t
            .gt
            .ok_or_else(|| Error::validation(format!("sample `{}` has no ground truth", t.id)))?;
        Ok(Self {
            id: t.id,
            shadow: t.shadow,
            gt,
            mask: t.mask,
        })
    }
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.shadow.dims()
    }

    pub fn transform(&self, g: Geometric) -> Self {
        Self {
            id: self.id.clone(),
            shadow: self.shadow.transform(g),
            gt: self.gt.transform(g),
            mask: self.mask.transform(g),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            id: self.id.clone(),
            shadow: self.shadow.crop(y0, x0, h, w),
            gt: self.gt.crop(y0, x0, h, w),
            mask: self.mask.crop(y0, x0, h, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Random quarter-turn rotations.
    pub rotation: bool,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    /// Probability of blending with a second sample.
    pub mixup_prob: f64,
    /// Shape of the symmetric Beta distribution of the mixup weight.
    pub mixup_alpha: f64,
    /// Probability of jittering the shadow input.
    pub jitter_prob: f64,
    /// Multiplicative brightness range.
    pub brightness: (f64, f64),
    /// Saturation scale range (1 keeps colors).
    pub saturation: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            flips: true,
            mixup_prob: 0.2,
            mixup_alpha: 0.4,
            jitter_prob: 0.5,
            brightness: (0.9, 1.1),
            saturation: (0.8, 1.2),
        }
    }
}

impl AugmentationConfig {
    /// Geometric transforms only.
    pub fn geometric_only() -> Self {
        Self {
            mixup_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("mixup_prob", self.mixup_prob), ("jitter_prob", self.jitter_prob)] {
            ensure((0.0..=1.0).contains(&p), || format!("{what} {p} outside [0,1]"))?;
        }
        ensure(self.mixup_alpha > 0.0, || "mixup_alpha must be positive".into())?;
        for (what, (lo, hi)) in [("brightness", self.brightness), ("saturation", self.saturation)] {
            ensure(lo >= 0.0 && lo <= hi, || format!("{what} range ({lo}, {hi}) is invalid"))?;
        }
        Ok(())
    }
}

/// `weight·a + (1 − weight)·b` for images and masks alike. Masks become soft.
pub fn mixup(a: &Sample, b: &Sample, weight: f64) -> Result<Sample> {
    same_dims(a.dims(), b.dims(), "mixup partner")?;
    if weight == 1.0 {
        return Ok(a.clone());
    }
    let blend = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(p, q)| weight * p + (1.0 - weight) * q).collect()
    };
    let (h, w) = a.dims();
    Ok(Sample {
        id: a.id.clone(),
        shadow: RgbImage::new(h, w, blend(a.shadow.data(), b.shadow.data()))?,
        gt: RgbImage::new(h, w, blend(a.gt.data(), b.gt.data()))?,
        mask: Plane::new(h, w, blend(a.mask.data(), b.mask.data()))?,
    })
}

/// Scales brightness, then saturation around each pixel's luminance; clamps to `[0,1]`.
pub fn color_jitter(img: &RgbImage, brightness: f64, saturation: f64) -> RgbImage {
    let (h, w) = img.dims();
    RgbImage::from_fn(h, w, |y, x| {
        let p = img.pixel(y, x).map(|v| v * brightness);
        let l = KR * p[0] + KG * p[1] + KB * p[2];
        p.map(|v| (l + saturation * (v - l)).clamp(0.0, 1.0))
    })
}

fn range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn random_geometric(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Geometric {
    Geometric {
        rot: if cfg.rotation { rng.random_range(0..4) } else { 0 },
        hflip: cfg.flips && rng.random_bool(0.5),
        vflip: cfg.flips && rng.random_bool(0.5),
    }
}

/// Mixup with `partner` (when drawn and dims agree), then one geometric transform for
/// every plane, then color jitter on the shadow input only.
pub fn augment(sample: &Sample, partner: &Sample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let mut s = sample.clone();
    if cfg.mixup_prob > 0.0 && rng.random_bool(cfg.mixup_prob) && partner.dims() == sample.dims() {
        let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("validated alpha");
        s = mixup(&s, partner, beta.sample(rng))?;
    }
    s = s.transform(random_geometric(cfg, rng));
    if cfg.jitter_prob > 0.0 && rng.random_bool(cfg.jitter_prob) {
        let b = range(rng, cfg.brightness);
        let sat = range(rng, cfg.saturation);
        s.shadow = color_jitter(&s.shadow, b, sat);
    }
    Ok(s)
}

/// Uniformly placed `size×size` crop (clipped to the sample).
pub fn random_crop(sample: &Sample, size: usize, rng: &mut impl Rng) -> Sample {
    let (h, w) = sample.dims();
    let (ch, cw) = (size.min(h), size.min(w));
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    sample.crop(y0, x0, ch, cw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || RgbImage::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (shadow, gt) = (img(), img());
        Sample {
            id: "s".into(),
            shadow,
            gt,
            mask: Plane::from_fn(h, w, |y, x| if y < h / 2 && x > w / 3 { 1.0 } else { 0.0 }),
        }
    }

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn double_hflip_is_identity() {
        let s = sample(5, 7, 1);
        let f = Geometric {
            hflip: true,
            ..Geometric::IDENTITY
        };
        assert_eq!(s.transform(f).transform(f), s);
    }

    #[test]
    fn mixup_weight_one_keeps_first() {
        let (a, b) = (sample(4, 4, 1), sample(4, 4, 2));
        assert_eq!(mixup(&a, &b, 1.0).unwrap(), a);
        let half = mixup(&a, &b, 0.5).unwrap();
        assert!((half.mask.get(0, 3) - 1.0).abs() < 1e-12 || half.mask.get(0, 3) == 0.0);
        assert!(mixup(&a, &sample(4, 5, 2), 0.5).is_err());
    }

    #[test]
    fn rotation_preserves_multisets() {
        let s = sample(6, 9, 3);
        let r = s.transform(Geometric {
            rot: 1,
            ..Geometric::IDENTITY
        });
        assert_eq!(r.dims(), (9, 6));
        assert_eq!(sorted(s.shadow.data()), sorted(r.shadow.data()));
        assert_eq!(sorted(s.gt.data()), sorted(r.gt.data()));
        assert_eq!(sorted(s.mask.data()), sorted(r.mask.data()));
    }

    #[test]
    fn jitter_touches_input_only() {
        let s = sample(8, 8, 4);
        let cfg = AugmentationConfig {
            rotation: false,
            flips: false,
            mixup_prob: 0.0,
            jitter_prob: 1.0,
            ..AugmentationConfig::default()
        };
        let out = augment(&s, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.gt, s.gt);
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.shadow, s.shadow);
        assert_eq!(color_jitter(&s.shadow, 1.0, 1.0), s.shadow);
    }

    #[test]
    fn invalid_config_rejected() {
        let s = sample(4, 4, 1);
        let cfg = AugmentationConfig {
            mixup_prob: 1.5,
            ..AugmentationConfig::default()
        };
        assert!(augment(&s, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mask_alignment_preserved(seed in 0u64..10_000) {
            let mut s = sample(6, 10, seed);
            // tag each pixel so its origin can be traced through the transform
            s.gt = RgbImage::from_fn(6, 10, |y, x| [y as f64 / 10.0, x as f64 / 10.0, s.mask.get(y, x)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&s, &s, &AugmentationConfig::geometric_only(), &mut rng).unwrap();
            let (h, w) = out.dims();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(out.gt.pixel(y, x)[2], out.mask.get(y, x));
                }
            }
        }

        #[test]
        fn crop_fits(seed in 0u64..1000, size in 1usize..20) {
            let s = sample(9, 13, seed);
            let c = random_crop(&s, size, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(c.dims(), (size.min(9), size.min(13)));
        }
    }
}
