//! Shadow-mask refinement.
//!
//! A small U-Net over the RGB image and a dirty mask predicts a cleaned mask. An auxiliary
//! convolutional encoder over the RGB image feeds its pyramid into every decoder skip.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::RoaConfig;
use crate::backbone::{Backbone, BackboneConfig, LEVELS, SIZE_MULTIPLE};
use crate::batch::{mask_tensor, rgb_tensor, tensor_to_planes};
use crate::crnet::{injectors, ColorEncoder, InjectorSpec, SkipInjector};
use crate::error::{ensure, Error, Result};
use crate::image::{same_dims, Plane, RgbImage};
use crate::nn::pad_to_multiple;
use crate::params::ParamStore;

/// Probability clamp inside the cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskRefineConfig {
    pub backbone: BackboneConfig,
    /// Feed the auxiliary RGB pyramid into the decoder.
    pub image_features: bool,
    /// Skip injector used for the auxiliary pyramid.
    pub injection: String,
}

impl Default for MaskRefineConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                base_dim: 16,
                encoder_blocks: 1,
                bottleneck_blocks: 1,
                decoder_blocks: 1,
                refinement_blocks: 1,
                heads: [1, 2, 4, 8],
                roa_stages: Vec::new(),
                roa: RoaConfig::default(),
                zero_init_head: false,
                head_gain: 0.1,
            },
            image_features: true,
            injection: "concat".into(),
        }
    }
}

impl MaskRefineConfig {
    /// The refiner has no color path, so every stage must use the non-ROA mixer.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        ensure(self.backbone.roa_stages.is_empty(), || {
            "mask_refine.backbone.roa_stages must be empty (the refiner has no color features)".into()
        })
    }
}

pub struct MaskRefiner {
    encoder: Option<(ColorEncoder, Vec<Box<dyn SkipInjector>>)>,
    backbone: Backbone,
    dtype: DType,
}

impl MaskRefiner {
    pub fn new(config: &MaskRefineConfig, store: &ParamStore) -> Result<Self> {
        let p = store.root();
        config.validate()?;
        let bb = &config.backbone;
        let dims = bb.dims();
        let encoder = if config.image_features {
            let build = injectors().get(&config.injection)?;
            let inject = (0..LEVELS)
                .map(|k| {
                    let spec = InjectorSpec {
                        dim: dims[k],
                        color_dim: dims[k],
                        heads: bb.heads[k],
                        window: 8,
                    };
                    build(&p.pp(format!("inject{k}")), &spec)
                })
                .collect::<Result<_>>()?;
            Some((ColorEncoder::new(&p.pp("image_encoder"), 3, dims)?, inject))
        } else {
            None
        };
        Ok(Self {
            encoder,
            backbone: Backbone::new(&p.pp("backbone"), bb, 4, 1, dims)?,
            dtype: store.dtype(),
        })
    }

    /// `B×H×W×3` image and `B×H×W×1` dirty mask → `B×H×W×1` probabilities.
    pub fn forward(&self, rgb: &Tensor, dirty: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = rgb.dims4()?;
        if dirty.dims() != [b, h, w, 1] {
            return Err(Error::validation(format!(
                "dirty mask tensor is {:?}, expected {:?}",
                dirty.dims(),
                [b, h, w, 1]
            )));
        }
        let input = pad_to_multiple(&Tensor::cat(&[rgb, dirty], 3)?, SIZE_MULTIPLE)?;
        let pyramid = match &self.encoder {
            Some((enc, _)) => Some(enc.forward(&pad_to_multiple(rgb, SIZE_MULTIPLE)?)?),
            None => None,
        };
        let hook = |k: usize, skip: Tensor| match (&self.encoder, &pyramid) {
            (Some((_, inject)), Some(pyr)) => inject[k].forward(&skip, &pyr[k]),
            _ => Ok(skip),
        };
        let logits = self
            .backbone
            .forward(&input, &Default::default(), &hook)?
            .narrow(1, 0, h)?
            .narrow(2, 0, w)?;
        Ok((logits.neg()?.exp()? + 1.0)?.recip()?)
    }

    pub fn refine(&self, img: &RgbImage, dirty: &Plane) -> Result<Plane> {
        same_dims(img.dims(), dirty.dims(), "dirty mask")?;
        img.validate()?;
        dirty.validate()?;
        let out = self.forward(&rgb_tensor(&[img], self.dtype)?, &mask_tensor(&[dirty], self.dtype)?)?;
        let p = tensor_to_planes(&out)?.remove(0).remove(0);
        p.ensure_finite()?;
        Ok(p)
    }
}

/// Probability map in `[0,1]`; threshold at 0.5 for a binary mask.
pub fn refine_mask(img: &RgbImage, dirty: &Plane, net: &MaskRefiner) -> Result<Plane> {
    net.refine(img, dirty)
}

/// Binary cross-entropy (probabilities clamped to `[ε, 1−ε]`) plus soft Dice, equal weights.
pub fn mask_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::validation(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (gt * p.log()?)?;
    let neg = (gt.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    let bce = (pos + neg)?.mean_all()?.neg()?;
    let inter = (pred * gt)?.sum_all()?;
    let total = (pred.sum_all()? + gt.sum_all()?)?;
    let dice = ((inter * 2.0)? + BCE_EPS)?.div(&(total + BCE_EPS)?)?.affine(-1.0, 1.0)?;
    Ok((bce + dice)?)
}

fn morph(mask: &Plane, r: usize, dilate: bool) -> Plane {
    let (h, w) = mask.dims();
    let r = r as isize;
    Plane::from_fn(h, w, |y, x| {
        let mut hit = !dilate;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let on = mask.get(yy as usize, xx as usize) > 0.5;
                if dilate && on {
                    hit = true;
                } else if !dilate && !on {
                    hit = false;
                }
            }
        }
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

pub fn dilate(mask: &Plane, r: usize) -> Plane {
    morph(mask, r, true)
}

pub fn erode(mask: &Plane, r: usize) -> Plane {
    morph(mask, r, false)
}

/// Dilation or erosion by 1–5 pixels, then up to three rectangular holes.
pub fn corrupt_mask(mask: &Plane, rng: &mut impl Rng) -> Plane {
    let (h, w) = mask.dims();
    let r = rng.random_range(1..=5);
    let mut out = if rng.random_bool(0.5) {
        dilate(mask, r)
    } else {
        erode(mask, r)
    };
    for _ in 0..rng.random_range(0..=3) {
        let rh = rng.random_range(1..=(h / 4).max(1));
        let rw = rng.random_range(1..=(w / 4).max(1));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                out.set(y, x, 0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, v.len(), 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn output_is_probability_map() {
        let store = ParamStore::new(1, DType::F64);
        let net = MaskRefiner::new(&MaskRefineConfig::default(), &store).unwrap();
        let img = RgbImage::from_fn(20, 14, |y, x| [y as f64 / 20.0, x as f64 / 14.0, 0.5]);
        let dirty = Plane::from_fn(20, 14, |y, _| if y < 9 { 1.0 } else { 0.0 });
        let out = refine_mask(&img, &dirty, &net).unwrap();
        assert_eq!(out.dims(), (20, 14));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // head starts unsaturated
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 0.1));
        assert_eq!(refine_mask(&img, &dirty, &net).unwrap(), out);
        assert!(refine_mask(&img, &Plane::filled(20, 13, 0.0), &net).is_err());
    }

    #[test]
    fn roa_stages_rejected() {
        let mut cfg = MaskRefineConfig::default();
        cfg.backbone.roa_stages = vec![2, 3];
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        assert!(MaskRefiner::new(&cfg, &ParamStore::new(1, DType::F64)).is_err());
    }

    #[test]
    fn loss_examples() {
        let gt = t(&[1.0, 0.0, 1.0, 1.0]);
        assert!(scalar(&mask_loss(&gt, &gt).unwrap()).unwrap() < 1e-6);
        let inv = t(&[0.0, 1.0, 0.0, 0.0]);
        let dice_only = {
            let inter = 0.0;
            1.0 - (2.0 * inter + BCE_EPS) / (4.0 + BCE_EPS)
        };
        let l = scalar(&mask_loss(&inv, &gt).unwrap()).unwrap();
        assert!((dice_only - 1.0).abs() < 1e-7);
        assert!(l > dice_only);
        assert!(mask_loss(&gt, &t(&[1.0])).is_err());
    }

    #[test]
    fn morphology() {
        let mut m = Plane::filled(7, 7, 0.0);
        m.set(3, 3, 1.0);
        let d = dilate(&m, 1);
        assert_eq!(d.data().iter().filter(|v| **v == 1.0).count(), 9);
        assert_eq!(erode(&d, 1), m);
    }

    #[test]
    fn corruption_is_seeded() {
        let m = Plane::from_fn(32, 32, |y, x| if (8..24).contains(&y) && (4..20).contains(&x) { 1.0 } else { 0.0 });
        let a = corrupt_mask(&m, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let b = corrupt_mask(&m, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_ne!(a, m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_permutation_invariant(bits in proptest::collection::vec(0.0f64..1.0, 12), shift in 1usize..11) {
            let gt: Vec<f64> = bits.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
            let pred: Vec<f64> = bits.iter().map(|v| v * 0.9 + 0.05).collect();
            let perm = |v: &[f64]| (0..v.len()).map(|i| v[(i + shift) % v.len()]).collect::<Vec<_>>();
            let a = scalar(&mask_loss(&t(&pred), &t(&gt)).unwrap()).unwrap();
            let b = scalar(&mask_loss(&t(&perm(&pred)), &t(&perm(&gt))).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
