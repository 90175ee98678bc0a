//! Luminance restoration network.
//!
//! The backbone consumes luminance (plus the shadow mask by default) and predicts a
//! luminance residual. Its ROA stages attend with color features produced from the chroma
//! planes by a [`ColorStem`].

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ColorStem, SIZE_MULTIPLE};
use crate::batch::{chroma_tensor, luma_tensor, mask_tensor, tensor_to_planes};
use crate::error::{Error, Result};
use crate::image::{same_dims, ChromaPlanes, LumaPlane, Plane};
use crate::nn::{pad_to_multiple, scalar};
use crate::params::ParamStore;
use crate::training::perceptual::PerceptualExtractor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrNetConfig {
    pub backbone: BackboneConfig,
    /// Concatenate the shadow mask to the luminance input.
    pub mask_input: bool,
}

impl Default for LrNetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            mask_input: true,
        }
    }
}

pub struct LrNet {
    config: LrNetConfig,
    stem: ColorStem,
    backbone: Backbone,
    dtype: DType,
}

/// Checks that luminance, chroma and mask share dims.
pub(crate) fn check_inputs(luma: &Plane, chroma: &ChromaPlanes, mask: &Plane) -> Result<()> {
    same_dims(luma.dims(), chroma.cb.dims(), "cb plane")?;
    same_dims(luma.dims(), chroma.cr.dims(), "cr plane")?;
    same_dims(luma.dims(), mask.dims(), "mask")?;
    mask.validate()
}

impl LrNet {
    /// Builds the network on `store`, creating parameters that do not exist yet.
    pub fn new(config: &LrNetConfig, store: &ParamStore) -> Result<Self> {
        let p = store.root();
        let dims = config.backbone.dims();
        let wanted = std::array::from_fn(|k| config.backbone.is_roa(k));
        let in_dim = 1 + usize::from(config.mask_input);
        Ok(Self {
            config: config.clone(),
            stem: ColorStem::new(&p.pp("color_stem"), 2, dims, wanted)?,
            backbone: Backbone::new(&p.pp("backbone"), &config.backbone, in_dim, 1, dims)?,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &LrNetConfig {
        &self.config
    }

    /// Batched forward on `B×H×W×1` luminance, `B×H×W×2` chroma and `B×H×W×1` mask.
    pub fn forward(&self, luma: &Tensor, chroma: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = luma.dims4()?;
        for (t, c, what) in [(chroma, 2, "chroma"), (mask, 1, "mask")] {
            if t.dims() != [b, h, w, c] {
                return Err(Error::validation(format!(
                    "{what} tensor is {:?}, expected {:?}",
                    t.dims(),
                    [b, h, w, c]
                )));
            }
        }
        let input = if self.config.mask_input {
            Tensor::cat(&[luma, mask], 3)?
        } else {
            luma.clone()
        };
        let input = pad_to_multiple(&input, SIZE_MULTIPLE)?;
        let color = self.stem.forward(&pad_to_multiple(chroma, SIZE_MULTIPLE)?)?;
        let delta = self
            .backbone
            .forward(&input, &color, &|_, t| Ok(t))?
            .narrow(1, 0, h)?
            .narrow(2, 0, w)?;
        Ok((luma + delta)?.clamp(0.0, 1.0)?)
    }

    pub fn restore(&self, luma: &LumaPlane, chroma: &ChromaPlanes, mask: &Plane) -> Result<LumaPlane> {
        check_inputs(luma, chroma, mask)?;
        let out = self.forward(
            &luma_tensor(&[luma], self.dtype)?,
            &chroma_tensor(&[chroma], self.dtype)?,
            &mask_tensor(&[mask], self.dtype)?,
        )?;
        let plane = tensor_to_planes(&out)?.remove(0).remove(0);
        plane.ensure_finite()?;
        Ok(LumaPlane(plane))
    }
}

/// Restores the luminance of one image with `net`.
pub fn lrnet_forward(luma: &LumaPlane, chroma: &ChromaPlanes, mask: &Plane, net: &LrNet) -> Result<LumaPlane> {
    net.restore(luma, chroma, mask)
}

/// `mean|pred − gt| + w_p · perceptual(pred, gt)` on `B×H×W×1` luminance batches; the
/// perceptual term sees the luminance replicated to three channels.
pub fn lrnet_loss(
    pred: &Tensor,
    gt: &Tensor,
    perceptual_weight: f64,
    extractor: Option<&PerceptualExtractor>,
) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::validation(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let l1 = (pred - gt)?.abs()?.mean_all()?;
    match extractor {
        Some(ext) if perceptual_weight != 0.0 => {
            let rgb = |t: &Tensor| Tensor::cat(&[t, t, t], 3);
            let p = ext.distance(&rgb(pred)?, &rgb(gt)?)?;
            Ok((l1 + (p * perceptual_weight)?)?)
        }
        _ => Ok(l1),
    }
}

/// Plane-level convenience wrapper around [`lrnet_loss`].
pub fn lrnet_loss_planes(
    pred: &LumaPlane,
    gt: &LumaPlane,
    perceptual_weight: f64,
    extractor: Option<&PerceptualExtractor>,
) -> Result<f64> {
    same_dims(pred.dims(), gt.dims(), "target luminance")?;
    let p = luma_tensor(&[pred], DType::F64)?;
    let g = luma_tensor(&[gt], DType::F64)?;
    scalar(&lrnet_loss(&p, &g, perceptual_weight, extractor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{RoaConfig, WindowGeometry};
    use proptest::prelude::*;

    fn tiny() -> LrNetConfig {
        LrNetConfig {
            backbone: BackboneConfig {
                base_dim: 8,
                encoder_blocks: 1,
                bottleneck_blocks: 1,
                decoder_blocks: 1,
                refinement_blocks: 1,
                heads: [1, 2, 2, 4],
                roa: RoaConfig {
                    geometry: WindowGeometry::new(4, 0.5, 2).unwrap(),
                    ..RoaConfig::default()
                },
                ..BackboneConfig::default()
            },
            mask_input: true,
        }
    }

    fn plane(h: usize, w: usize, seed: u64) -> Plane {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random())
    }

    fn inputs(h: usize, w: usize) -> (LumaPlane, ChromaPlanes, Plane) {
        (
            LumaPlane(plane(h, w, 1)),
            ChromaPlanes::new(plane(h, w, 2), plane(h, w, 3)).unwrap(),
            plane(h, w, 4).threshold(0.5),
        )
    }

    #[test]
    fn zero_init_head_is_identity() {
        let store = ParamStore::new(3, DType::F64);
        let net = LrNet::new(&tiny(), &store).unwrap();
        for (h, w) in [(16, 16), (20, 12)] {
            let (l, c, m) = inputs(h, w);
            let out = lrnet_forward(&l, &c, &m, &net).unwrap();
            assert_eq!(out.dims(), (h, w));
            assert_eq!(out.data(), l.data());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let store = ParamStore::new(3, DType::F64);
        let net = LrNet::new(&tiny(), &store).unwrap();
        let (l, c, _) = inputs(16, 16);
        let m = Plane::filled(16, 8, 0.0);
        assert!(matches!(lrnet_forward(&l, &c, &m, &net), Err(Error::Validation(_))));
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let mut cfg = tiny();
        cfg.backbone.zero_init_head = false;
        let store = ParamStore::new(11, DType::F64);
        let net = LrNet::new(&cfg, &store).unwrap();
        let (l, c, m) = inputs(16, 16);
        let target = LumaPlane(plane(16, 16, 9));
        let out = net
            .forward(
                &luma_tensor(&[&l], DType::F64).unwrap(),
                &chroma_tensor(&[&c], DType::F64).unwrap(),
                &mask_tensor(&[&m], DType::F64).unwrap(),
            )
            .unwrap();
        let loss = lrnet_loss(&out, &luma_tensor(&[&target], DType::F64).unwrap(), 0.0, None).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            let norm = scalar(&g.sqr().unwrap().sum_all().unwrap()).unwrap();
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }

    #[test]
    fn deterministic_output() {
        let store = ParamStore::new(5, DType::F32);
        let mut cfg = tiny();
        cfg.backbone.zero_init_head = false;
        let net = LrNet::new(&cfg, &store).unwrap();
        let (l, c, m) = inputs(16, 24);
        let a = lrnet_forward(&l, &c, &m, &net).unwrap();
        let b = lrnet_forward(&l, &c, &m, &net).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loss_known_values() {
        let gt = LumaPlane(plane(6, 5, 7).map(|v| v * 0.8));
        assert_eq!(lrnet_loss_planes(&gt, &gt, 0.0, None).unwrap(), 0.0);
        let ext = PerceptualExtractor::random(DType::F64).unwrap();
        assert_eq!(lrnet_loss_planes(&gt, &gt, 0.1, Some(&ext)).unwrap(), 0.0);
        let pred = LumaPlane(gt.map(|v| v + 0.1));
        assert!((lrnet_loss_planes(&pred, &gt, 0.0, None).unwrap() - 0.1).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_permutation_invariant(seed in 0u64..10_000, shift in 1usize..29) {
            let a = plane(5, 6, seed);
            let b = plane(5, 6, seed + 1);
            let perm = |p: &Plane| {
                let n = p.data().len();
                Plane::new(5, 6, (0..n).map(|i| p.data()[(i + shift) % n]).collect()).unwrap()
            };
            let l0 = lrnet_loss_planes(&LumaPlane(a.clone()), &LumaPlane(b.clone()), 0.0, None).unwrap();
            let l1 = lrnet_loss_planes(&LumaPlane(perm(&a)), &LumaPlane(perm(&b)), 0.0, None).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-12);
        }
    }
}
