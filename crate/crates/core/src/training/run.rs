//! The training loops: luminance network first, then the color network against sampled
//! luminance snapshots, and the independent mask refiner.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, random_crop, AugmentationConfig, Sample};
use super::log::MetricsLog;
use super::optim::{cosine_lr, AdamW, OptimizerConfig};
use super::perceptual::PerceptualExtractor;
use super::pool::{sample_index, snapshot_steps, CheckpointPool};
use crate::batch::{chroma_tensor, luma_tensor, mask_tensor, rgb_tensor};
use crate::colorspace::{decouple, recouple_tensor};
use crate::crnet::{CrNet, CrNetConfig};
use crate::error::{ensure, Error, Result};
use crate::image::{ChromaPlanes, LumaPlane, Plane};
use crate::lrnet::{LrNet, LrNetConfig};
use crate::mask_refine::{corrupt_mask, mask_loss, MaskRefineConfig, MaskRefiner};
use crate::nn::scalar;
use crate::params::ParamStore;

/// Parameters are trained in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;
const DATA_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;

/// Space in which the color network's reconstruction loss is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorLossSpace {
    /// L1 between the recoupled prediction and the ground-truth RGB image.
    #[default]
    Rgb,
    /// L1 between predicted and ground-truth chroma planes.
    Chroma,
}

impl std::str::FromStr for ColorLossSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Self::Rgb),
            "chroma" => Ok(Self::Chroma),
            _ => Err(Error::validation(format!("unknown color loss space `{s}` (rgb, chroma)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    /// Weight of the perceptual term; the L1 term has weight 1.
    pub perceptual_weight: f64,
    /// Pretrained perceptual extractor weights; a fixed-seed random pyramid otherwise.
    pub perceptual_archive: Option<PathBuf>,
    /// Number of luminance snapshots kept for ensembling.
    pub snapshots: usize,
    /// Snapshots are spread evenly over this leading fraction of training.
    pub snapshot_fraction: f64,
    /// Train the color network against sampled snapshots instead of the final weights.
    pub ensemble: bool,
    pub color_loss: ColorLossSpace,
    /// Pretrained color-encoder weights for the color network.
    pub color_encoder_archive: Option<PathBuf>,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
            perceptual_weight: 0.1,
            perceptual_archive: None,
            snapshots: 5,
            snapshot_fraction: 0.5,
            ensemble: true,
            color_loss: ColorLossSpace::Rgb,
            color_encoder_archive: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        ensure(self.perceptual_weight >= 0.0, || "perceptual_weight must be non-negative".into())?;
        ensure(self.snapshots >= 1, || "at least one snapshot is required".into())?;
        ensure(self.snapshot_fraction > 0.0 && self.snapshot_fraction <= 1.0, || {
            format!("snapshot_fraction {} outside (0,1]", self.snapshot_fraction)
        })
    }

    fn extractor(&self) -> Result<Option<PerceptualExtractor>> {
        if self.perceptual_weight == 0.0 {
            return Ok(None);
        }
        Ok(Some(match &self.perceptual_archive {
            Some(path) => PerceptualExtractor::from_archive(path, TRAIN_DTYPE)?,
            None => PerceptualExtractor::random(TRAIN_DTYPE)?,
        }))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Tensors of one decoupled training batch.
pub struct Batch {
    pub luma: Tensor,
    pub chroma: Tensor,
    pub mask: Tensor,
    pub gt_luma: Tensor,
    pub gt_chroma: Tensor,
    pub gt_rgb: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], dtype: DType) -> Result<Self> {
        let split = |f: &dyn Fn(&Sample) -> &crate::image::RgbImage| {
            samples
                .iter()
                .map(|s| decouple(f(s)))
                .collect::<Result<Vec<(LumaPlane, ChromaPlanes)>>>()
        };
        let input = split(&|s| &s.shadow)?;
        let gt = split(&|s| &s.gt)?;
        let lumas = |v: &[(LumaPlane, ChromaPlanes)]| luma_tensor(&v.iter().map(|p| &p.0).collect::<Vec<_>>(), dtype);
        let chromas =
            |v: &[(LumaPlane, ChromaPlanes)]| chroma_tensor(&v.iter().map(|p| &p.1).collect::<Vec<_>>(), dtype);
        Ok(Self {
            luma: lumas(&input)?,
            chroma: chromas(&input)?,
            mask: mask_tensor(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>(), dtype)?,
            gt_luma: lumas(&gt)?,
            gt_chroma: chromas(&gt)?,
            gt_rgb: rgb_tensor(&samples.iter().map(|s| &s.gt).collect::<Vec<_>>(), dtype)?,
        })
    }
}

fn crop_side(data: &[Sample], cfg: &TrainConfig) -> Result<usize> {
    ensure(!data.is_empty(), || "training set is empty".into())?;
    let min_side = data.iter().map(|s| s.dims().0.min(s.dims().1)).min().unwrap_or(0);
    if min_side < cfg.optimizer.crop {
        log::warn!("crop {} exceeds smallest image side; using {min_side}", cfg.optimizer.crop);
    }
    Ok(cfg.optimizer.crop.min(min_side))
}

/// Draws one augmented, cropped batch. Per-sample randomness comes from seeds drawn on
/// `rng`, so the result does not depend on how many workers prepare it. Each sample's
/// generator is returned for any further per-sample draws.
pub fn draw_batch(
    data: &[Sample],
    cfg: &TrainConfig,
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Sample, ChaCha8Rng)>> {
    let picks: Vec<(usize, usize, u64)> = (0..cfg.optimizer.batch_size)
        .map(|_| (rng.random_range(0..data.len()), rng.random_range(0..data.len()), rng.random()))
        .collect();
    picks
        .into_par_iter()
        .map(|(i, j, seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = augment(&data[i], &data[j], &cfg.augmentation, &mut r)?;
            Ok((random_crop(&s, crop, &mut r), r))
        })
        .collect()
}

fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Returns the weighted total and the `[total, l1, perceptual]` values for logging.
fn reconstruction_loss(
    pred: &Tensor,
    gt: &Tensor,
    perceptual: Option<(&Tensor, &Tensor)>,
    weight: f64,
    extractor: Option<&PerceptualExtractor>,
) -> Result<(Tensor, Vec<f64>)> {
    let rec = l1(pred, gt)?;
    let rec_v = scalar(&rec)?;
    match (extractor, perceptual) {
        (Some(ext), Some((a, b))) if weight != 0.0 => {
            let p = ext.distance(a, b)?;
            let p_v = scalar(&p)?;
            let total = (rec + (p * weight)?)?;
            let total_v = scalar(&total)?;
            Ok((total, vec![total_v, rec_v, p_v]))
        }
        _ => Ok((rec, vec![rec_v, rec_v, 0.0])),
    }
}

/// Log columns of the luminance and color networks.
pub const LOSS_COLUMNS: [&str; 3] = ["loss", "l1", "perceptual"];
/// Log columns of the mask refiner.
pub const MASK_COLUMNS: [&str; 1] = ["loss"];

/// Shared optimization loop. `loss` maps a prepared batch to the loss tensor and the
/// logged values; `after_step` sees the store after each update.
fn optimize(
    store: &mut ParamStore,
    data: &[Sample],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    mut loss: impl FnMut(Vec<(Sample, ChaCha8Rng)>) -> Result<(Tensor, Vec<f64>)>,
    mut after_step: impl FnMut(usize, &mut ParamStore) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let crop = crop_side(data, cfg)?;
    let mut rng = cfg.rng(DATA_STREAM);
    let mut opt = AdamW::new(store, &cfg.optimizer)?;
    for step in 1..=cfg.optimizer.total_steps {
        let lr = cosine_lr(step - 1, &cfg.optimizer)?;
        let batch = draw_batch(data, cfg, crop, &mut rng)?;
        let (total, values) = loss(batch)?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: log
                    .columns()
                    .iter()
                    .zip(&values)
                    .map(|(n, v)| format!("{n}={v}"))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
        let grads = total.backward()?;
        opt.step(&grads, lr)?;
        store.set_step(step as u64);
        log.push(step, lr, &values)?;
        after_step(step, store)?;
    }
    Ok(())
}

pub fn lrnet_batch_loss(
    net: &LrNet,
    batch: &Batch,
    cfg: &TrainConfig,
    extractor: Option<&PerceptualExtractor>,
) -> Result<(Tensor, Vec<f64>)> {
    let pred = net.forward(&batch.luma, &batch.chroma, &batch.mask)?;
    let rgb = |t: &Tensor| Tensor::cat(&[t, t, t], 3);
    let (a, b) = (rgb(&pred)?, rgb(&batch.gt_luma)?);
    reconstruction_loss(&pred, &batch.gt_luma, Some((&a, &b)), cfg.perceptual_weight, extractor)
}

/// Trains the luminance network, returning its final weights and the snapshot pool.
pub fn train_lrnet(
    data: &[Sample],
    model: &LrNetConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<(ParamStore, CheckpointPool)> {
    let mut store = ParamStore::new(cfg.seed, TRAIN_DTYPE);
    let net = LrNet::new(model, &store)?;
    let extractor = cfg.extractor()?;
    let at = snapshot_steps(cfg.optimizer.total_steps, cfg.snapshots, cfg.snapshot_fraction);
    let mut pool = CheckpointPool::new();
    optimize(
        &mut store,
        data,
        cfg,
        log,
        |batch| {
            let samples: Vec<Sample> = batch.into_iter().map(|(s, _)| s).collect();
            lrnet_batch_loss(&net, &Batch::from_samples(&samples, TRAIN_DTYPE)?, cfg, extractor.as_ref())
        },
        |step, store| {
            if at.contains(&step) {
                pool.push(store)?;
            }
            Ok(())
        },
    )?;
    Ok((store, pool))
}

/// Where the color network gets its restored luminance during training.
pub struct LumaSource<'a> {
    pub config: &'a LrNetConfig,
    /// Final luminance weights, used when ensembling is off.
    pub weights: &'a ParamStore,
    pub pool: &'a CheckpointPool,
}

/// Color-network loss on a batch, with luminance restored by `lrnet` and detached so no
/// gradient reaches it.
pub fn crnet_batch_loss(
    crnet: &CrNet,
    lrnet: &LrNet,
    batch: &Batch,
    cfg: &TrainConfig,
    extractor: Option<&PerceptualExtractor>,
) -> Result<(Tensor, Vec<f64>)> {
    let luma_hat = lrnet.forward(&batch.luma, &batch.chroma, &batch.mask)?.detach();
    let chroma = crnet.forward(&luma_hat, &batch.chroma, &batch.mask)?;
    let rgb = recouple_tensor(&luma_hat, &chroma)?;
    let w = cfg.perceptual_weight;
    match cfg.color_loss {
        ColorLossSpace::Rgb => reconstruction_loss(&rgb, &batch.gt_rgb, Some((&rgb, &batch.gt_rgb)), w, extractor),
        ColorLossSpace::Chroma => {
            reconstruction_loss(&chroma, &batch.gt_chroma, Some((&rgb, &batch.gt_rgb)), w, extractor)
        }
    }
}

/// Trains the color network. With ensembling on, each batch draws a luminance snapshot
/// uniformly from the pool on a generator separate from the data stream.
pub fn train_crnet(
    data: &[Sample],
    luma: &LumaSource,
    model: &CrNetConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<ParamStore> {
    let stages: Vec<LrNet> = if cfg.ensemble {
        ensure(!luma.pool.is_empty(), || "checkpoint pool is empty".into())?;
        luma.pool
            .snapshots()
            .iter()
            .map(|s| LrNet::new(luma.config, &s.weights))
            .collect::<Result<_>>()?
    } else {
        vec![LrNet::new(luma.config, &luma.weights.frozen_snapshot()?)?]
    };
    let mut store = ParamStore::new(cfg.seed, TRAIN_DTYPE);
    let net = CrNet::new(model, &store)?;
    if let Some(path) = &cfg.color_encoder_archive {
        let (_, external) = ParamStore::load(path, TRAIN_DTYPE)?;
        CrNet::import_color_encoder(&store, &external)?;
    }
    let extractor = cfg.extractor()?;
    let mut pool_rng = cfg.rng(POOL_STREAM);
    optimize(
        &mut store,
        data,
        cfg,
        log,
        |batch| {
            let samples: Vec<Sample> = batch.into_iter().map(|(s, _)| s).collect();
            let k = if cfg.ensemble {
                sample_index(luma.pool, &mut pool_rng)?
            } else {
                0
            };
            crnet_batch_loss(&net, &stages[k], &Batch::from_samples(&samples, TRAIN_DTYPE)?, cfg, extractor.as_ref())
        },
        |_, _| Ok(()),
    )?;
    Ok(store)
}

/// Trains the mask refiner on synthetic corruptions of the (binarized) sample masks.
pub fn train_maskrefine(
    data: &[Sample],
    model: &MaskRefineConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<ParamStore> {
    let mut store = ParamStore::new(cfg.seed, TRAIN_DTYPE);
    let net = MaskRefiner::new(model, &store)?;
    optimize(
        &mut store,
        data,
        cfg,
        log,
        |batch| {
            let mut images = Vec::with_capacity(batch.len());
            let mut truth = Vec::with_capacity(batch.len());
            let mut dirty = Vec::with_capacity(batch.len());
            for (s, mut r) in batch {
                let m = s.mask.threshold(0.5);
                dirty.push(corrupt_mask(&m, &mut r));
                truth.push(m);
                images.push(s.shadow);
            }
            let masks = |v: &[Plane]| mask_tensor(&v.iter().collect::<Vec<_>>(), TRAIN_DTYPE);
            let pred = net.forward(&rgb_tensor(&images.iter().collect::<Vec<_>>(), TRAIN_DTYPE)?, &masks(&dirty)?)?;
            let loss = mask_loss(&pred, &masks(&truth)?)?;
            let v = scalar(&loss)?;
            Ok((loss, vec![v]))
        },
        |_, _| Ok(()),
    )?;
    Ok(store)
}
