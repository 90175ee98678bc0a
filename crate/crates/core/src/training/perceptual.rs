//! Frozen convolutional feature pyramid used as a perceptual distance.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{pad_to_multiple, Conv3x3, Downsample};
use crate::params::ParamStore;

/// Seed of the default random (non-imported) extractor weights.
pub const DEFAULT_SEED: u64 = 0x7065_7263;
const DIMS: [usize; 3] = [16, 32, 64];

/// Three-level feature pyramid with frozen weights.
///
/// Block names, for importing external weights: `level0.conv` (3→16, 3×3),
/// `level1.down` (16→32, 2×2 stride 2), `level1.conv` (32→32, 3×3), `level2.down` (32→64).
pub struct PerceptualExtractor {
    conv0: Conv3x3,
    down1: Downsample,
    conv1: Conv3x3,
    down2: Downsample,
}

impl PerceptualExtractor {
    pub fn random(dtype: DType) -> Result<Self> {
        Self::from_store(&ParamStore::new(DEFAULT_SEED, dtype))
    }

    /// Loads weights from a parameter archive holding every block listed above.
    pub fn from_archive(path: &Path, dtype: DType) -> Result<Self> {
        let (_, store) = ParamStore::load(path, dtype)?;
        Self::from_store(&store).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }

    fn from_store(store: &ParamStore) -> Result<Self> {
        let build = |store: &ParamStore| -> Result<Self> {
            let p = store.root();
            Ok(Self {
                conv0: Conv3x3::new(&p.pp("level0.conv"), 3, DIMS[0], true)?,
                down1: Downsample::new(&p.pp("level1.down"), DIMS[0], DIMS[1])?,
                conv1: Conv3x3::new(&p.pp("level1.conv"), DIMS[1], DIMS[1], true)?,
                down2: Downsample::new(&p.pp("level2.down"), DIMS[1], DIMS[2])?,
            })
        };
        // first pass materializes parameters, second reads them detached
        build(store)?;
        build(&store.frozen_view())
    }

    /// Feature maps of a `B×H×W×3` batch with `H`, `W` multiples of 4, fine to coarse.
    pub fn features(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let f0 = self.conv0.forward(x)?.relu()?;
        let f1 = self.conv1.forward(&self.down1.forward(&f0)?.relu()?)?.relu()?;
        let f2 = self.down2.forward(&f1)?.relu()?;
        Ok([f0, f1, f2])
    }

    /// Sum over levels of the mean absolute feature difference. Inputs are reflect-padded
    /// to a multiple of 4.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::validation(format!(
                "perceptual inputs differ in shape: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let (a, b) = (pad_to_multiple(a, 4)?, pad_to_multiple(b, 4)?);
        let (fa, fb) = (self.features(&a)?, self.features(&b)?);
        let mut total = Tensor::zeros((), a.dtype(), a.device())?;
        for (x, y) in fa.iter().zip(fb.iter()) {
            total = (total + (x - y)?.abs()?.mean_all()?)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use proptest::prelude::*;

    fn batch(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * 8 * 8 * 3).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (2, 8, 8, 3), &candle_core::Device::Cpu).unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let ext = PerceptualExtractor::random(DType::F64).unwrap();
        let a = batch(1);
        assert_eq!(scalar(&ext.distance(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn weights_are_fixed() {
        let a = PerceptualExtractor::random(DType::F64).unwrap();
        let b = PerceptualExtractor::random(DType::F64).unwrap();
        let (x, y) = (batch(2), batch(3));
        let da = scalar(&a.distance(&x, &y).unwrap()).unwrap();
        let db = scalar(&b.distance(&x, &y).unwrap()).unwrap();
        assert_eq!(da, db);
        assert!(da > 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ext = PerceptualExtractor::random(DType::F64).unwrap();
        let b = Tensor::zeros((2, 8, 6, 3), DType::F64, &candle_core::Device::Cpu).unwrap();
        assert!(ext.distance(&batch(1), &b).is_err());
    }

    #[test]
    fn archive_import_round_trip() {
        let store = ParamStore::new(99, DType::F32);
        PerceptualExtractor::from_store(&store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.bin");
        store.save(&path, 0).unwrap();
        let imported = PerceptualExtractor::from_archive(&path, DType::F64).unwrap();
        let reference = PerceptualExtractor::from_store(&store.to_dtype(DType::F64).unwrap()).unwrap();
        let (x, y) = (batch(4), batch(5));
        let a = scalar(&imported.distance(&x, &y).unwrap()).unwrap();
        let b = scalar(&reference.distance(&x, &y).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000) {
            let ext = PerceptualExtractor::random(DType::F64).unwrap();
            let (a, b) = (batch(s1), batch(s2));
            let ab = scalar(&ext.distance(&a, &b).unwrap()).unwrap();
            let ba = scalar(&ext.distance(&b, &a).unwrap()).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
