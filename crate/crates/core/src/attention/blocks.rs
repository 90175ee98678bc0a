//! Channel attention, local range block and feed-forward network.

use candle_core::{Tensor, D};

use crate::error::{ensure, Result};
use crate::nn::{gelu, l2_normalize_last, softmax_last, Dense, DepthwiseConv3x3};
use crate::params::{Init, Params};

/// Multi-head transposed attention: a `C×C` attention per head over L2-normalized
/// channel descriptors, with a learnable per-head temperature. No biases.
pub struct Mta {
    heads: usize,
    qkv: Dense,
    proj: Dense,
    temperature: Tensor,
}

impl Mta {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        ensure(heads >= 1 && dim.is_multiple_of(heads), || {
            format!("dim {dim} not divisible by {heads} heads")
        })?;
        Ok(Self {
            heads,
            qkv: Dense::new(&p.pp("qkv"), dim, 3 * dim, false)?,
            proj: Dense::new(&p.pp("proj"), dim, dim, false)?,
            temperature: p.get("temperature", &[heads], Init::Const(1.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n = h * w;
        let ch = c / self.heads;
        // (B, N, 3, heads, ch) -> (3, B, heads, ch, N)
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, ch))?
            .permute((2, 0, 3, 4, 1))?;
        let q = l2_normalize_last(&qkv.get(0)?.contiguous()?)?;
        let k = l2_normalize_last(&qkv.get(1)?.contiguous()?)?;
        let v = qkv.get(2)?.contiguous()?;
        let logits = q
            .matmul(&k.t()?)?
            .broadcast_mul(&self.temperature.reshape((1, self.heads, 1, 1))?)?;
        let att = softmax_last(&logits)?;
        let out = att.matmul(&v)?; // (B, heads, ch, N)
        let out = out.permute((0, 3, 1, 2))?.reshape((b, h, w, c))?;
        self.proj.forward(&out)
    }
}

/// Local range block: pointwise expansion (×2), 3×3 depthwise convolution, GELU gate,
/// pointwise projection. Receptive field is exactly 3×3.
pub struct Lrb {
    expand: Dense,
    dw: DepthwiseConv3x3,
    project: Dense,
    hidden: usize,
}

impl Lrb {
    pub const EXPANSION: usize = 2;

    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        let hidden = Self::EXPANSION * dim;
        Ok(Self {
            expand: Dense::new(&p.pp("expand"), dim, hidden, false)?,
            dw: DepthwiseConv3x3::new(&p.pp("dw"), hidden)?,
            project: Dense::new(&p.pp("project"), hidden / 2, dim, false)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(&self.expand.forward(x)?)?;
        let half = self.hidden / 2;
        let gate = gelu(&y.narrow(D::Minus1, 0, half)?)?;
        let val = y.narrow(D::Minus1, half, half)?;
        self.project.forward(&(gate * val)?)
    }
}

/// Per-token two-layer MLP with GELU.
pub struct Ffn {
    fc1: Dense,
    fc2: Dense,
}

impl Ffn {
    pub const EXPANSION: f64 = 2.66;

    pub fn hidden_dim(dim: usize) -> usize {
        ((dim as f64 * Self::EXPANSION).round() as usize).max(1)
    }

    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        let hidden = Self::hidden_dim(dim);
        Ok(Self {
            fc1: Dense::new(&p.pp("fc1"), dim, hidden, false)?,
            fc2: Dense::new(&p.pp("fc2"), hidden, dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn zero_all(store: &ParamStore) {
        for (_, v) in store.vars() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn shapes_preserved() {
        let store = ParamStore::new(1, DType::F64);
        let x = random((2, 5, 7, 8), 1);
        let mta = Mta::new(&store.root().pp("mta"), 8, 2).unwrap();
        let lrb = Lrb::new(&store.root().pp("lrb"), 8).unwrap();
        let ffn = Ffn::new(&store.root().pp("ffn"), 8).unwrap();
        assert_eq!(mta.forward(&x).unwrap().dims(), x.dims());
        assert_eq!(lrb.forward(&x).unwrap().dims(), x.dims());
        assert_eq!(ffn.forward(&x).unwrap().dims(), x.dims());
    }

    #[test]
    fn mta_zero_input_gives_zero_output() {
        let store = ParamStore::new(2, DType::F64);
        let mta = Mta::new(&store.root(), 8, 2).unwrap();
        let x = Tensor::zeros((1, 4, 4, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(vals(&mta.forward(&x).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mta_is_spatially_equivariant() {
        let store = ParamStore::new(3, DType::F64);
        let mta = Mta::new(&store.root(), 4, 2).unwrap();
        let x = random((1, 3, 4, 4), 5);
        // reverse the 12 spatial positions
        let perm: Vec<u32> = (0..12).rev().collect();
        let idx = Tensor::from_slice(&perm, 12, &Device::Cpu).unwrap();
        let permute = |t: &Tensor| {
            t.reshape((1, 12, 4))
                .unwrap()
                .index_select(&idx, 1)
                .unwrap()
                .reshape((1, 3, 4, 4))
                .unwrap()
        };
        let a = permute(&mta.forward(&x).unwrap());
        let b = mta.forward(&permute(&x)).unwrap();
        for (u, v) in vals(&a).iter().zip(vals(&b)) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn lrb_receptive_field_is_3x3() {
        let store = ParamStore::new(4, DType::F64);
        let lrb = Lrb::new(&store.root(), 4).unwrap();
        let x = random((1, 9, 9, 4), 7);
        let base = vals(&lrb.forward(&x).unwrap());
        let mut bumped = vals(&x);
        let (py, px) = (4usize, 5usize);
        bumped[(py * 9 + px) * 4 + 2] += 0.5;
        let x2 = Tensor::from_vec(bumped, (1, 9, 9, 4), &Device::Cpu).unwrap();
        let out = vals(&lrb.forward(&x2).unwrap());
        for y in 0..9usize {
            for x in 0..9usize {
                let changed = (0..4).any(|c| {
                    let i = (y * 9 + x) * 4 + c;
                    (out[i] - base[i]).abs() > 1e-12
                });
                if y.abs_diff(py) > 1 || x.abs_diff(px) > 1 {
                    assert!(!changed, "pixel ({y},{x}) changed");
                }
            }
        }
    }

    #[test]
    fn ffn_is_pointwise() {
        let store = ParamStore::new(5, DType::F64);
        let ffn = Ffn::new(&store.root(), 4).unwrap();
        let x = random((1, 3, 3, 4), 8);
        let base = vals(&ffn.forward(&x).unwrap());
        let mut bumped = vals(&x);
        bumped[4 * 4] += 1.0; // pixel (1,1)
        let x2 = Tensor::from_vec(bumped, (1, 3, 3, 4), &Device::Cpu).unwrap();
        let out = vals(&ffn.forward(&x2).unwrap());
        for p in 0..9 {
            let changed = (0..4).any(|c| (out[p * 4 + c] - base[p * 4 + c]).abs() > 1e-12);
            assert_eq!(changed, p == 4);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let store = ParamStore::new(6, DType::F64);
        let lrb = Lrb::new(&store.root().pp("lrb"), 4).unwrap();
        let ffn = Ffn::new(&store.root().pp("ffn"), 4).unwrap();
        zero_all(&store);
        let x = random((1, 4, 4, 4), 9);
        assert!(vals(&lrb.forward(&x).unwrap()).iter().all(|v| *v == 0.0));
        assert!(vals(&ffn.forward(&x).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ffn_hidden_ratio() {
        assert_eq!(Ffn::hidden_dim(32), 85);
        assert_eq!(Ffn::hidden_dim(16), 43);
    }
}
