//! Channel-last (`B×H×W×C`) layer primitives shared by all networks.
//!
//! Pointwise layers are plain matmuls over the channel axis; spatial convolutions use
//! reflect borders.

use candle_core::{DType, Tensor, D};

use crate::error::Result;
use crate::kernels;
use crate::params::{Init, Params};

/// Reflects index `i` into `[0, n)` (mirror without edge repetition).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn index_tensor(idx: &[u32], dev: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(idx, idx.len(), dev)?)
}

/// Reflect-pads `dim` by `left`/`right` elements.
pub fn reflect_pad(x: &Tensor, dim: usize, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let n = x.dim(dim)?;
    let idx: Vec<u32> = (0..n + left + right)
        .map(|i| reflect_index(i as isize - left as isize, n) as u32)
        .collect();
    Ok(x.index_select(&index_tensor(&idx, x.device())?, dim)?)
}

/// Reflect-pads the spatial axes of a `B×H×W×C` tensor by `p` on every side.
pub fn reflect_pad_hw(x: &Tensor, p: usize) -> Result<Tensor> {
    reflect_pad(&reflect_pad(x, 1, p, p)?, 2, p, p)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::softmax_last(x)?)
}

/// `x + b` with `b` broadcast over the leading axes of `x`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(kernels::add_bias(x, b)?)
}

/// L2-normalizes along the last axis; zero vectors stay zero.
pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::gelu(x)?)
}

/// `B×H×W×C` → `B×H/2×W/2×4C`.
pub fn pixel_unshuffle(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// `B×H×W×4C` → `B×2H×2W×C`.
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Linear map over the last axis. Weight is stored `in × out`.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Option<Tensor>,
    out_dim: usize,
}

impl Dense {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, bias, Init::fan_in(in_dim))
    }

    pub fn with_init(p: &Params, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = p.get("weight", &[in_dim, out_dim], init)?;
        let bias = if bias {
            Some(p.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / last;
        let mut y = x.reshape((rows, last))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = kernels::add_bias(&y, b)?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Full 3×3 convolution, stride 1, reflect padding.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    dense: Dense,
}

impl Conv3x3 {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, bias, Init::fan_in(9 * in_dim))
    }

    pub fn with_init(p: &Params, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        Ok(Self {
            dense: Dense::with_init(p, 9 * in_dim, out_dim, bias, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.dense.forward(&kernels::im2col3x3(x)?)
    }
}

/// Depthwise 3×3 convolution, stride 1, reflect padding, no bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[9, dim], Init::fan_in(9))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::depthwise3x3(x, &self.weight)?)
    }
}

/// Layer normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("gamma", &[dim], Init::Const(1.0))?,
            beta: p.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::layer_norm(x, &self.gamma, &self.beta, Self::EPS)?)
    }
}

/// Stride-2 2×2 convolution expressed as pixel-unshuffle followed by a linear map.
#[derive(Debug, Clone)]
pub struct Downsample {
    dense: Dense,
}

impl Downsample {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            dense: Dense::new(p, 4 * in_dim, out_dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.dense.forward(&pixel_unshuffle(x)?)
    }
}

/// Linear map to `4·out` channels followed by pixel-shuffle.
#[derive(Debug, Clone)]
pub struct Upsample {
    dense: Dense,
}

impl Upsample {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            dense: Dense::new(p, in_dim, 4 * out_dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        pixel_shuffle(&self.dense.forward(x)?)
    }
}

/// Reflect-pads `H` and `W` up to multiples of `m`; returns the padded map.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let ph = h.div_ceil(m) * m - h;
    let pw = w.div_ceil(m) * m - w;
    reflect_pad(&reflect_pad(x, 1, 0, ph)?, 2, 0, pw)
}

/// Scalar value of a one-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn ramp(shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::arange(0f32, n as f32, &Device::Cpu)
            .unwrap()
            .reshape(shape)
            .unwrap()
    }

    #[test]
    fn reflect_index_mirrors() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x = ramp((2, 4, 6, 3));
        let y = pixel_shuffle(&pixel_unshuffle(&x).unwrap()).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn depthwise_matches_direct_sum() {
        let store = ParamStore::new(1, DType::F32);
        let conv = DepthwiseConv3x3::new(&store.root(), 2).unwrap();
        let x = ramp((1, 4, 5, 2)).affine(0.1, 0.0).unwrap();
        let y = conv.forward(&x).unwrap();
        let w = store.tensor("weight").unwrap().to_vec2::<f32>().unwrap();
        let xv = x.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        let yv = y.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        for i in 0..4 {
            for j in 0..5 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let si = reflect_index(i as isize + dy as isize - 1, 4);
                            let sj = reflect_index(j as isize + dx as isize - 1, 5);
                            acc += w[dy * 3 + dx][c] * xv[si][sj][c];
                        }
                    }
                    assert!((acc - yv[i][j][c]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let store = ParamStore::new(1, DType::F32);
        let ln = LayerNorm::new(&store.root(), 6).unwrap();
        let y = ln.forward(&ramp((1, 2, 2, 6))).unwrap();
        let mean = scalar(&y.mean_all().unwrap()).unwrap();
        assert!(mean.abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = ramp((1, 1, 3, 7)).affine(0.3, -2.0).unwrap();
        let s = softmax_last(&x).unwrap().sum(D::Minus1).unwrap();
        for v in s.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
