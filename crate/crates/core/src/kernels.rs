//! Fused CPU kernels with hand-written backward passes.
//!
//! Composing these from elementary tensor ops spends most of the backward pass in strided
//! reductions and zero-filled gradient buffers. Every kernel takes contiguous channel-last
//! input and supports `f32` and `f64`.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Storage, Tensor, WithDType};
use candle_core::backend::BackendStorage;
use num_traits::Float;

use crate::nn::reflect_index;

type CResult<T> = candle_core::Result<T>;

trait Real: WithDType + Float {}
impl Real for f32 {}
impl Real for f64 {}

fn msg(s: impl Into<String>) -> candle_core::Error {
    candle_core::Error::Msg(s.into())
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| msg("fused kernel needs contiguous input"))?;
    Ok(&data[a..b])
}

/// Runs `f` on the contiguous host data of `t`.
fn host<T: WithDType, R>(t: &Tensor, f: impl FnOnce(&[T]) -> R) -> CResult<R> {
    let t = t.contiguous()?;
    let (s, l) = t.storage_and_layout();
    match &*s {
        Storage::Cpu(cs) => Ok(f(slice(cs, l)?)),
        _ => Err(msg("fused kernels run on the CPU only")),
    }
}

fn out<T: WithDType>(v: Vec<T>, like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            dt => Err(msg(format!("fused kernel does not support {dt:?}"))),
        }
    };
}

fn c<T: Real>(v: f64) -> T {
    T::from(v).unwrap()
}

/// Reflect-index table: `table[i·3 + k]` is the source of position `i` under tap offset `k − 1`.
fn reflect_table(n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..3).map(move |k| reflect_index(i as isize + k as isize - 1, n)))
        .collect()
}

fn dims4(l: &Layout) -> CResult<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

// ---- GELU (tanh approximation) ----

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

struct Gelu;

/// `0.5·(1 + tanh(u)) = σ(2u)`, so one exponential per element suffices.
fn gelu_gate<T: Real>(v: T) -> (T, T) {
    let (k2, a) = (c::<T>(2.0 * SQRT_2_OVER_PI), c::<T>(GELU_CUBIC));
    let s = T::one() / (T::one() + (-(k2 * (v + a * v * v * v))).exp());
    (s, k2 * (T::one() + c::<T>(3.0) * a * v * v))
}

fn gelu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * gelu_gate(v).0).collect()
}

fn gelu_bwd<T: Real>(x: &Tensor, g: &Tensor) -> CResult<Tensor> {
    let v = host(x, |xs: &[T]| {
        host(g, |gs: &[T]| {
            xs.iter()
                .zip(gs)
                .map(|(&v, &g)| {
                    let (s, du) = gelu_gate(v);
                    g * (s + v * s * (T::one() - s) * du)
                })
                .collect::<Vec<T>>()
        })
    })??;
    out(v, x)
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            Ok((T::to_cpu_storage_owned(gelu_fwd(slice::<T>(s, l)?)), l.shape().clone()))
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(dispatch!(arg.dtype(), gelu_bwd(arg, grad))?))
    }
}

pub fn gelu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

// ---- softmax over the last axis ----

struct Softmax;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            let x = slice::<T>(s, l)?;
            let k = *l.shape().dims().last().ok_or_else(|| msg("softmax of a scalar"))?;
            let mut y = vec![T::zero(); x.len()];
            for (row, dst) in x.chunks_exact(k).zip(y.chunks_exact_mut(k)) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| Float::max(a, b));
                let mut sum = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - m).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
            Ok((T::to_cpu_storage_owned(y), l.shape().clone()))
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(res: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let k = res.dims()[res.rank() - 1];
            let v = host(res, |y: &[T]| {
                host(grad, |g: &[T]| {
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(k).zip(g.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&u, &v)| a + u * v);
                        for ((d, &u), &v) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = u * (v - dot);
                        }
                    }
                    dx
                })
            })??;
            out(v, res)
        }
        Ok(Some(dispatch!(res.dtype(), run(res, grad))?))
    }
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

// ---- bias broadcast over leading axes ----

/// `x + b` where `b` covers the trailing `b.elem_count()` elements of each row of `x`.
struct AddBias;

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "fused-add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
            let (x, b) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
            let mut y = x.to_vec();
            for row in y.chunks_exact_mut(b.len()) {
                for (v, &bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        }
        dispatch!(s1.dtype(), run(s1, l1, s2, l2))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(b: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let k = b.elem_count();
            let v = host(grad, |g: &[T]| {
                let mut acc = vec![T::zero(); k];
                for row in g.chunks_exact(k) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc
            })?;
            out(v, b)
        }
        Ok((Some(grad.clone()), Some(dispatch!(b.dtype(), run(b, grad))?)))
    }
}

pub fn add_bias(x: &Tensor, b: &Tensor) -> CResult<Tensor> {
    let k = b.elem_count();
    let trailing: usize = x.dims().iter().rev().scan(1usize, |acc, d| {
        *acc *= d;
        Some(*acc)
    })
    .find(|n| *n >= k)
    .unwrap_or(0);
    if k == 0 || trailing != k {
        return Err(msg(format!("bias of {k} elements does not tile {:?}", x.dims())));
    }
    x.contiguous()?.apply_op2(&b.contiguous()?, AddBias)
}

// ---- layer normalization over the last axis ----

struct LayerNormOp {
    eps: f64,
}

fn ln_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(
            eps: f64,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
        ) -> CResult<(CpuStorage, Shape)> {
            let (x, gamma, beta) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?);
            let k = gamma.len();
            let mut y = vec![T::zero(); x.len()];
            for (row, dst) in x.chunks_exact(k).zip(y.chunks_exact_mut(k)) {
                let (mean, rstd) = ln_stats(row, c(eps));
                for i in 0..k {
                    dst[i] = (row[i] - mean) * rstd * gamma[i] + beta[i];
                }
            }
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        }
        dispatch!(s1.dtype(), run(self.eps, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(eps: f64, x: &Tensor, gamma: &Tensor, grad: &Tensor) -> CResult<(Vec<T>, Vec<T>, Vec<T>)> {
            let grads = host(x, |xs: &[T]| {
                host(gamma, |gm: &[T]| {
                    host(grad, |g: &[T]| {
                        let k = gm.len();
                        let kf = T::from(k).unwrap();
                        let mut dx = vec![T::zero(); xs.len()];
                        let mut dg = vec![T::zero(); k];
                        let mut db = vec![T::zero(); k];
                        let mut dxhat = vec![T::zero(); k];
                        for ((row, gr), dr) in xs.chunks_exact(k).zip(g.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                            let (mean, rstd) = ln_stats(row, c(eps));
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for i in 0..k {
                                let xhat = (row[i] - mean) * rstd;
                                dg[i] += gr[i] * xhat;
                                db[i] += gr[i];
                                dxhat[i] = gr[i] * gm[i];
                                s1 += dxhat[i];
                                s2 += dxhat[i] * xhat;
                            }
                            let (m1, m2) = (s1 / kf, s2 / kf);
                            for i in 0..k {
                                let xhat = (row[i] - mean) * rstd;
                                dr[i] = rstd * (dxhat[i] - m1 - xhat * m2);
                            }
                        }
                        (dx, dg, db)
                    })
                })
            })???;
            Ok(grads)
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => {
                let (a, b, c) = run::<f32>(self.eps, x, gamma, grad)?;
                (out(a, x)?, out(b, gamma)?, out(c, beta)?)
            }
            DType::F64 => {
                let (a, b, c) = run::<f64>(self.eps, x, gamma, grad)?;
                (out(a, x)?, out(b, gamma)?, out(c, beta)?)
            }
            dt => return Err(msg(format!("fused kernel does not support {dt:?}"))),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    let k = gamma.elem_count();
    if x.dims().last() != Some(&k) || beta.elem_count() != k {
        return Err(msg(format!("layer norm over {k} channels got {:?}", x.dims())));
    }
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp { eps })
}

// ---- 3×3 neighbourhoods with reflect borders ----

/// `B×H×W×C` → `B×H×W×9C`: the nine reflect-padded neighbours of each pixel, raster tap
/// order, channels contiguous per tap.
struct Im2col;

fn im2col_fwd<T: Real>(x: &[T], (b, h, w, ch): (usize, usize, usize, usize)) -> Vec<T> {
    let (ry, rx) = (reflect_table(h), reflect_table(w));
    let mut cols = vec![T::zero(); x.len() * 9];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((n * h + y) * w + xx) * 9 * ch;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let src = ((n * h + ry[y * 3 + dy]) * w + rx[xx * 3 + dx]) * ch;
                        let o = dst + (dy * 3 + dx) * ch;
                        cols[o..o + ch].copy_from_slice(&x[src..src + ch]);
                    }
                }
            }
        }
    }
    cols
}

fn im2col_bwd<T: Real>(g: &[T], (b, h, w, ch): (usize, usize, usize, usize)) -> Vec<T> {
    let (ry, rx) = (reflect_table(h), reflect_table(w));
    let mut dx_out = vec![T::zero(); b * h * w * ch];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let col = ((n * h + y) * w + xx) * 9 * ch;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let src = ((n * h + ry[y * 3 + dy]) * w + rx[xx * 3 + dx]) * ch;
                        let o = col + (dy * 3 + dx) * ch;
                        for (d, &v) in dx_out[src..src + ch].iter_mut().zip(&g[o..o + ch]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    dx_out
}

impl CustomOp1 for Im2col {
    fn name(&self) -> &'static str {
        "im2col-3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            let d = dims4(l)?;
            let cols = im2col_fwd(slice::<T>(s, l)?, d);
            Ok((T::to_cpu_storage_owned(cols), Shape::from((d.0, d.1, d.2, 9 * d.3))))
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(arg: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let d = arg.dims4()?;
            out(host(grad, |g: &[T]| im2col_bwd(g, d))?, arg)
        }
        Ok(Some(dispatch!(arg.dtype(), run(arg, grad))?))
    }
}

pub fn im2col3x3(x: &Tensor) -> CResult<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Im2col)
}

/// Depthwise 3×3 convolution with reflect borders; weight is `9×C`.
struct Depthwise;

fn depthwise_fwd<T: Real>(x: &[T], w: &[T], (b, h, wd, ch): (usize, usize, usize, usize)) -> Vec<T> {
    let (ry, rx) = (reflect_table(h), reflect_table(wd));
    let mut y_out = vec![T::zero(); x.len()];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let dst = ((n * h + y) * wd + xx) * ch;
                let acc = &mut y_out[dst..dst + ch];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let src = ((n * h + ry[y * 3 + dy]) * wd + rx[xx * 3 + dx]) * ch;
                        let wt = &w[(dy * 3 + dx) * ch..(dy * 3 + dx + 1) * ch];
                        for ((a, &v), &k) in acc.iter_mut().zip(&x[src..src + ch]).zip(wt) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    y_out
}

fn depthwise_bwd<T: Real>(x: &[T], w: &[T], g: &[T], (b, h, wd, ch): (usize, usize, usize, usize)) -> (Vec<T>, Vec<T>) {
    let (ry, rx) = (reflect_table(h), reflect_table(wd));
    let mut dx_out = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let at = ((n * h + y) * wd + xx) * ch;
                let gr = &g[at..at + ch];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let tap = (dy * 3 + dx) * ch;
                        let src = ((n * h + ry[y * 3 + dy]) * wd + rx[xx * 3 + dx]) * ch;
                        for i in 0..ch {
                            dx_out[src + i] += gr[i] * w[tap + i];
                            dw[tap + i] += gr[i] * x[src + i];
                        }
                    }
                }
            }
        }
    }
    (dx_out, dw)
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
            let y = depthwise_fwd(slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, dims4(l1)?);
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        }
        dispatch!(s1.dtype(), run(s1, l1, s2, l2))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(x: &Tensor, w: &Tensor, grad: &Tensor) -> CResult<(Tensor, Tensor)> {
            let d = x.dims4()?;
            let (dx, dw) = host(x, |xs: &[T]| {
                host(w, |ws: &[T]| host(grad, |g: &[T]| depthwise_bwd(xs, ws, g, d)))
            })???;
            Ok((out(dx, x)?, out(dw, w)?))
        }
        let (dx, dw) = dispatch!(x.dtype(), run(x, w, grad))?;
        Ok((Some(dx), Some(dw)))
    }
}

pub fn depthwise3x3(x: &Tensor, w: &Tensor) -> CResult<Tensor> {
    let (_, _, _, ch) = x.dims4()?;
    if w.dims() != [9, ch] {
        return Err(msg(format!("depthwise weight {:?} for {ch} channels", w.dims())));
    }
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::reflect_pad_hw;
    use candle_core::{Device, Var, D};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.dims(), b.dims());
        for (u, v) in vals(a).iter().zip(vals(b)) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }

    /// Compares values and input gradients of a fused op against a composed reference,
    /// under a random linear readout.
    fn check(inputs: &[Tensor], fused: impl Fn(&[Tensor]) -> Tensor, reference: impl Fn(&[Tensor]) -> Tensor) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let (yf, yr) = (fused(&ts), reference(&ts));
        close(&yf, &yr, 1e-10);
        let readout = random(yf.dims(), 99);
        let gf = (&yf * &readout).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (&yr * &readout).unwrap().sum_all().unwrap().backward().unwrap();
        for t in &ts {
            close(gf.get(t).unwrap(), gr.get(t).unwrap(), 1e-10);
        }
    }

    fn shifted(x: &Tensor) -> Vec<Tensor> {
        let (_, h, w, _) = x.dims4().unwrap();
        let xp = reflect_pad_hw(x, 1).unwrap();
        let mut views = Vec::new();
        for dy in 0..3 {
            for dx in 0..3 {
                views.push(xp.narrow(1, dy, h).unwrap().narrow(2, dx, w).unwrap());
            }
        }
        views
    }

    #[test]
    fn gelu_matches_composed() {
        check(
            &[random(&[3, 7], 1)],
            |t| gelu(&t[0]).unwrap(),
            |t| {
                let x = &t[0];
                let inner = ((x + (x.powf(3.0).unwrap() * GELU_CUBIC).unwrap()).unwrap() * SQRT_2_OVER_PI).unwrap();
                ((x * 0.5).unwrap() * (inner.tanh().unwrap() + 1.0).unwrap()).unwrap()
            },
        );
    }

    #[test]
    fn softmax_matches_composed() {
        check(
            &[random(&[2, 3, 6], 2)],
            |t| softmax_last(&t[0]).unwrap(),
            |t| {
                let e = t[0].exp().unwrap();
                e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
            },
        );
    }

    #[test]
    fn add_bias_matches_broadcast() {
        check(
            &[random(&[4, 2, 3], 3), random(&[2, 3], 4)],
            |t| add_bias(&t[0], &t[1]).unwrap(),
            |t| t[0].broadcast_add(&t[1]).unwrap(),
        );
        assert!(add_bias(&random(&[4, 6], 1), &random(&[4], 2)).is_err());
    }

    #[test]
    fn layer_norm_matches_composed() {
        check(
            &[random(&[2, 3, 5], 5), random(&[5], 6), random(&[5], 7)],
            |t| layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap(),
            |t| {
                let mean = t[0].mean_keepdim(D::Minus1).unwrap();
                let xc = t[0].broadcast_sub(&mean).unwrap();
                let var = xc.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                xc.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
                    .unwrap()
                    .broadcast_mul(&t[1])
                    .unwrap()
                    .broadcast_add(&t[2])
                    .unwrap()
            },
        );
    }

    #[test]
    fn im2col_matches_shifted_views() {
        check(
            &[random(&[2, 4, 5, 3], 8)],
            |t| im2col3x3(&t[0]).unwrap(),
            |t| Tensor::cat(&shifted(&t[0]), 3).unwrap(),
        );
    }

    #[test]
    fn depthwise_matches_shifted_views() {
        check(
            &[random(&[2, 5, 4, 3], 9), random(&[9, 3], 10)],
            |t| depthwise3x3(&t[0], &t[1]).unwrap(),
            |t| {
                Tensor::stack(&shifted(&t[0]), 3)
                    .unwrap()
                    .broadcast_mul(&t[1])
                    .unwrap()
                    .sum(3)
                    .unwrap()
            },
        );
    }

    #[test]
    fn single_pixel_extent_reflects_to_itself() {
        let x = random(&[1, 1, 1, 2], 11);
        let cols = im2col3x3(&x).unwrap();
        let v = vals(&cols);
        let base = vals(&x);
        for tap in 0..9 {
            assert_eq!(&v[tap * 2..tap * 2 + 2], &base[..]);
        }
    }

    #[test]
    fn f32_supported() {
        let x = random(&[1, 3, 3, 2], 12).to_dtype(DType::F32).unwrap();
        let y = gelu(&im2col3x3(&x).unwrap()).unwrap();
        assert_eq!(y.dtype(), DType::F32);
        assert_eq!(y.dims(), &[1, 3, 3, 18]);
    }
}
