//! Conversions between image planes and channel-last tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{ensure, Result};
use crate::image::{ChromaPlanes, LumaPlane, Plane, RgbImage};

/// Stacks per-sample channel lists into a `B×H×W×C` tensor. All planes must share dims.
pub fn planes_to_tensor(samples: &[Vec<&Plane>], dtype: DType) -> Result<Tensor> {
    ensure(!samples.is_empty(), || "empty batch".into())?;
    let c = samples[0].len();
    let (h, w) = samples[0][0].dims();
    let mut data = Vec::with_capacity(samples.len() * h * w * c);
    for planes in samples {
        ensure(planes.len() == c, || "inconsistent channel count in batch".into())?;
        for p in planes {
            ensure(p.dims() == (h, w), || {
                format!("batch plane is {}x{}, expected {h}x{w}", p.height(), p.width())
            })?;
        }
        for i in 0..h * w {
            for p in planes {
                data.push(p.data()[i]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), h, w, c), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn luma_tensor(luma: &[&LumaPlane], dtype: DType) -> Result<Tensor> {
    let s: Vec<Vec<&Plane>> = luma.iter().map(|l| vec![&l.0]).collect();
    planes_to_tensor(&s, dtype)
}

pub fn chroma_tensor(chroma: &[&ChromaPlanes], dtype: DType) -> Result<Tensor> {
    let s: Vec<Vec<&Plane>> = chroma.iter().map(|c| vec![&c.cb, &c.cr]).collect();
    planes_to_tensor(&s, dtype)
}

pub fn mask_tensor(masks: &[&Plane], dtype: DType) -> Result<Tensor> {
    let s: Vec<Vec<&Plane>> = masks.iter().map(|m| vec![*m]).collect();
    planes_to_tensor(&s, dtype)
}

pub fn rgb_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    ensure(!images.is_empty(), || "empty batch".into())?;
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        ensure(img.dims() == (h, w), || "inconsistent image dims in batch".into())?;
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `B×H×W×C` tensor into per-sample channel planes.
pub fn tensor_to_planes(t: &Tensor) -> Result<Vec<Vec<Plane>>> {
    let (b, h, w, c) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b);
    for s in 0..b {
        let base = s * h * w * c;
        let planes = (0..c)
            .map(|ch| {
                let data = (0..h * w).map(|i| v[base + i * c + ch]).collect();
                Plane::new(h, w, data)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(planes);
    }
    Ok(out)
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, h, w, c) = t.dims4()?;
    ensure(c == 3, || format!("expected 3 channels, got {c}"))?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    v.chunks_exact(h * w * 3)
        .take(b)
        .map(|chunk| RgbImage::new(h, w, chunk.to_vec()))
        .collect()
}
