//! Luminance/chroma decoupling and CIE L*a*b* conversion.
//!
//! The decoupling is full-range BT.601 YCbCr with chroma centered on 0.5, which has an
//! exact real-arithmetic inverse.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::image::{same_dims, ChromaPlanes, LumaPlane, Plane, RgbImage};

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
/// `2·(1−KB)`: scale of the blue difference.
pub const CB_SCALE: f64 = 1.772;
/// `2·(1−KR)`: scale of the red difference.
pub const CR_SCALE: f64 = 1.402;

#[inline]
pub fn rgb_to_ycbcr([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, (b - y) / CB_SCALE + 0.5, (r - y) / CR_SCALE + 0.5]
}

/// Unclamped inverse of [`rgb_to_ycbcr`].
#[inline]
pub fn ycbcr_to_rgb([y, cb, cr]: [f64; 3]) -> [f64; 3] {
    let b = (cb - 0.5) * CB_SCALE + y;
    let r = (cr - 0.5) * CR_SCALE + y;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Splits an image into luminance and chroma planes.
pub fn decouple(img: &RgbImage) -> Result<(LumaPlane, ChromaPlanes)> {
    img.ensure_finite()?;
    let (h, w) = img.dims();
    let n = h * w;
    let (mut ys, mut cbs, mut crs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels() {
        let [y, cb, cr] = rgb_to_ycbcr(px);
        ys.push(y.clamp(0.0, 1.0));
        cbs.push(cb.clamp(0.0, 1.0));
        crs.push(cr.clamp(0.0, 1.0));
    }
    Ok((
        LumaPlane(Plane::new(h, w, ys)?),
        ChromaPlanes {
            cb: Plane::new(h, w, cbs)?,
            cr: Plane::new(h, w, crs)?,
        },
    ))
}

/// Inverse of [`decouple`]; the result is clamped to `[0,1]`.
pub fn recouple(luma: &LumaPlane, chroma: &ChromaPlanes) -> Result<RgbImage> {
    same_dims(luma.dims(), chroma.cb.dims(), "cb plane")?;
    same_dims(luma.dims(), chroma.cr.dims(), "cr plane")?;
    luma.ensure_finite()?;
    chroma.cb.ensure_finite()?;
    chroma.cr.ensure_finite()?;
    let (h, w) = luma.dims();
    let data = luma
        .data()
        .iter()
        .zip(chroma.cb.data())
        .zip(chroma.cr.data())
        .flat_map(|((y, cb), cr)| ycbcr_to_rgb([*y, *cb, *cr]).map(|v| v.clamp(0.0, 1.0)))
        .collect();
    RgbImage::new(h, w, data)
}

/// CIE L*a*b* image, D65 white.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

const D65_WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

#[inline]
fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / D65_WHITE[0]);
    let fy = lab_f(y / D65_WHITE[1]);
    let fz = lab_f(z / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn to_lab(img: &RgbImage) -> Result<LabImage> {
    img.ensure_finite()?;
    let (height, width) = img.dims();
    let data = img
        .pixels()
        .map(|px| {
            let mut lab = srgb_to_lab(px.map(|v| v.clamp(0.0, 1.0)));
            lab[0] = lab[0].clamp(0.0, 100.0);
            lab
        })
        .collect();
    Ok(LabImage {
        height,
        width,
        data,
    })
}

/// Differentiable [`recouple`] on `B×H×W×1` luminance and `B×H×W×2` chroma tensors.
pub fn recouple_tensor(luma: &Tensor, chroma: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = luma.dims4()?;
    if c != 1 || chroma.dims() != [b, h, w, 2] {
        return Err(Error::validation(format!(
            "recouple expects B×H×W×1 and B×H×W×2, got {:?} and {:?}",
            luma.dims(),
            chroma.dims()
        )));
    }
    let cb = chroma.narrow(3, 0, 1)?;
    let cr = chroma.narrow(3, 1, 1)?;
    let blue = (cb.affine(CB_SCALE, -0.5 * CB_SCALE)? + luma)?;
    let red = (cr.affine(CR_SCALE, -0.5 * CR_SCALE)? + luma)?;
    let green = ((luma - (&red * KR)?)? - (&blue * KB)?)?.affine(1.0 / KG, 0.0)?;
    Ok(Tensor::cat(&[red, green, blue], 3)?.clamp(0.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(rgb: [f64; 3]) -> RgbImage {
        RgbImage::filled(3, 4, rgb)
    }

    #[test]
    fn tensor_recouple_matches_planes() {
        use crate::batch::{chroma_tensor, luma_tensor, tensor_to_rgb};
        use candle_core::DType;
        let img = RgbImage::from_fn(5, 6, |y, x| [y as f64 / 5.0, x as f64 / 6.0, 0.3]);
        let (l, c) = decouple(&img).unwrap();
        let t = recouple_tensor(&luma_tensor(&[&l], DType::F64).unwrap(), &chroma_tensor(&[&c], DType::F64).unwrap())
            .unwrap();
        let back = tensor_to_rgb(&t).unwrap().remove(0);
        assert!(back.max_abs_diff(&recouple(&l, &c).unwrap()) < 1e-12);
    }

    #[test]
    fn achromatic_extremes() {
        for (v, y) in [(1.0, 1.0), (0.0, 0.0)] {
            let (l, c) = decouple(&uniform([v; 3])).unwrap();
            assert!(l.data().iter().all(|x| (x - y).abs() < 1e-12));
            assert!(c.cb.data().iter().all(|x| (x - 0.5).abs() < 1e-12));
            assert!(c.cr.data().iter().all(|x| (x - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn pure_red_decouples_to_known_values() {
        let (l, c) = decouple(&uniform([1.0, 0.0, 0.0])).unwrap();
        assert!((l.get(0, 0) - 0.299).abs() < 1e-12);
        // 0.701 / 1.402 is exactly one half, so pure red saturates Cr
        assert!((c.cr.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((c.cb.get(0, 0) - (0.5 - 0.299 / 1.772)).abs() < 1e-12);
        assert!((c.cb.get(0, 0) - 0.33127).abs() < 1e-5);
    }

    #[test]
    fn recouple_known_values() {
        let luma = LumaPlane(Plane::filled(2, 2, 1.0));
        let rgb = recouple(&luma, &ChromaPlanes::neutral(2, 2)).unwrap();
        assert!(rgb.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let luma = LumaPlane(Plane::filled(2, 2, 0.299));
        let chroma = ChromaPlanes {
            cb: Plane::filled(2, 2, 0.5 - 0.299 / 1.772),
            cr: Plane::filled(2, 2, 1.0),
        };
        let rgb = recouple(&luma, &chroma).unwrap();
        for (got, want) in rgb.pixel(1, 1).iter().zip([1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut img = uniform([0.2; 3]);
        img.data_mut()[4] = f64::NAN;
        assert!(matches!(decouple(&img), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn recouple_shape_mismatch() {
        let luma = LumaPlane(Plane::filled(2, 2, 0.5));
        assert!(recouple(&luma, &ChromaPlanes::neutral(2, 3)).is_err());
    }

    #[test]
    fn lab_reference_points() {
        let white = to_lab(&uniform([1.0; 3])).unwrap().get(0, 0);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 0.01 && white[2].abs() < 0.01);

        let black = to_lab(&uniform([0.0; 3])).unwrap().get(0, 0);
        assert_eq!(black, [0.0, 0.0, 0.0]);

        let gray = to_lab(&uniform([0.5; 3])).unwrap().get(0, 0);
        assert!((gray[0] - 53.39).abs() < 0.01, "{gray:?}");
        assert!(gray[1].abs() < 0.01 && gray[2].abs() < 0.01);
    }

    proptest! {
        #[test]
        fn round_trip(px in prop::array::uniform3(0.0f64..=1.0)) {
            let back = ycbcr_to_rgb(rgb_to_ycbcr(px));
            for (a, b) in px.iter().zip(back) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn achromatic_law(v in 0.0f64..=1.0) {
            let [_, cb, cr] = rgb_to_ycbcr([v, v, v]);
            prop_assert!((cb - 0.5).abs() < 1e-12);
            prop_assert!((cr - 0.5).abs() < 1e-12);
        }

        #[test]
        fn luminance_monotone(px in prop::array::uniform3(0.0f64..0.9), d in 1e-6f64..0.1) {
            let y0 = rgb_to_ycbcr(px)[0];
            let y1 = rgb_to_ycbcr(px.map(|v| v + d))[0];
            prop_assert!(y1 > y0);
        }
    }
}
