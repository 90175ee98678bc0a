//! Restoration metrics over shadow, non-shadow and whole-image regions.
//!
//! PSNR and SSIM are computed in RGB, the color error in CIE LAB. Region masks select
//! pixels with value > 0.5.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::colorspace::to_lab;
use crate::error::{Error, Result};
use crate::image::{same_dims, Plane, RgbImage};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
/// Side of the square evaluation resolution.
pub const EVAL_SIZE: usize = 256;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// How per-pixel LAB differences are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabError {
    /// Mean over pixels of the channel-averaged absolute difference (the customary "RMSE").
    #[default]
    MeanAbsolute,
    /// Root of the mean squared difference over pixels and channels.
    RootMeanSquare,
}

fn check_pair(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>) -> Result<Vec<usize>> {
    same_dims(a.dims(), b.dims(), "second image")?;
    a.ensure_finite()?;
    b.ensure_finite()?;
    let n = a.height() * a.width();
    let selected: Vec<usize> = match mask {
        Some(m) => {
            same_dims(a.dims(), m.dims(), "region mask")?;
            (0..n).filter(|&i| m.data()[i] > 0.5).collect()
        }
        None => (0..n).collect(),
    };
    if selected.is_empty() {
        return Err(Error::EmptyRegion("region mask selects no pixels"));
    }
    Ok(selected)
}

/// Mean squared error over selected pixels and all three channels.
pub fn mse(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>) -> Result<f64> {
    let sel = check_pair(a, b, mask)?;
    let (da, db) = (a.data(), b.data());
    let sum: f64 = sel
        .iter()
        .flat_map(|&i| (0..3).map(move |c| 3 * i + c))
        .map(|j| (da[j] - db[j]).powi(2))
        .sum();
    Ok(sum / (3 * sel.len()) as f64)
}

/// `10·log10(1/MSE)` with data range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>) -> Result<f64> {
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn blur(p: &Plane) -> Plane {
    p.gaussian_blur(SSIM_SIGMA, SSIM_RADIUS)
}

/// Per-pixel SSIM map of one channel.
fn ssim_map(a: &Plane, b: &Plane) -> Plane {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = blur(a);
    let mu_b = blur(b);
    let aa = blur(&Plane::from_fn(a.height(), a.width(), |y, x| a.get(y, x).powi(2)));
    let bb = blur(&Plane::from_fn(a.height(), a.width(), |y, x| b.get(y, x).powi(2)));
    let ab = blur(&Plane::from_fn(a.height(), a.width(), |y, x| a.get(y, x) * b.get(y, x)));
    Plane::from_fn(a.height(), a.width(), |y, x| {
        let (ma, mb) = (mu_a.get(y, x), mu_b.get(y, x));
        let va = aa.get(y, x) - ma * ma;
        let vb = bb.get(y, x) - mb * mb;
        let cov = ab.get(y, x) - ma * mb;
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    })
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels and then
/// over the selected pixels of the map.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>) -> Result<f64> {
    let sel = check_pair(a, b, mask)?;
    let maps: Vec<Plane> = (0..3).map(|c| ssim_map(&a.channel(c), &b.channel(c))).collect();
    let sum: f64 = sel
        .iter()
        .map(|&i| maps.iter().map(|m| m.data()[i]).sum::<f64>() / 3.0)
        .sum();
    Ok(sum / sel.len() as f64)
}

/// LAB color error over selected pixels.
pub fn rmse_lab_with(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>, kind: LabError) -> Result<f64> {
    let sel = check_pair(a, b, mask)?;
    let (la, lb) = (to_lab(a)?, to_lab(b)?);
    let (pa, pb) = (la.pixels(), lb.pixels());
    let n = sel.len() as f64;
    Ok(match kind {
        LabError::MeanAbsolute => {
            sel.iter()
                .map(|&i| (0..3).map(|c| (pa[i][c] - pb[i][c]).abs()).sum::<f64>() / 3.0)
                .sum::<f64>()
                / n
        }
        LabError::RootMeanSquare => {
            let sq: f64 = sel
                .iter()
                .map(|&i| (0..3).map(|c| (pa[i][c] - pb[i][c]).powi(2)).sum::<f64>())
                .sum();
            (sq / (3.0 * n)).sqrt()
        }
    })
}

pub fn rmse_lab(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>) -> Result<f64> {
    rmse_lab_with(a, b, mask, LabError::MeanAbsolute)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_lab: f64,
    pub pixels: usize,
}

/// Scores per region; a region with no pixels is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub shadow: Option<RegionScores>,
    pub non_shadow: Option<RegionScores>,
    pub all: RegionScores,
}

impl RegionReport {
    pub fn rows(&self) -> [(&'static str, Option<&RegionScores>); 3] {
        [
            ("S", self.shadow.as_ref()),
            ("NS", self.non_shadow.as_ref()),
            ("ALL", Some(&self.all)),
        ]
    }

    /// Tab-separated table with a header line; empty regions print `nan`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("region\tpsnr\tssim\trmse_lab\tpixels\n");
        for (name, s) in self.rows() {
            match s {
                Some(s) => writeln!(out, "{name}\t{:.6}\t{:.6}\t{:.6}\t{}", s.psnr, s.ssim, s.rmse_lab, s.pixels),
                None => writeln!(out, "{name}\tnan\tnan\tnan\t0"),
            }
            .expect("writing to a String");
        }
        out
    }

    /// Per-region mean over images; pixel counts are summed. Regions absent from every
    /// image stay `None`.
    pub fn mean(reports: &[RegionReport]) -> Result<RegionReport> {
        if reports.is_empty() {
            return Err(Error::NoSamples("no reports to average".into()));
        }
        let avg = |pick: &dyn Fn(&RegionReport) -> Option<RegionScores>| {
            let present: Vec<RegionScores> = reports.iter().filter_map(pick).collect();
            if present.is_empty() {
                return None;
            }
            let n = present.len() as f64;
            Some(RegionScores {
                psnr: present.iter().map(|s| s.psnr).sum::<f64>() / n,
                ssim: present.iter().map(|s| s.ssim).sum::<f64>() / n,
                rmse_lab: present.iter().map(|s| s.rmse_lab).sum::<f64>() / n,
                pixels: present.iter().map(|s| s.pixels).sum(),
            })
        };
        Ok(RegionReport {
            shadow: avg(&|r| r.shadow),
            non_shadow: avg(&|r| r.non_shadow),
            all: avg(&|r| Some(r.all)).expect("non-empty"),
        })
    }

    /// Fixed-width grid for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<6}{:>10}{:>10}{:>10}\n", "region", "PSNR", "SSIM", "RMSE");
        for (name, s) in self.rows() {
            let line = match s {
                Some(s) => format!("{name:<6}{:>10.2}{:>10.4}{:>10.3}\n", s.psnr, s.ssim, s.rmse_lab),
                None => format!("{name:<6}{:>10}{:>10}{:>10}\n", "-", "-", "-"),
            };
            out.push_str(&line);
        }
        out
    }
}

fn scores(a: &RgbImage, b: &RgbImage, mask: Option<&Plane>, kind: LabError) -> Result<Option<RegionScores>> {
    let pixels = match mask {
        Some(m) => m.data().iter().filter(|v| **v > 0.5).count(),
        None => a.height() * a.width(),
    };
    if pixels == 0 {
        return Ok(None);
    }
    Ok(Some(RegionScores {
        psnr: psnr(a, b, mask)?,
        ssim: ssim(a, b, mask)?,
        rmse_lab: rmse_lab_with(a, b, mask, kind)?,
        pixels,
    }))
}

/// Scores at the native resolution, without resizing.
pub fn evaluate_native(pred: &RgbImage, gt: &RgbImage, mask: &Plane, kind: LabError) -> Result<RegionReport> {
    same_dims(gt.dims(), pred.dims(), "prediction")?;
    same_dims(gt.dims(), mask.dims(), "mask")?;
    let shadow = mask.threshold(0.5);
    let lit = shadow.map(|v| 1.0 - v);
    Ok(RegionReport {
        shadow: scores(pred, gt, Some(&shadow), kind)?,
        non_shadow: scores(pred, gt, Some(&lit), kind)?,
        all: scores(pred, gt, None, kind)?.expect("image is non-empty"),
    })
}

/// Resizes prediction and target bilinearly (mask nearest, then thresholded) to
/// `EVAL_SIZE²` and scores all three regions.
pub fn evaluate(pred: &RgbImage, gt: &RgbImage, mask: &Plane) -> Result<RegionReport> {
    same_dims(gt.dims(), pred.dims(), "prediction")?;
    same_dims(gt.dims(), mask.dims(), "mask")?;
    let s = EVAL_SIZE;
    evaluate_native(
        &pred.resize_bilinear(s, s),
        &gt.resize_bilinear(s, s),
        &mask.resize_nearest(s, s).threshold(0.5),
        LabError::default(),
    )
}

/// Intersection over union of two binarized (> 0.5) masks; two empty masks score 1.
pub fn iou(a: &Plane, b: &Plane) -> Result<f64> {
    same_dims(a.dims(), b.dims(), "second mask")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
