//! Rectified outreach attention.
//!
//! Queries come from regular windows, keys and values from dilated outreach windows. A
//! primary attention map over one feature source is rectified by subtracting `λ` times a
//! second map over another source:
//!
//! ```text
//! Att_i = softmax(Q_i K_iᵀ / √d + B)
//! out   = (Att_1 − λ·Att_2) V,      V = F_t W_V
//! λ     = exp(λ₁¹λ₁²) − exp(λ₂¹λ₂²) + λ₀
//! ```
//!
//! Which features feed each map is a [`RectifyScheme`], selected by name.

use std::sync::{Arc, OnceLock};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::windows::{PlanCache, WindowGeometry, WindowPlan};
use crate::error::{ensure, Result};
use crate::nn::{add_bias, softmax_last, Dense};
use crate::params::{Init, Params};
use crate::registry::Registry;

/// Products inside the exponentials are clamped to this magnitude.
pub const LAMBDA_PRODUCT_LIMIT: f64 = 30.0;

/// Feature source for one attention path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Luminance-derived features `F_t`.
    Luma,
    /// Color-derived features `F_c`.
    Color,
    /// Channel concatenation `[F_t; F_c]`.
    Joint,
}

impl Source {
    pub fn dim(self, luma_dim: usize, color_dim: usize) -> usize {
        match self {
            Source::Luma => luma_dim,
            Source::Color => color_dim,
            Source::Joint => luma_dim + color_dim,
        }
    }

    pub fn select(self, ft: &Tensor, fc: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Source::Luma => ft.clone(),
            Source::Color => fc.clone(),
            Source::Joint => Tensor::cat(&[ft, fc], 3)?,
        })
    }
}

/// Chooses the query/key sources of the primary and rectifying attention maps.
pub trait RectifyScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn primary(&self) -> Source;
    /// `None` disables rectification.
    fn rectifier(&self) -> Option<Source>;
}

macro_rules! scheme {
    ($ty:ident, $name:literal, $primary:expr, $rect:expr) => {
        pub struct $ty;
        impl RectifyScheme for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn primary(&self) -> Source {
                $primary
            }
            fn rectifier(&self) -> Option<Source> {
                $rect
            }
        }
    };
}

scheme!(JointMinusColor, "joint-color", Source::Joint, Some(Source::Color));
scheme!(JointMinusJoint, "joint-joint", Source::Joint, Some(Source::Joint));
scheme!(LumaMinusLuma, "luma-luma", Source::Luma, Some(Source::Luma));
scheme!(ColorOnly, "color", Source::Color, None);
scheme!(JointOnly, "joint", Source::Joint, None);
scheme!(LumaOnly, "luma", Source::Luma, None);

pub fn rectify_schemes() -> &'static Registry<Arc<dyn RectifyScheme>> {
    static REG: OnceLock<Registry<Arc<dyn RectifyScheme>>> = OnceLock::new();
    REG.get_or_init(|| {
        let all: [Arc<dyn RectifyScheme>; 6] = [
            Arc::new(JointMinusColor),
            Arc::new(JointMinusJoint),
            Arc::new(LumaMinusLuma),
            Arc::new(ColorOnly),
            Arc::new(JointOnly),
            Arc::new(LumaOnly),
        ];
        let mut reg = Registry::new("rectify scheme");
        for s in all {
            reg.register(s.name(), s);
        }
        reg
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoaConfig {
    pub geometry: WindowGeometry,
    pub heads: usize,
    /// Fixed offset `λ₀`.
    pub lambda0: f64,
    /// Name in [`rectify_schemes`].
    pub scheme: String,
    /// Separate relative-position tables for the two maps.
    pub split_bias: bool,
}

impl Default for RoaConfig {
    fn default() -> Self {
        Self {
            geometry: WindowGeometry::default(),
            heads: 4,
            lambda0: 0.7,
            scheme: "joint-color".into(),
            split_bias: false,
        }
    }
}

/// Evaluated `λ` plus whether a product hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaValue {
    pub value: f64,
    pub saturated: bool,
}

/// `λ = exp(λ₁¹·λ₁²) − exp(λ₂¹·λ₂²) + λ₀`, with products clamped to ±30.
pub fn lambda_value(l11: f64, l12: f64, l21: f64, l22: f64, lambda0: f64) -> LambdaValue {
    let p1 = l11 * l12;
    let p2 = l21 * l22;
    let lim = LAMBDA_PRODUCT_LIMIT;
    let saturated = !(-lim..=lim).contains(&p1) || !(-lim..=lim).contains(&p2);
    LambdaValue {
        value: p1.clamp(-lim, lim).exp() - p2.clamp(-lim, lim).exp() + lambda0,
        saturated,
    }
}

/// Learnable re-parameterization of `λ`, one scalar quadruple per head.
#[derive(Debug, Clone)]
pub struct LambdaParams {
    pub l11: Tensor,
    pub l12: Tensor,
    pub l21: Tensor,
    pub l22: Tensor,
    pub lambda0: f64,
}

impl LambdaParams {
    pub fn new(p: &Params, heads: usize, lambda0: f64) -> Result<Self> {
        let init = Init::Normal(0.1);
        Ok(Self {
            l11: p.get("l11", &[heads], init)?,
            l12: p.get("l12", &[heads], init)?,
            l21: p.get("l21", &[heads], init)?,
            l22: p.get("l22", &[heads], init)?,
            lambda0,
        })
    }

    /// Per-head `λ` as a tensor of shape `heads`.
    pub fn tensor(&self) -> Result<Tensor> {
        let lim = LAMBDA_PRODUCT_LIMIT;
        let p1 = (&self.l11 * &self.l12)?.clamp(-lim, lim)?.exp()?;
        let p2 = (&self.l21 * &self.l22)?.clamp(-lim, lim)?.exp()?;
        Ok(((p1 - p2)? + self.lambda0)?)
    }

    pub fn values(&self) -> Result<Vec<LambdaValue>> {
        let get = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
        };
        let (a, b, c, d) = (get(&self.l11)?, get(&self.l12)?, get(&self.l21)?, get(&self.l22)?);
        Ok((0..a.len())
            .map(|h| lambda_value(a[h], b[h], c[h], d[h], self.lambda0))
            .collect())
    }
}

/// Attention maps of one forward pass, shaped `(B·nW)×heads×M²×T`.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub att1: Tensor,
    pub att2: Option<Tensor>,
    /// Per-head λ (absent without rectification).
    pub lambda: Option<Tensor>,
    /// `Att_1 − λ·Att_2`, or `Att_1` alone.
    pub combined: Tensor,
}

struct Path {
    query: Dense,
    key: Dense,
    source: Source,
}

pub struct Roa {
    config: RoaConfig,
    head_dim: usize,
    primary: Path,
    rectifier: Option<(Path, LambdaParams)>,
    value: Dense,
    proj: Dense,
    bias1: Tensor,
    bias2: Option<Tensor>,
    plans: PlanCache,
}

impl Roa {
    /// `dim` is the channel count of `F_t` (and of the output), `color_dim` that of `F_c`.
    pub fn new(p: &Params, dim: usize, color_dim: usize, config: &RoaConfig) -> Result<Self> {
        config.geometry.validate()?;
        ensure(config.heads >= 1 && dim.is_multiple_of(config.heads), || {
            format!("dim {dim} not divisible by {} heads", config.heads)
        })?;
        let scheme = rectify_schemes().get(&config.scheme)?;
        let head_dim = dim / config.heads;
        let path = |name: &str, source: Source| -> Result<Path> {
            let in_dim = source.dim(dim, color_dim);
            ensure(in_dim > 0, || format!("{name} source has zero channels"))?;
            Ok(Path {
                query: Dense::new(&p.pp(format!("{name}_q")), in_dim, dim, false)?,
                key: Dense::new(&p.pp(format!("{name}_k")), in_dim, dim, false)?,
                source,
            })
        };
        let primary = path("att1", scheme.primary())?;
        let rectifier = match scheme.rectifier() {
            Some(src) => Some((
                path("att2", src)?,
                LambdaParams::new(&p.pp("lambda"), config.heads, config.lambda0)?,
            )),
            None => None,
        };
        let side = config.geometry.bias_side();
        let bias1 = p.get("rel_bias", &[config.heads, side * side], Init::Normal(0.02))?;
        let bias2 = if config.split_bias && rectifier.is_some() {
            Some(p.get("rel_bias2", &[config.heads, side * side], Init::Normal(0.02))?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            head_dim,
            primary,
            rectifier,
            value: Dense::new(&p.pp("value"), dim, dim, false)?,
            proj: Dense::new(&p.pp("proj"), dim, dim, false)?,
            bias1,
            bias2,
            plans: PlanCache::new(config.geometry),
        })
    }

    pub fn config(&self) -> &RoaConfig {
        &self.config
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn lambda(&self) -> Option<&LambdaParams> {
        self.rectifier.as_ref().map(|(_, l)| l)
    }

    /// `(B·nW)×T×(heads·d)` → `(B·nW)×heads×T×d`.
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (bn, t, _) = x.dims3()?;
        Ok(x
            .reshape((bn, t, self.config.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn bias(&self, table: &Tensor, plan: &WindowPlan) -> Result<Tensor> {
        let m2 = plan.layout.tokens_per_window();
        let t = plan.outreach_tokens;
        Ok(table
            .index_select(&plan.relative, 1)?
            .reshape((1, self.config.heads, m2, t))?)
    }

    fn attention(&self, path: &Path, ft: &Tensor, fc: &Tensor, bias: &Tensor, plan: &WindowPlan) -> Result<Tensor> {
        let src = path.source.select(ft, fc)?;
        let q = self.split_heads(&plan.partition(&path.query.forward(&src)?)?)?;
        let k = self.split_heads(&plan.partition_outreach(&path.key.forward(&src)?)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        softmax_last(&add_bias(&logits, bias)?)
    }

    pub fn forward(&self, ft: &Tensor, fc: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_maps(ft, fc)?.0)
    }

    /// Output (same shape as `ft`) and the attention maps that produced it.
    pub fn forward_with_maps(&self, ft: &Tensor, fc: &Tensor) -> Result<(Tensor, AttentionMaps)> {
        let (b, h, w, c) = ft.dims4()?;
        let (bc, hc, wc, _) = fc.dims4()?;
        ensure((b, h, w) == (bc, hc, wc), || {
            format!("F_t is {b}x{h}x{w} but F_c is {bc}x{hc}x{wc}")
        })?;
        ensure(c == self.config.heads * self.head_dim, || {
            format!("F_t has {c} channels, expected {}", self.config.heads * self.head_dim)
        })?;
        let plan = self.plans.get(h, w, ft.device())?;
        let bias1 = self.bias(&self.bias1, &plan)?;
        let att1 = self.attention(&self.primary, ft, fc, &bias1, &plan)?;

        let (combined, att2, lambda) = match &self.rectifier {
            Some((path, lambda)) => {
                let bias2 = match &self.bias2 {
                    Some(t) => self.bias(t, &plan)?,
                    None => bias1.clone(),
                };
                let att2 = self.attention(path, ft, fc, &bias2, &plan)?;
                let lam = lambda.tensor()?;
                let scaled = att2.broadcast_mul(&lam.reshape((1, self.config.heads, 1, 1))?)?;
                ((&att1 - scaled)?, Some(att2), Some(lam))
            }
            None => (att1.clone(), None, None),
        };

        let v = self.split_heads(&plan.partition_outreach(&self.value.forward(ft)?)?)?;
        let out = combined.matmul(&v)?; // (B·nW)×heads×M²×d
        let (bn, _, m2, _) = out.dims4()?;
        let out = out.transpose(1, 2)?.reshape((bn, m2, c))?;
        let out = self.proj.forward(&plan.merge(&out)?)?;
        Ok((
            out,
            AttentionMaps {
                att1,
                att2,
                lambda,
                combined,
            },
        ))
    }
}

/// Row sums of an attention map over its key axis.
pub fn row_sums(att: &Tensor) -> Result<Vec<f64>> {
    Ok(att
        .sum(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}
