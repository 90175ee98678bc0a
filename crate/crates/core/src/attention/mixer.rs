//! Token mixers and the transformer block that hosts them.
//!
//! Every stage of the U-shaped backbones is a stack of [`Block`]s whose first sub-layer
//! is a [`TokenMixer`] picked by name from [`mixers`]: `lrb` for shallow stages,
//! `roa` for deep ones.

use std::sync::OnceLock;

use candle_core::Tensor;

use super::blocks::{Ffn, Lrb, Mta};
use super::roa::{Roa, RoaConfig};
use crate::error::{Error, Result};
use crate::nn::LayerNorm;
use crate::params::Params;
use crate::registry::Registry;

pub trait TokenMixer: Send + Sync {
    fn name(&self) -> &'static str;
    /// `x` is the normalized block input; `color` the color features at the same
    /// resolution when the stage provides them.
    fn forward(&self, x: &Tensor, color: Option<&Tensor>) -> Result<Tensor>;
}

pub struct MixerSpec<'a> {
    pub dim: usize,
    pub heads: usize,
    pub color_dim: usize,
    pub roa: &'a RoaConfig,
}

pub type MixerBuilder = fn(&Params, &MixerSpec) -> Result<Box<dyn TokenMixer>>;

struct LrbMixer(Lrb);

impl TokenMixer for LrbMixer {
    fn name(&self) -> &'static str {
        "lrb"
    }
    fn forward(&self, x: &Tensor, _color: Option<&Tensor>) -> Result<Tensor> {
        self.0.forward(x)
    }
}

struct RoaMixer(Roa);

impl TokenMixer for RoaMixer {
    fn name(&self) -> &'static str {
        "roa"
    }
    fn forward(&self, x: &Tensor, color: Option<&Tensor>) -> Result<Tensor> {
        let fc = color.ok_or_else(|| Error::validation("roa mixer needs color features"))?;
        self.0.forward(x, fc)
    }
}

fn build_lrb(p: &Params, spec: &MixerSpec) -> Result<Box<dyn TokenMixer>> {
    Ok(Box::new(LrbMixer(Lrb::new(p, spec.dim)?)))
}

fn build_roa(p: &Params, spec: &MixerSpec) -> Result<Box<dyn TokenMixer>> {
    let cfg = RoaConfig {
        heads: spec.heads,
        ..spec.roa.clone()
    };
    Ok(Box::new(RoaMixer(Roa::new(p, spec.dim, spec.color_dim, &cfg)?)))
}

pub fn mixers() -> &'static Registry<MixerBuilder> {
    static REG: OnceLock<Registry<MixerBuilder>> = OnceLock::new();
    REG.get_or_init(|| {
        Registry::new("token mixer")
            .with("lrb", build_lrb as MixerBuilder)
            .with("roa", build_roa as MixerBuilder)
    })
}

/// Pre-norm residual block: mixer, then channel attention, then FFN.
pub struct Block {
    norm1: LayerNorm,
    mixer: Box<dyn TokenMixer>,
    norm2: LayerNorm,
    mta: Mta,
    norm3: LayerNorm,
    ffn: Ffn,
}

impl Block {
    pub fn new(p: &Params, mixer: &str, spec: &MixerSpec) -> Result<Self> {
        let build = mixers().get(mixer)?;
        Ok(Self {
            norm1: LayerNorm::new(&p.pp("norm1"), spec.dim)?,
            mixer: build(&p.pp("mixer"), spec)?,
            norm2: LayerNorm::new(&p.pp("norm2"), spec.dim)?,
            mta: Mta::new(&p.pp("mta"), spec.dim, spec.heads)?,
            norm3: LayerNorm::new(&p.pp("norm3"), spec.dim)?,
            ffn: Ffn::new(&p.pp("ffn"), spec.dim)?,
        })
    }

    pub fn mixer_name(&self) -> &'static str {
        self.mixer.name()
    }

    pub fn forward(&self, x: &Tensor, color: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.mixer.forward(&self.norm1.forward(x)?, color)?)?;
        let x = (&x + self.mta.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.ffn.forward(&self.norm3.forward(&x)?)?)?)
    }
}
