//! Four-level U-shaped encoder/decoder shared by both restoration networks.
//!
//! Level `k` runs at `1/2ᵏ` resolution with `base_dim·2ᵏ` channels. Levels 0–2 are encoder
//! stages with a skip connection each, level 3 is the bottleneck. Decoder stages upsample,
//! concatenate the (optionally transformed) skip, fuse with a 1×1 map and run their blocks.
//! A full-resolution refinement tail and a 3×3 output head close the network.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{Block, MixerSpec, RoaConfig};
use crate::error::{ensure, Error, Result};
use crate::nn::{Conv3x3, Dense, Downsample, Upsample};
use crate::params::{Init, Params};

pub const LEVELS: usize = 4;
/// Spatial dims entering the backbone must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << (LEVELS - 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels at full resolution; doubles per level.
    pub base_dim: usize,
    pub encoder_blocks: usize,
    pub bottleneck_blocks: usize,
    pub decoder_blocks: usize,
    pub refinement_blocks: usize,
    /// Attention heads per level.
    pub heads: [usize; LEVELS],
    /// Levels (1-based, L1..L4) whose blocks use rectified outreach attention.
    pub roa_stages: Vec<usize>,
    pub roa: RoaConfig,
    /// Zero-initialized output head, making the network an identity at init.
    pub zero_init_head: bool,
    /// Scale of the fan-in head init when the head is not zero-initialized.
    pub head_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_dim: 32,
            encoder_blocks: 2,
            bottleneck_blocks: 2,
            decoder_blocks: 2,
            refinement_blocks: 2,
            heads: [1, 2, 4, 8],
            roa_stages: vec![3, 4],
            roa: RoaConfig::default(),
            zero_init_head: true,
            head_gain: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn dims(&self) -> [usize; LEVELS] {
        std::array::from_fn(|k| self.base_dim << k)
    }

    /// Whether 0-based level `k` uses ROA mixers.
    pub fn is_roa(&self, k: usize) -> bool {
        self.roa_stages.contains(&(k + 1))
    }

    pub fn mixer(&self, k: usize) -> &'static str {
        if self.is_roa(k) {
            "roa"
        } else {
            "lrb"
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.base_dim > 0, || "base_dim must be positive".into())?;
        ensure(self.head_gain.is_finite() && self.head_gain >= 0.0, || "head_gain must be >= 0".into())?;
        for s in &self.roa_stages {
            ensure((1..=LEVELS).contains(s), || {
                format!("roa stage L{s} outside L1..L{LEVELS}")
            })?;
        }
        for (k, (d, h)) in self.dims().iter().zip(self.heads).enumerate() {
            ensure(h >= 1 && d % h == 0, || {
                format!("level L{}: {d} channels not divisible by {h} heads", k + 1)
            })?;
        }
        self.roa.geometry.validate()
    }
}

pub struct Backbone {
    embed: Conv3x3,
    encoder: Vec<Vec<Block>>,
    down: Vec<Downsample>,
    bottleneck: Vec<Block>,
    up: Vec<Upsample>,
    fuse: Vec<Dense>,
    decoder: Vec<Vec<Block>>,
    refinement: Vec<Block>,
    head: Conv3x3,
}

fn blocks(p: &Params, n: usize, mixer: &str, spec: &MixerSpec) -> Result<Vec<Block>> {
    (0..n).map(|i| Block::new(&p.pp(i.to_string()), mixer, spec)).collect()
}

impl Backbone {
    /// `color_dims[k]` is the channel count of the color features fed to ROA at level `k`.
    pub fn new(
        p: &Params,
        cfg: &BackboneConfig,
        in_dim: usize,
        out_dim: usize,
        color_dims: [usize; LEVELS],
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims();
        let spec = |k: usize| MixerSpec {
            dim: dims[k],
            heads: cfg.heads[k],
            color_dim: color_dims[k],
            roa: &cfg.roa,
        };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for k in 0..LEVELS - 1 {
            let s = spec(k);
            encoder.push(blocks(&p.pp(format!("enc{k}")), cfg.encoder_blocks, cfg.mixer(k), &s)?);
            down.push(Downsample::new(&p.pp(format!("down{k}")), dims[k], dims[k + 1])?);
            up.push(Upsample::new(&p.pp(format!("up{k}")), dims[k + 1], dims[k])?);
            fuse.push(Dense::new(&p.pp(format!("fuse{k}")), 2 * dims[k], dims[k], false)?);
            decoder.push(blocks(&p.pp(format!("dec{k}")), cfg.decoder_blocks, cfg.mixer(k), &s)?);
        }
        let last = LEVELS - 1;
        let head_init = if cfg.zero_init_head {
            Init::Zeros
        } else {
            Init::Uniform(cfg.head_gain / ((9 * dims[0]) as f64).sqrt())
        };
        Ok(Self {
            embed: Conv3x3::new(&p.pp("embed"), in_dim, dims[0], true)?,
            encoder,
            down,
            bottleneck: blocks(&p.pp("bottleneck"), cfg.bottleneck_blocks, cfg.mixer(last), &spec(last))?,
            up,
            fuse,
            decoder,
            refinement: blocks(&p.pp("refine"), cfg.refinement_blocks, "lrb", &spec(0))?,
            head: Conv3x3::with_init(&p.pp("head"), dims[0], out_dim, true, head_init)?,
        })
    }

    /// Runs the network on a `B×H×W×in` map with `H`, `W` multiples of [`SIZE_MULTIPLE`].
    ///
    /// `color[k]` feeds the ROA mixers of level `k`. `skip_hook(k, features)` may rewrite
    /// the skip of level `k` (and the bottleneck output for `k = 3`) before decoding.
    pub fn forward(
        &self,
        x: &Tensor,
        color: &[Option<Tensor>; LEVELS],
        skip_hook: &dyn Fn(usize, Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::validation(format!(
                "backbone input {h}x{w} is not a multiple of {SIZE_MULTIPLE}"
            )));
        }
        let run = |blocks: &[Block], mut x: Tensor, k: usize| -> Result<Tensor> {
            for b in blocks {
                x = b.forward(&x, color[k].as_ref())?;
            }
            Ok(x)
        };
        let mut x = self.embed.forward(x)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for k in 0..LEVELS - 1 {
            x = run(&self.encoder[k], x, k)?;
            skips.push(x.clone());
            x = self.down[k].forward(&x)?;
        }
        x = run(&self.bottleneck, x, LEVELS - 1)?;
        x = skip_hook(LEVELS - 1, x)?;
        for k in (0..LEVELS - 1).rev() {
            let skip = skip_hook(k, skips[k].clone())?;
            let merged = Tensor::cat(&[&self.up[k].forward(&x)?, &skip], 3)?;
            x = run(&self.decoder[k], self.fuse[k].forward(&merged)?, k)?;
        }
        for b in &self.refinement {
            x = b.forward(&x, None)?;
        }
        self.head.forward(&x)
    }
}

/// Color-feature stem: a 3×3 convolution at full resolution followed by stride-2
/// downsampling convolutions, emitting one map per level up to the deepest one requested.
pub struct ColorStem {
    conv: Conv3x3,
    down: Vec<Downsample>,
    wanted: [bool; LEVELS],
}

impl ColorStem {
    pub fn new(p: &Params, in_dim: usize, dims: [usize; LEVELS], wanted: [bool; LEVELS]) -> Result<Self> {
        let depth = wanted.iter().rposition(|w| *w).map_or(0, |k| k);
        Ok(Self {
            conv: Conv3x3::new(&p.pp("conv"), in_dim, dims[0], true)?,
            down: (0..depth)
                .map(|k| Downsample::new(&p.pp(format!("down{k}")), dims[k], dims[k + 1]))
                .collect::<Result<_>>()?,
            wanted,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<[Option<Tensor>; LEVELS]> {
        let mut out: [Option<Tensor>; LEVELS] = Default::default();
        if !self.wanted.iter().any(|w| *w) {
            return Ok(out);
        }
        let mut f = crate::nn::gelu(&self.conv.forward(x)?)?;
        for k in 0..LEVELS {
            if self.wanted[k] {
                out[k] = Some(f.clone());
            }
            if k < self.down.len() {
                f = crate::nn::gelu(&self.down[k].forward(&f)?)?;
            }
        }
        Ok(out)
    }
}
