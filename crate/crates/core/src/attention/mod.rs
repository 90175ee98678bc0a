//! Window machinery and the attention/convolution blocks of the restoration networks.

pub mod blocks;
pub mod mixer;
pub mod roa;
pub mod windows;

pub use blocks::{Ffn, Lrb, Mta};
pub use mixer::{mixers, Block, MixerSpec, TokenMixer};
pub use roa::{
    lambda_value, rectify_schemes, row_sums, AttentionMaps, LambdaParams, LambdaValue, RectifyScheme, Roa,
    RoaConfig, Source,
};
pub use windows::{
    merge_windows, partition_outreach, partition_windows, PlanCache, WindowGeometry, WindowLayout, WindowPlan,
};
