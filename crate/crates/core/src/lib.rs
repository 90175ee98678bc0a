//! Shadow removal by luminance/chroma decoupling.
//!
//! An RGB image is split into luminance and chroma ([`colorspace`]). A luminance
//! restoration network ([`lrnet`]) relights and repairs texture under the shadow; a color
//! regeneration network ([`crnet`]) then rebuilds chroma by attending from restored
//! luminance to color features. The crate also carries a physical shadow-formation model
//! used as a synthetic data generator ([`shadow_model`]), training machinery
//! ([`training`]), evaluation metrics ([`metrics`]) and dataset I/O ([`data_io`]).

pub mod attention;
pub mod backbone;
pub mod batch;
pub mod cli;
pub mod colorspace;
pub mod config;
pub mod crnet;
pub mod data_io;
pub mod error;
pub mod image;
mod kernels;
pub mod lrnet;
pub mod mask_refine;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod registry;
pub mod shadow_model;
pub mod training;

pub use error::{Error, Result};
pub use image::{ChromaPlanes, LumaPlane, Plane, RgbImage};
