//! Zero-shot super-resolution training for tensorial radiance fields.
//!
//! The crate trains a super-resolution radiance field from low-resolution posed
//! images only. A coarse field is fitted to the low-resolution views, a small
//! degradation network is learned internally from the coarse renders, and that
//! network then supervises a sub-pixel sampled fine field through its own
//! downsampling. Field snapshots taken late in training are averaged per query
//! at inference time.
//!
//! # `no_std` support
//!
//! Everything in this crate is pure computation and only needs `alloc`. File
//! formats, dataset IO and the command line live in the `zssrt` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod camera;
pub mod conv;
pub mod error;
pub mod features;
pub mod field;
pub mod image;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod patch;
pub mod render;
pub mod rng;
pub mod scene;
pub mod sdm;
pub mod train;

pub use camera::{CameraPose, Ray};
pub use error::{Error, Result};
pub use features::{ConvFeatureExtractor, FeatureExtractor};
pub use field::{EnsembleField, FieldConfig, FieldSnapshot, GridRegularizer, RadianceField, TensorialField};
pub use image::{Image, LevelTag, PosedImage};
pub use math::Vec3;
pub use patch::{MaskConfig, PatchBundle, PatchSampler};
pub use render::{RenderOptions, RenderedPatch};
pub use sdm::{GradientView, SdmConfig, SdmNetwork};
pub use train::{Supervisor, TrainConfig};
