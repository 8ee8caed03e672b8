//! Core algorithms for self-supervised contrastive pretraining on B-mode
//! ultrasound images and downstream lesion segmentation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the command
//! line live in the `sslus` crate.
//!
//! Module map:
//!
//! - [`image`], [`data`]: images and masks, manifests, the synthetic generator.
//! - [`photometric`]: flips and color jitter (transform `t1`, per-patch `t2`).
//! - [`fft`], [`frequency`]: 2-D DFT and the randomized band-stop + X filter.
//! - [`jigsaw`]: Cross-patch and baseline Jigsaw over a 6x6 grid.
//! - [`tensor`], [`graph`], [`nn`]: a small reverse-mode autodiff engine.
//! - [`encoder`], [`segmentation`]: CNN encoders with projection heads; the
//!   U-shaped decoder.
//! - [`memory_bank`], [`losses`]: EMA memory bank; contrastive and perceptual
//!   losses.
//! - [`training`]: pretext and fine-tuning loops.
//! - [`metrics`]: segmentation scores.
#![no_std]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod data;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod frequency;
pub mod graph;
pub mod image;
pub mod jigsaw;
pub mod losses;
pub mod memory_bank;
pub mod metrics;
pub mod nn;
pub mod photometric;
pub mod rng;
pub mod segmentation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
