//! A small, dependency-light inference engine and static cost analyzer for
//! YOLOv4-tiny and a faster variant that swaps two CSP stages for
//! ResBlock-D stages fused with CBAM-based auxiliary blocks.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: NCHW tensors and deterministic numeric primitives.
//! - [`blocks`]: CSPBlock, ResBlock-D, CBAM, the auxiliary block and fusion.
//! - [`network`]: graph builders, shape inference and the forward pass.
//! - [`analysis`]: FLOPs accounting and receptive fields.
//! - [`detect`]: head decoding, IoU, confidence filtering and NMS.
//! - [`loss`]: confidence, classification and CIoU losses with gradients.
//! - [`weights_io`]: seeded initialization and the binary weight format.
//! - [`image`]: PPM / raw tensor input and letterboxing.
//! - [`cli`]: the `yolite` command-line tool.

pub mod analysis;
pub mod blocks;
pub mod cli;
pub mod detect;
pub mod image;
pub mod loss;
pub mod network;
pub mod selftest;
pub mod tensor;
pub mod weights_io;

pub use network::{build, build_proposed, build_yolov4_tiny, NetworkGraph, Variant};
pub use tensor::{Exec, Shape, Tensor};
