//! Chroma-key head blending at desk scale.
//!
//! The pipeline replaces the head in a target frame with a source actor's
//! head while keeping the target's body and background intact:
//!
//! - binary-mask algebra builds the network input (gray source head over a
//!   green-keyed target) and pastes the generated region back ([`mask`]);
//! - head-shape and long-hair mask augmentation fabricates diverse
//!   inpainting regions during self-supervised training ([`augment`]);
//! - a foreground-predictive masked cross-attention block restricts
//!   attention to same-type patches ([`fpat`]);
//! - a small encoder/decoder generator and discriminator ([`model`]) are
//!   trained with a five-term objective ([`loss`]) by the training loop in
//!   [`pipeline`];
//! - everything differentiable runs on a hand-rolled reverse-mode tape
//!   ([`numerics`]) checked against central finite differences.

pub mod augment;
pub mod cli;
pub mod config;
pub mod fpat;
pub mod io_png;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod synth;
