//! Quantization-aware spiking neural networks for hyperspectral image patch
//! classification.
//!
//! The pipeline is: train a bias-free ReLU network ([`train::train_ann`]),
//! convert it to an iso-architecture LIF network with layer-wise threshold
//! calibration ([`convert`]), fine-tune it with backpropagation through time
//! using fake-quantized weights and surrogate spike gradients
//! ([`train::train_snn`]), then evaluate accuracy ([`metrics`]) and estimate
//! compute energy from measured spiking activity ([`energy`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod convert;
pub mod data;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
