//! Hybrid spiking/analog networks for event-camera optical flow.
//!
//! The crate covers the whole pipeline: event ingestion and binning
//! ([`events`]), a small reverse-mode autodiff engine ([`autodiff`]), LIF and
//! ConvRNN cells ([`neuron`]), EV-FlowNet / FireFlowNet builders with
//! per-layer activation choice ([`network`]), flow losses and AEE
//! ([`losses`]), BPTT training ([`train`]) and an analytical inference-energy
//! model ([`energy`]).

pub mod autodiff;
pub mod energy;
pub mod error;
pub mod events;
pub mod flow;
pub mod losses;
pub mod network;
pub mod neuron;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
