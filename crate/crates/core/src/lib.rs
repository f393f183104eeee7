//! Self-supervised monocular depth forecasting.
//!
//! Past RGB frames and optical flow are encoded into feature pyramids,
//! forecast to a future time step by recurrent blocks, and decoded into a
//! depth map of the unobserved frame. Training needs no depth labels: a pose
//! network conditioned on future frames supplies the relative camera motion
//! used to re-synthesise the future frame from its neighbours, and the
//! photometric discrepancy drives both networks.

pub mod autograd;
pub mod cli;
pub mod decoder;
pub mod encoders;
pub mod forecaster;
pub mod error;
pub mod evaluation;
pub mod frames;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod posenet;
pub mod selftest;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use frames::{DepthMap, FlowField, Frame, Mask};
pub use tensor::Tensor;
