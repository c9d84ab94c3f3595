//! Super-resolution delay/angle channel estimation with quasi-Newton OMP, linear optimal
//! extrapolation to unobserved bands, and a Monte-Carlo comparison harness.

pub mod baselines;
pub mod bfgs;
pub mod blocksparse;
pub mod channel;
pub mod error;
pub mod extrapolate;
pub mod harness;
mod linalg;
pub mod offgrid;
pub mod ongrid;
pub mod qnomp;
pub mod simulate;

pub use channel::{
    build_atom, build_freq_atom, build_steering_atom, channel_nmse, delay_nmse, synthesize_band, synthesize_channel,
    Band, ChannelConfig, Dictionary, Observation, PathSet,
};
pub use error::{Error, Result};
pub use linalg::{solve_hermitian, HermitianSolve};
pub use qnomp::{cfar_threshold, extrapolate_plugin, qnomp_run, EstimationResult, QnompConfig};
