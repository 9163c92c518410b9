//! Bias-compensated RPC block adjustment coupled with geometrically
//! constrained multi-view least-squares matching.
//!
//! The crate is organised bottom-up:
//!
//! * [`rpc`]: rational polynomial sensor model, projections and derivatives.
//! * [`raster`]: intensity grids, interpolation and window correlation.
//! * [`tracks`]: multi-view matches, triangulation and outlier gating.
//! * [`adjust`]: per-image constant bias estimation with Schur-reduced normal equations.
//! * [`lsm`]: per-track least-squares matching with geometric and virtual control rows.
//! * [`pipeline`]: alternation of the two solvers and the BA / LSM+BA / unified comparison.
//! * [`synth`]: ground-truth scene generator used by the tests and the `synth` subcommand.
//! * [`io`]: file formats (RPC text, PGM / float32 rasters, JSON-lines tracks, reports).

pub mod adjust;
pub mod error;
pub mod io;
pub mod lsm;
pub mod pipeline;
pub mod raster;
pub mod rpc;
pub mod synth;
pub mod tracks;

pub use error::{Error, Result};
