//! Learned acoustic scattering fields for point-cloud objects.
//!
//! The crate is organized bottom-up:
//!
//! - [`geom`]: point clouds, neighbor search, furthest-point sampling and
//!   the uniform / RBF-weighted differential coordinates.
//! - [`sphharm`]: real spherical harmonics up to order 3, spherical
//!   Bessel/Hankel functions, lat-long grids, projection and the dB metric.
//! - [`oracle`]: analytical plane-wave scattering by a rigid sphere and
//!   labeled dataset generation.
//! - [`symfun`]: power sums, Newton's identities and multiset recovery.
//! - [`net`]: the permutation-invariant point-cloud network with exact
//!   forward and reverse passes.
//! - [`train`]: splits, Adam, the training loop and dB evaluation.
//! - [`propagate`]: stochastic ray tracing with scattering-field driven
//!   redirection at scatterers.

pub mod error;
pub mod geom;
pub mod net;
pub mod oracle;
pub mod propagate;
pub mod sphharm;
pub mod symfun;
pub mod train;

mod textio;

pub use error::{Error, Result};
pub use geom::{NeighborSet, PointCloud, Vec3};
pub use net::{Ablation, Architecture, ModelParams, Pooling};
pub use propagate::{EnergyImpulseResponse, Scene};

pub use sphharm::{LatLongMap, ShCoeffs};

/// Speed of sound in air at 20 °C, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// The four frequency bands a model can be trained for, in Hz.
pub const BANDS_HZ: [u32; 4] = [125, 250, 500, 1000];

/// Crate version, written into provenance headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
