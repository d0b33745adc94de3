//! Thermometry and absorption analysis for optically levitated nanodiamonds.
//!
//! The NV zero-field splitting is used as an internal thermometer. Fitting
//! the ESR spectrum gives D, the cubic D(T) polynomial turns D into a
//! temperature, and the heat balance between laser absorption and gas
//! conduction turns temperatures measured over a grid of laser intensities and
//! pressures into a heating coefficient β_heat. Combined with the
//! hydrodynamic radius from the motional power spectrum this yields the
//! absorption cross-section of each particle, and an ensemble of particles
//! yields the size scaling of absorption and the dielectric loss.
//!
//! Modules:
//!
//! - [`physics`]: closed-form models and their inversions.
//! - [`spectral`]: ESR and motional PSD forward models, seeded synthetic data
//!   and fitters.
//! - [`estimation`]: the least-squares engine and the named fits.
//! - [`pipeline`]: file formats, configuration, per-particle and ensemble
//!   runs, and the command-line front end.

pub mod estimation;
pub mod physics;
pub mod pipeline;
pub mod spectral;
