//! Classical simulation of a two-source register readout pipeline.
//!
//! Stages, in order:
//!
//! 1. [`register`] builds planted sources and the `2 x T` observation.
//! 2. [`bnmf`] factorizes the observation with Poisson-Exponential variational Bayes.
//! 3. [`partition`] transforms the bases with a constant-Q transform and assigns
//!    each basis to a source cluster.
//! 4. [`recovery`] inverts the CQT, applies the restricted inverse DSTFT and a DFT
//!    to isolate the target cluster.
//! 5. [`snr`] scores the result through wavefunction energies.
//!
//! [`pipeline`] chains everything and [`cli`] persists each stage to disk.

pub mod bnmf;
pub mod cli;
pub mod error;
pub mod io;
pub mod partition;
pub mod pipeline;
pub mod recovery;
pub mod register;
pub mod snr;
pub mod transforms;

pub use error::{Error, Result};

/// Number of sources in the register. Fixed.
pub const NUM_SOURCES: usize = 2;
