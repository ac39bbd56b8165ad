//! Finite-dimensional laboratory for the stochastic maximum principle of
//! linear SPDEs driven by a Hilbert-space martingale.
//!
//! The state space is a truncated Gelfand triple `V ⊂ K ⊂ V′` realised on
//! `ℝⁿ`. Forward paths are integrated with a semi-implicit Euler scheme, the
//! adjoint backward equation is solved by least-squares Monte Carlo, and the
//! spike-variation machinery measures the estimates behind the Hamiltonian
//! maximum condition.

pub mod adjoint;
pub mod control;
pub mod error;
pub mod forward;
pub mod grid;
pub mod hamiltonian;
pub mod hilbert;
pub mod linalg;
pub mod noise;
pub mod regression;
pub mod spike;
pub mod stats;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use hilbert::{GelfandTriple, NuclearCovariance, Omega, OperatorConstants, OperatorFamily};
pub use noise::{CovarianceProcess, MartingaleEnsemble, MartingalePath, NoiseSource};
