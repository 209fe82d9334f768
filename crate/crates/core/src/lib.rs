//! Partial least squares in the single-component regime: plain, test-thresholded
//! and sparse estimators, evaluators for their non-asymptotic prediction bounds,
//! and a Monte Carlo harness that checks those bounds empirically.

pub mod bounds;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pls;
pub mod simulate;
pub mod single;
pub mod sparse;

pub use bounds::{BoundReport, ConstantMode, PopulationContext, Theorem};
pub use error::{Error, Result};
pub use linalg::{Matrix, SymMatrix};
pub use pls::{fit_pls, krylov_basis, PlsFit};
pub use simulate::{BetaSpec, DesignKind, DesignSpec, EstimatorKind, SimConfig, SimSummary};
pub use single::{single_component_estimator, thresholded_estimator};
pub use sparse::{alt_estimator, spls_estimator, SparseFit, SparseVariant};
