//! Numerical laboratory for the variational `d_p` distance on degenerate Riemannian
//! metrics, together with the warped example metrics, entropy and Ricci-flow tools used
//! to compare `d_p` with geodesic and Gromov–Hausdorff behavior.

pub mod error;
pub mod smooth;
pub mod dp_solver;
pub mod entropy;
pub mod grid_manifold;
pub mod linalg;
pub mod metric_compare;
pub mod ricci_flow;
pub mod warped_metrics;

pub use error::{Error, Result};
