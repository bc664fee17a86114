//! Numerical toolkit for planar concentration fields.
//!
//! The crate evaluates and integrates scalar fields on the plane that are
//! built from log-radial concentrations ("bubbles") plus smooth backgrounds,
//! with quadrature designed so that structure at radius `e^{-alpha}` for
//! `alpha` up to a few hundred is resolved exactly in log coordinates.
//! On top of that sit Luxemburg (Orlicz) norms, Dirichlet energies,
//! Schwarz symmetric-decreasing rearrangement, variational capacity and
//! obstacle problems, and a bubble-decomposition pipeline that detects
//! scales, cores and profiles of a field and audits the energy ledger.




pub mod bubbles;
pub mod capacity;
pub mod error;
pub mod extract;

pub mod field;
pub mod geom;

pub mod orlicz;
pub mod profile;
pub mod quad;
pub mod rearrange;


pub use error::CcxError;
pub use field::{Background, Field, FieldPart, Transform, Triplet};
pub use geom::Point2;
pub use orlicz::OrliczConfig;
pub use profile::Profile;
pub use quad::{QuadratureSpec, Region};

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, CcxError>;
