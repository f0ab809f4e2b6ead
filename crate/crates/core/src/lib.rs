//! Statistical analysis of functions on surfaces.
//!
//! The crate covers the numerical side of the pipeline:
//!
//! * [`mesh`]: triangulated surfaces, scalar fields and nearest-vertex queries.
//! * [`kernels`]: Gaussian kernels shared by the deformation space and the
//!   current metrics.
//! * [`lddmm`]: geodesic shooting of initial momenta and the induced flows.
//! * [`similarity`]: landmark, current and functional-current mismatch terms.
//! * [`geo_registration`]: momentum optimisation against a target surface.
//! * [`tangent_fem`] and [`fun_registration`]: vector finite elements and the
//!   demons-style alignment of functions on a fixed template.
//! * [`fpca`] and [`covariation`]: principal components of deformations and
//!   functions, canonical correlation analysis and Bartlett tests.
//! * [`synthdata`]: the synthetic simulation study generator.
//!
//! Nothing in here touches the filesystem; readers, writers and the command
//! line live in the `fos` crate.

pub mod covariation;
pub mod error;
pub mod fpca;
pub mod fun_registration;
pub mod geo_registration;
pub mod kernels;
pub mod lddmm;
pub mod linalg;
pub mod mesh;
pub mod optimize;
pub mod shapes;
pub mod similarity;
pub mod sparse;
pub mod surface;
pub mod synthdata;
pub mod tangent_fem;

pub use error::{Error, Result};
pub use mesh::{ScalarField, TriangleMesh, Vec3};
