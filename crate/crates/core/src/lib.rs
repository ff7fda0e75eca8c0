//! Squared increment statistics of isotropic fractional Brownian fields
//! observed at the vertices of Poisson–Delaunay triangulations.

pub mod delaunay;
pub mod error;
pub mod experiment;
pub mod fbf;
pub mod geom;
pub mod normality;
pub mod pointprocess;
pub mod predicates;
pub mod qvstats;
pub mod rng;
pub mod typical;
pub mod varints;
pub mod verify;

pub use error::{Error, Result};
pub use geom::Point2;
