//! Critical multitype Galton-Watson processes in continuous time: forward
//! simulation, k-spine simulation under the size-biased and discounted
//! measure, sample genealogies, and the closed-form limit laws of the
//! genealogy of a uniform k-sample.

pub mod forest;
pub mod genealogy;
pub mod genfun;
pub mod harness;
pub mod limitlaw;
pub mod model;
pub mod ode;
pub mod quadrature;
pub mod spine;
pub mod stats;
pub(crate) mod series;
