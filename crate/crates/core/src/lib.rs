//! Simulation and estimation of treatment effects that spread through
//! geographic space and economic networks.
//!
//! The crate is organised bottom-up: [`types`] and [`seed`] hold shared
//! plumbing, [`netgen`] builds gravity networks, [`pde`] and [`fk`] solve the
//! master equation on a lattice and by path simulation, [`dgp`] generates
//! synthetic economies, [`estimators`] implements the competing methods and
//! [`mc`] runs the Monte Carlo experiments.

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod fk;
pub mod io;
pub mod linalg;
pub mod mc;
pub mod netgen;
pub mod optim;
pub mod pde;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
