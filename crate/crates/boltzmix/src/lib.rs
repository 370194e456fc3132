//! Deterministic discrete-velocity toolkit for the multi-species Boltzmann
//! equation with unequal masses.

pub mod collision;
pub mod diagnostics;
pub mod linearized;
pub mod model;
pub mod quadrature;
pub mod solver;
