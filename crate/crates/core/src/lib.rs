//! B-cell lymphopoiesis with a leukemic clone under induction chemotherapy.

pub mod integrator;
pub mod io;
pub mod model;
pub mod protocol;
pub mod solver;
pub mod stability;
pub mod scenarios;
pub mod sensitivity;
