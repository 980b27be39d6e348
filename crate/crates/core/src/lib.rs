//! Co-design of planar biped hardware and gait.
//!
//! This library couples a rigid-body model whose link lengths are decision
//! variables (through virtual prismatic "extension" joints) with a periodic
//! walking gait found by direct collocation under hybrid-zero-dynamics
//! output constraints. The main layers, bottom up:
//!
//! * [`model`] -- robot description files, link-length augmentation, and
//!   cubic inertia-vs-length fits.
//! * [`dynamics`] -- planar kinematics, Euler-Lagrange terms, stance-
//!   constrained dynamics, and the plastic impact / relabeling map.
//! * [`outputs`] -- Bezier desired outputs, phasing, and Lie derivatives.
//! * [`control`] -- input-output linearizing tracking controller.
//! * [`hybrid_sim`] -- event-driven step and multi-step simulation.
//! * [`transcription`] -- the collocation NLP over one step.
//! * [`solver`] -- a dense SQP method used for every solve in the crate.
//! * [`codesign`] -- the inertia-update outer loop and multi-start studies.

pub mod codesign;
pub mod control;
pub mod dynamics;
pub mod hybrid_sim;
pub mod model;
pub mod num;
pub mod outputs;
pub mod solver;
pub mod transcription;

#[cfg(test)]
pub(crate) mod fixtures;
