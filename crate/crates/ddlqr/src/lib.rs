//! Robust data-driven receding-horizon LQR with input constraints.
//!
//! The crate builds polytopic consistency sets from noisy trajectory data,
//! compiles robust feasibility conditions (via Lagrangian duality and
//! Putinar SOS certificates) into semidefinite programs, and runs
//! receding-horizon LQR loops, model-based and data-driven, verified against
//! independent LP and Riccati oracles in a closed-loop simulator.

pub mod conic;
pub mod config;
pub mod consistency;
pub mod error;
pub mod lqr;
pub mod plot;
pub mod poly;
pub mod robust;
pub mod sim;

pub use error::{Error, Result};
