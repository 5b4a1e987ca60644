//! Core numerics for a Hamiltonian system coupled linearly to a dissipative
//! bath that is realized as a unitary dilation of a contraction semigroup.
//!
//! The crate is `no_std` with `alloc`. The `std` feature enables standard
//! library support in the dependencies; `parallel` spreads ensembles over a
//! rayon pool.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod dilation;
pub mod ensemble;
pub mod error;
pub mod generic;
pub mod linalg;
pub mod macrodyn;
pub mod micro;
pub mod model;
pub mod ou;
pub mod rng;
pub mod stats;

mod par;
#[cfg(feature = "serde")]
mod serde_impls;

pub use error::{Error, Result};
pub use model::{DerivedOperators, Potential, PoissonOperator, RunningExample, SystemSpec};
