//! Goal-specific ellipsoidal abstractions of smooth nonlinear systems.
//!
//! The crate is `no_std` (with `alloc`) and contains the whole algorithmic
//! pipeline: set geometry, polynomial dynamics with certified
//! linearization-error bounds, a log-det barrier solver for the local
//! LMI programs, the backward RRT*-style abstraction builder and the
//! concretized runtime controller. File formats and the command line live
//! in the companion `ellabs` crate.
#![no_std]

extern crate alloc;

pub mod abstraction;
pub mod conic;
pub mod dynamics;
pub mod geometry;
pub mod runtime;
pub mod synthesis;
pub mod tolerance;

pub use tolerance::Tolerances;
