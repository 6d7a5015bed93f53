//! Small shared utilities: seed derivation, content hashing, file helpers.

pub mod hash;
pub mod io;
pub mod rng;
