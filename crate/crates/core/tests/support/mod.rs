//! Finite-difference checks and brute-force reference implementations shared
//! by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
