//! Sequential vs. parallel timings for the hot kernels.
//!
//! Placeholder populated once the kernels exist; see the bench section of
//! the README for how to run it.

fn main() {}
