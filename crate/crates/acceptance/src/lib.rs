//! Reference implementations used to check the library, and the
//! scaled-down training experiment.

pub mod desk;
pub mod oracles;
pub mod toy;

/// Prints the one-line verdict for an acceptance criterion.
pub fn verdict(criterion: u32, title: &str, pass: bool, detail: &str) {
    println!("criterion {criterion} [{title}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}
