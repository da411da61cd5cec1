//! Covariance-based controller synthesis for discrete-time linear systems
//! with additive and multiplicative white noise.
//!
//! The optimal state-feedback problem is posed as a semidefinite program over
//! the joint state/input covariance, solved with the first-order solver in
//! [`sdp`], and turned back into an affine policy by [`synthesis`]. The
//! [`simulate`] module checks the result by Monte Carlo under any of the
//! supported unit-variance noise families.
//!
//! ```
//! use covsynth::{example, sdp::SolverOptions, synthesis};
//!
//! let p = example::unconstrained_problem();
//! let r = synthesis::synthesize_stationary(&p.model, &p.constraints, &SolverOptions::default()).unwrap();
//! assert!(r.is_optimal());
//! assert!((r.rms_cost() - example::UNCONSTRAINED_COST).abs() < 1e-3 * example::UNCONSTRAINED_COST);
//! ```

pub mod example;
pub mod model;
pub mod numerics;
pub mod sdp;
pub mod simulate;
pub mod synthesis;
pub mod tolerances;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/problem-files.md")]
    struct ProblemFiles;
    #[doc = include_str!("../../../book/src/synthesis.md")]
    struct Synthesis;
    #[doc = include_str!("../../../book/src/stabilizability.md")]
    struct Stabilizability;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/accuracy.md")]
    struct Accuracy;
}
