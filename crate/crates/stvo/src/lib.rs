//! Spatio-temporal visual odometry as a verifiable numerical engine.
//!
//! The crate couples a multi-frame optical-flow refinement loop (temporal
//! propagation, depth-driven spatial activation, a convolutional GRU) with a
//! differentiable bundle adjustment backend that jointly estimates SE(3)
//! poses and per-pixel inverse depths. A synthetic scene renderer provides
//! exact ground truth so every geometric code path can be checked against an
//! independent oracle, and trajectory evaluation follows the standard
//! scale-aligned ATE protocol.
//!
//! See the `book/` guide for a chapter-by-chapter walkthrough; its code
//! snippets run as doctests.

pub mod config;
pub mod dba;
pub mod diff;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod lie;
pub mod matching;
pub mod pipeline;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod update;

pub use error::{Error, Result};

// Run every code block in the book as a doctest, so the guide can never
// drift from the API. (mdbook's own `test` command cannot resolve external
// crates; this is the usual workaround.)
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/lie-geometry.md")]
    mod lie_geometry {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/frame-graph.md")]
    mod frame_graph {}
    #[doc = include_str!("../../../book/src/correlation-matching.md")]
    mod correlation_matching {}
    #[doc = include_str!("../../../book/src/temporal-propagation.md")]
    mod temporal_propagation {}
    #[doc = include_str!("../../../book/src/spatial-activation.md")]
    mod spatial_activation {}
    #[doc = include_str!("../../../book/src/update-operator.md")]
    mod update_operator {}
    #[doc = include_str!("../../../book/src/bundle-adjustment.md")]
    mod bundle_adjustment {}
    #[doc = include_str!("../../../book/src/synthetic-scenes.md")]
    mod synthetic_scenes {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
