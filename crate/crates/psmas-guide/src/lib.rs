//! The guide book, compiled.
//!
//! Each module below embeds one chapter from `book/src` as its documentation,
//! so rustdoc runs every code block in the book as a doctest. If a chapter
//! drifts from the library's actual behavior, `cargo test -p psmas-guide`
//! fails. The rendered book is built separately with `mdbook build book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/dependency-graphs.md")]
pub mod dependency_graphs {}

#[doc = include_str!("../../../book/src/phase-assignment.md")]
pub mod phase_assignment {}

#[doc = include_str!("../../../book/src/cost-model.md")]
pub mod cost_model {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/analysis-harness.md")]
pub mod analysis_harness {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
