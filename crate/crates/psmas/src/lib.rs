//! Phase-scheduled multi-agent coordination.
//!
//! Agents sit at fixed phases on the circle and a sweep signal `phi(t) = (omega * t) mod 2pi`
//! activates each one as it passes. Phases come from a task dependency DAG, so the sweep
//! replays the DAG's order once per cycle while idle agents receive only compressed context.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`]: dependency DAGs with latency and token annotations, plus benchmark shapes.
//! * [`phase`]: the circular metric, TPA/WPA phase assignment, velocity bounds, slack.
//! * [`cost`]: closed-form token-cost and quality model, tail bounds, regime classifier.
//! * [`engine`]: the sweep simulator with mock agents, accounting, and a PI controller.
//! * [`analysis`]: batch harnesses (Monte Carlo, parameter scans, failure probes).

pub mod analysis;
pub mod cost;
pub mod engine;
pub mod graph;
mod normal;
pub mod phase;
