//! Phase assignment on the circle and the geometry around it.
//!
//! Two assignment schemes are provided. TPA spaces agents uniformly in topological
//! order; WPA spaces them proportionally to expected latency. Both place the first
//! agent at 0 and keep phases strictly inside [0, 2 pi).
//!
//! All angles are radians in double precision. Comparisons elsewhere in the crate
//! go through explicit absolute tolerances (1e-9) to avoid boundary flapping at
//! window edges.

use crate::graph::DependencyGraph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;

/// Phase assignment scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    Tpa,
    Wpa,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Tpa => "TPA",
            Scheme::Wpa => "WPA",
        })
    }
}

/// Assignment of one phase per agent, tagged with the scheme that produced it.
///
/// Serializes as `{"scheme":"WPA","phases":{"A1":0.0,...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub scheme: Scheme,
    pub phases: BTreeMap<String, f64>,
}

impl PhaseMap {
    /// Phase of an agent, if assigned.
    pub fn phase_of(&self, id: &str) -> Option<f64> {
        self.phases.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhaseError {
    #[error("angle inputs must be finite")]
    NonFiniteInput,
    #[error("edge {0:?} -> {1:?} is not in the graph")]
    EdgeNotInGraph(String, String),
    #[error("phase map does not cover agent {0:?}")]
    MissingPhase(String),
    #[error("omega must be positive and finite")]
    NonPositiveOmega,
}

/// Distance between two angles on the circle, in [0, pi].
///
/// Symmetric and invariant under rotating both arguments; any finite real input
/// is accepted and reduced mod 2 pi.
pub fn circular_distance(a: f64, b: f64) -> Result<f64, PhaseError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(PhaseError::NonFiniteInput);
    }
    Ok(circ_dist(a, b))
}

pub(crate) fn circ_dist(a: f64, b: f64) -> f64 {
    let m = (a - b).rem_euclid(TAU);
    m.min(TAU - m)
}

/// Angular gap from one phase to another along the sweep direction
/// (counterclockwise, increasing phi), in [0, 2 pi).
///
/// Unlike [`circular_distance`] this is directed: swapping the arguments gives
/// the complementary gap. Callers pass finite radians.
pub fn forward_gap(from: f64, to: f64) -> f64 {
    (to - from).rem_euclid(TAU)
}

/// Topological phase assignment: the k-th agent in topological order (1-based)
/// gets 2 pi (k-1)/n, so neighbors are spaced exactly 2 pi / n apart.
pub fn assign_tpa(g: &DependencyGraph) -> PhaseMap {
    let n = g.n() as f64;
    let mut phases = BTreeMap::new();
    for (k, &idx) in g.topo_indices().iter().enumerate() {
        phases.insert(g.agent(idx).id.clone(), TAU * k as f64 / n);
    }
    PhaseMap { scheme: Scheme::Tpa, phases }
}

/// Weighted phase assignment: each agent's phase is 2 pi times the latency mass
/// strictly before it in topological order, divided by the total latency. The
/// first agent gets 0; gaps are proportional to predecessor latency.
pub fn assign_wpa(g: &DependencyGraph) -> PhaseMap {
    let total = g.total_latency();
    // largest double below 2 pi, guards against rounding up on degenerate latency ratios
    let below_tau = f64::from_bits(TAU.to_bits() - 1);
    let mut phases = BTreeMap::new();
    let mut prefix = 0.0;
    for &idx in g.topo_indices() {
        let theta = (TAU * (prefix / total)).min(below_tau);
        phases.insert(g.agent(idx).id.clone(), theta);
        prefix += g.agent(idx).latency_s;
    }
    PhaseMap { scheme: Scheme::Wpa, phases }
}

/// Largest sweep velocity that preserves dependency order, in rad/s.
///
/// TPA admits 2 pi / (n T_max); WPA admits 2 pi / (sum of latencies), which is
/// never smaller and coincides exactly when all latencies are equal.
pub fn omega_max(g: &DependencyGraph, scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Tpa => TAU / (g.n() as f64 * g.t_max()),
        Scheme::Wpa => TAU / g.total_latency(),
    }
}

/// Time margin for one dependency edge at sweep velocity `omega`: the forward
/// angular gap divided by omega, minus the predecessor's expected latency.
/// Negative slack means the sweep reaches the successor too early.
pub fn phase_slack(
    g: &DependencyGraph,
    phases: &PhaseMap,
    omega: f64,
    edge: (&str, &str),
) -> Result<f64, PhaseError> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(PhaseError::NonPositiveOmega);
    }
    let (from, to) = edge;
    if !g.contains_edge(from, to) {
        return Err(PhaseError::EdgeNotInGraph(from.to_owned(), to.to_owned()));
    }
    let theta_i = phases.phase_of(from).ok_or_else(|| PhaseError::MissingPhase(from.to_owned()))?;
    let theta_j = phases.phase_of(to).ok_or_else(|| PhaseError::MissingPhase(to.to_owned()))?;
    if !theta_i.is_finite() || !theta_j.is_finite() {
        return Err(PhaseError::NonFiniteInput);
    }
    let latency = g.agent(g.index_of(from).expect("edge endpoint exists")).latency_s;
    Ok(forward_gap(theta_i, theta_j) / omega - latency)
}
