//! Record types produced by a simulation run.

use crate::engine::SimConfig;
use crate::phase::Scheme;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sweep state at one time step: which agents were inside the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub cycle: usize,
    pub t: f64,
    pub phi: f64,
    pub active_ids: Vec<String>,
}

/// One agent activation. `start_t` is the time the sweep crossed the agent's
/// phase; `tokens_in` is the context it read and `tokens_out` its response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub agent_id: String,
    pub cycle: usize,
    pub start_t: f64,
    pub duration_s: f64,
    pub tokens_in: f64,
    pub tokens_out: f64,
}

/// Delivery of a compressed context summary to an idle agent at a cycle boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub agent_id: String,
    pub cycle: usize,
    pub t: f64,
    pub phi: f64,
    pub tokens: f64,
}

/// A dependency edge whose producer finished after its consumer started.
/// `t` is the consumer's start time; `lateness_s` is how long the consumer
/// would have had to wait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub from: String,
    pub to: String,
    pub cycle: usize,
    pub t: f64,
    pub lateness_s: f64,
}

/// Token charges attributed to one cycle, all priced at the context length the
/// cycle started with. `analytic` follows the closed-form cycle cost, `event`
/// sums the individual reads, responses, and refresh deliveries, and `full`
/// is the always-on baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTokens {
    pub cycle: usize,
    pub context_start: f64,
    pub responses: f64,
    pub analytic: f64,
    pub event: f64,
    pub full: f64,
}

/// Run totals of the three per-cycle columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TokenTotals {
    pub analytic: f64,
    pub event: f64,
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TokenLedger {
    pub per_cycle: Vec<CycleTokens>,
    pub totals: TokenTotals,
}

/// Cached summary an agent holds, and the cycle it was refreshed in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub tokens: f64,
    pub refreshed_at_cycle: usize,
}

/// Shared context at the end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub length_tokens: f64,
    pub divergence: f64,
    pub summary_cache: BTreeMap<String, SummaryEntry>,
}

/// Complete, serializable record of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub scheme: Scheme,
    pub omega_max: f64,
    pub config: SimConfig,
    pub agent_ids: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub invocations: Vec<Invocation>,
    pub refreshes: Vec<RefreshEvent>,
    pub violations: Vec<Violation>,
    pub token_ledger: TokenLedger,
    pub divergence_curve: Vec<f64>,
    pub omega_curve: Vec<f64>,
    pub cycles_completed: usize,
    pub converged_at: Option<usize>,
    pub final_context: ContextState,
}

/// Result of checking a divergence curve against its geometric envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub pass: bool,
    pub factor: f64,
    pub max_excess_ratio: f64,
    pub checked_cycles: usize,
}
