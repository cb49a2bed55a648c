//! Discrete-sweep simulator.
//!
//! The global phase advances in fixed increments of the sweep angle. An agent
//! is invoked when the sweep enters its activation window, once per cycle; the
//! invocation is stamped with the analytic window-center crossing time, so the
//! schedule a trace reports is independent of the step size used to find it.
//! A closure pass at each cycle boundary backstops floating-point edge cases
//! where a window center sits exactly on a step boundary, which keeps the
//! once-per-cycle invariant exact rather than approximate.
//!
//! Cycles are delimited by the sweep wrapping through the phase of the first
//! agent in topological order. All token charges of a cycle are priced at the
//! context length the cycle started with; responses land in the shared context
//! at the boundary. That makes the context-growth path independent of both the
//! compression setting and the latency noise, which the accounting tests rely
//! on.

mod controller;
mod trace;

pub use controller::{pi_controller_step, PiState, OMEGA_FLOOR};
pub use trace::{
    ContextState, ConvergenceCheck, CycleTokens, Invocation, RefreshEvent, SimTrace, StepRecord,
    SummaryEntry, TokenLedger, TokenTotals, Violation,
};

use crate::cost::{
    activation_fraction, classify_regime, convergence_factor, cost_full, cost_psmas, optimal_epsilon,
    quality_bound, reduction_ratio, CostError, CostParams, CostReport,
};
use crate::graph::DependencyGraph;
use crate::phase::{forward_gap, PhaseError, PhaseMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;

/// What an idle agent receives while the sweep is elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum IdleDelivery {
    /// Compressed context summaries, `alpha` tokens per context token.
    Compressed { alpha: f64 },
    /// Nothing; idle agents go stale until their next activation.
    NoSummaries,
}

/// Which per-cycle cost column a report treats as the measured one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accounting {
    /// Closed-form cycle cost evaluated on the run's context path.
    Analytic,
    /// Sum of the individual reads, responses, and refresh deliveries.
    Event,
}

/// Simulation parameters. `Default` and the serde defaults agree, so partial
/// JSON configs fill in the documented values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Activation window width, radians, in (0, 2 pi].
    pub epsilon: f64,
    /// Initial sweep velocity, rad/s.
    pub omega: f64,
    /// Detection step, seconds. 0 picks a step that resolves the window.
    pub dt: f64,
    pub idle_delivery: IdleDelivery,
    /// Latency noise spread as a fraction of the largest agent latency.
    pub sigma_ratio: f64,
    pub max_cycles: usize,
    pub seed: u64,
    pub controller_enabled: bool,
    pub kp: f64,
    pub ki: f64,
    /// Stop once divergence falls to this fraction of its start; 0 never stops.
    pub convergence_threshold: f64,
    pub accounting: Accounting,
    pub initial_context_tokens: f64,
    /// Record per-step sweep state. Off for large sweeps; events are always kept.
    pub record_steps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            epsilon: 0.9,
            omega: 1.0,
            dt: 0.0,
            idle_delivery: IdleDelivery::Compressed { alpha: 0.12 },
            sigma_ratio: 0.0,
            max_cycles: 10,
            seed: 0,
            controller_enabled: false,
            kp: 0.2,
            ki: 0.05,
            convergence_threshold: 0.01,
            accounting: Accounting::Analytic,
            initial_context_tokens: 1000.0,
            record_steps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("trace does not support {mode:?} accounting: {detail}")]
    ModeMismatch { mode: Accounting, detail: String },
}

fn require(cond: bool, msg: &'static str) -> Result<(), EngineError> {
    if cond {
        Ok(())
    } else {
        Err(EngineError::InvalidConfig(msg))
    }
}

fn validate(g: &DependencyGraph, phases: &PhaseMap, config: &SimConfig) -> Result<(), EngineError> {
    require(g.n() > 0, "graph must contain at least one agent")?;
    let e = config.epsilon;
    require(e.is_finite() && e > 0.0 && e <= TAU, "epsilon must lie in (0, 2*pi]")?;
    require(config.omega.is_finite() && config.omega > 0.0, "omega must be positive and finite")?;
    require(config.dt.is_finite() && config.dt >= 0.0, "dt must be finite and nonnegative")?;
    require(
        config.sigma_ratio.is_finite() && config.sigma_ratio >= 0.0,
        "sigma_ratio must be finite and nonnegative",
    )?;
    if let IdleDelivery::Compressed { alpha } = config.idle_delivery {
        require(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
    }
    require(config.kp.is_finite() && config.ki.is_finite(), "controller gains must be finite")?;
    require(
        config.convergence_threshold.is_finite() && config.convergence_threshold >= 0.0,
        "convergence_threshold must be finite and nonnegative",
    )?;
    require(
        config.initial_context_tokens.is_finite() && config.initial_context_tokens >= 0.0,
        "initial_context_tokens must be finite and nonnegative",
    )?;
    for a in g.agents() {
        match phases.phase_of(&a.id) {
            None => return Err(PhaseError::MissingPhase(a.id.clone()).into()),
            Some(th) if !th.is_finite() => {
                return Err(EngineError::InvalidConfig("phases must be finite"))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Run the sweep over `g` with the given phase assignment.
///
/// Each cycle every agent is invoked exactly once, at the moment the sweep
/// crosses its phase. Invocation durations are the declared latencies plus
/// optional Gaussian noise (spread `sigma_ratio` times the largest latency,
/// truncated just above zero). A window that straddles the cycle boundary is
/// credited to the cycle its center lies in, so a velocity change by the
/// controller never splits a window.
///
/// Ordering violations are derived from the recorded schedule afterwards: an
/// edge is violated in a cycle when the producer's finish time exceeds the
/// consumer's start time by more than 1e-9 s.
pub fn run_simulation(
    g: &DependencyGraph,
    phases: &PhaseMap,
    config: &SimConfig,
) -> Result<SimTrace, EngineError> {
    validate(g, phases, config)?;
    let n = g.n();
    let nf = n as f64;
    let eps = config.epsilon;
    let agents = g.agents();

    let theta_first = phases.phase_of(&agents[g.topo_indices()[0]].id).unwrap();
    let theta_rel: Vec<f64> = agents
        .iter()
        .map(|a| (phases.phase_of(&a.id).unwrap() - theta_first).rem_euclid(TAU))
        .collect();

    let r_bar = g.mean_response_tokens();
    let t_max = g.t_max();
    let sigma = config.sigma_ratio * t_max;
    let noise = if sigma > 0.0 { Some(Normal::new(0.0, sigma).unwrap()) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (alpha, factor) = match config.idle_delivery {
        IdleDelivery::Compressed { alpha } => (Some(alpha), convergence_factor(eps, alpha)?),
        IdleDelivery::NoSummaries => (None, 1.0 - eps / TAU),
    };
    let deliver_refreshes = alpha.is_some() && (TAU - eps) > 1e-9;

    let mut l = config.initial_context_tokens;
    let mut d = 1.0;
    let mut omega = config.omega;
    let mut integral = 0.0;
    let mut t_cycle_start = 0.0;
    let mut next_pass = vec![0usize; n];

    let mut steps = Vec::new();
    let mut invocations: Vec<Invocation> = Vec::new();
    let mut refreshes = Vec::new();
    let mut summary_cache: BTreeMap<String, SummaryEntry> = BTreeMap::new();
    let mut per_cycle = Vec::new();
    let mut totals = TokenTotals::default();
    let mut divergence_curve = vec![1.0];
    let mut omega_curve = Vec::new();
    let mut times: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut cycles_completed = 0;
    let mut converged_at = None;

    for c in 0..config.max_cycles {
        let omega_c = omega;
        let dt_c = if config.dt > 0.0 {
            config.dt.min(eps / (2.0 * omega_c))
        } else {
            eps.min(TAU / nf) / (4.0 * omega_c)
        };
        let dpsi = omega_c * dt_c;

        // detection order doubles as the noise draw order
        let mut order: Vec<usize> = Vec::with_capacity(n);
        let mut s = 0u64;
        loop {
            let psi = s as f64 * dpsi;
            if psi >= TAU {
                break;
            }
            let global = TAU * c as f64 + psi;
            let mut entered: Vec<usize> = Vec::new();
            let mut active_ids: Vec<String> = Vec::new();
            for (i, &th) in theta_rel.iter().enumerate() {
                let pass = ((global - th) / TAU).round();
                let in_window = (global - (th + TAU * pass)).abs() < 0.5 * eps;
                if in_window {
                    if config.record_steps {
                        active_ids.push(agents[i].id.clone());
                    }
                    if pass >= 0.0 {
                        let k = pass as usize;
                        if k == next_pass[i] && k <= c {
                            entered.push(i);
                        }
                    }
                }
            }
            entered.sort_by(|&a, &b| {
                forward_gap(psi, theta_rel[a])
                    .total_cmp(&forward_gap(psi, theta_rel[b]))
                    .then_with(|| agents[a].id.cmp(&agents[b].id))
            });
            for &i in &entered {
                next_pass[i] = c + 1;
            }
            order.extend(entered);
            if config.record_steps {
                steps.push(StepRecord {
                    cycle: c,
                    t: t_cycle_start + psi / omega_c,
                    phi: (theta_first + psi).rem_euclid(TAU),
                    active_ids,
                });
            }
            s += 1;
        }

        // boundary closure: anything the stepping missed still runs this cycle
        let mut strays: Vec<usize> = (0..n).filter(|&i| next_pass[i] == c).collect();
        strays.sort_by(|&a, &b| {
            theta_rel[a].total_cmp(&theta_rel[b]).then_with(|| agents[a].id.cmp(&agents[b].id))
        });
        for &i in &strays {
            next_pass[i] = c + 1;
        }
        order.extend(strays);

        let first_idx = invocations.len();
        let mut times_c = vec![(f64::NAN, f64::NAN); n];
        let mut duration_sum = 0.0;
        let mut response_sum: u64 = 0;
        for &i in &order {
            let start_t = t_cycle_start + theta_rel[i] / omega_c;
            let latency = agents[i].latency_s;
            let xi = match &noise {
                Some(dist) => dist.sample(&mut rng).max(-0.99 * latency),
                None => 0.0,
            };
            let duration = latency + xi;
            times_c[i] = (start_t, duration);
            duration_sum += duration;
            response_sum += agents[i].response_tokens;
            invocations.push(Invocation {
                agent_id: agents[i].id.clone(),
                cycle: c,
                start_t,
                duration_s: duration,
                tokens_in: l,
                tokens_out: agents[i].response_tokens as f64,
            });
            if let Some(a) = alpha {
                summary_cache.insert(
                    agents[i].id.clone(),
                    SummaryEntry { tokens: a * l, refreshed_at_cycle: c },
                );
            }
        }
        invocations[first_idx..]
            .sort_by(|a, b| a.start_t.total_cmp(&b.start_t).then_with(|| a.agent_id.cmp(&b.agent_id)));
        times.push(times_c);

        let t_cycle_end = t_cycle_start + TAU / omega_c;
        if deliver_refreshes {
            let a = alpha.unwrap();
            for agent in agents {
                refreshes.push(RefreshEvent {
                    agent_id: agent.id.clone(),
                    cycle: c,
                    t: t_cycle_end,
                    phi: theta_first,
                    tokens: a * l,
                });
            }
        }

        let responses = response_sum as f64;
        let analytic = match alpha {
            Some(a) => cost_psmas(&CostParams::new(n, l, r_bar, a, eps)?),
            None => {
                let f = eps / TAU;
                nf * l * f + f * nf * r_bar
            }
        };
        let event = match alpha {
            Some(a) if deliver_refreshes => nf * l + responses + nf * (a * l),
            _ => nf * l + responses,
        };
        let full = cost_full(n, l, r_bar);
        per_cycle.push(CycleTokens { cycle: c, context_start: l, responses, analytic, event, full });
        totals.analytic += analytic;
        totals.event += event;
        totals.full += full;

        l += responses;
        d *= factor;
        divergence_curve.push(d);
        omega_curve.push(omega_c);

        if config.controller_enabled {
            let state = PiState { omega, integral, kp: config.kp, ki: config.ki };
            let next = pi_controller_step(&state, duration_sum / nf, t_max);
            omega = next.omega;
            integral = next.integral;
        }

        t_cycle_start = t_cycle_end;
        cycles_completed = c + 1;
        if config.convergence_threshold > 0.0 && d <= config.convergence_threshold {
            converged_at = Some(cycles_completed);
            break;
        }
    }

    let mut violations = Vec::new();
    for (c, times_c) in times.iter().enumerate() {
        for &(i, j) in g.edge_indices() {
            let (start_i, dur_i) = times_c[i];
            let start_j = times_c[j].0;
            let lateness = (start_i + dur_i) - start_j;
            if lateness > 1e-9 {
                violations.push(Violation {
                    from: agents[i].id.clone(),
                    to: agents[j].id.clone(),
                    cycle: c,
                    t: start_j,
                    lateness_s: lateness,
                });
            }
        }
    }

    Ok(SimTrace {
        scheme: phases.scheme,
        omega_max: crate::phase::omega_max(g, phases.scheme),
        config: config.clone(),
        agent_ids: agents.iter().map(|a| a.id.clone()).collect(),
        steps,
        invocations,
        refreshes,
        violations,
        token_ledger: TokenLedger { per_cycle, totals },
        divergence_curve,
        omega_curve,
        cycles_completed,
        converged_at,
        final_context: ContextState { length_tokens: l, divergence: d, summary_cache },
    })
}

/// Aggregate a trace's ledger into a [`CostReport`].
///
/// The measured totals come from the run; `params` supplies the closed-form
/// side (reduction ratio, activation fraction, window bound, quality bound)
/// and should mirror the run's configuration. The gain split goes through an
/// uncompressed intermediate recomputed from the ledger, so the scheduling
/// share depends only on the context path, not on the compression setting.
pub fn token_totals(
    trace: &SimTrace,
    mode: Accounting,
    params: &CostParams,
) -> Result<CostReport, EngineError> {
    let n = trace.agent_ids.len();
    let cycles = trace.cycles_completed;
    let mismatch = |detail: String| EngineError::ModeMismatch { mode, detail };
    match mode {
        Accounting::Event => {
            if trace.invocations.len() != n * cycles {
                return Err(mismatch(format!(
                    "expected {} invocations for {} cycles, trace has {}",
                    n * cycles,
                    cycles,
                    trace.invocations.len()
                )));
            }
            let compressed = matches!(trace.config.idle_delivery, IdleDelivery::Compressed { .. });
            if compressed
                && (TAU - trace.config.epsilon) > 1e-9
                && trace.refreshes.len() != n * cycles
            {
                return Err(mismatch(format!(
                    "expected {} refresh deliveries, trace has {}",
                    n * cycles,
                    trace.refreshes.len()
                )));
            }
        }
        Accounting::Analytic => {
            if trace.token_ledger.per_cycle.len() != cycles {
                return Err(mismatch(format!(
                    "ledger covers {} cycles, run completed {}",
                    trace.token_ledger.per_cycle.len(),
                    cycles
                )));
            }
        }
    }

    let mut full = 0.0;
    let mut measured = 0.0;
    let mut uncompressed = 0.0;
    for row in &trace.token_ledger.per_cycle {
        full += row.full;
        measured += match mode {
            Accounting::Analytic => row.analytic,
            Accounting::Event => row.event,
        };
        let r_bar = row.responses / n as f64;
        uncompressed +=
            cost_psmas(&CostParams::new(n, row.context_start, r_bar, 1.0, trace.config.epsilon)?);
    }
    let (scheduling_gain, compression_gain) = if full == 0.0 {
        (0.0, 0.0)
    } else {
        ((full - uncompressed) / full, (uncompressed - measured) / full)
    };

    Ok(CostReport {
        rho: reduction_ratio(params.epsilon(), params.alpha())?,
        f: activation_fraction(params.epsilon())?,
        cost_full: full,
        cost_psmas: measured,
        scheduling_gain,
        compression_gain,
        epsilon_star: optimal_epsilon(params.q_min(), params.delta_q(), params.alpha(), params.l_bar())
            .ok(),
        quality_bound: quality_bound(params.c_q(), params.epsilon(), params.alpha())?,
        regime: classify_regime(params.epsilon(), trace.config.omega / trace.omega_max).ok(),
    })
}

/// Check a run's divergence curve against the geometric envelope
/// `factor^k (1 + 1e-9)` for the given window and compression setting.
pub fn verify_convergence(
    trace: &SimTrace,
    epsilon: f64,
    alpha: f64,
) -> Result<ConvergenceCheck, EngineError> {
    let factor = convergence_factor(epsilon, alpha)?;
    let mut pass = true;
    let mut max_excess_ratio: f64 = 0.0;
    for (k, &dk) in trace.divergence_curve.iter().enumerate() {
        let bound = factor.powi(k as i32);
        if bound == 0.0 {
            if dk > 0.0 {
                pass = false;
                max_excess_ratio = f64::INFINITY;
            }
            continue;
        }
        max_excess_ratio = max_excess_ratio.max(dk / bound);
        if dk > bound * (1.0 + 1e-9) {
            pass = false;
        }
    }
    Ok(ConvergenceCheck {
        pass,
        factor,
        max_excess_ratio,
        checked_cycles: trace.divergence_curve.len().saturating_sub(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_benchmark_graph, GraphShape};
    use crate::phase::{assign_tpa, assign_wpa, omega_max, Scheme};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn chain(n: usize, latency: f64, resp: u64) -> DependencyGraph {
        generate_benchmark_graph(GraphShape::LinearChain, n, latency, 0)
            .unwrap()
            .with_response_tokens(resp)
    }

    fn cfg(epsilon: f64, omega: f64, cycles: usize) -> SimConfig {
        SimConfig {
            epsilon,
            omega,
            max_cycles: cycles,
            convergence_threshold: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn single_agent_full_window_matches_baseline() {
        let g = chain(1, 1.0, 300);
        let phases = assign_tpa(&g);
        let mut config = cfg(TAU, TAU, 3);
        config.convergence_threshold = 0.01;
        let trace = run_simulation(&g, &phases, &config).unwrap();
        assert_eq!(trace.invocations.len(), 3);
        assert!(trace.violations.is_empty());
        assert!(trace.refreshes.is_empty());
        assert_eq!(trace.converged_at, Some(3));
        for (c, row) in trace.token_ledger.per_cycle.iter().enumerate() {
            assert_eq!(row.analytic, row.full);
            assert_eq!(row.event, row.full);
            assert_eq!(row.context_start, 1000.0 + 300.0 * c as f64);
        }
        for (c, inv) in trace.invocations.iter().enumerate() {
            assert_abs_diff_eq!(inv.start_t, c as f64, epsilon = 1e-12);
            assert_eq!(inv.duration_s, 1.0);
        }
        assert_eq!(trace.final_context.length_tokens, 1900.0);
    }

    #[test]
    fn chain_at_omega_max_is_violation_free_and_on_schedule() {
        let g = chain(4, 1.0, 100);
        let phases = assign_tpa(&g);
        let w = omega_max(&g, Scheme::Tpa);
        let trace = run_simulation(&g, &phases, &cfg(0.9, w, 10)).unwrap();
        assert!(trace.violations.is_empty());
        assert_eq!(trace.invocations.len(), 40);
        assert_eq!(trace.cycles_completed, 10);
        assert!(!trace.steps.is_empty());
        for inv in &trace.invocations {
            let th = phases.phase_of(&inv.agent_id).unwrap();
            let expected = (th + TAU * inv.cycle as f64) / w;
            assert_abs_diff_eq!(inv.start_t, expected, epsilon = 1e-9);
        }
        // exactly one invocation per agent per cycle
        for c in 0..10 {
            let mut ids: Vec<&str> = trace
                .invocations
                .iter()
                .filter(|i| i.cycle == c)
                .map(|i| i.agent_id.as_str())
                .collect();
            ids.sort_unstable();
            assert_eq!(ids, ["A1", "A2", "A3", "A4"]);
        }
    }

    #[test]
    fn double_speed_chain_violates_every_cycle() {
        let g = chain(2, 1.0, 100);
        let phases = assign_tpa(&g);
        let w = 2.0 * omega_max(&g, Scheme::Tpa);
        let trace = run_simulation(&g, &phases, &cfg(0.9, w, 5)).unwrap();
        assert_eq!(trace.violations.len(), 5);
        for (c, v) in trace.violations.iter().enumerate() {
            assert_eq!((v.from.as_str(), v.to.as_str(), v.cycle), ("A1", "A2", c));
            assert_abs_diff_eq!(v.lateness_s, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn ledger_matches_closed_form_costs() {
        let g = chain(6, 1.0, 300);
        let phases = assign_tpa(&g);
        let trace =
            run_simulation(&g, &phases, &cfg(PI, omega_max(&g, Scheme::Tpa), 2)).unwrap();
        let rows = &trace.token_ledger.per_cycle;
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].context_start, 1000.0);
        assert_eq!(rows[0].analytic, 4260.0);
        assert_eq!(rows[0].full, 7800.0);
        assert_eq!(rows[0].event, 6.0 * 1000.0 + 1800.0 + 720.0);
        assert_eq!(rows[1].context_start, 2800.0);
        let expected = cost_psmas(&CostParams::new(6, 2800.0, 300.0, 0.12, PI).unwrap());
        assert_eq!(rows[1].analytic, expected);
        assert_eq!(trace.token_ledger.totals.analytic, rows[0].analytic + rows[1].analytic);
        assert_eq!(trace.refreshes.len(), 12);
        for r in &trace.refreshes {
            let l = rows[r.cycle].context_start;
            assert_eq!(r.tokens, 0.12 * l);
            assert_eq!(r.phi, 0.0);
        }
    }

    #[test]
    fn no_summaries_event_has_no_refresh_charges() {
        let g = chain(4, 1.0, 100);
        let phases = assign_tpa(&g);
        let mut config = cfg(PI, omega_max(&g, Scheme::Tpa), 3);
        config.idle_delivery = IdleDelivery::NoSummaries;
        let trace = run_simulation(&g, &phases, &config).unwrap();
        assert!(trace.refreshes.is_empty());
        assert!(trace.final_context.summary_cache.is_empty());
        for row in &trace.token_ledger.per_cycle {
            assert_eq!(row.event, 4.0 * row.context_start + row.responses);
            assert_eq!(row.analytic, 4.0 * row.context_start * 0.5 + 0.5 * 4.0 * 100.0);
        }
        assert_eq!(trace.divergence_curve, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn token_totals_reports_run_measurements() {
        let g = chain(6, 1.0, 300);
        let phases = assign_tpa(&g);
        let trace =
            run_simulation(&g, &phases, &cfg(PI, omega_max(&g, Scheme::Tpa), 2)).unwrap();
        let params = CostParams::new(6, 1000.0, 300.0, 0.12, PI).unwrap();
        let report = token_totals(&trace, Accounting::Analytic, &params).unwrap();
        let rows = &trace.token_ledger.per_cycle;
        assert_eq!(report.cost_full, rows[0].full + rows[1].full);
        assert_eq!(report.cost_psmas, rows[0].analytic + rows[1].analytic);
        let total_reduction = 1.0 - report.cost_psmas / report.cost_full;
        assert_abs_diff_eq!(
            report.scheduling_gain + report.compression_gain,
            total_reduction,
            epsilon = 1e-12
        );
        assert_eq!(report.rho, reduction_ratio(PI, 0.12).unwrap());
        assert_eq!(report.f, 0.5);
        // pi exceeds the classifier's domain, and the default quality symbols
        // put the optimal window past a full turn
        assert!(report.regime.is_none());
        assert!(report.epsilon_star.unwrap() > TAU);
        let event = token_totals(&trace, Accounting::Event, &params).unwrap();
        assert_eq!(event.cost_psmas, rows[0].event + rows[1].event);
        assert_eq!(event.cost_full, report.cost_full);
    }

    #[test]
    fn token_totals_full_window_costs_match_baseline() {
        let g = chain(3, 1.0, 200);
        let phases = assign_tpa(&g);
        let trace =
            run_simulation(&g, &phases, &cfg(TAU, omega_max(&g, Scheme::Tpa), 4)).unwrap();
        let params = CostParams::new(3, 1000.0, 200.0, 0.12, TAU).unwrap();
        let report = token_totals(&trace, Accounting::Analytic, &params).unwrap();
        assert_eq!(report.cost_psmas, report.cost_full);
        assert_eq!(report.rho, 0.0);
    }

    #[test]
    fn token_totals_rejects_inconsistent_traces() {
        let g = chain(3, 1.0, 200);
        let phases = assign_tpa(&g);
        let trace =
            run_simulation(&g, &phases, &cfg(PI, omega_max(&g, Scheme::Tpa), 2)).unwrap();
        let params = CostParams::new(3, 1000.0, 200.0, 0.12, PI).unwrap();

        let mut broken = trace.clone();
        broken.invocations.pop();
        match token_totals(&broken, Accounting::Event, &params) {
            Err(EngineError::ModeMismatch { mode: Accounting::Event, .. }) => {}
            other => panic!("expected event mismatch, got {other:?}"),
        }
        assert!(token_totals(&broken, Accounting::Analytic, &params).is_ok());

        let mut broken = trace.clone();
        broken.refreshes.clear();
        assert!(token_totals(&broken, Accounting::Event, &params).is_err());

        let mut broken = trace;
        broken.token_ledger.per_cycle.pop();
        match token_totals(&broken, Accounting::Analytic, &params) {
            Err(EngineError::ModeMismatch { mode: Accounting::Analytic, .. }) => {}
            other => panic!("expected analytic mismatch, got {other:?}"),
        }
    }

    #[test]
    fn scheduling_gain_is_alpha_invariant_across_runs() {
        let g = chain(5, 1.0, 250);
        let phases = assign_tpa(&g);
        let w = omega_max(&g, Scheme::Tpa);
        let mut bits = None;
        for alpha in [0.12, 0.3, 0.9] {
            let mut config = cfg(1.2, w, 6);
            config.idle_delivery = IdleDelivery::Compressed { alpha };
            let trace = run_simulation(&g, &phases, &config).unwrap();
            let params = CostParams::new(5, 1000.0, 250.0, alpha, 1.2).unwrap();
            let report = token_totals(&trace, Accounting::Analytic, &params).unwrap();
            match bits {
                None => bits = Some((report.scheduling_gain.to_bits(), report.cost_full.to_bits())),
                Some(b) => {
                    assert_eq!((report.scheduling_gain.to_bits(), report.cost_full.to_bits()), b)
                }
            }
        }
    }

    #[test]
    fn verify_convergence_checks_the_envelope() {
        let g = chain(1, 1.0, 100);
        let phases = assign_tpa(&g);
        let eps = 0.3 * PI;
        let trace = run_simulation(&g, &phases, &cfg(eps, 1.0, 3)).unwrap();
        assert_eq!(trace.divergence_curve.len(), 4);
        let check = verify_convergence(&trace, eps, 0.12).unwrap();
        assert!(check.pass);
        assert_eq!(check.factor, 0.868);
        assert_eq!(check.checked_cycles, 3);
        assert!(check.max_excess_ratio <= 1.0 + 1e-9);

        let mut tampered = trace.clone();
        tampered.divergence_curve[2] *= 1.1;
        let check = verify_convergence(&tampered, eps, 0.12).unwrap();
        assert!(!check.pass);
        assert!(check.max_excess_ratio > 1.05);
    }

    #[test]
    fn full_compression_stalls_divergence() {
        let g = chain(1, 1.0, 100);
        let phases = assign_tpa(&g);
        let mut config = cfg(1.0, 1.0, 4);
        config.idle_delivery = IdleDelivery::Compressed { alpha: 1.0 };
        let trace = run_simulation(&g, &phases, &config).unwrap();
        for &dk in &trace.divergence_curve {
            assert_abs_diff_eq!(dk, 1.0, epsilon = 1e-12);
        }
        assert!(verify_convergence(&trace, 1.0, 1.0).unwrap().pass);
        assert_eq!(trace.converged_at, None);
    }

    #[test]
    fn full_window_contracts_at_alpha() {
        let g = chain(1, 1.0, 100);
        let phases = assign_tpa(&g);
        let trace = run_simulation(&g, &phases, &cfg(TAU, 1.0, 2)).unwrap();
        assert_eq!(trace.divergence_curve[1], 0.12);
        assert_eq!(trace.divergence_curve[2], 0.12 * 0.12);
        assert!(verify_convergence(&trace, TAU, 0.12).unwrap().pass);
    }

    #[test]
    fn controller_tracks_pi_iteration_exactly() {
        let agents = vec![
            crate::graph::AgentProfile::new("A1", 2.0, 1000, 100),
            crate::graph::AgentProfile::new("A2", 1.0, 1000, 100),
        ];
        let g = crate::graph::build_graph(agents, vec![("A1".into(), "A2".into())]).unwrap();
        let phases = assign_tpa(&g);
        let w0 = omega_max(&g, Scheme::Tpa);
        let mut config = cfg(0.9, w0, 8);
        config.controller_enabled = true;
        let trace = run_simulation(&g, &phases, &config).unwrap();
        assert_eq!(trace.omega_curve.len(), 8);
        assert_eq!(trace.omega_curve[0], w0);
        let mut state = PiState { omega: w0, integral: 0.0, kp: 0.2, ki: 0.05 };
        for &recorded in &trace.omega_curve {
            assert_eq!(recorded, state.omega);
            // sigma is zero, so every cycle observes the same 1.5 s mean
            state = pi_controller_step(&state, 1.5, 2.0);
        }
        assert!(trace.omega_curve[7] > trace.omega_curve[0]);
    }

    #[test]
    fn runs_are_deterministic_and_seed_sensitive() {
        let g = chain(3, 1.0, 150);
        let phases = assign_wpa(&g);
        let mut config = cfg(0.9, omega_max(&g, Scheme::Wpa), 5);
        config.sigma_ratio = 0.3;
        config.seed = 7;
        config.controller_enabled = true;
        let a = run_simulation(&g, &phases, &config).unwrap();
        let b = run_simulation(&g, &phases, &config).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        config.seed = 8;
        let c = run_simulation(&g, &phases, &config).unwrap();
        assert_ne!(a.invocations[0].duration_s, c.invocations[0].duration_s);
    }

    #[test]
    fn noise_is_reproducible_but_absent_at_zero_sigma() {
        let g = chain(3, 1.0, 150);
        let phases = assign_tpa(&g);
        let mut config = cfg(0.9, omega_max(&g, Scheme::Tpa), 3);
        config.seed = 42;
        let quiet = run_simulation(&g, &phases, &config).unwrap();
        for inv in &quiet.invocations {
            assert_eq!(inv.duration_s, 1.0);
        }
        config.sigma_ratio = 0.18;
        let noisy = run_simulation(&g, &phases, &config).unwrap();
        assert!(noisy.invocations.iter().any(|i| i.duration_s != 1.0));
        for inv in &noisy.invocations {
            assert!(inv.duration_s > 0.0);
        }
    }

    #[test]
    fn active_set_size_stays_within_window_bounds() {
        let g = chain(8, 1.0, 100);
        let phases = assign_tpa(&g);
        let eps = 0.9;
        let trace = run_simulation(&g, &phases, &cfg(eps, omega_max(&g, Scheme::Tpa), 3)).unwrap();
        let f = eps / TAU;
        let lo = (f * 8.0).floor() as usize;
        let hi = (f * 8.0).ceil() as usize + 1;
        assert!(!trace.steps.is_empty());
        for step in &trace.steps {
            assert!(step.active_ids.len() >= lo && step.active_ids.len() <= hi);
        }
    }

    #[test]
    fn record_steps_off_keeps_events() {
        let g = chain(4, 1.0, 100);
        let phases = assign_tpa(&g);
        let mut config = cfg(0.9, omega_max(&g, Scheme::Tpa), 3);
        config.record_steps = false;
        let trace = run_simulation(&g, &phases, &config).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(trace.invocations.len(), 12);
    }

    #[test]
    fn zero_cycles_yield_an_empty_run() {
        let g = chain(2, 1.0, 100);
        let phases = assign_tpa(&g);
        let trace = run_simulation(&g, &phases, &cfg(0.9, 1.0, 0)).unwrap();
        assert!(trace.invocations.is_empty());
        assert_eq!(trace.divergence_curve, vec![1.0]);
        assert_eq!(trace.cycles_completed, 0);
        assert_eq!(trace.converged_at, None);
        let check = verify_convergence(&trace, 0.9, 0.12).unwrap();
        assert!(check.pass);
        assert_eq!(check.checked_cycles, 0);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let g = chain(2, 1.0, 100);
        let phases = assign_tpa(&g);
        let bad = [
            SimConfig { epsilon: 0.0, ..SimConfig::default() },
            SimConfig { epsilon: TAU + 0.1, ..SimConfig::default() },
            SimConfig { omega: 0.0, ..SimConfig::default() },
            SimConfig { omega: -1.0, ..SimConfig::default() },
            SimConfig { dt: -0.1, ..SimConfig::default() },
            SimConfig { sigma_ratio: -0.5, ..SimConfig::default() },
            SimConfig { idle_delivery: IdleDelivery::Compressed { alpha: 0.0 }, ..SimConfig::default() },
            SimConfig { idle_delivery: IdleDelivery::Compressed { alpha: 1.5 }, ..SimConfig::default() },
            SimConfig { convergence_threshold: -1.0, ..SimConfig::default() },
            SimConfig { initial_context_tokens: f64::NAN, ..SimConfig::default() },
        ];
        for config in bad {
            assert!(run_simulation(&g, &phases, &config).is_err());
        }
        let incomplete = PhaseMap { scheme: Scheme::Tpa, phases: Default::default() };
        match run_simulation(&g, &incomplete, &SimConfig::default()) {
            Err(EngineError::Phase(PhaseError::MissingPhase(id))) => assert_eq!(id, "A1"),
            other => panic!("expected missing phase, got {other:?}"),
        }
    }

    #[test]
    fn config_serde_round_trip_and_defaults() {
        let config: SimConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, SimConfig::default());
        let json = serde_json::to_string(&SimConfig::default()).unwrap();
        assert!(json.contains(r#""idle_delivery":{"mode":"Compressed","alpha":0.12}"#));
        assert!(json.contains(r#""accounting":"Analytic""#));
        let back: SimConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SimConfig::default());
        let ns: SimConfig =
            serde_json::from_str(r#"{"idle_delivery":{"mode":"NoSummaries"},"epsilon":1.0}"#)
                .unwrap();
        assert_eq!(ns.idle_delivery, IdleDelivery::NoSummaries);
        assert!(serde_json::from_str::<SimConfig>(r#"{"unknown_field":1}"#).is_err());
    }

    #[test]
    fn coarse_user_dt_is_tightened_to_resolve_windows() {
        let g = chain(4, 1.0, 100);
        let phases = assign_tpa(&g);
        let w = omega_max(&g, Scheme::Tpa);
        let mut config = cfg(0.5, w, 4);
        config.dt = 1e6;
        let trace = run_simulation(&g, &phases, &config).unwrap();
        assert_eq!(trace.invocations.len(), 16);
        assert!(trace.violations.is_empty());
        for inv in &trace.invocations {
            let th = phases.phase_of(&inv.agent_id).unwrap();
            assert_abs_diff_eq!(inv.start_t, (th + TAU * inv.cycle as f64) / w, epsilon = 1e-9);
        }
    }
}
