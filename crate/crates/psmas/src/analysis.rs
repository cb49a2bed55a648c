//! Verification harnesses built on the simulator and the closed-form model.
//!
//! The Monte Carlo sampler here deliberately draws untruncated Gaussian noise,
//! matching the model the tail bound is stated for; the simulator truncates
//! durations just above zero. The two agree wherever the bound matters, since
//! violations come from the positive tail.

use crate::cost::{
    reduction_ratio, violation_probability_bound, CostParams, RegimeLabel,
};
use crate::engine::{
    run_simulation, token_totals, Accounting, EngineError, IdleDelivery, SimConfig,
};
use crate::graph::DependencyGraph;
use crate::phase::{phase_slack, PhaseError, PhaseMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("at least 1000 trials are required, got {0}")]
    TooFewTrials(usize),
    #[error("{0}")]
    InvalidInput(&'static str),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Cost(#[from] crate::cost::CostError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Sampled and analytic tail behavior of one dependency edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeViolationStats {
    pub from: String,
    pub to: String,
    pub slack_s: f64,
    pub empirical_rate: f64,
    pub analytic_bound: f64,
    pub stderr: f64,
}

/// Estimate per-edge violation rates by sampling latency noise directly.
///
/// Each trial draws one Gaussian perturbation per agent (spread `sigma_ratio`
/// times the largest latency, shared across that agent's outgoing edges); an
/// edge is violated when its producer's perturbation exceeds the edge's timing
/// slack. With zero spread no randomness is involved and the rates collapse to
/// the slack sign. At least 1000 trials are required.
pub fn monte_carlo_violation_rate(
    g: &DependencyGraph,
    phases: &PhaseMap,
    omega: f64,
    sigma_ratio: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<EdgeViolationStats>, AnalysisError> {
    if trials < 1000 {
        return Err(AnalysisError::TooFewTrials(trials));
    }
    if !sigma_ratio.is_finite() || sigma_ratio < 0.0 {
        return Err(AnalysisError::InvalidInput("sigma_ratio must be finite and nonnegative"));
    }
    let slacks: Vec<(usize, usize, f64)> = g
        .edge_indices()
        .iter()
        .map(|&(i, j)| {
            let edge = (g.agent(i).id.as_str(), g.agent(j).id.as_str());
            phase_slack(g, phases, omega, edge).map(|s| (i, j, s))
        })
        .collect::<Result<_, _>>()?;
    let sigma = sigma_ratio * g.t_max();

    let mut counts = vec![0usize; slacks.len()];
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xi = vec![0.0f64; g.n()];
        for _ in 0..trials {
            for x in xi.iter_mut() {
                *x = dist.sample(&mut rng);
            }
            for (e, &(i, _, slack)) in slacks.iter().enumerate() {
                if xi[i] > slack {
                    counts[e] += 1;
                }
            }
        }
    } else {
        for (e, &(_, _, slack)) in slacks.iter().enumerate() {
            if slack < 0.0 {
                counts[e] = trials;
            }
        }
    }

    Ok(slacks
        .iter()
        .zip(&counts)
        .map(|(&(i, j, slack), &count)| {
            let p = count as f64 / trials as f64;
            let bound = if sigma > 0.0 {
                violation_probability_bound(slack, sigma).unwrap()
            } else if slack > 0.0 {
                0.0
            } else if slack < 0.0 {
                1.0
            } else {
                0.5
            };
            EdgeViolationStats {
                from: g.agent(i).id.clone(),
                to: g.agent(j).id.clone(),
                slack_s: slack,
                empirical_rate: p,
                analytic_bound: bound,
                stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            }
        })
        .collect())
}

/// Deterministic per-point, per-trial seed derivation (a splitmix64 chain),
/// so sweep results do not depend on scheduling or worker count.
pub fn derive_seed(master: u64, point: usize, trial: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(master) ^ point as u64) ^ trial as u64)
}

/// Grid of operating points for [`sweep_field_scan`]; the row order is
/// epsilon-major, matching `epsilons` then `omega_ratios` as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub epsilons: Vec<f64>,
    pub omega_ratios: Vec<f64>,
    pub trials: usize,
}

/// One operating point of a sweep-field scan. Measured columns are `None`
/// when the point's simulation failed or the quantity is undefined there;
/// `note` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub epsilon: f64,
    pub omega_ratio: f64,
    pub f: f64,
    pub rho_theory: f64,
    pub sim_token_fraction: Option<f64>,
    pub event_token_fraction: Option<f64>,
    pub violation_rate: Option<f64>,
    pub regime: Option<RegimeLabel>,
    pub note: String,
}

/// Simulate every grid point and tabulate cost fractions and violation rates.
///
/// Per point, `grid.trials` independent runs are driven with seeds derived
/// from `template.seed`; the velocity is the point's ratio times the phase
/// assignment's velocity bound. Token fractions come from the first trial
/// (the context path is noise-independent); the violation rate is the mean
/// over trials of the per-run count normalized by edges times cycles. Points
/// run in parallel, with output order and all values independent of the
/// worker count. Step recording is disabled for the runs.
pub fn sweep_field_scan(
    g: &DependencyGraph,
    phases: &PhaseMap,
    grid: &ScanGrid,
    template: &SimConfig,
) -> Result<Vec<ScanRow>, AnalysisError> {
    if grid.trials == 0 {
        return Err(AnalysisError::InvalidInput("scan needs at least one trial per point"));
    }
    let w_max = crate::phase::omega_max(g, phases.scheme);
    let alpha = match template.idle_delivery {
        IdleDelivery::Compressed { alpha } => Some(alpha),
        IdleDelivery::NoSummaries => None,
    };
    let points: Vec<(f64, f64)> = grid
        .epsilons
        .iter()
        .flat_map(|&e| grid.omega_ratios.iter().map(move |&r| (e, r)))
        .collect();

    let rows = points
        .into_par_iter()
        .enumerate()
        .map(|(p, (epsilon, omega_ratio))| {
            let f = epsilon / TAU;
            let rho_theory = match alpha {
                Some(a) => reduction_ratio(epsilon, a).unwrap_or(f64::NAN),
                None => 1.0 - f,
            };
            let mut row = ScanRow {
                epsilon,
                omega_ratio,
                f,
                rho_theory,
                sim_token_fraction: None,
                event_token_fraction: None,
                violation_rate: None,
                regime: crate::cost::classify_regime(epsilon, omega_ratio).ok(),
                note: String::new(),
            };
            if !(omega_ratio > 0.0) || !omega_ratio.is_finite() {
                row.note = "omega_ratio must be positive and finite".into();
                return row;
            }
            let mut rate_sum = 0.0;
            let mut rate_defined = true;
            for trial in 0..grid.trials {
                let config = SimConfig {
                    epsilon,
                    omega: omega_ratio * w_max,
                    seed: derive_seed(template.seed, p, trial),
                    record_steps: false,
                    ..template.clone()
                };
                let trace = match run_simulation(g, phases, &config) {
                    Ok(t) => t,
                    Err(err) => {
                        row.note = err.to_string();
                        return row;
                    }
                };
                if trial == 0 {
                    let totals = trace.token_ledger.totals;
                    if totals.full > 0.0 {
                        row.sim_token_fraction = Some(totals.analytic / totals.full);
                        row.event_token_fraction = Some(totals.event / totals.full);
                    }
                }
                let denom = g.edge_indices().len() * trace.cycles_completed;
                if denom == 0 {
                    rate_defined = false;
                } else {
                    rate_sum += trace.violations.len() as f64 / denom as f64;
                }
            }
            if rate_defined {
                row.violation_rate = Some(rate_sum / grid.trials as f64);
            } else {
                row.note = "violation rate undefined without edges and cycles".into();
            }
            row
        })
        .collect();
    Ok(rows)
}

/// One compression setting of an [`alpha_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub token_cost_fraction: f64,
    pub scheduling_gain: f64,
    pub compression_gain: f64,
}

/// Rerun the same schedule under different compression settings and split the
/// savings. Early convergence stopping is disabled internally so every run
/// covers the same cycles; the scheduling column is then identical across the
/// settings to the last bit, which is itself a useful check of the accounting.
pub fn alpha_sweep(
    g: &DependencyGraph,
    phases: &PhaseMap,
    alphas: &[f64],
    template: &SimConfig,
) -> Result<Vec<AlphaRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let config = SimConfig {
            idle_delivery: IdleDelivery::Compressed { alpha },
            convergence_threshold: 0.0,
            record_steps: false,
            ..template.clone()
        };
        let trace = run_simulation(g, phases, &config)?;
        let params = CostParams::new(
            g.n(),
            config.initial_context_tokens,
            g.mean_response_tokens(),
            alpha,
            config.epsilon,
        )?;
        let report = token_totals(&trace, Accounting::Analytic, &params)?;
        let token_cost_fraction =
            if report.cost_full > 0.0 { report.cost_psmas / report.cost_full } else { 1.0 };
        rows.push(AlphaRow {
            alpha,
            token_cost_fraction,
            scheduling_gain: report.scheduling_gain,
            compression_gain: report.compression_gain,
        });
    }
    Ok(rows)
}

/// One `(epsilon, alpha)` pair of a [`convergence_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub alpha: f64,
    pub factor: f64,
    pub d_k: f64,
    pub bound_satisfied: bool,
}

/// Measure divergence decay over `cycles` for each window and compression
/// pair, and check each run against its geometric envelope. The runs use an
/// internal single-agent system; the divergence recursion does not depend on
/// the graph.
pub fn convergence_study(
    epsilons: &[f64],
    alphas: &[f64],
    cycles: usize,
) -> Result<Vec<ConvergenceRow>, AnalysisError> {
    let g = crate::graph::generate_benchmark_graph(crate::graph::GraphShape::LinearChain, 1, 1.0, 0)?;
    let phases = crate::phase::assign_tpa(&g);
    let mut rows = Vec::with_capacity(epsilons.len() * alphas.len());
    for &epsilon in epsilons {
        for &alpha in alphas {
            let config = SimConfig {
                epsilon,
                omega: 1.0,
                idle_delivery: IdleDelivery::Compressed { alpha },
                max_cycles: cycles,
                convergence_threshold: 0.0,
                record_steps: false,
                ..SimConfig::default()
            };
            let trace = run_simulation(&g, &phases, &config)?;
            let check = crate::engine::verify_convergence(&trace, epsilon, alpha)?;
            rows.push(ConvergenceRow {
                epsilon,
                alpha,
                factor: check.factor,
                d_k: trace.final_context.divergence,
                bound_satisfied: check.pass,
            });
        }
    }
    Ok(rows)
}

impl From<crate::graph::GraphError> for AnalysisError {
    fn from(_: crate::graph::GraphError) -> Self {
        AnalysisError::InvalidInput("internal benchmark graph construction failed")
    }
}

/// The two failure studies: hiding declared edges from the observer (F1) and
/// pushing the sweep velocity toward its bound (F2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FailureProbe {
    /// Hide the first `hidden_edges` edges (declaration order) from violation
    /// counting and compare against the intact count, using one Monte Carlo
    /// sampling run.
    F1 { hidden_edges: usize, omega: f64, sigma_ratio: f64, trials: usize, seed: u64 },
    /// Evaluate analytic per-edge tail bounds across velocity ratios and flag
    /// a cliff: any edge whose bound grows more than tenfold between adjacent
    /// ratios.
    F2 { omega_ratios: Vec<f64>, sigma_ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub hidden: Vec<(String, String)>,
    /// Violations per edge-trial with every edge counted.
    pub intact_overall: f64,
    /// Visible violations per edge-trial, still normalized by the intact edge
    /// count, so hiding edges lowers the apparent rate rather than reweighting it.
    pub probed_overall: f64,
    /// What the hidden edges concealed: intact minus probed.
    pub delta: f64,
    pub per_edge: Vec<EdgeViolationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeBound {
    pub from: String,
    pub to: String,
    pub slack_s: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F2Point {
    pub omega_ratio: f64,
    pub per_edge: Vec<EdgeBound>,
    pub max_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F2Report {
    pub points: Vec<F2Point>,
    pub cliff: bool,
    /// First adjacent ratio pair across which some edge's bound grew tenfold.
    pub cliff_between: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FailureProbeReport {
    F1(F1Report),
    F2(F2Report),
}

/// Run one failure study; see [`FailureProbe`] for the two designs.
pub fn failure_probe(
    g: &DependencyGraph,
    phases: &PhaseMap,
    probe: &FailureProbe,
) -> Result<FailureProbeReport, AnalysisError> {
    match probe {
        FailureProbe::F1 { hidden_edges, omega, sigma_ratio, trials, seed } => {
            let edge_count = g.edge_indices().len();
            if *hidden_edges > edge_count {
                return Err(AnalysisError::InvalidInput(
                    "cannot hide more edges than the graph declares",
                ));
            }
            let per_edge =
                monte_carlo_violation_rate(g, phases, *omega, *sigma_ratio, *trials, *seed)?;
            let intact_overall = if edge_count == 0 {
                0.0
            } else {
                per_edge.iter().map(|e| e.empirical_rate).sum::<f64>() / edge_count as f64
            };
            let probed_overall = if edge_count == 0 {
                0.0
            } else {
                per_edge[*hidden_edges..].iter().map(|e| e.empirical_rate).sum::<f64>()
                    / edge_count as f64
            };
            let hidden = per_edge[..*hidden_edges]
                .iter()
                .map(|e| (e.from.clone(), e.to.clone()))
                .collect();
            Ok(FailureProbeReport::F1(F1Report {
                hidden,
                intact_overall,
                probed_overall,
                delta: intact_overall - probed_overall,
                per_edge,
            }))
        }
        FailureProbe::F2 { omega_ratios, sigma_ratio } => {
            if !(sigma_ratio > &0.0) || !sigma_ratio.is_finite() {
                return Err(AnalysisError::InvalidInput(
                    "the analytic probe needs a positive noise spread",
                ));
            }
            let w_max = crate::phase::omega_max(g, phases.scheme);
            let sigma = sigma_ratio * g.t_max();
            let mut points = Vec::with_capacity(omega_ratios.len());
            for &ratio in omega_ratios {
                if !(ratio > 0.0) || !ratio.is_finite() {
                    return Err(AnalysisError::InvalidInput(
                        "omega ratios must be positive and finite",
                    ));
                }
                let omega = ratio * w_max;
                let mut per_edge = Vec::with_capacity(g.edge_indices().len());
                let mut max_bound = 0.0f64;
                for (from, to) in g.edge_ids() {
                    let slack = phase_slack(g, phases, omega, (from, to))?;
                    let bound = violation_probability_bound(slack, sigma)?;
                    max_bound = max_bound.max(bound);
                    per_edge.push(EdgeBound {
                        from: from.to_owned(),
                        to: to.to_owned(),
                        slack_s: slack,
                        bound,
                    });
                }
                points.push(F2Point { omega_ratio: ratio, per_edge, max_bound });
            }
            let mut cliff_between = None;
            for pair in points.windows(2) {
                let grew = pair[0]
                    .per_edge
                    .iter()
                    .zip(&pair[1].per_edge)
                    .any(|(a, b)| b.bound > 10.0 * a.bound);
                if grew {
                    cliff_between = Some((pair[0].omega_ratio, pair[1].omega_ratio));
                    break;
                }
            }
            Ok(FailureProbeReport::F2(F2Report {
                points,
                cliff: cliff_between.is_some(),
                cliff_between,
            }))
        }
    }
}
