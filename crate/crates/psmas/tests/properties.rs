//! Property checks across the model layers: the circle metric, the phase
//! assignments, the cost identities, and the normal tail against an
//! independent quadrature oracle.

mod common;

use proptest::prelude::*;
use psmas::cost::{
    activation_fraction, classify_regime, convergence_factor, cost_full, cost_psmas,
    expected_violations, optimal_epsilon, reduction_ratio, violation_probability_bound, CostParams,
};
use psmas::graph::{build_graph, generate_benchmark_graph, AgentProfile, GraphShape};
use psmas::phase::{
    assign_tpa, assign_wpa, circular_distance, forward_gap, omega_max, phase_slack, Scheme,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// Adaptive Simpson quadrature of the standard normal density, an oracle for
/// the cumulative that shares no code with the library's rational
/// approximation.
fn phi_quadrature(z: f64) -> f64 {
    fn pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
    fn simpson(a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (pdf(a) + 4.0 * pdf(0.5 * (a + b)) + pdf(b))
    }
    fn adaptive(a: f64, b: f64, tol: f64, whole: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(a, m);
        let right = simpson(m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        adaptive(a, m, 0.5 * tol, left, depth - 1) + adaptive(m, b, 0.5 * tol, right, depth - 1)
    }
    if z < 0.0 {
        return 1.0 - phi_quadrature(-z);
    }
    0.5 + adaptive(0.0, z, 1e-13, simpson(0.0, z), 40)
}

#[test]
fn normal_cdf_matches_quadrature_oracle() {
    let mut z = -6.0;
    while z <= 6.0 {
        let via_bound = 1.0 - violation_probability_bound(z, 1.0).unwrap();
        assert!(
            (via_bound - phi_quadrature(z)).abs() < 1e-6,
            "z={z}: {via_bound} vs {}",
            phi_quadrature(z)
        );
        z += 0.125;
    }
}

proptest! {
    #[test]
    fn circle_metric_axioms(a in -20.0..20.0f64, b in -20.0..20.0f64, c in -20.0..20.0f64, r in -20.0..20.0f64) {
        let d_ab = circular_distance(a, b).unwrap();
        let d_ba = circular_distance(b, a).unwrap();
        prop_assert!((d_ab - d_ba).abs() < 1e-9);
        prop_assert!((0.0..=TAU / 2.0 + 1e-12).contains(&d_ab));
        prop_assert!(circular_distance(a, a).unwrap() < 1e-12);
        let d_ac = circular_distance(a, c).unwrap();
        let d_bc = circular_distance(b, c).unwrap();
        prop_assert!(d_ac <= d_ab + d_bc + 1e-9);
        let rotated = circular_distance(a + r, b + r).unwrap();
        prop_assert!((rotated - d_ab).abs() < 1e-9);
    }

    #[test]
    fn gain_split_reconstructs_total_reduction(
        n in 1usize..12,
        l in 1.0..50_000.0f64,
        r_bar in 0.0..5_000.0f64,
        alpha in 0.01..1.0f64,
        epsilon in 0.01..TAU,
    ) {
        let p = CostParams::new(n, l, r_bar, alpha, epsilon).unwrap();
        let (sched, comp) = psmas::cost::decompose_gains(&p);
        let total = 1.0 - cost_psmas(&p) / cost_full(n, l, r_bar);
        prop_assert!((sched + comp - total).abs() < 1e-12);
        prop_assert!(sched >= -1e-12 && comp >= -1e-12);
    }

    #[test]
    fn pure_context_reduction_equals_rho(
        n in 1usize..12,
        l in 1.0..50_000.0f64,
        alpha in 0.01..1.0f64,
        epsilon in 0.01..TAU,
    ) {
        // with no response term the cost ratio is exactly the context ratio
        let p = CostParams::new(n, l, 0.0, alpha, epsilon).unwrap();
        let ratio = cost_psmas(&p) / cost_full(n, l, 0.0);
        let rho = reduction_ratio(epsilon, alpha).unwrap();
        prop_assert!(((1.0 - ratio) - rho).abs() < 1e-12);
    }

    #[test]
    fn cost_grows_with_window_and_compression_ratio(
        n in 1usize..12,
        l in 1.0..50_000.0f64,
        r_bar in 0.0..5_000.0f64,
        alpha in 0.01..0.99f64,
        epsilon in 0.01..3.0f64,
    ) {
        let base = cost_psmas(&CostParams::new(n, l, r_bar, alpha, epsilon).unwrap());
        let wider = cost_psmas(&CostParams::new(n, l, r_bar, alpha, epsilon + 0.5).unwrap());
        let laxer = cost_psmas(&CostParams::new(n, l, r_bar, alpha + 0.01, epsilon).unwrap());
        prop_assert!(wider >= base - 1e-9);
        prop_assert!(laxer >= base - 1e-9);
    }

    #[test]
    fn convergence_factor_stays_in_unit_interval(alpha in 0.001..1.0f64, epsilon in 0.001..TAU) {
        let factor = convergence_factor(epsilon, alpha).unwrap();
        prop_assert!(factor > 0.0 && factor <= 1.0 + 1e-15);
        let f = activation_fraction(epsilon).unwrap();
        prop_assert!((factor - (1.0 - f * (1.0 - alpha))).abs() < 1e-12);
    }

    #[test]
    fn tail_bound_decreases_with_slack(slack in -5.0..5.0f64, sigma in 0.01..3.0f64) {
        let here = violation_probability_bound(slack, sigma).unwrap();
        let safer = violation_probability_bound(slack + 0.1, sigma).unwrap();
        prop_assert!(safer <= here + 1e-12);
        prop_assert!((0.0..=1.0).contains(&here));
        let scaled = violation_probability_bound(2.0 * slack, 2.0 * sigma).unwrap();
        prop_assert!((scaled - here).abs() < 1e-12);
    }

    #[test]
    fn optimal_window_matches_rearranged_form(
        alpha in 0.01..0.9f64,
        l_bar in 100.0..100_000.0f64,
        q_min in 0.5..1.0f64,
        delta_q in 0.0..0.2f64,
    ) {
        let direct = optimal_epsilon(q_min, delta_q, alpha, l_bar);
        let compressible = (1.0 - alpha) * l_bar;
        let pressure = q_min * delta_q;
        if compressible > pressure {
            let rearranged = TAU * compressible / (compressible - pressure);
            let direct = direct.unwrap();
            prop_assert!((direct - rearranged).abs() <= 1e-9 * rearranged.abs());
            prop_assert!(direct >= TAU);
        } else {
            prop_assert!(direct.is_err());
        }
    }

    #[test]
    fn regime_classification_is_total_on_its_domain(
        epsilon in 0.0001..2.2f64,
        omega_ratio in 0.0..3.0f64,
    ) {
        prop_assert!(classify_regime(epsilon, omega_ratio).is_ok());
    }

    #[test]
    fn expected_violations_scale_linearly(bound in 0.0..1.0f64, edges in 0usize..50, cycles in 0usize..50) {
        let once = expected_violations(bound, edges, cycles);
        let doubled = expected_violations(bound, 2 * edges, cycles);
        prop_assert!((doubled - 2.0 * once).abs() < 1e-9);
        prop_assert!(once >= 0.0);
    }
}

#[test]
fn topological_order_respects_edges_on_random_dags() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240811);
    for _ in 0..200 {
        let g = common::random_dag(&mut rng);
        let order = psmas::graph::topological_order(&g);
        let pos = |id: &str| order.iter().position(|x| x == id).unwrap();
        for (from, to) in g.edge_ids() {
            assert!(pos(from) < pos(to), "edge {from}->{to} out of order");
        }
    }
}

#[test]
fn forward_gaps_around_the_circle_sum_to_a_turn() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let g = common::random_dag(&mut rng);
        for phases in [assign_tpa(&g), assign_wpa(&g)] {
            let thetas: Vec<f64> = g
                .topo_indices()
                .iter()
                .map(|&i| phases.phase_of(&g.agent(i).id).unwrap())
                .collect();
            let mut total = 0.0;
            for k in 0..thetas.len() {
                let next = thetas[(k + 1) % thetas.len()];
                total += forward_gap(thetas[k], next);
            }
            // a single agent has no gaps to traverse
            if thetas.len() > 1 {
                assert!((total - TAU).abs() < 1e-9, "{:?} gaps sum to {total}", phases.scheme);
            }
        }
    }
}

#[test]
fn slack_is_nonnegative_at_the_velocity_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..150 {
        let g = common::random_dag(&mut rng);
        for (scheme, phases) in [(Scheme::Tpa, assign_tpa(&g)), (Scheme::Wpa, assign_wpa(&g))] {
            let w = omega_max(&g, scheme);
            for (from, to) in g.edge_ids() {
                let slack = phase_slack(&g, &phases, w, (from, to)).unwrap();
                assert!(slack >= -1e-9, "{scheme} slack {slack} on {from}->{to}");
            }
        }
    }
}

#[test]
fn weighted_assignment_never_loses_to_topological() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for _ in 0..300 {
        let n = rng.random_range(2..=12);
        let agents: Vec<AgentProfile> = (1..=n)
            .map(|k| AgentProfile::new(format!("A{k}"), rng.random_range(0.05..4.0), 0, 0))
            .collect();
        let edges = (1..n).map(|k| (format!("A{k}"), format!("A{}", k + 1))).collect();
        let g = build_graph(agents, edges).unwrap();
        let wt = omega_max(&g, Scheme::Wpa);
        let tp = omega_max(&g, Scheme::Tpa);
        assert!(wt >= tp * (1.0 - 1e-12));
    }
    // dyadic equal latencies reproduce the bound exactly
    for n in [2usize, 3, 5, 8] {
        let g = generate_benchmark_graph(GraphShape::LinearChain, n, 0.75, 0).unwrap();
        assert_eq!(omega_max(&g, Scheme::Wpa).to_bits(), omega_max(&g, Scheme::Tpa).to_bits());
    }
}
