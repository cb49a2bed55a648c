//! Closed-form token-cost and quality model.
//!
//! Everything here is a pure function of the model symbols: agent count n,
//! context length L, mean response length R, compression ratio alpha, and
//! activation window epsilon. The simulator reproduces these formulas event by
//! event; this module is the analytic side of that cross-check.
//!
//! The reduction ratio rho = (1 - alpha)(1 - epsilon/2pi) tracks context
//! tokens only, while the full cost includes the response term. Both views are
//! exposed; they coincide in the no-response limit.

use crate::normal::phi;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CostError {
    #[error("{0}")]
    OutOfRange(&'static str),
    #[error("quality pressure meets or exceeds the compressible context; no finite window")]
    DegenerateDenominator,
    #[error("sigma must be positive and finite")]
    NonPositiveSigma,
}

/// Operating regime of an (epsilon, omega/omega_max) point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeLabel {
    Efficient,
    OverCompressed,
    OverActivated,
    VelocityFailure,
}

impl std::fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegimeLabel::Efficient => "Efficient",
            RegimeLabel::OverCompressed => "OverCompressed",
            RegimeLabel::OverActivated => "OverActivated",
            RegimeLabel::VelocityFailure => "VelocityFailure",
        })
    }
}

/// Validated parameter set for the cost model.
///
/// The quality symbols default to Q_min = 0.95, delta_Q = 0.04, C_Q = 0.028,
/// and L_bar equal to L; override them with [`CostParams::with_quality`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    n: usize,
    l: f64,
    r_bar: f64,
    alpha: f64,
    epsilon: f64,
    q_min: f64,
    delta_q: f64,
    c_q: f64,
    l_bar: f64,
}

fn check(cond: bool, msg: &'static str) -> Result<(), CostError> {
    if cond {
        Ok(())
    } else {
        Err(CostError::OutOfRange(msg))
    }
}

impl CostParams {
    pub fn new(n: usize, l: f64, r_bar: f64, alpha: f64, epsilon: f64) -> Result<Self, CostError> {
        check(l.is_finite() && l >= 0.0, "context length L must be finite and nonnegative")?;
        check(r_bar.is_finite() && r_bar >= 0.0, "mean response R must be finite and nonnegative")?;
        check(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
        check(epsilon.is_finite() && epsilon > 0.0 && epsilon <= TAU, "epsilon must lie in (0, 2*pi]")?;
        Ok(CostParams {
            n,
            l,
            r_bar,
            alpha,
            epsilon,
            q_min: 0.95,
            delta_q: 0.04,
            c_q: 0.028,
            l_bar: l,
        })
    }

    pub fn with_quality(
        mut self,
        q_min: f64,
        delta_q: f64,
        c_q: f64,
        l_bar: f64,
    ) -> Result<Self, CostError> {
        check(q_min.is_finite() && q_min > 0.0 && q_min <= 1.0, "Q_min must lie in (0, 1]")?;
        check(delta_q.is_finite() && delta_q >= 0.0, "delta_Q must be finite and nonnegative")?;
        check(c_q.is_finite() && c_q >= 0.0, "C_Q must be finite and nonnegative")?;
        check(l_bar.is_finite() && l_bar >= 0.0, "L_bar must be finite and nonnegative")?;
        self.q_min = q_min;
        self.delta_q = delta_q;
        self.c_q = c_q;
        self.l_bar = l_bar;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn context_tokens(&self) -> f64 {
        self.l
    }
    pub fn mean_response_tokens(&self) -> f64 {
        self.r_bar
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn q_min(&self) -> f64 {
        self.q_min
    }
    pub fn delta_q(&self) -> f64 {
        self.delta_q
    }
    pub fn c_q(&self) -> f64 {
        self.c_q
    }
    pub fn l_bar(&self) -> f64 {
        self.l_bar
    }
}

/// Fraction of the circle covered by the activation window: f = epsilon / 2pi.
pub fn activation_fraction(epsilon: f64) -> Result<f64, CostError> {
    check(epsilon.is_finite() && epsilon > 0.0 && epsilon <= TAU, "epsilon must lie in (0, 2*pi]")?;
    Ok(epsilon / TAU)
}

/// Token cost of one fully-activated cycle: n agents each read L and emit R.
pub fn cost_full(n: usize, l: f64, r_bar: f64) -> f64 {
    let nf = n as f64;
    nf * l + nf * r_bar
}

/// Token cost of one phase-scheduled cycle:
/// nL (f + (1-f) alpha) + f n R, with f the activation fraction.
pub fn cost_psmas(p: &CostParams) -> f64 {
    let f = p.epsilon / TAU;
    let nf = p.n as f64;
    nf * p.l * (f + (1.0 - f) * p.alpha) + f * nf * p.r_bar
}

/// Context-token reduction ratio rho = (1 - alpha)(1 - epsilon/2pi).
pub fn reduction_ratio(epsilon: f64, alpha: f64) -> Result<f64, CostError> {
    check(epsilon.is_finite() && epsilon > 0.0 && epsilon <= TAU, "epsilon must lie in (0, 2*pi]")?;
    check(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
    Ok((1.0 - alpha) * (1.0 - epsilon / TAU))
}

/// Split the total reduction against the full-activation cost into a
/// scheduling part and a compression part, both as fractions of `cost_full`.
///
/// The scheduling gain is measured at alpha = 1 and therefore does not depend
/// on the actual alpha at all; the compression gain is the rest. The two sum
/// to the total reduction exactly.
pub fn decompose_gains(p: &CostParams) -> (f64, f64) {
    let full = cost_full(p.n, p.l, p.r_bar);
    if full == 0.0 {
        return (0.0, 0.0);
    }
    let mut no_compression = p.clone();
    no_compression.alpha = 1.0;
    let at_alpha_one = cost_psmas(&no_compression);
    let at_alpha = cost_psmas(p);
    ((full - at_alpha_one) / full, (at_alpha_one - at_alpha) / full)
}

/// Largest window that keeps quality above the floor:
/// epsilon* = 2pi (1 - Q_min delta_Q / ((1-alpha) L_bar))^-1.
///
/// Evaluated exactly as written; the result can exceed 2pi when the quality
/// pressure is weak, in which case any window satisfies the floor.
pub fn optimal_epsilon(q_min: f64, delta_q: f64, alpha: f64, l_bar: f64) -> Result<f64, CostError> {
    check(q_min.is_finite() && q_min > 0.0 && q_min <= 1.0, "Q_min must lie in (0, 1]")?;
    check(delta_q.is_finite() && delta_q >= 0.0, "delta_Q must be finite and nonnegative")?;
    check(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
    check(l_bar.is_finite() && l_bar >= 0.0, "L_bar must be finite and nonnegative")?;
    let pressure = q_min * delta_q;
    let compressible = (1.0 - alpha) * l_bar;
    if compressible <= pressure {
        return Err(CostError::DegenerateDenominator);
    }
    Ok(TAU / (1.0 - pressure / compressible))
}

/// Upper bound on quality loss: C_Q (1 - f) (1 - alpha).
pub fn quality_bound(c_q: f64, epsilon: f64, alpha: f64) -> Result<f64, CostError> {
    check(c_q.is_finite() && c_q >= 0.0, "C_Q must be finite and nonnegative")?;
    check(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
    let f = activation_fraction(epsilon)?;
    Ok(c_q * (1.0 - f) * (1.0 - alpha))
}

/// Probability that Gaussian latency noise of spread `sigma_s` overruns a
/// timing margin of `slack_s`: 1 - Phi(slack/sigma).
pub fn violation_probability_bound(slack_s: f64, sigma_s: f64) -> Result<f64, CostError> {
    if !sigma_s.is_finite() || sigma_s <= 0.0 {
        return Err(CostError::NonPositiveSigma);
    }
    check(slack_s.is_finite(), "slack must be finite")?;
    Ok(1.0 - phi(slack_s / sigma_s))
}

/// Expected violation count over a run: per-edge bound times edges times cycles.
pub fn expected_violations(per_edge_bound: f64, edge_count: usize, cycles: usize) -> f64 {
    per_edge_bound * edge_count as f64 * cycles as f64
}

/// Classify an operating point on the (epsilon, omega/omega_max) plane.
///
/// Rules apply in order, which makes the classification total over the domain
/// epsilon in (0, 2.2], omega_ratio >= 0:
/// velocity failure above omega_ratio 0.9; then over-compressed below
/// epsilon 0.3; then over-activated above epsilon 1.5; then efficient up to
/// (0.9, 0.88); everything left is the over-activated boundary band.
pub fn classify_regime(epsilon: f64, omega_ratio: f64) -> Result<RegimeLabel, CostError> {
    check(epsilon.is_finite() && epsilon > 0.0 && epsilon <= 2.2, "epsilon must lie in (0, 2.2] for regime classification")?;
    check(omega_ratio.is_finite() && omega_ratio >= 0.0, "omega_ratio must be finite and nonnegative")?;
    let label = if omega_ratio > 0.9 {
        RegimeLabel::VelocityFailure
    } else if epsilon < 0.3 {
        RegimeLabel::OverCompressed
    } else if epsilon > 1.5 {
        RegimeLabel::OverActivated
    } else if epsilon <= 0.9 && omega_ratio <= 0.88 {
        RegimeLabel::Efficient
    } else {
        RegimeLabel::OverActivated
    };
    Ok(label)
}

/// Per-cycle contraction factor toward the full-activation fixed point:
/// f alpha + (1 - f).
pub fn convergence_factor(epsilon: f64, alpha: f64) -> Result<f64, CostError> {
    check(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]")?;
    let f = activation_fraction(epsilon)?;
    Ok(f * alpha + (1.0 - f))
}

/// Derived quantities for one configuration, serializable as a flat JSON object.
///
/// `epsilon_star` is absent when the quality pressure admits no finite window;
/// `regime` is absent when epsilon falls outside the classifier's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rho: f64,
    pub f: f64,
    pub cost_full: f64,
    pub cost_psmas: f64,
    pub scheduling_gain: f64,
    pub compression_gain: f64,
    pub epsilon_star: Option<f64>,
    pub quality_bound: f64,
    pub regime: Option<RegimeLabel>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn base() -> CostParams {
        CostParams::new(6, 1000.0, 300.0, 0.12, PI).unwrap()
    }

    #[test]
    fn activation_fraction_values() {
        assert_eq!(activation_fraction(TAU).unwrap(), 1.0);
        assert_eq!(activation_fraction(PI).unwrap(), 0.5);
        assert_abs_diff_eq!(activation_fraction(TAU / 6.0).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        for bad in [0.0, -1.0, TAU + 0.1, f64::NAN] {
            assert!(activation_fraction(bad).is_err());
        }
    }

    #[test]
    fn cost_full_values() {
        assert_eq!(cost_full(6, 1000.0, 300.0), 7800.0);
        assert_eq!(cost_full(0, 1000.0, 300.0), 0.0);
        assert_eq!(cost_full(1, 0.0, 5.0), 5.0);
    }

    #[test]
    fn cost_psmas_values() {
        assert_eq!(cost_psmas(&base()), 4260.0);
        let a1 = CostParams::new(6, 1000.0, 300.0, 1.0, PI).unwrap();
        assert_eq!(cost_psmas(&a1), 6900.0);
    }

    #[test]
    fn cost_psmas_collapses_to_full_at_tau() {
        let p = CostParams::new(6, 1000.0, 300.0, 0.12, TAU).unwrap();
        assert_eq!(cost_psmas(&p), cost_full(6, 1000.0, 300.0));
        let p = CostParams::new(3, 123.4, 56.7, 0.5, TAU).unwrap();
        assert_eq!(cost_psmas(&p), cost_full(3, 123.4, 56.7));
    }

    #[test]
    fn reduction_ratio_values() {
        assert_abs_diff_eq!(reduction_ratio(1e-15, 0.12).unwrap(), 0.88, epsilon = 1e-12);
        assert_eq!(reduction_ratio(TAU, 0.3).unwrap(), 0.0);
        assert_abs_diff_eq!(reduction_ratio(0.5, 0.12).unwrap(), 0.8099718250395661, epsilon = 1e-12);
        assert_abs_diff_eq!(reduction_ratio(0.5, 0.12).unwrap(), 0.810, epsilon = 1e-3);
    }

    #[test]
    fn gains_decompose_and_reconstruct() {
        let (sched, comp) = decompose_gains(&base());
        assert_eq!(sched, 900.0 / 7800.0);
        assert_abs_diff_eq!(comp, 0.3384615384615385, epsilon = 1e-15);
        assert_abs_diff_eq!(sched + comp, 0.45384615384615384, epsilon = 1e-15);
        let total = 1.0 - cost_psmas(&base()) / cost_full(6, 1000.0, 300.0);
        assert_abs_diff_eq!(sched + comp, total, epsilon = 1e-12);
    }

    #[test]
    fn scheduling_gain_ignores_alpha() {
        let mut bits = None;
        for alpha in [0.12, 0.2, 0.3, 0.4, 1.0] {
            let p = CostParams::new(6, 1000.0, 300.0, alpha, PI).unwrap();
            let (sched, comp) = decompose_gains(&p);
            match bits {
                None => bits = Some(sched.to_bits()),
                Some(b) => assert_eq!(sched.to_bits(), b),
            }
            if alpha == 1.0 {
                assert_eq!(comp, 0.0);
            }
        }
    }

    #[test]
    fn gains_of_empty_system_are_zero() {
        let p = CostParams::new(0, 1000.0, 300.0, 0.12, PI).unwrap();
        assert_eq!(decompose_gains(&p), (0.0, 0.0));
    }

    #[test]
    fn optimal_epsilon_saturates_for_weak_quality_pressure() {
        let e = optimal_epsilon(0.95, 0.04, 0.12, 50000.0).unwrap();
        assert_abs_diff_eq!(e, 6.28319, epsilon = 1e-4);
        assert_abs_diff_eq!(e, 6.283190733571583, epsilon = 1e-12);
        // nowhere near half a radian; the window saturates at a full turn
        assert!((e - 0.52).abs() > 5.0);
    }

    #[test]
    fn optimal_epsilon_edge_cases() {
        assert_eq!(optimal_epsilon(0.95, 0.0, 0.12, 50000.0).unwrap(), TAU);
        // pressure at exactly half the compressible mass doubles the turn
        let e = optimal_epsilon(0.5, 0.88 * 100.0, 0.12, 100.0).unwrap();
        assert_abs_diff_eq!(e, 2.0 * TAU, epsilon = 1e-9);
        assert_eq!(optimal_epsilon(0.95, 0.04, 1.0, 50000.0), Err(CostError::DegenerateDenominator));
        assert_eq!(optimal_epsilon(1.0, 2.0, 0.5, 1.0), Err(CostError::DegenerateDenominator));
    }

    #[test]
    fn quality_bound_values() {
        let eps = 0.3 * PI;
        assert_abs_diff_eq!(quality_bound(0.028, eps, 0.12).unwrap(), 0.020944, epsilon = 1e-6);
        assert_abs_diff_eq!(quality_bound(0.028, eps, 0.12).unwrap(), 0.0209, epsilon = 5e-4);
        assert_eq!(quality_bound(0.028, TAU, 0.12).unwrap(), 0.0);
        assert_eq!(quality_bound(0.028, eps, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn violation_probability_values() {
        assert_eq!(violation_probability_bound(0.0, 1.0).unwrap(), 0.5);
        assert_abs_diff_eq!(violation_probability_bound(0.98, 1.0).unwrap(), 0.16354, epsilon = 1e-4);
        assert_abs_diff_eq!(
            violation_probability_bound(0.98, 1.0).unwrap(),
            0.1635430593276923,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(violation_probability_bound(0.83, 1.0).unwrap(), 0.20327, epsilon = 1e-4);
        assert_abs_diff_eq!(
            violation_probability_bound(1.96, 2.0).unwrap(),
            violation_probability_bound(0.98, 1.0).unwrap()
        );
        assert_eq!(violation_probability_bound(0.5, 0.0), Err(CostError::NonPositiveSigma));
        assert_eq!(violation_probability_bound(0.5, -1.0), Err(CostError::NonPositiveSigma));
    }

    #[test]
    fn expected_violation_counts() {
        assert_abs_diff_eq!(expected_violations(0.003, 10, 5), 0.15, epsilon = 1e-12);
        assert_eq!(expected_violations(0.0, 10, 5), 0.0);
        assert_abs_diff_eq!(expected_violations(0.2033, 4, 3), 2.4396, epsilon = 1e-12);
    }

    #[test]
    fn regime_examples() {
        use RegimeLabel::*;
        assert_eq!(classify_regime(0.6, 0.5).unwrap(), Efficient);
        assert_eq!(classify_regime(1.0, 0.95).unwrap(), VelocityFailure);
        assert_eq!(classify_regime(0.2, 0.5).unwrap(), OverCompressed);
    }

    #[test]
    fn regime_rule_order_and_boundaries() {
        use RegimeLabel::*;
        // velocity failure wins over everything else
        assert_eq!(classify_regime(0.2, 0.95).unwrap(), VelocityFailure);
        assert_eq!(classify_regime(2.0, 1.5).unwrap(), VelocityFailure);
        assert_eq!(classify_regime(1.6, 0.5).unwrap(), OverActivated);
        // the band between 0.9 and 1.5 and the 0.88..0.9 velocity strip
        assert_eq!(classify_regime(1.2, 0.5).unwrap(), OverActivated);
        assert_eq!(classify_regime(0.6, 0.89).unwrap(), OverActivated);
        // inclusive efficient corners
        assert_eq!(classify_regime(0.9, 0.88).unwrap(), Efficient);
        assert_eq!(classify_regime(0.3, 0.0).unwrap(), Efficient);
        for (e, w) in [(0.0, 0.5), (2.3, 0.5), (0.5, -0.1), (f64::NAN, 0.5), (0.5, f64::NAN)] {
            assert!(classify_regime(e, w).is_err());
        }
    }

    #[test]
    fn convergence_factor_values() {
        assert_eq!(convergence_factor(0.3 * PI, 0.12).unwrap(), 0.868);
        assert_abs_diff_eq!(convergence_factor(TAU, 1e-9).unwrap(), 1e-9, epsilon = 1e-18);
        for eps in [0.3 * PI, 1.0, PI, TAU] {
            assert_abs_diff_eq!(convergence_factor(eps, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn params_validation() {
        assert!(CostParams::new(6, -1.0, 300.0, 0.12, PI).is_err());
        assert!(CostParams::new(6, 1000.0, -1.0, 0.12, PI).is_err());
        assert!(CostParams::new(6, 1000.0, 300.0, 0.0, PI).is_err());
        assert!(CostParams::new(6, 1000.0, 300.0, 1.1, PI).is_err());
        assert!(CostParams::new(6, 1000.0, 300.0, 0.12, 0.0).is_err());
        assert!(CostParams::new(6, 1000.0, 300.0, 0.12, TAU + 0.2).is_err());
        assert!(base().with_quality(0.0, 0.04, 0.028, 1000.0).is_err());
        assert!(base().with_quality(0.95, -0.1, 0.028, 1000.0).is_err());
        let p = base().with_quality(0.9, 0.05, 0.03, 40000.0).unwrap();
        assert_eq!(p.q_min(), 0.9);
        assert_eq!(p.l_bar(), 40000.0);
        // defaults
        let p = base();
        assert_eq!((p.q_min(), p.delta_q(), p.c_q(), p.l_bar()), (0.95, 0.04, 0.028, 1000.0));
    }

    #[test]
    fn cost_report_serializes_with_nulls() {
        let report = CostReport {
            rho: 0.44,
            f: 0.5,
            cost_full: 7800.0,
            cost_psmas: 4260.0,
            scheduling_gain: 900.0 / 7800.0,
            compression_gain: 0.3384615384615385,
            epsilon_star: None,
            quality_bound: 0.020944,
            regime: None,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains(r#""epsilon_star":null"#));
        assert!(json.contains(r#""regime":null"#));
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
