//! Proportional-integral sweep velocity controller.

use serde::{Deserialize, Serialize};

/// Lowest sweep velocity the controller will command, in rad/s.
pub const OMEGA_FLOOR: f64 = 1e-9;

/// Controller state carried across cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiState {
    pub omega: f64,
    pub integral: f64,
    pub kp: f64,
    pub ki: f64,
}

/// One controller update. The error signal is the fractional overrun of the
/// observed latency against the design latency `t_max`; positive error slows
/// the sweep down. The commanded velocity never drops below [`OMEGA_FLOOR`].
///
/// A non-positive or non-finite `t_max`, or a non-finite observation, leaves
/// the state unchanged.
pub fn pi_controller_step(state: &PiState, observed_latency_s: f64, t_max: f64) -> PiState {
    if !(t_max > 0.0) || !t_max.is_finite() || !observed_latency_s.is_finite() {
        return *state;
    }
    let error = observed_latency_s / t_max - 1.0;
    let integral = state.integral + error;
    let omega = (state.omega - (state.kp * error + state.ki * integral)).max(OMEGA_FLOOR);
    PiState { omega, integral, ..*state }
}
