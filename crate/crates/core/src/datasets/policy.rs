//! Handcrafted desired-control policies for two cars changing lanes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesiredPolicyParams {
    pub zeta: f64,
    pub beta: f64,
    pub alpha: f64,
    pub kappa: f64,
}

impl Default for DesiredPolicyParams {
    fn default() -> Self {
        Self {
            zeta: 4.7,
            beta: 0.022,
            alpha: 0.8,
            kappa: 2.0,
        }
    }
}

impl DesiredPolicyParams {
    pub fn is_finite(&self) -> bool {
        [self.zeta, self.beta, self.alpha, self.kappa]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Steering toward `target_lat`, sharper the further the car has travelled:
/// `−(x_lon + ζ)·β·tanh(α(x_lat − target_lat))`.
pub fn desired_lateral_control(
    x_lon: f64,
    x_lat: f64,
    target_lat: f64,
    params: &DesiredPolicyParams,
) -> f64 {
    -(x_lon + params.zeta) * params.beta * (params.alpha * (x_lat - target_lat)).tanh()
}

/// Longitudinal acceleration given the other car's position and speed
/// relative to this one: hold speed when behind, speed up when ahead.
pub fn desired_longitudinal_control(r_lon: f64, r_lon_rate: f64, params: &DesiredPolicyParams) -> f64 {
    if r_lon > 0.0 {
        0.0
    } else {
        -(params.kappa / 2.0) * ((r_lon * r_lon_rate).tanh() - 1.0)
    }
}
