//! Small planar plants with known safe behaviour.

use serde::{Deserialize, Serialize};

use crate::hybrid::{FnSystem, InputBox};

/// Single integrator `ż = u` on `R^dim` with `‖u‖_∞ ≤ u_max` and constant
/// flow uncertainty `Δ_c`. No jumps.
pub fn integrator(dim: usize, u_max: f64, delta_c: f64) -> FnSystem {
    FnSystem::new(dim, dim, |_, _, u| u.to_vec())
        .with_flow_error(move |_, _, _| delta_c)
        .with_input_boxes(InputBox::symmetric(dim, u_max), InputBox::empty())
}

/// A planar rotor `ż = u` that receives a fixed angular kick each time it
/// crosses the positive horizontal half-axis from below.
///
/// The guard `max(−z₂, −z₁)` fires on the crossing; the jump set is the
/// thin strip `{z₁ > 0, 0 ≤ z₂ ≤ tol}` and the jump map rotates by `kick`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KickedRotor {
    pub omega: f64,
    pub kick: f64,
    pub u_max: f64,
    pub delta_c: f64,
    pub delta_d: f64,
}

impl Default for KickedRotor {
    fn default() -> Self {
        Self { omega: 1.0, kick: 0.1, u_max: 1.0, delta_c: 0.05, delta_d: 0.001 }
    }
}

/// Width of the rotor's jump strip.
pub const ROTOR_JUMP_TOLERANCE: f64 = 1e-6;

impl KickedRotor {
    pub fn system(&self) -> FnSystem {
        let (c, s) = (self.kick.cos(), self.kick.sin());
        let (dc, dd) = (self.delta_c, self.delta_d);
        FnSystem::new(2, 2, |_, _, u| u.to_vec())
            .with_jump_set(|z| z[0] > 0.0 && (0.0..=ROTOR_JUMP_TOLERANCE).contains(&z[1]))
            .with_guard(|z| (-z[1]).max(-z[0]))
            .with_jump_map(0, move |z, _, _| vec![c * z[0] - s * z[1], s * z[0] + c * z[1]])
            .with_flow_error(move |_, _, _| dc)
            .with_jump_error(move |_, _, _| dd)
            .with_input_boxes(InputBox::symmetric(2, self.u_max), InputBox::empty())
    }

    /// Counter-clockwise rotation at rate `omega`, clipped to the box.
    pub fn expert(&self, z: &[f64]) -> Vec<f64> {
        InputBox::symmetric(2, self.u_max).clip(&[-self.omega * z[1], self.omega * z[0]])
    }

    /// Initial conditions on the positive vertical half-axis.
    pub fn initial_conditions(&self, radii: &[f64]) -> Vec<Vec<f64>> {
        radii.iter().map(|r| vec![0.0, *r]).collect()
    }
}
