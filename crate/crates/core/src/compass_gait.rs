//! Compass-gait biped on a downhill ramp.
//!
//! State `z = [θ_st, θ_sw, θ̇_st, θ̇_sw]`, both angles measured from the world
//! vertical, positive when the leg leans forward (downhill, `+x`). The stance
//! foot is the origin; the hip sits at `ℓ(sin θ_st, cos θ_st)` and the swing
//! foot at `hip − ℓ(sin θ_sw, cos θ_sw)`. Each leg is a point mass `m` at
//! distance `a` from its foot (`b` from the hip); the hip is a point mass `m_H`.
//!
//! Swing dynamics `M(q) q̈ + C(q, q̇) q̇ + G(q) = S u` with `u = [τ_ankle, τ_hip]`:
//!
//! ```text
//! M = [ (m_H + m)ℓ² + m a²    −m ℓ b cos(θ_st − θ_sw) ]
//!     [ −m ℓ b cos(θ_st − θ_sw)    m b²              ]
//!
//! C = [ 0                              −m ℓ b sin(θ_st − θ_sw) θ̇_sw ]
//!     [ m ℓ b sin(θ_st − θ_sw) θ̇_st     0                           ]
//!
//! G = [ −g (m_H ℓ + m(a + ℓ)) sin θ_st ,  m b g sin θ_sw ]ᵀ
//!
//! S = [ 1  −1 ]
//!     [ 0   1 ]
//! ```
//!
//! At touchdown the velocities map through `Q⁺ ω⁺ = Q⁻ ω⁻` (angular momentum
//! of the whole walker about the new contact point and of the trailing leg
//! about the hip), with `c = cos(θ_st − θ_sw)`:
//!
//! ```text
//! Q⁻ = [ m a b − (m_H ℓ² + 2 m a ℓ) c    m a b ]
//!      [ m a b                            0     ]
//!
//! Q⁺ = [ m b ℓ c − (m a² + m_H ℓ² + m ℓ²)    m b ℓ c − m b² ]
//!      [ m b ℓ c                              −m b²          ]
//! ```
//!
//! after which the legs swap roles.

use serde::{Deserialize, Serialize};

use crate::hybrid::{
    simulate, zero_law, Controls, DisturbancePolicy, FlowOptions, HybridArc, HybridSystem, Horizon, InputBox,
    Termination,
};
use crate::{Error, Result};

/// Physical parameters of the walker and the ramp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkerParams {
    pub m: f64,
    pub m_h: f64,
    pub a: f64,
    pub b: f64,
    pub slope: f64,
    pub gravity: f64,
}

impl Default for WalkerParams {
    fn default() -> Self {
        Self { m: 5.0, m_h: 10.0, a: 0.5, b: 0.5, slope: 0.0525, gravity: 9.81 }
    }
}

impl WalkerParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.m, self.m_h, self.a, self.b, self.gravity];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument("walker masses, lengths and gravity must be > 0".into()));
        }
        if !(self.slope.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!("slope {} outside (-pi/2, pi/2)", self.slope)));
        }
        Ok(())
    }

    pub fn leg_length(&self) -> f64 {
        self.a + self.b
    }

    pub fn with_hip_mass(self, m_h: f64) -> Self {
        Self { m_h, ..self }
    }
}

/// Named view of the walker state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerState {
    pub theta_stance: f64,
    pub theta_swing: f64,
    pub dtheta_stance: f64,
    pub dtheta_swing: f64,
}

impl WalkerState {
    pub fn from_slice(z: &[f64]) -> Result<Self> {
        Error::check_dim(4, z.len())?;
        Ok(Self { theta_stance: z[0], theta_swing: z[1], dtheta_stance: z[2], dtheta_swing: z[3] })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.theta_stance, self.theta_swing, self.dtheta_stance, self.dtheta_swing]
    }
}

type Mat2 = [[f64; 2]; 2];

/// Actuation matrix mapping `[τ_ankle, τ_hip]` to generalised forces.
pub const ACTUATION: Mat2 = [[1.0, -1.0], [0.0, 1.0]];

pub fn mass_matrix(p: &WalkerParams, z: &[f64]) -> Mat2 {
    let l = p.leg_length();
    let off = -p.m * l * p.b * (z[0] - z[1]).cos();
    [[(p.m_h + p.m) * l * l + p.m * p.a * p.a, off], [off, p.m * p.b * p.b]]
}

pub fn coriolis(p: &WalkerParams, z: &[f64]) -> Mat2 {
    let k = p.m * p.leg_length() * p.b * (z[0] - z[1]).sin();
    [[0.0, -k * z[3]], [k * z[2], 0.0]]
}

pub fn gravity(p: &WalkerParams, z: &[f64]) -> [f64; 2] {
    let l = p.leg_length();
    [-p.gravity * (p.m_h * l + p.m * (p.a + l)) * z[0].sin(), p.m * p.b * p.gravity * z[1].sin()]
}

fn solve2(m: &Mat2, r: [f64; 2]) -> Result<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det.abs() >= 1e-12) {
        return Err(Error::NumericalDivergence(format!("singular 2x2 system (det = {det:e})")));
    }
    Ok([(m[1][1] * r[0] - m[0][1] * r[1]) / det, (m[0][0] * r[1] - m[1][0] * r[0]) / det])
}

fn mul2(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Swing-phase vector field `ż = [q̇, M⁻¹(S u − C q̇ − G)]`.
pub fn walker_flow(p: &WalkerParams, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(4, z.len())?;
    Error::check_dim(2, u.len())?;
    let qd = [z[2], z[3]];
    let cq = mul2(&coriolis(p, z), qd);
    let g = gravity(p, z);
    let su = mul2(&ACTUATION, [u[0], u[1]]);
    let acc = solve2(&mass_matrix(p, z), [su[0] - cq[0] - g[0], su[1] - cq[1] - g[1]])?;
    Ok(vec![z[2], z[3], acc[0], acc[1]])
}

/// Height of the swing foot above the ramp surface.
pub fn touchdown_guard(p: &WalkerParams, z: &[f64]) -> f64 {
    p.leg_length() * ((z[0] - p.slope).cos() - (z[1] - p.slope).cos())
}

/// Inter-leg angle below which a zero foot height is attributed to the legs
/// passing each other rather than a touchdown.
pub const SCISSOR_THRESHOLD: f64 = 0.01;

/// Event function for touchdown: foot height, masked while the swing leg is
/// not at least [`SCISSOR_THRESHOLD`] ahead of the stance leg.
pub fn impact_event(p: &WalkerParams, z: &[f64]) -> f64 {
    touchdown_guard(p, z).max(p.leg_length() * (z[1] - z[0] + SCISSOR_THRESHOLD))
}

/// Hip height above the ramp surface.
pub fn hip_height(p: &WalkerParams, z: &[f64]) -> f64 {
    p.leg_length() * (z[0] - p.slope).cos()
}

/// Fall: a leg beyond horizontal or the hip below 30% of the leg length.
pub fn has_fallen(p: &WalkerParams, z: &[f64]) -> bool {
    use std::f64::consts::FRAC_PI_2;
    z[0].abs() > FRAC_PI_2 || z[1].abs() > FRAC_PI_2 || hip_height(p, z) < 0.3 * p.leg_length()
}

/// Swaps stance and swing labels.
pub fn relabel(z: &[f64]) -> Vec<f64> {
    vec![z[1], z[0], z[3], z[2]]
}

/// Plastic touchdown followed by relabelling.
pub fn impact_map(p: &WalkerParams, z: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(4, z.len())?;
    let l = p.leg_length();
    let (m, m_h, a, b) = (p.m, p.m_h, p.a, p.b);
    let c = (z[0] - z[1]).cos();
    let q_minus = [[m * a * b - (m_h * l * l + 2.0 * m * a * l) * c, m * a * b], [m * a * b, 0.0]];
    let q_plus = [[m * b * l * c - (m * a * a + m_h * l * l + m * l * l), m * b * l * c - m * b * b], [m * b * l * c, -m * b * b]];
    let w = solve2(&q_plus, mul2(&q_minus, [z[2], z[3]]))?;
    Ok(vec![z[1], z[0], w[0], w[1]])
}

pub fn kinetic_energy(p: &WalkerParams, z: &[f64]) -> f64 {
    let qd = [z[2], z[3]];
    let mq = mul2(&mass_matrix(p, z), qd);
    0.5 * (qd[0] * mq[0] + qd[1] * mq[1])
}

/// Potential energy relative to the stance foot.
pub fn potential_energy(p: &WalkerParams, z: &[f64]) -> f64 {
    let l = p.leg_length();
    p.gravity * ((p.m * p.a + p.m_h * l + p.m * l) * z[0].cos() - p.m * p.b * z[1].cos())
}

pub fn total_energy(p: &WalkerParams, z: &[f64]) -> f64 {
    kinetic_energy(p, z) + potential_energy(p, z)
}

/// Energy-shaping expert `u = clip(−k_E (E − E_ref) Sᵀ q̇)`, which makes
/// `Ė = −k_E (E − E_ref) ‖Sᵀ q̇‖²` before clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyController {
    pub params: WalkerParams,
    pub e_ref: f64,
    pub gain: f64,
    pub input_box: InputBox,
}

impl EnergyController {
    pub fn control(&self, z: &[f64]) -> Vec<f64> {
        energy_expert(&self.params, z, self.e_ref, self.gain, &self.input_box)
    }
}

pub fn energy_expert(p: &WalkerParams, z: &[f64], e_ref: f64, gain: f64, input_box: &InputBox) -> Vec<f64> {
    let k = -gain * (total_energy(p, z) - e_ref);
    let w = [z[2], z[3] - z[2]];
    input_box.clip(&[k * w[0], k * w[1]])
}

/// The paper's limit-cycle initial condition `[0, 0, 0.4, −2.0]`.
pub const LIMIT_CYCLE_IC: [f64; 4] = [0.0, 0.0, 0.4, -2.0];

/// Initial conditions with the stance leg at `(0, 0.4)` and the swing leg on an
/// `n_grid × n_grid` grid centred at `(0, −2.0)`, rows ordered by `θ_sw`.
pub fn paper_initial_conditions(n_grid: usize, halfwidth: (f64, f64)) -> Result<Vec<Vec<f64>>> {
    if n_grid == 0 {
        return Err(Error::InvalidArgument("n_grid must be >= 1".into()));
    }
    let axis = |center: f64, hw: f64| -> Vec<f64> {
        if n_grid == 1 {
            return vec![center];
        }
        (0..n_grid).map(|i| center - hw + 2.0 * hw * i as f64 / (n_grid - 1) as f64).collect()
    };
    let thetas = axis(LIMIT_CYCLE_IC[1], halfwidth.0);
    let rates = axis(LIMIT_CYCLE_IC[3], halfwidth.1);
    Ok(thetas
        .iter()
        .flat_map(|th| rates.iter().map(move |rate| vec![LIMIT_CYCLE_IC[0], *th, LIMIT_CYCLE_IC[2], *rate]))
        .collect())
}

/// Impacts before termination, capped at `max_steps`.
pub fn count_steps(arc: &HybridArc, max_steps: usize) -> usize {
    arc.jump_count().min(max_steps)
}

/// Tolerance on the event function for membership in the jump set.
pub const JUMP_TOLERANCE: f64 = 1e-6;

/// The walker as an uncertain hybrid system. The estimate uses `est`; when
/// `truth` is set it drives simulation instead.
#[derive(Debug, Clone)]
pub struct CompassGait {
    pub est: WalkerParams,
    pub truth: Option<WalkerParams>,
    pub delta_c: f64,
    box_c: InputBox,
    box_d: InputBox,
}

impl CompassGait {
    pub fn new(est: WalkerParams, delta_c: f64, input_box: InputBox) -> Result<Self> {
        est.validate()?;
        Error::check_dim(2, input_box.dim())?;
        if !(delta_c >= 0.0) {
            return Err(Error::InvalidArgument(format!("delta_c must be >= 0, got {delta_c}")));
        }
        Ok(Self { est, truth: None, delta_c, box_c: input_box, box_d: InputBox::empty() })
    }

    pub fn with_truth(mut self, truth: WalkerParams) -> Result<Self> {
        truth.validate()?;
        self.truth = Some(truth);
        Ok(self)
    }

    fn params_for_sim(&self) -> &WalkerParams {
        self.truth.as_ref().unwrap_or(&self.est)
    }
}

fn nan4() -> Vec<f64> {
    vec![f64::NAN; 4]
}

impl HybridSystem for CompassGait {
    fn state_dim(&self) -> usize {
        4
    }
    fn flow_input_dim(&self) -> usize {
        2
    }
    fn in_flow_set(&self, z: &[f64]) -> bool {
        !has_fallen(self.params_for_sim(), z)
    }
    fn in_jump_set(&self, z: &[f64]) -> bool {
        let p = self.params_for_sim();
        !has_fallen(p, z) && impact_event(p, z) <= JUMP_TOLERANCE
    }
    fn guard(&self, z: &[f64]) -> f64 {
        impact_event(self.params_for_sim(), z)
    }
    fn est_flow(&self, z: &[f64], _t: f64, u: &[f64]) -> Vec<f64> {
        walker_flow(&self.est, z, u).unwrap_or_else(|_| nan4())
    }
    fn est_jump(&self, z: &[f64], _t: f64, _u: &[f64]) -> Vec<f64> {
        impact_map(&self.est, z).unwrap_or_else(|_| nan4())
    }
    fn err_flow(&self, _z: &[f64], _t: f64, _u: &[f64]) -> f64 {
        self.delta_c
    }
    fn err_jump(&self, _z: &[f64], _t: f64, _u: &[f64]) -> f64 {
        0.0
    }
    fn input_box_c(&self) -> &InputBox {
        &self.box_c
    }
    fn input_box_d(&self) -> &InputBox {
        &self.box_d
    }
    fn truth_flow(&self, z: &[f64], _t: f64, u: &[f64]) -> Option<Vec<f64>> {
        self.truth.map(|p| walker_flow(&p, z, u).unwrap_or_else(|_| nan4()))
    }
    fn truth_jump(&self, z: &[f64], _t: f64, _u: &[f64]) -> Option<Vec<f64>> {
        self.truth.map(|p| impact_map(&p, z).unwrap_or_else(|_| nan4()))
    }
    fn is_failure(&self, z: &[f64]) -> bool {
        has_fallen(self.params_for_sim(), z)
    }
}

/// Simulates the unactuated walker without disturbances.
pub fn passive_arc(p: &WalkerParams, z0: &[f64], horizon: Horizon, opts: &FlowOptions) -> Result<HybridArc> {
    let sys = CompassGait::new(*p, 0.0, InputBox::symmetric(2, 0.0))?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    simulate(
        &sys,
        z0,
        Controls { flow: &mut zero_law(2), jump: &mut zero_law(0) },
        &DisturbancePolicy::nominal(),
        horizon,
        opts,
        &mut rng,
    )
}

/// Mean mechanical energy over one step of the passive limit cycle reached
/// from [`LIMIT_CYCLE_IC`], averaged by the trapezoid rule.
pub fn passive_reference_energy(p: &WalkerParams, opts: &FlowOptions) -> Result<f64> {
    let settle = 30;
    let arc = passive_arc(p, &LIMIT_CYCLE_IC, Horizon { t_max: 60.0, max_jumps: settle + 1 }, opts)?;
    if arc.jump_count() < settle || arc.termination == Termination::Fell {
        return Err(Error::Precondition(format!(
            "passive walker does not settle on a limit cycle ({} steps, {:?})",
            arc.jump_count(),
            arc.termination
        )));
    }
    let seg = &arc.segments[settle];
    let (times, states) = (&seg.times, &seg.states);
    let span = times.last().unwrap() - times[0];
    if !(span > 0.0) {
        return Err(Error::Precondition("degenerate limit-cycle step".into()));
    }
    let energy: Vec<f64> = states.iter().map(|z| total_energy(p, z)).collect();
    let integral: f64 = times.windows(2).zip(energy.windows(2)).map(|(t, e)| 0.5 * (t[1] - t[0]) * (e[0] + e[1])).sum();
    Ok(integral / span)
}
