//! Hybrid control systems with bounded model uncertainty.
//!
//! A system flows on `C` according to `ż = W_c(z, t, u_c)` and jumps on `D`
//! according to `z⁺ = W_d(z, t, u_d)`. Only estimates `Ŵ_c`, `Ŵ_d` and error
//! bounds `Δ_c`, `Δ_d` are assumed known; any dynamics within the Euclidean
//! ball of radius `Δ` around the estimate is admissible.
//!
//! Flows are integrated with classical fixed-step RK4. A scalar guard `g(z)`
//! marks entry into `D`: a step on which `g` goes from positive to
//! non-positive is refined by bisection until `|g| ≤ guard_tol`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{norm, Error, Result};

/// Hybrid time `(t, j)`: continuous time and jump count.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HybridTime {
    pub t: f64,
    pub j: usize,
}

impl HybridTime {
    pub fn new(t: f64, j: usize) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("hybrid time t={t} must be >= 0")));
        }
        Ok(Self { t, j })
    }

    /// Lexicographic order on `(t, j)`.
    pub fn precedes_or_eq(&self, other: &HybridTime) -> bool {
        self.t < other.t || (self.t == other.t && self.j <= other.j)
    }
}

/// A state tagged with its hybrid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub z: Vec<f64>,
    pub time: HybridTime,
}

/// Per-coordinate input bounds `lower ≤ u ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Error::check_dim(lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("input box requires lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-bound, bound]^dim`.
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self { lower: vec![-bound; dim], upper: vec![bound; dim] }
    }

    /// The empty box for unactuated jumps.
    pub fn empty() -> Self {
        Self { lower: Vec::new(), upper: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, h))| *x >= *l && *x <= *h)
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (l, h))| x.clamp(*l, *h))
            .collect()
    }
}

/// A time-varying hybrid control system with uncertainty bounds.
///
/// Flow estimates must be affine in the input (`Ŵ_c = F̂_c + Ĝ_c u`);
/// [`flow_affine`](HybridSystem::flow_affine) relies on it.
pub trait HybridSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn flow_input_dim(&self) -> usize;
    fn jump_input_dim(&self) -> usize {
        0
    }

    fn in_flow_set(&self, z: &[f64]) -> bool;
    fn in_jump_set(&self, z: &[f64]) -> bool;

    /// Event function whose positive-to-non-positive crossing during flow
    /// signals entry into the jump set. `+∞` means no guard.
    fn guard(&self, _z: &[f64]) -> f64 {
        f64::INFINITY
    }

    fn est_flow(&self, z: &[f64], t: f64, u: &[f64]) -> Vec<f64>;
    fn est_jump(&self, z: &[f64], t: f64, u: &[f64]) -> Vec<f64>;
    fn err_flow(&self, z: &[f64], t: f64, u: &[f64]) -> f64;
    fn err_jump(&self, z: &[f64], t: f64, u: &[f64]) -> f64;

    fn input_box_c(&self) -> &InputBox;
    fn input_box_d(&self) -> &InputBox;

    /// Ground-truth flow used for simulation, if known.
    fn truth_flow(&self, _z: &[f64], _t: f64, _u: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn truth_jump(&self, _z: &[f64], _t: f64, _u: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Whether `Δ_c` varies with `u_c`. Runtime filtering requires `false`.
    fn flow_error_depends_on_input(&self) -> bool {
        false
    }

    fn is_time_invariant(&self) -> bool {
        true
    }

    /// Plant-specific failure classification for states outside `C ∪ D`.
    fn is_failure(&self, _z: &[f64]) -> bool {
        false
    }

    /// Drift `F̂_c(z,t)` and input columns of `Ĝ_c(z,t)`.
    fn flow_affine(&self, z: &[f64], t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let m = self.flow_input_dim();
        let zero = vec![0.0; m];
        let drift = self.est_flow(z, t, &zero);
        let cols = (0..m)
            .map(|k| {
                let mut e = zero.clone();
                e[k] = 1.0;
                self.est_flow(z, t, &e).iter().zip(&drift).map(|(a, b)| a - b).collect()
            })
            .collect();
        (drift, cols)
    }
}

type SetFn = Box<dyn Fn(&[f64]) -> bool + Send + Sync>;
type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type DynFn = Box<dyn Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync>;
type BoundFn = Box<dyn Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync>;

/// A [`HybridSystem`] assembled from closures. Useful for small analytic plants.
pub struct FnSystem {
    n_z: usize,
    m_c: usize,
    m_d: usize,
    flow_set: SetFn,
    jump_set: SetFn,
    guard: Option<ScalarFn>,
    est_flow: DynFn,
    est_jump: DynFn,
    err_flow: BoundFn,
    err_jump: BoundFn,
    box_c: InputBox,
    box_d: InputBox,
    truth_flow: Option<DynFn>,
    truth_jump: Option<DynFn>,
    time_invariant: bool,
    err_flow_input_dependent: bool,
}

impl FnSystem {
    /// A flow-only system on all of `R^n_z` with `ż = est_flow(z, t, u)`, no
    /// jumps, zero error bounds, and an unbounded input box.
    pub fn new(
        n_z: usize,
        m_c: usize,
        est_flow: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_z,
            m_c,
            m_d: 0,
            flow_set: Box::new(|_| true),
            jump_set: Box::new(|_| false),
            guard: None,
            est_flow: Box::new(est_flow),
            est_jump: Box::new(|z, _, _| z.to_vec()),
            err_flow: Box::new(|_, _, _| 0.0),
            err_jump: Box::new(|_, _, _| 0.0),
            box_c: InputBox::symmetric(m_c, f64::INFINITY),
            box_d: InputBox::empty(),
            truth_flow: None,
            truth_jump: None,
            time_invariant: true,
            err_flow_input_dependent: false,
        }
    }

    pub fn with_flow_set(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.flow_set = Box::new(f);
        self
    }

    pub fn with_jump_set(mut self, f: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.jump_set = Box::new(f);
        self
    }

    pub fn with_guard(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.guard = Some(Box::new(f));
        self
    }

    pub fn with_jump_map(
        mut self,
        m_d: usize,
        f: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.m_d = m_d;
        if self.box_d.dim() != m_d {
            self.box_d = InputBox::symmetric(m_d, f64::INFINITY);
        }
        self.est_jump = Box::new(f);
        self
    }

    pub fn with_flow_error(mut self, f: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.err_flow = Box::new(f);
        self
    }

    /// Marks the flow error bound as input dependent.
    pub fn input_dependent_flow_error(
        mut self,
        f: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.err_flow = Box::new(f);
        self.err_flow_input_dependent = true;
        self
    }

    pub fn with_jump_error(mut self, f: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.err_jump = Box::new(f);
        self
    }

    pub fn with_input_boxes(mut self, box_c: InputBox, box_d: InputBox) -> Self {
        self.box_c = box_c;
        self.box_d = box_d;
        self
    }

    pub fn with_truth_flow(mut self, f: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.truth_flow = Some(Box::new(f));
        self
    }

    pub fn with_truth_jump(mut self, f: impl Fn(&[f64], f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.truth_jump = Some(Box::new(f));
        self
    }

    pub fn time_varying(mut self) -> Self {
        self.time_invariant = false;
        self
    }
}

impl HybridSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n_z
    }
    fn flow_input_dim(&self) -> usize {
        self.m_c
    }
    fn jump_input_dim(&self) -> usize {
        self.m_d
    }
    fn in_flow_set(&self, z: &[f64]) -> bool {
        (self.flow_set)(z)
    }
    fn in_jump_set(&self, z: &[f64]) -> bool {
        (self.jump_set)(z)
    }
    fn guard(&self, z: &[f64]) -> f64 {
        self.guard.as_ref().map_or(f64::INFINITY, |g| g(z))
    }
    fn est_flow(&self, z: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        (self.est_flow)(z, t, u)
    }
    fn est_jump(&self, z: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        (self.est_jump)(z, t, u)
    }
    fn err_flow(&self, z: &[f64], t: f64, u: &[f64]) -> f64 {
        (self.err_flow)(z, t, u)
    }
    fn err_jump(&self, z: &[f64], t: f64, u: &[f64]) -> f64 {
        (self.err_jump)(z, t, u)
    }
    fn input_box_c(&self) -> &InputBox {
        &self.box_c
    }
    fn input_box_d(&self) -> &InputBox {
        &self.box_d
    }
    fn truth_flow(&self, z: &[f64], t: f64, u: &[f64]) -> Option<Vec<f64>> {
        self.truth_flow.as_ref().map(|f| f(z, t, u))
    }
    fn truth_jump(&self, z: &[f64], t: f64, u: &[f64]) -> Option<Vec<f64>> {
        self.truth_jump.as_ref().map(|f| f(z, t, u))
    }
    fn flow_error_depends_on_input(&self) -> bool {
        self.err_flow_input_dependent
    }
    fn is_time_invariant(&self) -> bool {
        self.time_invariant
    }
}

/// Checks `‖truth − estimate‖ ≤ Δ` at one point. Returns the excess (≤ 0 when
/// the truth is admissible), or `None` when no truth model is present.
pub fn truth_excess<S: HybridSystem + ?Sized>(sys: &S, z: &[f64], t: f64, u: &[f64], which: Mode) -> Option<f64> {
    let (truth, est, bound) = match which {
        Mode::Flow => (sys.truth_flow(z, t, u)?, sys.est_flow(z, t, u), sys.err_flow(z, t, u)),
        Mode::Jump => (sys.truth_jump(z, t, u)?, sys.est_jump(z, t, u), sys.err_jump(z, t, u)),
    };
    Some(crate::dist(&truth, &est) - bound)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Flow,
    Jump,
}

/// Radius used by a disturbance realisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    /// The system's own error bound `Δ(z, t, u)`.
    ErrorBound,
    Fixed(f64),
}

/// Gradient of a barrier, used to aim worst-case disturbances.
pub type BarrierGradient = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// How the realised dynamics deviate from the base model.
#[derive(Clone, Default)]
pub enum Disturbance {
    /// No deviation.
    #[default]
    Nominal,
    /// Uniform over the closed ball, re-drawn once per integrator step.
    Uniform(Radius),
    /// On the ball surface, opposing the barrier gradient at the current state.
    WorstCase(Radius, BarrierGradient),
}

impl fmt::Debug for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Disturbance::Nominal => write!(f, "Nominal"),
            Disturbance::Uniform(r) => write!(f, "Uniform({r:?})"),
            Disturbance::WorstCase(r, _) => write!(f, "WorstCase({r:?})"),
        }
    }
}

/// Disturbances applied during flows and at jumps.
#[derive(Debug, Clone, Default)]
pub struct DisturbancePolicy {
    pub flow: Disturbance,
    pub jump: Disturbance,
}

impl DisturbancePolicy {
    pub fn nominal() -> Self {
        Self::default()
    }

    pub fn uniform_flow(radius: f64) -> Self {
        Self { flow: Disturbance::Uniform(Radius::Fixed(radius)), jump: Disturbance::Nominal }
    }
}

/// Uniform sample from the closed Euclidean ball of radius `r` in `R^n`.
pub fn sample_ball<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Vec<f64> {
    if n == 0 || r <= 0.0 {
        return vec![0.0; n];
    }
    let dir = sample_sphere(n, rng);
    let u: f64 = Uniform::new_inclusive(0.0, 1.0).unwrap().sample(rng);
    let rho = r * u.powf(1.0 / n as f64);
    dir.into_iter().map(|x| x * rho).collect()
}

/// Uniform direction on the unit sphere in `R^n`.
pub fn sample_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let len = norm(&v);
        if len > 1e-12 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Draws a realisation `Ŵ + d` with `‖d‖ ≤ Δ`, uniform over the ball.
pub fn sample_admissible<S: HybridSystem + ?Sized, R: Rng + ?Sized>(
    sys: &S,
    z: &[f64],
    t: f64,
    u: &[f64],
    which: Mode,
    rng: &mut R,
) -> Vec<f64> {
    let (est, delta) = match which {
        Mode::Flow => (sys.est_flow(z, t, u), sys.err_flow(z, t, u)),
        Mode::Jump => (sys.est_jump(z, t, u), sys.err_jump(z, t, u)),
    };
    let d = sample_ball(est.len(), delta.max(0.0), rng);
    est.iter().zip(&d).map(|(a, b)| a + b).collect()
}

fn worst_case_offset(grad: &BarrierGradient, z: &[f64], radius: f64) -> Vec<f64> {
    let g = grad(z);
    let len = norm(&g);
    if len <= 0.0 || radius <= 0.0 {
        return vec![0.0; z.len()];
    }
    g.iter().map(|x| -radius * x / len).collect()
}

/// Integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub step: f64,
    pub guard_tol: f64,
    pub max_bisections: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { step: 1e-3, guard_tol: 1e-8, max_bisections: 200 }
    }
}

/// Why a flow interval ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowExit {
    GuardHit,
    TimeLimit,
    LeftFlowSet,
}

/// Densely sampled states along one flow interval `[t_j, t_{j+1}] × {j}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowSegment {
    pub j: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Input applied at each stored state.
    pub inputs: Vec<Vec<f64>>,
}

impl FlowSegment {
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn last(&self) -> Option<(&f64, &Vec<f64>)> {
        Some((self.times.last()?, self.states.last()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub segment: FlowSegment,
    pub exit: FlowExit,
    /// The first state found outside the flow set, when `exit == LeftFlowSet`.
    pub escaped: Option<Vec<f64>>,
}

/// A control law `(z, t) ↦ u`.
pub trait ControlLaw {
    fn control(&mut self, z: &[f64], t: f64) -> Vec<f64>;
}

impl<F: FnMut(&[f64], f64) -> Vec<f64>> ControlLaw for F {
    fn control(&mut self, z: &[f64], t: f64) -> Vec<f64> {
        self(z, t)
    }
}

struct StepField<'a, S: HybridSystem + ?Sized> {
    sys: &'a S,
    held: Option<Vec<f64>>,
    worst: Option<(&'a BarrierGradient, Radius)>,
}

impl<S: HybridSystem + ?Sized> StepField<'_, S> {
    fn eval(&self, z: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let mut w = self.sys.truth_flow(z, t, u).unwrap_or_else(|| self.sys.est_flow(z, t, u));
        if let Some(d) = &self.held {
            w.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        if let Some((grad, radius)) = self.worst {
            let r = match radius {
                Radius::ErrorBound => self.sys.err_flow(z, t, u),
                Radius::Fixed(r) => r,
            };
            let d = worst_case_offset(grad, z, r);
            w.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        w
    }
}

fn rk4_step<S: HybridSystem + ?Sized, C: ControlLaw + ?Sized>(
    field: &StepField<'_, S>,
    control: &mut C,
    z: &[f64],
    t: f64,
    u0: &[f64],
    h: f64,
) -> Vec<f64> {
    let n = z.len();
    let stage = |control: &mut C, zs: &[f64], ts: f64| {
        let u = control.control(zs, ts);
        field.eval(zs, ts, &u)
    };
    let k1 = field.eval(z, t, u0);
    let z2: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * h * k1[i]).collect();
    let k2 = stage(control, &z2, t + 0.5 * h);
    let z3: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * h * k2[i]).collect();
    let k3 = stage(control, &z3, t + 0.5 * h);
    let z4: Vec<f64> = (0..n).map(|i| z[i] + h * k3[i]).collect();
    let k4 = stage(control, &z4, t + h);
    (0..n).map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Integrates one flow interval starting at `(t0, j)`.
///
/// The control law is evaluated at every RK4 stage. A uniform disturbance is
/// drawn once per step and held over it; a worst-case disturbance is
/// re-aimed at every stage.
#[allow(clippy::too_many_arguments)]
pub fn integrate_flow<S, C, R>(
    sys: &S,
    z0: &[f64],
    t0: f64,
    j: usize,
    control: &mut C,
    disturbance: &Disturbance,
    rng: &mut R,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<FlowOutcome>
where
    S: HybridSystem + ?Sized,
    C: ControlLaw + ?Sized,
    R: Rng + ?Sized,
{
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {}", opts.step)));
    }
    Error::check_dim(sys.state_dim(), z0.len())?;
    let mut segment = FlowSegment { j, ..Default::default() };
    if !sys.in_flow_set(z0) {
        return Ok(FlowOutcome { segment, exit: FlowExit::LeftFlowSet, escaped: Some(z0.to_vec()) });
    }

    let mut z = z0.to_vec();
    let mut t = t0;
    let mut k = 0u64;
    let mut g = sys.guard(&z);
    loop {
        let u = control.control(&z, t);
        segment.times.push(t);
        segment.states.push(z.clone());
        segment.inputs.push(u.clone());

        if t >= t_max {
            return Ok(FlowOutcome { segment, exit: FlowExit::TimeLimit, escaped: None });
        }
        let grid = t0 + (k + 1) as f64 * opts.step;
        let t_next = if grid >= t_max - 1e-12 { t_max } else { grid };
        let h = t_next - t;

        let mut field = StepField { sys, held: None, worst: None };
        match disturbance {
            Disturbance::Nominal => {}
            Disturbance::Uniform(radius) => {
                let r = match radius {
                    Radius::ErrorBound => sys.err_flow(&z, t, &u),
                    Radius::Fixed(r) => *r,
                };
                field.held = Some(sample_ball(z.len(), r.max(0.0), rng));
            }
            Disturbance::WorstCase(radius, grad) => field.worst = Some((grad, *radius)),
        }

        let next = rk4_step(&field, control, &z, t, &u, h);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalDivergence(format!("non-finite state at t={:.6}", t + h)));
        }
        let g_next = sys.guard(&next);
        if g > 0.0 && g_next <= 0.0 {
            // Bisect on the sub-step length; `hi` always keeps g <= 0.
            let (mut lo, mut hi) = (0.0, h);
            let mut z_hi = next;
            let mut g_hi = g_next;
            for _ in 0..opts.max_bisections {
                if g_hi.abs() <= opts.guard_tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let z_mid = rk4_step(&field, control, &z, t, &u, mid);
                let g_mid = sys.guard(&z_mid);
                if g_mid > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                    z_hi = z_mid;
                    g_hi = g_mid;
                }
            }
            let u_e = control.control(&z_hi, t + hi);
            segment.times.push(t + hi);
            segment.states.push(z_hi);
            segment.inputs.push(u_e);
            return Ok(FlowOutcome { segment, exit: FlowExit::GuardHit, escaped: None });
        }
        if !sys.in_flow_set(&next) {
            return Ok(FlowOutcome { segment, exit: FlowExit::LeftFlowSet, escaped: Some(next) });
        }
        z = next;
        t = t_next;
        k += 1;
        g = g_next;
    }
}

/// Applies the (possibly disturbed) jump map at a state in `D`.
pub fn apply_jump<S: HybridSystem + ?Sized, R: Rng + ?Sized>(
    sys: &S,
    z: &[f64],
    t: f64,
    u_d: &[f64],
    disturbance: &Disturbance,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !sys.in_jump_set(z) {
        return Err(Error::ContractViolation(format!("jump requested outside the jump set at t={t}")));
    }
    Error::check_dim(sys.jump_input_dim(), u_d.len())?;
    let mut w = sys.truth_jump(z, t, u_d).unwrap_or_else(|| sys.est_jump(z, t, u_d));
    let offset = match disturbance {
        Disturbance::Nominal => None,
        Disturbance::Uniform(radius) => {
            let r = match radius {
                Radius::ErrorBound => sys.err_jump(z, t, u_d),
                Radius::Fixed(r) => *r,
            };
            Some(sample_ball(w.len(), r.max(0.0), rng))
        }
        Disturbance::WorstCase(radius, grad) => {
            let r = match radius {
                Radius::ErrorBound => sys.err_jump(z, t, u_d),
                Radius::Fixed(r) => *r,
            };
            Some(worst_case_offset(grad, &w, r))
        }
    };
    if let Some(d) = offset {
        w.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalDivergence(format!("non-finite post-jump state at t={t}")));
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub t: f64,
    /// Jump count before the jump.
    pub j: usize,
    pub z_before: Vec<f64>,
    pub z_after: Vec<f64>,
    pub u_d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    HorizonReached,
    LeftDomain,
    ZenoSuspected,
    Fell,
}

/// One interval `[t_start, t_end] × {j}` of a hybrid time domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainInterval {
    pub j: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// A simulated hybrid solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridArc {
    pub segments: Vec<FlowSegment>,
    pub jumps: Vec<JumpRecord>,
    pub termination: Termination,
}

impl HybridArc {
    pub fn domain(&self) -> Vec<DomainInterval> {
        self.segments
            .iter()
            .filter_map(|s| {
                Some(DomainInterval { j: s.j, t_start: *s.times.first()?, t_end: *s.times.last()? })
            })
            .collect()
    }

    pub fn jump_count(&self) -> usize {
        self.jumps.len()
    }

    pub fn final_state(&self) -> Option<HybridState> {
        let seg = self.segments.last()?;
        let (t, z) = seg.last()?;
        Some(HybridState { z: z.clone(), time: HybridTime { t: *t, j: seg.j } })
    }

    /// All stored `(t, j, z)` triples in hybrid-time order.
    pub fn samples(&self) -> impl Iterator<Item = (f64, usize, &[f64])> + '_ {
        self.segments
            .iter()
            .flat_map(|s| s.times.iter().zip(&s.states).map(move |(t, z)| (*t, s.j, z.as_slice())))
    }

    /// Writes `t, j, z_1..z_n, u_1..u_m, segment_id` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n_z = self.samples().next().map_or(0, |(_, _, z)| z.len());
        let m = self.segments.iter().flat_map(|s| s.inputs.first()).map(Vec::len).next().unwrap_or(0);
        let mut header = vec!["t".to_string(), "j".to_string()];
        header.extend((1..=n_z).map(|i| format!("z_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("segment_id".into());
        writeln!(out, "{}", header.join(","))?;
        for (sid, seg) in self.segments.iter().enumerate() {
            for ((t, z), u) in seg.times.iter().zip(&seg.states).zip(&seg.inputs) {
                let mut row = vec![format!("{t}"), seg.j.to_string()];
                row.extend(z.iter().map(|x| format!("{x}")));
                row.extend(u.iter().map(|x| format!("{x}")));
                row.push(sid.to_string());
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    /// Jump records, domain, and termination as JSON.
    pub fn sidecar_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            termination: Termination,
            jumps: &'a [JumpRecord],
            domain: Vec<DomainInterval>,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            termination: self.termination,
            jumps: &self.jumps,
            domain: self.domain(),
        })?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        std::fs::write(dir.join(format!("{stem}.json")), self.sidecar_json()?)?;
        Ok(())
    }
}

/// Simulation horizon `(T, J)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub t_max: f64,
    pub max_jumps: usize,
}

/// Flow and jump feedback laws.
pub struct Controls<'a> {
    pub flow: &'a mut dyn ControlLaw,
    pub jump: &'a mut dyn ControlLaw,
}

/// More than this many jumps without continuous time advancing flags Zeno behaviour.
pub const ZENO_JUMP_LIMIT: usize = 25;

/// Simulates a hybrid arc from `z0`, alternating flows and jumps until the
/// horizon is reached or the state leaves `C ∪ D`.
#[allow(clippy::too_many_arguments)]
pub fn simulate<S: HybridSystem + ?Sized, R: Rng + ?Sized>(
    sys: &S,
    z0: &[f64],
    controls: Controls<'_>,
    disturbance: &DisturbancePolicy,
    horizon: Horizon,
    opts: &FlowOptions,
    rng: &mut R,
) -> Result<HybridArc> {
    if !(horizon.t_max > 0.0) {
        return Err(Error::InvalidArgument("horizon T must be > 0".into()));
    }
    Error::check_dim(sys.state_dim(), z0.len())?;
    let Controls { flow, jump } = controls;
    let mut arc = HybridArc { segments: Vec::new(), jumps: Vec::new(), termination: Termination::HorizonReached };
    let mut z = z0.to_vec();
    let mut t = 0.0;
    let mut j = 0usize;
    let mut instant_jumps = 0usize;
    let mut segment = FlowSegment { j, ..Default::default() };

    let leave = |sys: &S, z: &[f64]| if sys.is_failure(z) { Termination::Fell } else { Termination::LeftDomain };

    loop {
        if t >= horizon.t_max || j >= horizon.max_jumps {
            if segment.is_empty() {
                segment.times.push(t);
                segment.states.push(z.clone());
                segment.inputs.push(flow.control(&z, t));
            }
            arc.segments.push(segment);
            arc.termination = Termination::HorizonReached;
            return Ok(arc);
        }
        if sys.in_jump_set(&z) {
            if instant_jumps >= ZENO_JUMP_LIMIT {
                arc.segments.push(segment);
                arc.termination = Termination::ZenoSuspected;
                return Ok(arc);
            }
            if segment.is_empty() {
                segment.times.push(t);
                segment.states.push(z.clone());
                segment.inputs.push(flow.control(&z, t));
            }
            let u_d = sys.input_box_d().clip(&jump.control(&z, t));
            let z_next = apply_jump(sys, &z, t, &u_d, &disturbance.jump, rng)?;
            arc.jumps.push(JumpRecord { t, j, z_before: z.clone(), z_after: z_next.clone(), u_d });
            arc.segments.push(std::mem::replace(&mut segment, FlowSegment { j: j + 1, ..Default::default() }));
            j += 1;
            instant_jumps += 1;
            z = z_next;
            continue;
        }
        if !sys.in_flow_set(&z) {
            if !segment.is_empty() || arc.segments.is_empty() {
                arc.segments.push(segment);
            }
            arc.termination = leave(sys, &z);
            return Ok(arc);
        }
        let out = integrate_flow(sys, &z, t, j, flow, &disturbance.flow, rng, horizon.t_max, opts)?;
        let FlowOutcome { segment: piece, exit, escaped } = out;
        // The first stored state duplicates the current one when a segment
        // already holds it (after a jump into C).
        let skip = usize::from(!segment.is_empty() && !piece.is_empty());
        segment.times.extend(piece.times.iter().skip(skip));
        segment.states.extend(piece.states.iter().skip(skip).cloned());
        segment.inputs.extend(piece.inputs.iter().skip(skip).cloned());
        if let Some((t_end, z_end)) = segment.last() {
            if *t_end > t {
                instant_jumps = 0;
            }
            t = *t_end;
            z = z_end.clone();
        }
        match exit {
            FlowExit::GuardHit => {
                if !sys.in_jump_set(&z) {
                    arc.segments.push(segment);
                    arc.termination = leave(sys, &z);
                    return Ok(arc);
                }
            }
            FlowExit::TimeLimit => {
                arc.segments.push(segment);
                arc.termination = Termination::HorizonReached;
                return Ok(arc);
            }
            FlowExit::LeftFlowSet => {
                arc.segments.push(segment);
                arc.termination = leave(sys, escaped.as_deref().unwrap_or(&z));
                return Ok(arc);
            }
        }
    }
}

/// A control law returning the zero input of the given dimension.
pub fn zero_law(dim: usize) -> impl FnMut(&[f64], f64) -> Vec<f64> {
    move |_, _| vec![0.0; dim]
}
