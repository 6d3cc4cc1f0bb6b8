//! Min-norm runtime safety filters and filtered closed-loop simulation.
//!
//! With `Δ_c` independent of the input the robust flow condition is the
//! halfspace `a·u ≥ b`, `a = Ĝ_cᵀ∇h`, `b = −κh − ⟨∇h, F̂_c⟩ + ‖∇h‖Δ_c`.
//! The filter returns the point of `{a·u ≥ b} ∩ U_c` closest to the nominal
//! input.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hybrid::{simulate, ControlLaw, Controls, DisturbancePolicy, FlowOptions, HybridArc, HybridSystem, Horizon, InputBox};
use crate::net::Barrier;
use crate::train::flow_margin;
use crate::{dot, norm, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u_applied: Vec<f64>,
    /// The robust margin at `u_applied`: `q_c` for flows, `q_d` for jumps.
    pub slack: f64,
    pub feasible: bool,
    pub modified: bool,
}

/// `argmin ‖u − u_nom‖²` over `{a·u ≥ b} ∩ box`, or the box point
/// maximising `a·u` (with `false`) when the intersection is empty.
///
/// The minimiser is `u(μ) = clip(u_nom + μa)` for the smallest `μ ≥ 0` with
/// `a·u(μ) ≥ b`; `a·u(μ)` is piecewise linear and non-decreasing, so `μ` is
/// found exactly by walking the clipping breakpoints.
pub fn min_norm_in_box(a: &[f64], b: f64, u_nom: &[f64], bx: &InputBox) -> (Vec<f64>, bool) {
    let m = a.len();
    let (lo, hi) = (&bx.lower, &bx.upper);
    let clip = |k: usize, v: f64| v.clamp(lo[k], hi[k]);

    let best: Vec<f64> = (0..m)
        .map(|k| match a[k].partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => hi[k],
            Some(std::cmp::Ordering::Less) => lo[k],
            _ => clip(k, u_nom[k]),
        })
        .collect();
    let reach: f64 = (0..m).map(|k| if a[k] == 0.0 { 0.0 } else { a[k] * best[k] }).sum();
    if !(reach >= b) {
        return (best, false);
    }

    let at = |mu: f64| -> Vec<f64> { (0..m).map(|k| clip(k, u_nom[k] + mu * a[k])).collect() };
    let u0 = at(0.0);
    if dot(a, &u0) >= b {
        return (u0, true);
    }
    let mut breaks: Vec<f64> = (0..m)
        .filter(|&k| a[k] != 0.0)
        .flat_map(|k| [(lo[k] - u_nom[k]) / a[k], (hi[k] - u_nom[k]) / a[k]])
        .filter(|mu| mu.is_finite() && *mu > 0.0)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks.push(f64::INFINITY);

    let mut prev = 0.0;
    let mut phi_prev = dot(a, &u0);
    for &mu in &breaks {
        // Components moving freely on (prev, mu).
        let probe = if mu.is_finite() { 0.5 * (prev + mu) } else { prev + 1.0 };
        let slope: f64 = (0..m)
            .filter(|&k| {
                let v = u_nom[k] + probe * a[k];
                a[k] != 0.0 && v > lo[k] && v < hi[k]
            })
            .map(|k| a[k] * a[k])
            .sum();
        let phi = if mu.is_finite() { dot(a, &at(mu)) } else { f64::INFINITY };
        if phi >= b {
            let star = if slope > 0.0 { (prev + (b - phi_prev) / slope).min(mu) } else { mu };
            return (at(star), true);
        }
        prev = mu;
        phi_prev = phi;
    }
    (best, false)
}

/// The robust flow and jump filters for one barrier and plant.
pub struct SafetyFilter<'a, B: Barrier + ?Sized, S: HybridSystem + ?Sized> {
    h: &'a B,
    sys: &'a S,
    kappa: f64,
    lip_bar: f64,
}

impl<'a, B: Barrier + ?Sized, S: HybridSystem + ?Sized> SafetyFilter<'a, B, S> {
    pub fn new(h: &'a B, sys: &'a S, kappa: f64, lip_bar: f64) -> Result<Self> {
        if sys.flow_error_depends_on_input() {
            return Err(Error::InvalidArgument(
                "runtime filtering needs a flow error bound that does not depend on the input".into(),
            ));
        }
        if !(kappa > 0.0) || !(lip_bar >= 0.0) {
            return Err(Error::InvalidArgument(format!("need kappa > 0 and lip_bar >= 0, got {kappa}, {lip_bar}")));
        }
        Error::check_dim(sys.state_dim(), h.input_dim())?;
        Ok(Self { h, sys, kappa, lip_bar })
    }

    pub fn barrier(&self) -> &B {
        self.h
    }

    pub fn system(&self) -> &S {
        self.sys
    }

    /// `(a, b, h(z))` for the flow halfspace at `(z, t)`.
    pub fn halfspace(&self, z: &[f64], t: f64) -> (Vec<f64>, f64, f64) {
        let (h, g) = self.h.value_and_grad(z);
        let (drift, cols) = self.sys.flow_affine(z, t);
        let zero = vec![0.0; self.sys.flow_input_dim()];
        let a: Vec<f64> = cols.iter().map(|c| dot(c, &g)).collect();
        let b = -self.kappa * h - dot(&g, &drift) + norm(&g) * self.sys.err_flow(z, t, &zero);
        (a, b, h)
    }

    /// Robust flow margin at `u`, evaluated directly from the plant model.
    pub fn flow_slack(&self, z: &[f64], t: f64, u: &[f64]) -> f64 {
        let (h, g) = self.h.value_and_grad(z);
        flow_margin(h, &g, &self.sys.est_flow(z, t, u), self.sys.err_flow(z, t, u), self.kappa)
    }

    pub fn flow_filter(&self, z: &[f64], t: f64, u_nom: &[f64]) -> FilterResult {
        let (a, b, _) = self.halfspace(z, t);
        let (u, feasible) = min_norm_in_box(&a, b, u_nom, self.sys.input_box_c());
        FilterResult { slack: dot(&a, &u) - b, modified: u != u_nom, u_applied: u, feasible }
    }

    /// `q_d` at `u_d` with the `Lip̄` budget.
    pub fn jump_slack(&self, z: &[f64], t: f64, u_d: &[f64]) -> f64 {
        self.h.value(&self.sys.est_jump(z, t, u_d)) - self.lip_bar * self.sys.err_jump(z, t, u_d)
    }

    /// Picks the candidate with the largest `q_d`; the first candidate is
    /// taken as the nominal one.
    pub fn jump_filter(&self, z: &[f64], t: f64, candidates: &[Vec<f64>]) -> Result<FilterResult> {
        if candidates.is_empty() {
            return Err(Error::Precondition("jump filter needs at least one candidate".into()));
        }
        let (best, slack) = candidates
            .iter()
            .enumerate()
            .map(|(i, u)| (i, self.jump_slack(z, t, u)))
            .fold((0, f64::NEG_INFINITY), |acc, (i, q)| if q > acc.1 { (i, q) } else { acc });
        Ok(FilterResult { u_applied: candidates[best].clone(), slack, feasible: slack >= 0.0, modified: best != 0 })
    }
}

/// Counters over every filter invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub calls: usize,
    pub infeasible: usize,
    pub modified: usize,
}

/// A nominal flow law wrapped by [`SafetyFilter::flow_filter`].
pub struct FilteredFlow<'f, 'a, B: Barrier + ?Sized, S: HybridSystem + ?Sized> {
    pub filter: &'f SafetyFilter<'a, B, S>,
    pub nominal: &'f (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub stats: FilterStats,
}

impl<B: Barrier + ?Sized, S: HybridSystem + ?Sized> ControlLaw for FilteredFlow<'_, '_, B, S> {
    fn control(&mut self, z: &[f64], t: f64) -> Vec<f64> {
        let r = self.filter.flow_filter(z, t, &(self.nominal)(z, t));
        self.stats.calls += 1;
        self.stats.infeasible += usize::from(!r.feasible);
        self.stats.modified += usize::from(r.modified);
        r.u_applied
    }
}

/// A jump law choosing among the nominal input and fixed alternatives.
pub struct FilteredJump<'f, 'a, B: Barrier + ?Sized, S: HybridSystem + ?Sized> {
    pub filter: &'f SafetyFilter<'a, B, S>,
    pub nominal: &'f (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub alternatives: &'f [Vec<f64>],
    pub stats: FilterStats,
}

impl<B: Barrier + ?Sized, S: HybridSystem + ?Sized> ControlLaw for FilteredJump<'_, '_, B, S> {
    fn control(&mut self, z: &[f64], t: f64) -> Vec<f64> {
        let mut candidates = vec![(self.nominal)(z, t)];
        candidates.extend(self.alternatives.iter().cloned());
        let r = self.filter.jump_filter(z, t, &candidates).expect("candidate list is never empty");
        self.stats.calls += 1;
        self.stats.infeasible += usize::from(!r.feasible);
        self.stats.modified += usize::from(r.modified);
        r.u_applied
    }
}

/// `h` and the flow filter state at one stored point of a closed-loop arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub j: usize,
    pub h: f64,
    pub slack: f64,
    pub modified: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationLog {
    pub rows: Vec<LogRow>,
    pub min_h: f64,
    pub flow: FilterStats,
    pub jump: FilterStats,
}

impl ViolationLog {
    /// Stored points with `h < 0`.
    pub fn violations(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.h < 0.0)
    }

    pub fn violation_count(&self) -> usize {
        self.violations().count()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,j,h,slack,modified")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.t, r.j, r.h, r.slack, u8::from(r.modified))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Nominal laws and optional extra jump candidates for [`closed_loop`].
pub struct NominalLaws<'f> {
    pub flow: &'f (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub jump: &'f (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub jump_alternatives: &'f [Vec<f64>],
}

/// Simulates the filtered closed loop from `z0` and logs `h`, the flow
/// slack, and whether the filter changed the input at every stored point.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop<B, S, R>(
    filter: &SafetyFilter<'_, B, S>,
    laws: &NominalLaws<'_>,
    z0: &[f64],
    disturbance: &DisturbancePolicy,
    horizon: Horizon,
    opts: &FlowOptions,
    rng: &mut R,
) -> Result<(HybridArc, ViolationLog)>
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
    R: Rng + ?Sized,
{
    let h0 = filter.barrier().value(z0);
    if !(h0 >= 0.0) {
        return Err(Error::Precondition(format!("initial state has h = {h0} < 0")));
    }
    let mut flow = FilteredFlow { filter, nominal: laws.flow, stats: FilterStats::default() };
    let mut jump = FilteredJump { filter, nominal: laws.jump, alternatives: laws.jump_alternatives, stats: FilterStats::default() };
    let arc = simulate(filter.system(), z0, Controls { flow: &mut flow, jump: &mut jump }, disturbance, horizon, opts, rng)?;
    let mut log = ViolationLog { min_h: f64::INFINITY, flow: flow.stats, jump: jump.stats, ..Default::default() };
    for seg in &arc.segments {
        for ((t, z), u) in seg.times.iter().zip(&seg.states).zip(&seg.inputs) {
            let h = filter.barrier().value(z);
            log.min_h = log.min_h.min(h);
            log.rows.push(LogRow {
                t: *t,
                j: seg.j,
                h,
                slack: filter.flow_slack(z, *t, u),
                modified: *u != (laws.flow)(z, *t),
            });
        }
    }
    Ok((arc, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{BarrierGradient, Disturbance, FnSystem, Radius};
    use crate::net::AnalyticBarrier;
    use crate::toy::integrator;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn unit_ball(dim: usize) -> AnalyticBarrier {
        AnalyticBarrier::ball(dim, 1.0)
    }

    #[test]
    fn one_dimensional_projection() {
        let sys = integrator(1, 2.0, 0.1);
        let h = unit_ball(1);
        let f = SafetyFilter::new(&h, &sys, 1.0, 0.0).unwrap();
        let r = f.flow_filter(&[0.5], 0.0, &[1.0]);
        assert!((r.u_applied[0] - 0.65).abs() < 1e-12);
        assert!(r.feasible && r.modified);
        assert!(r.slack.abs() < 1e-12);
        let r = f.flow_filter(&[0.5], 0.0, &[0.0]);
        assert_eq!(r.u_applied, vec![0.0]);
        assert!(r.feasible && !r.modified);
        assert!((r.slack - 0.65).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gradient_is_infeasible() {
        let (u, ok) = min_norm_in_box(&[0.0, 0.0], 0.5, &[3.0, -0.2], &InputBox::symmetric(2, 1.0));
        assert!(!ok);
        assert_eq!(u, vec![1.0, -0.2]);
    }

    #[test]
    fn box_point_maximising_a_when_infeasible() {
        let (u, ok) = min_norm_in_box(&[1.0, -2.0, 0.0], 10.0, &[0.0, 0.0, 0.3], &InputBox::symmetric(3, 1.0));
        assert!(!ok);
        assert_eq!(u, vec![1.0, -1.0, 0.3]);
    }

    #[test]
    fn clipping_redistributes_the_correction() {
        // Unconstrained projection of 0 onto u1 + u2 ≥ 3 is (1.5, 1.5); with u1 ≤ 1 the optimum is (1, 2).
        let bx = InputBox::new(vec![-5.0, -5.0], vec![1.0, 5.0]).unwrap();
        let (u, ok) = min_norm_in_box(&[1.0, 1.0], 3.0, &[0.0, 0.0], &bx);
        assert!(ok);
        assert!((u[0] - 1.0).abs() < 1e-15 && (u[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nominal_outside_box_is_clipped() {
        let (u, ok) = min_norm_in_box(&[1.0], -10.0, &[7.0], &InputBox::symmetric(1, 2.0));
        assert!(ok);
        assert_eq!(u, vec![2.0]);
    }

    #[test]
    fn input_dependent_error_is_rejected() {
        let sys = integrator(1, 1.0, 0.1).input_dependent_flow_error(|_, _, u| 0.1 + u[0].abs());
        let h = unit_ball(1);
        assert!(SafetyFilter::new(&h, &sys, 1.0, 0.0).is_err());
    }

    fn halving() -> FnSystem {
        FnSystem::new(1, 0, |_, _, _| vec![0.0])
            .with_jump_set(|_| true)
            .with_jump_map(1, |z, _, u| vec![z[0] * u[0]])
            .with_jump_error(|_, _, _| 0.0)
    }

    #[test]
    fn jump_selection() {
        let sys = halving();
        let h = AnalyticBarrier::affine(vec![1.0], 0.0);
        let f = SafetyFilter::new(&h, &sys, 1.0, 1.0).unwrap();
        let r = f.jump_filter(&[1.0], 0.0, &[vec![-0.1], vec![0.2]]).unwrap();
        assert_eq!(r.u_applied, vec![0.2]);
        assert!(r.feasible && r.modified);
        assert!((r.slack - 0.2).abs() < 1e-15);
        let r = f.jump_filter(&[1.0], 0.0, &[vec![-0.1], vec![-0.3]]).unwrap();
        assert_eq!(r.u_applied, vec![-0.1]);
        assert!(!r.feasible);
        assert!(f.jump_filter(&[1.0], 0.0, &[]).is_err());
    }

    #[test]
    fn unactuated_jump_returns_empty_input() {
        let sys = FnSystem::new(1, 0, |_, _, _| vec![0.0])
            .with_jump_set(|_| true)
            .with_jump_map(0, |z, _, _| vec![0.5 * z[0]]);
        let h = unit_ball(1);
        let f = SafetyFilter::new(&h, &sys, 1.0, 2.0).unwrap();
        let r = f.jump_filter(&[1.0], 0.0, &[vec![]]).unwrap();
        assert!(r.u_applied.is_empty());
        assert!((r.slack - 0.75).abs() < 1e-15);
    }

    fn worst_case_policy(radius: f64) -> DisturbancePolicy {
        let grad: BarrierGradient = Arc::new(|z: &[f64]| z.iter().map(|x| -2.0 * x).collect());
        DisturbancePolicy { flow: Disturbance::WorstCase(Radius::Fixed(radius), grad), jump: Disturbance::Nominal }
    }

    #[test]
    fn integrator_stays_inside_under_attack() {
        let sys = integrator(2, 1.0, 0.05);
        let h = unit_ball(2);
        let f = SafetyFilter::new(&h, &sys, 1.0, 0.0).unwrap();
        let outward = |z: &[f64], _: f64| z.iter().map(|x| 2.0 * x).collect::<Vec<f64>>();
        let stay = |_: &[f64], _: f64| Vec::new();
        let laws = NominalLaws { flow: &outward, jump: &stay, jump_alternatives: &[] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for z0 in [[0.0, 0.97], [0.5, -0.5], [-0.9, 0.2]] {
            let (arc, log) = closed_loop(
                &f,
                &laws,
                &z0,
                &worst_case_policy(0.05),
                Horizon { t_max: 3.0, max_jumps: 0 },
                &FlowOptions { step: 1e-2, ..Default::default() },
                &mut rng,
            )
            .unwrap();
            assert_eq!(log.violation_count(), 0, "{:?}", arc.final_state());
            assert!(log.flow.modified > 0);
        }
        assert!(matches!(
            closed_loop(&f, &laws, &[2.0, 0.0], &DisturbancePolicy::nominal(), Horizon { t_max: 1.0, max_jumps: 0 }, &FlowOptions::default(), &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn matches_plain_filter_without_uncertainty() {
        let sys = integrator(1, 3.0, 0.0);
        let h = unit_ball(1);
        let f = SafetyFilter::new(&h, &sys, 1.0, 0.0).unwrap();
        let push = |_: &[f64], _: f64| vec![2.0];
        let stay = |_: &[f64], _: f64| Vec::new();
        let laws = NominalLaws { flow: &push, jump: &stay, jump_alternatives: &[] };
        let opts = FlowOptions { step: 1e-2, ..Default::default() };
        let horizon = Horizon { t_max: 2.0, max_jumps: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arc, _) = closed_loop(&f, &laws, &[0.2], &DisturbancePolicy::nominal(), horizon, &opts, &mut rng).unwrap();
        // Plain CBF: −2z u ≥ −(1 − z²) gives u ≤ (1 − z²)/(2z) for z > 0.
        let mut plain = |z: &[f64], _: f64| {
            let cap = if z[0] > 0.0 { (1.0 - z[0] * z[0]) / (2.0 * z[0]) } else { f64::INFINITY };
            vec![2.0f64.min(cap).clamp(-3.0, 3.0)]
        };
        let mut none = |_: &[f64], _: f64| Vec::new();
        let reference = simulate(
            &sys,
            &[0.2],
            Controls { flow: &mut plain, jump: &mut none },
            &DisturbancePolicy::nominal(),
            horizon,
            &opts,
            &mut rng,
        )
        .unwrap();
        let a: Vec<f64> = arc.samples().map(|s| s.2[0]).collect();
        let b: Vec<f64> = reference.samples().map(|s| s.2[0]).collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn log_csv_layout() {
        let log = ViolationLog {
            rows: vec![LogRow { t: 0.5, j: 1, h: -0.25, slack: 0.125, modified: true }],
            ..Default::default()
        };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,j,h,slack,modified\n0.5,1,-0.25,0.125,1\n");
        assert_eq!(log.violation_count(), 1);
    }

    fn vec_in(m: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-r..r, m)
    }

    proptest! {
        #[test]
        fn feasible_results_satisfy_the_constraint(
            z in vec_in(2, 1.2),
            u_nom in vec_in(2, 3.0),
            delta in 0.0f64..0.5,
            u_max in 0.1f64..3.0,
        ) {
            let sys = integrator(2, u_max, delta);
            let h = unit_ball(2);
            let f = SafetyFilter::new(&h, &sys, 1.0, 0.0).unwrap();
            let r = f.flow_filter(&z, 0.0, &u_nom);
            prop_assert!(sys.input_box_c().contains(&r.u_applied));
            if r.feasible {
                prop_assert!(f.flow_slack(&z, 0.0, &r.u_applied) >= -1e-9);
            }
        }

        #[test]
        fn halfspace_projection_is_minimal(
            a in vec_in(3, 2.0),
            b in -3.0f64..3.0,
            u_nom in vec_in(3, 1.0),
        ) {
            prop_assume!(norm(&a) > 1e-3);
            let bx = InputBox::symmetric(3, 1e6);
            let (u, ok) = min_norm_in_box(&a, b, &u_nom, &bx);
            prop_assert!(ok);
            let moved = crate::dist(&u, &u_nom);
            let want = (b - dot(&a, &u_nom)).max(0.0) / norm(&a);
            prop_assert!((moved - want).abs() <= 1e-9 * (1.0 + want));
        }

        #[test]
        fn box_solution_beats_random_feasible_points(
            a in vec_in(3, 2.0),
            b in -2.0f64..2.0,
            u_nom in vec_in(3, 2.0),
            others in prop::collection::vec(vec_in(3, 1.0), 50),
        ) {
            let bx = InputBox::symmetric(3, 1.0);
            let (u, ok) = min_norm_in_box(&a, b, &u_nom, &bx);
            if ok {
                let d = crate::dist(&u, &u_nom);
                for v in others.iter().filter(|v| dot(&a, v) >= b) {
                    prop_assert!(d <= crate::dist(v, &u_nom) + 1e-9);
                }
            } else {
                prop_assert!(others.iter().all(|v| dot(&a, v) < b + 1e-12));
            }
        }

        #[test]
        fn more_uncertainty_never_adds_slack(
            z in vec_in(2, 1.0),
            u in vec_in(2, 1.0),
            d1 in 0.0f64..0.5,
            extra in 0.0f64..0.5,
        ) {
            let h = unit_ball(2);
            let small = integrator(2, 1.0, d1);
            let large = integrator(2, 1.0, d1 + extra);
            let s1 = SafetyFilter::new(&h, &small, 1.0, 0.0).unwrap().flow_slack(&z, 0.0, &u);
            let s2 = SafetyFilter::new(&h, &large, 1.0, 0.0).unwrap().flow_slack(&z, 0.0, &u);
            prop_assert!(s2 <= s1);
        }
    }
}
