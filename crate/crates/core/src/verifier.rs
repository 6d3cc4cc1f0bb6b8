//! Post-hoc certification of a trained barrier.
//!
//! Sample-level margins are lifted to sets through ε-nets and Lipschitz
//! bounds:
//!
//! - ring: `h(z_i) ≤ −γ_unsafe` and `ε̄ < γ_unsafe / L_h` give `h < 0` on `𝒩`;
//! - safe: `h(z_i) ≥ γ_safe` and `ε ≤ γ_safe / L_h` give `h ≥ 0` on `𝒟`;
//! - dynamics: `q(z_i) ≥ γ_dyn` and `ε ≤ (γ_dyn − M_q) / L_q` give feasible
//!   flow and jump constraints on `𝒟_C` and `𝒟_D`.
//!
//! `L_h` is the global layer-norm product bound. `L_q` combines the network
//! bounds with plant Jacobians sampled over each ball.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{epsilon_net_radius, region_probes, DatasetBundle, Geometry, ProbeSpec, Region};
use crate::hybrid::{sample_ball, HybridSystem};
use crate::net::Barrier;
use crate::train::{flow_margin, Hyperparams};
use crate::{derive_seed, norm, Error, Result};

/// A sound upper bound and a sampled lower estimate of a Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    #[serde(with = "crate::nonfinite")]
    pub upper: f64,
    #[serde(with = "crate::nonfinite")]
    pub sampled: f64,
}

fn ball_points<R: rand::Rng + ?Sized>(z: &[f64], eps: f64, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(n + 1);
    pts.push(z.to_vec());
    for _ in 0..n {
        let d = sample_ball(z.len(), eps, rng);
        pts.push(z.iter().zip(&d).map(|(a, b)| a + b).collect());
    }
    pts
}

fn check_radius(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("ball radius must be > 0, got {eps}")))
    }
}

/// `Lip(h, z, ε)`: the global bound and the largest `‖∇h‖` seen at the
/// centre and `n_samples` uniform points of the ball.
pub fn local_lipschitz<B: Barrier + ?Sized, R: rand::Rng + ?Sized>(
    h: &B,
    z: &[f64],
    eps: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    check_radius(eps)?;
    let sampled = ball_points(z, eps, n_samples, rng)
        .iter()
        .map(|p| norm(&h.value_and_grad(p).1))
        .fold(0.0, f64::max);
    Ok(LipschitzEstimate { upper: h.lipschitz_bound(), sampled })
}

fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|k| {
            let s = fd_step(p[k]);
            q[k] = p[k] + s;
            let up = f(&q);
            q[k] = p[k] - s;
            let down = f(&q);
            q[k] = p[k];
            (up - down) / (2.0 * s)
        })
        .collect()
}

/// Frobenius norm of the central-difference Jacobian of `f` at `p`.
fn fd_jacobian_norm(f: &dyn Fn(&[f64]) -> Vec<f64>, p: &[f64]) -> f64 {
    let mut q = p.to_vec();
    let mut sq = 0.0;
    for k in 0..p.len() {
        let s = fd_step(p[k]);
        q[k] = p[k] + s;
        let up = f(&q);
        q[k] = p[k] - s;
        let down = f(&q);
        q[k] = p[k];
        sq += up.iter().zip(&down).map(|(a, b)| ((a - b) / (2.0 * s)).powi(2)).sum::<f64>();
    }
    sq.sqrt()
}

/// `Lip(q_c(·, u, t), z, ε)`.
///
/// The upper value is `H (‖Ŵ‖ + Δ) + L_h (‖∂Ŵ‖ + ‖∂Δ‖ + κ)` with the network
/// bounds `L_h`, `H` and plant quantities maximised over the sampled ball.
#[allow(clippy::too_many_arguments)]
pub fn flow_q_lipschitz<B, S, R>(
    h: &B,
    sys: &S,
    z: &[f64],
    u: &[f64],
    t: f64,
    eps: f64,
    kappa: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate>
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
    R: rand::Rng + ?Sized,
{
    check_radius(eps)?;
    let q = |p: &[f64]| {
        let (v, g) = h.value_and_grad(p);
        flow_margin(v, &g, &sys.est_flow(p, t, u), sys.err_flow(p, t, u), kappa)
    };
    let w = |p: &[f64]| sys.est_flow(p, t, u);
    let delta = |p: &[f64]| sys.err_flow(p, t, u);
    let (mut sampled, mut w_max, mut d_max, mut jw, mut jd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in ball_points(z, eps, n_samples, rng) {
        sampled = sampled.max(norm(&fd_gradient(&q, &p)));
        w_max = w_max.max(norm(&w(&p)));
        d_max = d_max.max(delta(&p));
        jw = jw.max(fd_jacobian_norm(&w, &p));
        jd = jd.max(norm(&fd_gradient(&delta, &p)));
    }
    let (l_h, hess) = (h.lipschitz_bound(), h.hessian_bound());
    let upper = hess * (w_max + d_max) + l_h * (jw + jd + kappa);
    Ok(LipschitzEstimate { upper, sampled })
}

/// `Lip(q_d(·, u, t), z, ε)` with upper value `L_h ‖∂Ŵ_d‖ + Lip̄ ‖∂Δ_d‖`.
#[allow(clippy::too_many_arguments)]
pub fn jump_q_lipschitz<B, S, R>(
    h: &B,
    sys: &S,
    z: &[f64],
    u: &[f64],
    t: f64,
    eps: f64,
    lip_bar: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate>
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
    R: rand::Rng + ?Sized,
{
    check_radius(eps)?;
    let q = |p: &[f64]| h.value(&sys.est_jump(p, t, u)) - lip_bar * sys.err_jump(p, t, u);
    let w = |p: &[f64]| sys.est_jump(p, t, u);
    let delta = |p: &[f64]| sys.err_jump(p, t, u);
    let (mut sampled, mut jw, mut jd) = (0.0f64, 0.0f64, 0.0f64);
    for p in ball_points(z, eps, n_samples, rng) {
        sampled = sampled.max(norm(&fd_gradient(&q, &p)));
        jw = jw.max(fd_jacobian_norm(&w, &p));
        jd = jd.max(norm(&fd_gradient(&delta, &p)));
    }
    Ok(LipschitzEstimate { upper: h.lipschitz_bound() * jw + lip_bar * jd, sampled })
}

/// `M_q`: the largest spread of `q(p, ·)` over the time probes, maximised
/// over the centre and `n_samples` ball points. Zero without sampling for
/// time-invariant plants.
pub fn time_variation_bound<R: rand::Rng + ?Sized>(
    q: &dyn Fn(&[f64], f64) -> f64,
    z: &[f64],
    eps: f64,
    times: &[f64],
    n_samples: usize,
    time_invariant: bool,
    rng: &mut R,
) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("time probes are empty".into()));
    }
    if time_invariant || times.len() == 1 {
        return Ok(0.0);
    }
    check_radius(eps)?;
    Ok(ball_points(z, eps, n_samples, rng)
        .iter()
        .map(|p| {
            let (lo, hi) = times
                .iter()
                .map(|t| q(p, *t))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max))
}

/// Outcome of one proposition check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropCheck {
    pub pass: bool,
    /// Smallest slack in the radius condition over all samples.
    #[serde(with = "crate::nonfinite")]
    pub margin: f64,
    /// Samples failing the radius condition.
    pub radius_failures: usize,
    /// Samples failing their margin constraint.
    pub margin_failures: usize,
    /// Indices of offending samples (radius or margin), capped for reporting.
    pub offending: Vec<usize>,
    pub diagnosis: Vec<String>,
}

const MAX_LISTED: usize = 50;

impl PropCheck {
    fn finish(mut self) -> Self {
        self.pass = self.radius_failures == 0 && self.margin_failures == 0;
        self.offending.truncate(MAX_LISTED);
        self
    }

    fn note(&mut self, i: usize, radius_bad: bool, margin_bad: bool) {
        self.radius_failures += usize::from(radius_bad);
        self.margin_failures += usize::from(margin_bad);
        if (radius_bad || margin_bad) && self.offending.len() < MAX_LISTED {
            self.offending.push(i);
        }
    }
}

/// A sample value with the Lipschitz constant used to extend it over a ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointBound {
    #[serde(with = "crate::nonfinite")]
    pub value: f64,
    #[serde(with = "crate::nonfinite")]
    pub lipschitz: f64,
}

/// Ring certificate: `ε̄ < γ_unsafe / L_h(z_i)` and `h(z_i) ≤ −γ_unsafe` at every ring sample.
pub fn check_prop1(eps_bar: f64, gamma_unsafe: f64, ring: &[PointBound]) -> PropCheck {
    let mut out = PropCheck { margin: f64::INFINITY, ..Default::default() };
    for (i, s) in ring.iter().enumerate() {
        let bound = gamma_unsafe / s.lipschitz;
        out.margin = out.margin.min(bound - eps_bar);
        out.note(i, !(eps_bar < bound), !(s.value <= -gamma_unsafe));
    }
    if ring.is_empty() {
        out.diagnosis.push("no ring samples".into());
        out.margin_failures += 1;
    }
    if out.radius_failures > 0 {
        out.diagnosis.push(format!("{} ring samples need eps_bar < gamma_unsafe / L_h", out.radius_failures));
    }
    if out.margin_failures > 0 && !ring.is_empty() {
        out.diagnosis.push(format!("{} ring samples have h > -gamma_unsafe", out.margin_failures));
    }
    out.finish()
}

/// Safe-set certificate: `ε ≤ γ_safe / L_h(z_i)` and `h(z_i) ≥ γ_safe` on
/// flow (radius `ε_c`) and jump (radius `ε_d`) samples. Jump indices are
/// offset by the number of flow samples.
pub fn check_prop2(eps_c: f64, eps_d: f64, gamma_safe: f64, flow: &[PointBound], jump: &[PointBound]) -> PropCheck {
    let mut out = PropCheck { margin: f64::INFINITY, ..Default::default() };
    for (i, (s, eps)) in flow.iter().map(|s| (s, eps_c)).chain(jump.iter().map(|s| (s, eps_d))).enumerate() {
        let bound = gamma_safe / s.lipschitz;
        out.margin = out.margin.min(bound - eps);
        out.note(i, !(eps <= bound), !(s.value >= gamma_safe));
    }
    if out.radius_failures > 0 {
        out.diagnosis.push(format!("{} safe samples need eps <= gamma_safe / L_h", out.radius_failures));
    }
    if out.margin_failures > 0 {
        out.diagnosis.push(format!("{} safe samples have h < gamma_safe", out.margin_failures));
    }
    out.finish()
}

/// Per-sample inputs to [`check_prop3`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynBound {
    #[serde(with = "crate::nonfinite")]
    pub q: f64,
    #[serde(with = "crate::nonfinite")]
    pub l_q: f64,
    #[serde(with = "crate::nonfinite")]
    pub m_q: f64,
}

/// Dynamics certificate: `ε ≤ (γ_dyn − M_q) / L_q` and `q ≥ γ_dyn` at every
/// flow and jump sample. Jump indices are offset by the number of flow samples.
pub fn check_prop3(eps_c: f64, eps_d: f64, gamma_c: f64, gamma_d: f64, flow: &[DynBound], jump: &[DynBound]) -> PropCheck {
    let mut out = PropCheck { margin: f64::INFINITY, ..Default::default() };
    let mut exhausted = 0usize;
    let tagged = flow.iter().map(|s| (s, eps_c, gamma_c)).chain(jump.iter().map(|s| (s, eps_d, gamma_d)));
    for (i, (s, eps, gamma)) in tagged.enumerate() {
        let bound = (gamma - s.m_q) / s.l_q;
        if s.m_q >= gamma {
            exhausted += 1;
        }
        out.margin = out.margin.min(bound - eps);
        out.note(i, !(eps <= bound), !(s.q >= gamma));
    }
    if exhausted > 0 {
        out.diagnosis.push(format!("margin exhausted by time variation at {exhausted} samples"));
    }
    if out.radius_failures > 0 {
        out.diagnosis.push(format!("{} dynamics samples need eps <= (gamma_dyn - M_q) / L_q", out.radius_failures));
    }
    if out.margin_failures > 0 {
        out.diagnosis.push(format!("{} dynamics samples have q < gamma_dyn", out.margin_failures));
    }
    out.finish()
}

/// Sign check of `h` on a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub region: Region,
    pub probes: usize,
    #[serde(with = "crate::nonfinite")]
    pub min_h: f64,
    #[serde(with = "crate::nonfinite")]
    pub max_h: f64,
    /// Probes with `h ≥ 0` on the ring or `h < 0` on the covered set.
    pub violations: usize,
    /// Indices of violating probes, capped for reporting.
    pub violating: Vec<usize>,
    pub spec: Option<ProbeSpec>,
}

impl GridResult {
    pub fn pass(&self) -> bool {
        self.probes > 0 && self.violations == 0
    }
}

/// Evaluates `h` at every probe; the ring wants `h < 0`, the covered set `h ≥ 0`.
pub fn grid_validate<B: Barrier + ?Sized>(h: &B, probes: &[Vec<f64>], region: Region) -> GridResult {
    let values: Vec<f64> = probes.par_iter().map(|p| h.value(p)).collect();
    let bad = |v: f64| match region {
        Region::Ring => !(v < 0.0),
        Region::Covered => !(v >= 0.0),
    };
    let violating: Vec<usize> = (0..values.len()).filter(|&i| bad(values[i])).collect();
    GridResult {
        region,
        probes: probes.len(),
        min_h: values.iter().copied().fold(f64::INFINITY, f64::min),
        max_h: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        violations: violating.len(),
        violating,
        spec: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    /// Ball samples per Lipschitz and time-variation estimate.
    pub ball_samples: usize,
    pub time_probes: Vec<f64>,
    /// Probes of `𝒩` for the empirical covering radius `ε̄`.
    pub eps_bar_probes: ProbeSpec,
    pub ring_probes: ProbeSpec,
    pub cover_probes: ProbeSpec,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            ball_samples: 16,
            time_probes: vec![0.0],
            eps_bar_probes: ProbeSpec::Random { count: 100_000, seed: 1 },
            ring_probes: ProbeSpec::Random { count: 100_000, seed: 2 },
            cover_probes: ProbeSpec::Random { count: 100_000, seed: 3 },
            seed: 0,
        }
    }
}

/// Per-sample quantities behind the proposition checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTables {
    pub safe_h: Vec<f64>,
    pub safe_lipschitz_sampled: Vec<f64>,
    pub ring_h: Vec<f64>,
    pub ring_lipschitz_sampled: Vec<f64>,
    pub flow: Vec<DynBound>,
    pub flow_lipschitz_sampled: Vec<f64>,
    pub jump: Vec<DynBound>,
    pub jump_lipschitz_sampled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipBarCheck {
    #[serde(with = "crate::nonfinite")]
    pub lip_bar: f64,
    #[serde(with = "crate::nonfinite")]
    pub global_lipschitz: f64,
    /// Only jumps with `Δ_d > 0` rely on the budget.
    pub required: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub geometry: Geometry,
    pub hyperparams: Hyperparams,
    #[serde(with = "crate::nonfinite")]
    pub global_lipschitz: f64,
    #[serde(with = "crate::nonfinite")]
    pub hessian_bound: f64,
    pub lip_bar: LipBarCheck,
    #[serde(with = "crate::nonfinite")]
    pub min_h_safe: f64,
    #[serde(with = "crate::nonfinite")]
    pub max_h_ring: f64,
    #[serde(with = "crate::nonfinite")]
    pub max_sampled_lipschitz: f64,
    pub prop1: PropCheck,
    pub prop2: PropCheck,
    pub prop3: PropCheck,
    pub grid_ring: GridResult,
    pub grid_covered: GridResult,
    /// `ε̄` from the ring probes and the number of probes used.
    pub eps_bar_probes: usize,
    pub options: VerifyOptions,
    pub config_hash: String,
    /// Propositions and the `Lip̄` budget all hold.
    pub certified: bool,
    /// Both probe sets have the wanted sign.
    pub empirical: bool,
    pub samples: SampleTables,
}

fn par_samples<T: Send>(n: usize, seed: u64, tag: u64, f: impl Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, i as u64]));
            f(i, &mut rng)
        })
        .collect()
}

/// Runs every check for `h` against the bundle it was trained on.
pub fn verify<B, S>(h: &B, sys: &S, bundle: &DatasetBundle, hp: &Hyperparams, opts: &VerifyOptions) -> Result<VerificationReport>
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
{
    if bundle.ring.is_empty() {
        return Err(Error::Precondition("verification needs ring samples".into()));
    }
    let geo = bundle.geometry;
    let l_h = h.lipschitz_bound();
    let hess = h.hessian_bound();
    let n = opts.ball_samples;

    let eps_probe_points = region_probes(bundle, sys, Region::Ring, opts.eps_bar_probes)?;
    let eps_bar = epsilon_net_radius(&bundle.ring, &eps_probe_points)?;

    let safe_pts: Vec<&[f64]> = bundle.safe_flow().chain(bundle.safe_jump()).collect();
    let n_flow_safe = bundle.flow.len();
    let safe = par_samples(safe_pts.len(), opts.seed, 1, |i, rng| {
        let eps = if i < n_flow_safe { geo.eps_c } else { geo.eps_d };
        Ok((h.value(safe_pts[i]), local_lipschitz(h, safe_pts[i], eps, n, rng)?.sampled))
    })?;
    let ring = par_samples(bundle.ring.len(), opts.seed, 2, |i, rng| {
        let z = &bundle.ring[i];
        Ok((h.value(z), local_lipschitz(h, z, eps_bar.max(f64::MIN_POSITIVE), n, rng)?.sampled))
    })?;
    let flow = par_samples(bundle.flow.len(), opts.seed, 3, |i, rng| {
        let s = &bundle.flow[i];
        let q = |p: &[f64], t: f64| {
            let (v, g) = h.value_and_grad(p);
            flow_margin(v, &g, &sys.est_flow(p, t, &s.u_c), sys.err_flow(p, t, &s.u_c), hp.alpha_gain)
        };
        let lip = flow_q_lipschitz(h, sys, &s.z, &s.u_c, s.t, geo.eps_c, hp.alpha_gain, n, rng)?;
        let m_q = time_variation_bound(&q, &s.z, geo.eps_c, &opts.time_probes, n, sys.is_time_invariant(), rng)?;
        Ok((DynBound { q: q(&s.z, s.t), l_q: lip.upper, m_q }, lip.sampled))
    })?;
    let jump = par_samples(bundle.jump.len(), opts.seed, 4, |i, rng| {
        let s = &bundle.jump[i];
        let q = |p: &[f64], t: f64| h.value(&sys.est_jump(p, t, &s.u_d)) - hp.lip_bar * sys.err_jump(p, t, &s.u_d);
        let lip = jump_q_lipschitz(h, sys, &s.z, &s.u_d, s.t, geo.eps_d, hp.lip_bar, n, rng)?;
        let m_q = time_variation_bound(&q, &s.z, geo.eps_d, &opts.time_probes, n, sys.is_time_invariant(), rng)?;
        Ok((DynBound { q: q(&s.z, s.t), l_q: lip.upper, m_q }, lip.sampled))
    })?;

    let bound = |v: f64| PointBound { value: v, lipschitz: l_h };
    let safe_bounds: Vec<PointBound> = safe.iter().map(|s| bound(s.0)).collect();
    let ring_bounds: Vec<PointBound> = ring.iter().map(|s| bound(s.0)).collect();
    let prop1 = check_prop1(eps_bar, hp.gamma_unsafe, &ring_bounds);
    let prop2 =
        check_prop2(geo.eps_c, geo.eps_d, hp.gamma_safe, &safe_bounds[..n_flow_safe], &safe_bounds[n_flow_safe..]);
    let flow_b: Vec<DynBound> = flow.iter().map(|f| f.0).collect();
    let jump_b: Vec<DynBound> = jump.iter().map(|f| f.0).collect();
    let prop3 = check_prop3(geo.eps_c, geo.eps_d, hp.gamma_dyn_c, hp.gamma_dyn_d, &flow_b, &jump_b);

    let required = bundle.jump.iter().any(|s| sys.err_jump(&s.z, s.t, &s.u_d) > 0.0);
    let lip_bar = LipBarCheck { lip_bar: hp.lip_bar, global_lipschitz: l_h, required, pass: !required || hp.lip_bar >= l_h };

    let ring_probe_points = region_probes(bundle, sys, Region::Ring, opts.ring_probes)?;
    let mut grid_ring = grid_validate(h, &ring_probe_points, Region::Ring);
    grid_ring.spec = Some(opts.ring_probes);
    grid_ring.violating.truncate(MAX_LISTED);
    let cover_probe_points = region_probes(bundle, sys, Region::Covered, opts.cover_probes)?;
    let mut grid_covered = grid_validate(h, &cover_probe_points, Region::Covered);
    grid_covered.spec = Some(opts.cover_probes);
    grid_covered.violating.truncate(MAX_LISTED);

    let sampled_max = safe
        .iter()
        .map(|s| s.1)
        .chain(ring.iter().map(|s| s.1))
        .fold(0.0, f64::max);
    let certified = prop1.pass && prop2.pass && prop3.pass && lip_bar.pass;
    let empirical = grid_ring.pass() && grid_covered.pass();
    Ok(VerificationReport {
        geometry: Geometry { eps_bar: Some(eps_bar), ..geo },
        hyperparams: *hp,
        global_lipschitz: l_h,
        hessian_bound: hess,
        lip_bar,
        min_h_safe: safe.iter().map(|s| s.0).fold(f64::INFINITY, f64::min),
        max_h_ring: ring.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max),
        max_sampled_lipschitz: sampled_max,
        prop1,
        prop2,
        prop3,
        grid_ring,
        grid_covered,
        eps_bar_probes: eps_probe_points.len(),
        options: opts.clone(),
        config_hash: String::new(),
        certified,
        empirical,
        samples: SampleTables {
            safe_h: safe.iter().map(|s| s.0).collect(),
            safe_lipschitz_sampled: safe.iter().map(|s| s.1).collect(),
            ring_h: ring.iter().map(|s| s.0).collect(),
            ring_lipschitz_sampled: ring.iter().map(|s| s.1).collect(),
            flow: flow_b,
            flow_lipschitz_sampled: flow.iter().map(|s| s.1).collect(),
            jump: jump_b,
            jump_lipschitz_sampled: jump.iter().map(|s| s.1).collect(),
        },
    })
}

impl VerificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("verification report: {e}")))
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mark = |b: bool| if b { "PASS" } else { "FAIL" };
        let g = &self.geometry;
        let mut s = String::new();
        let mut line = |t: String| {
            s.push_str(&t);
            s.push('\n');
        };
        line(format!(
            "geometry: eps_c {} eps_d {} sigma {} eps_bar {:.4} ({} probes)",
            g.eps_c,
            g.eps_d,
            g.sigma,
            g.eps_bar.unwrap_or(f64::NAN),
            self.eps_bar_probes
        ));
        line(format!(
            "lipschitz: global bound {:.4}, largest sampled gradient {:.4}, hessian bound {:.4}",
            self.global_lipschitz, self.max_sampled_lipschitz, self.hessian_bound
        ));
        line(format!(
            "lip_bar {} vs global {:.4}: {}{}",
            self.lip_bar.lip_bar,
            self.lip_bar.global_lipschitz,
            mark(self.lip_bar.pass),
            if self.lip_bar.required { "" } else { " (not required, no jump uncertainty)" }
        ));
        line(format!("min h on safe samples {:.4}, max h on ring samples {:.4}", self.min_h_safe, self.max_h_ring));
        for (name, p) in [("ring (h < 0 on N)", &self.prop1), ("safe (h >= 0 on D)", &self.prop2), ("dynamics", &self.prop3)] {
            line(format!(
                "{name}: {} margin {:.4e}, radius failures {}, margin failures {}",
                mark(p.pass),
                p.margin,
                p.radius_failures,
                p.margin_failures
            ));
            for d in &p.diagnosis {
                line(format!("  {d}"));
            }
        }
        for r in [&self.grid_ring, &self.grid_covered] {
            line(format!(
                "probes {:?}: {} over {} points, min h {:.4}, max h {:.4}, violations {}",
                r.region,
                mark(r.pass()),
                r.probes,
                r.min_h,
                r.max_h,
                r.violations
            ));
        }
        line(format!("certified: {}", mark(self.certified)));
        line(format!("empirical: {}", mark(self.empirical)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_ring, FlowSample};
    use crate::hybrid::FnSystem;
    use crate::net::{AnalyticBarrier, BarrierNet};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_barrier_lipschitz() {
        let h = AnalyticBarrier::affine(vec![3.0], 0.5);
        let est = local_lipschitz(&h, &[0.2], 0.1, 10, &mut rng(0)).unwrap();
        assert_eq!(est, LipschitzEstimate { upper: 3.0, sampled: 3.0 });
        assert!(local_lipschitz(&h, &[0.2], 0.0, 10, &mut rng(0)).is_err());
    }

    #[test]
    fn sampled_gradient_never_exceeds_bound_and_grows() {
        for seed in 0..10 {
            let net = BarrierNet::init(&[3, 8, 6, 1], seed).unwrap();
            let z = [0.3, -0.2, 1.1];
            let mut prev = 0.0;
            for n in [1, 4, 16, 64] {
                let est = local_lipschitz(&net, &z, 0.5, n, &mut rng(seed)).unwrap();
                assert!(est.sampled <= est.upper);
                assert!(est.sampled >= prev);
                prev = est.sampled;
            }
        }
    }

    #[test]
    fn q_lipschitz_bounds_dominate_samples() {
        let sys = FnSystem::new(2, 1, |z, _, u| vec![z[1], -z[0].sin() + u[0]])
            .with_flow_error(|z, _, _| 0.1 + 0.05 * z[0].cos())
            .with_jump_set(|_| true)
            .with_jump_map(0, |z, _, _| vec![z[0], -0.8 * z[1]])
            .with_jump_error(|z, _, _| 0.01 * z[1].abs());
        for seed in 0..5 {
            let net = BarrierNet::init(&[2, 6, 1], seed).unwrap();
            let f = flow_q_lipschitz(&net, &sys, &[0.4, -0.3], &[0.7], 0.0, 0.2, 1.0, 32, &mut rng(seed)).unwrap();
            assert!(f.sampled > 0.0 && f.sampled <= f.upper, "{f:?}");
            let j = jump_q_lipschitz(&net, &sys, &[0.4, -0.3], &[], 0.0, 0.2, 5.0, 32, &mut rng(seed)).unwrap();
            assert!(j.sampled > 0.0 && j.sampled <= j.upper, "{j:?}");
        }
    }

    #[test]
    fn time_variation_examples() {
        let q = |_: &[f64], t: f64| t.sin();
        let times: Vec<f64> = (0..=1000).map(|k| k as f64 * std::f64::consts::TAU / 1000.0).collect();
        let m = time_variation_bound(&q, &[0.0], 0.1, &times, 4, false, &mut rng(0)).unwrap();
        assert!((m - 2.0).abs() < 1e-4);
        assert_eq!(time_variation_bound(&q, &[0.0], 0.1, &times, 4, true, &mut rng(0)).unwrap(), 0.0);
        assert_eq!(time_variation_bound(&q, &[0.0], 0.1, &[0.3], 4, false, &mut rng(0)).unwrap(), 0.0);
        assert!(time_variation_bound(&q, &[0.0], 0.1, &[], 4, false, &mut rng(0)).is_err());
    }

    fn pb(value: f64, lipschitz: f64) -> PointBound {
        PointBound { value, lipschitz }
    }

    #[test]
    fn prop1_examples() {
        let ring = vec![pb(-0.2, 2.0); 3];
        let ok = check_prop1(0.04, 0.1, &ring);
        assert!(ok.pass);
        assert!((ok.margin - 0.01).abs() < 1e-15);
        assert!(!check_prop1(0.06, 0.1, &ring).pass);
        // Strict inequality.
        assert!(!check_prop1(0.05, 0.1, &ring).pass);
        let mut shallow = ring.clone();
        shallow[1].value = -0.05;
        let bad = check_prop1(0.0001, 0.1, &shallow);
        assert!(!bad.pass);
        assert_eq!(bad.offending, vec![1]);
        assert!(!check_prop1(0.01, 0.1, &[]).pass);
    }

    #[test]
    fn prop2_examples() {
        let safe = vec![pb(0.2, 1.0); 2];
        assert!(check_prop2(0.1, 0.1, 0.1, &safe, &safe).pass);
        assert!(!check_prop2(0.11, 0.1, 0.1, &safe, &safe).pass);
        assert!(!check_prop2(0.1, 0.11, 0.1, &safe, &safe).pass);
        let low = [pb(0.05, 1.0)];
        let c = check_prop2(0.01, 0.01, 0.1, &safe, &low);
        assert!(!c.pass);
        assert_eq!(c.offending, vec![2]);
    }

    #[test]
    fn prop3_examples() {
        let ok = DynBound { q: 0.2, l_q: 0.5, m_q: 0.0 };
        let c = check_prop3(0.1, 0.1, 0.05, 0.05, &[ok], &[]);
        assert!(c.pass, "{c:?}");
        let drift = DynBound { m_q: 0.06, ..ok };
        let c = check_prop3(0.1, 0.1, 0.05, 0.05, &[ok, drift], &[]);
        assert!(!c.pass);
        assert!(c.diagnosis.iter().any(|d| d.contains("margin exhausted by time variation")));
        let low = DynBound { q: 0.01, ..ok };
        let c = check_prop3(0.1, 0.1, 0.05, 0.05, &[ok], &[low]);
        assert!(!c.pass);
        assert_eq!(c.margin_failures, 1);
        assert_eq!(c.offending, vec![1]);
    }

    #[test]
    fn grid_constant_barrier() {
        let h = AnalyticBarrier::constant(2, -1.0);
        let probes: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 0.0]).collect();
        let r = grid_validate(&h, &probes, Region::Ring);
        assert_eq!((r.max_h, r.violations), (-1.0, 0));
        assert!(r.pass());
        let c = grid_validate(&h, &probes, Region::Covered);
        assert_eq!(c.violations, 50);
    }

    fn arc_bundle() -> DatasetBundle {
        let flow: Vec<FlowSample> = (0..40)
            .map(|k| {
                let a = k as f64 * 0.05;
                FlowSample { z: vec![a.cos(), a.sin()], u_c: vec![], t: 0.0 }
            })
            .collect();
        DatasetBundle::new(flow, vec![], Geometry::new(0.1, 0.1, 0.1).unwrap()).unwrap()
    }

    #[test]
    fn halving_resolution_keeps_violations() {
        let sys = FnSystem::new(2, 0, |_, _, _| vec![0.0, 0.0]);
        let b = arc_bundle();
        let h = AnalyticBarrier::affine(vec![1.0, 0.3], -0.8);
        let mut prev: Option<Vec<Vec<f64>>> = None;
        for res in [0.04, 0.02, 0.01] {
            let probes = region_probes(&b, &sys, Region::Covered, ProbeSpec::Lattice { resolution: res }).unwrap();
            let r = grid_validate(&h, &probes, Region::Covered);
            let bad: Vec<Vec<f64>> = r.violating.iter().map(|&i| probes[i].clone()).collect();
            assert!(!bad.is_empty());
            if let Some(prev) = prev {
                assert!(prev.iter().all(|p| bad.contains(p)));
            }
            prev = Some(bad);
        }
    }

    #[test]
    fn report_round_trip_and_consistency() {
        let sys = FnSystem::new(2, 0, |z, _, _| vec![-z[1], z[0]]).with_flow_error(|_, _, _| 0.01);
        let mut b = arc_bundle();
        build_ring(&mut b, &sys, 400, 1).unwrap();
        let h = AnalyticBarrier::constant(2, 0.5);
        let hp = Hyperparams::default();
        let opts = VerifyOptions {
            ball_samples: 4,
            eps_bar_probes: ProbeSpec::Random { count: 2000, seed: 1 },
            ring_probes: ProbeSpec::Random { count: 2000, seed: 2 },
            cover_probes: ProbeSpec::Random { count: 2000, seed: 3 },
            ..Default::default()
        };
        let r = verify(&h, &sys, &b, &hp, &opts).unwrap();
        // A positive constant satisfies every safe-set condition and no ring condition.
        assert!(r.prop2.pass);
        assert!(!r.prop1.pass);
        assert!(r.prop3.pass, "{:?}", r.prop3);
        assert!(!r.certified);
        assert!(r.grid_covered.pass());
        assert!(!r.grid_ring.pass());
        assert!(r.geometry.eps_bar.unwrap() > 0.0);
        let again = verify(&h, &sys, &b, &hp, &opts).unwrap();
        assert_eq!(r, again);
        let back = VerificationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.summary().contains("certified: FAIL"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ring_certificate_implies_negative_probes(
            c in prop::collection::vec(-2.0f64..2.0, 2),
            b in -3.0f64..1.0,
            ring in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..20),
            probes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..50),
        ) {
            let h = AnalyticBarrier::affine(c.clone(), b);
            let l = norm(&c).max(1e-12);
            let eps_bar = epsilon_net_radius(&ring, &probes).unwrap();
            let bounds: Vec<PointBound> = ring.iter().map(|z| pb(h.value(z), l)).collect();
            if check_prop1(eps_bar, 0.1, &bounds).pass {
                prop_assert!(grid_validate(&h, &probes, Region::Ring).pass());
            }
        }
    }
}
