//! Robust flow and jump margins, the empirical Lagrangian, and the
//! primal-dual iteration that fits `h(z; θ)` to expert data.
//!
//! With `α(s) = κs` and Euclidean norms,
//!
//! ```text
//! q_c(z, u, t) = ⟨∇h(z), Ŵ_c(z, t, u)⟩ − ‖∇h(z)‖ Δ_c(z, t, u) + κ h(z)
//! q_d(z, u, t) = h(Ŵ_d(z, t, u)) − Lip̄ Δ_d(z, t, u)
//! ```
//!
//! and the Lagrangian is `μ‖θ‖²` plus, per family, the average of
//! `λ_i [r_i]₊` with residuals `γ_safe − h`, `h + γ_unsafe`, `γ_c − q_c`,
//! `γ_d − q_d`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{thin_safe_sets, DatasetBundle};
use crate::hybrid::HybridSystem;
use crate::net::{Barrier, BarrierNet, Workspace};
use crate::{dot, norm, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma_safe: f64,
    pub gamma_unsafe: f64,
    pub gamma_dyn_c: f64,
    pub gamma_dyn_d: f64,
    pub lip_bar: f64,
    /// `κ` in `α(s) = κs`.
    pub alpha_gain: f64,
    /// `μ`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub eta: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma_safe: 0.1,
            gamma_unsafe: 0.1,
            gamma_dyn_c: 0.05,
            gamma_dyn_d: 0.05,
            lip_bar: 10.0,
            alpha_gain: 1.0,
            weight_decay: 1e-4,
            epochs: 30_000,
            eta: 0.005,
            beta: 0.05,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma_safe", self.gamma_safe),
            ("gamma_unsafe", self.gamma_unsafe),
            ("gamma_dyn_c", self.gamma_dyn_c),
            ("gamma_dyn_d", self.gamma_dyn_d),
            ("lip_bar", self.lip_bar),
            ("alpha_gain", self.alpha_gain),
            ("eta", self.eta),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Robust flow margin at `z` given `h(z)`, `∇h(z)`, `Ŵ_c` and `Δ_c`.
pub fn flow_margin(h: f64, grad: &[f64], w_hat: &[f64], delta: f64, kappa: f64) -> f64 {
    dot(grad, w_hat) - norm(grad) * delta + kappa * h
}

/// `q_c(z, u_c, t)`.
pub fn q_c<B, S>(h: &B, sys: &S, z: &[f64], u_c: &[f64], t: f64, kappa: f64) -> f64
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
{
    let (v, g) = h.value_and_grad(z);
    flow_margin(v, &g, &sys.est_flow(z, t, u_c), sys.err_flow(z, t, u_c), kappa)
}

/// `q_d(z, u_d, t)`.
pub fn q_d<B, S>(h: &B, sys: &S, z: &[f64], u_d: &[f64], t: f64, lip_bar: f64) -> f64
where
    B: Barrier + ?Sized,
    S: HybridSystem + ?Sized,
{
    h.value(&sys.est_jump(z, t, u_d)) - lip_bar * sys.err_jump(z, t, u_d)
}

/// A flow constraint with `Ŵ_c` and `Δ_c` evaluated at the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTerm {
    pub z: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub delta: f64,
}

/// A jump constraint with the nominal post-jump state.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTerm {
    pub z: Vec<f64>,
    pub z_plus: Vec<f64>,
    pub delta: f64,
}

/// The four constraint families of the training problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub safe: Vec<Vec<f64>>,
    pub ring: Vec<Vec<f64>>,
    pub flow: Vec<FlowTerm>,
    pub jump: Vec<JumpTerm>,
}

impl TrainingSet {
    /// Safe points are the expert states (thinned by `standoff` around the
    /// ring); flow and jump terms are evaluated with the nominal model.
    pub fn from_bundle<S: HybridSystem + ?Sized>(sys: &S, bundle: &DatasetBundle, standoff: f64) -> Result<Self> {
        let thinned = thin_safe_sets(bundle, standoff)?;
        let mut safe = thinned.flow;
        safe.extend(thinned.jump);
        let flow = bundle
            .flow
            .iter()
            .map(|s| FlowTerm {
                z: s.z.clone(),
                w_hat: sys.est_flow(&s.z, s.t, &s.u_c),
                delta: sys.err_flow(&s.z, s.t, &s.u_c),
            })
            .collect();
        let jump = bundle
            .jump
            .iter()
            .map(|s| JumpTerm {
                z: s.z.clone(),
                z_plus: sys.est_jump(&s.z, s.t, &s.u_d),
                delta: sys.err_jump(&s.z, s.t, &s.u_d),
            })
            .collect();
        Ok(Self { safe, ring: bundle.ring.clone(), flow, jump })
    }

    /// The same problem with `Δ_c ≡ 0`.
    pub fn without_flow_uncertainty(mut self) -> Self {
        self.flow.iter_mut().for_each(|f| f.delta = 0.0);
        self
    }

    pub fn sizes(&self) -> [usize; 4] {
        [self.safe.len(), self.ring.len(), self.flow.len(), self.jump.len()]
    }
}

/// Per-sample values for each family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerFamily {
    pub safe: Vec<f64>,
    pub ring: Vec<f64>,
    pub flow: Vec<f64>,
    pub jump: Vec<f64>,
}

/// Dual multipliers, one per constraint.
pub type DualVars = PerFamily;
/// Pre-hinge constraint residuals; positive means violated.
pub type Residuals = PerFamily;

impl PerFamily {
    pub fn ones(set: &TrainingSet) -> Self {
        let [a, b, c, d] = set.sizes();
        Self { safe: vec![1.0; a], ring: vec![1.0; b], flow: vec![1.0; c], jump: vec![1.0; d] }
    }

    pub fn sizes(&self) -> [usize; 4] {
        [self.safe.len(), self.ring.len(), self.flow.len(), self.jump.len()]
    }

    fn families(&self) -> [&[f64]; 4] {
        [&self.safe, &self.ring, &self.flow, &self.jump]
    }

    /// Fraction of positive entries per family (0 for empty families).
    pub fn violation_fractions(&self) -> [f64; 4] {
        self.families().map(|v| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().filter(|r| **r > 0.0).count() as f64 / v.len() as f64
            }
        })
    }

    /// Largest entry per family (0 for empty families).
    pub fn max(&self) -> [f64; 4] {
        self.families().map(|v| v.iter().copied().fold(0.0, f64::max))
    }

    /// Mean of the positive parts per family.
    pub fn mean_hinge(&self) -> [f64; 4] {
        self.families().map(|v| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|r| r.max(0.0)).sum::<f64>() / v.len() as f64
            }
        })
    }

    pub fn min(&self) -> f64 {
        self.families().iter().flat_map(|v| v.iter().copied()).fold(f64::INFINITY, f64::min)
    }
}

/// `λ ← [λ + β r]₊` elementwise.
pub fn dual_step(residuals: &Residuals, lam: &mut DualVars, beta: f64) -> Result<()> {
    if residuals.sizes() != lam.sizes() {
        return Err(Error::InvalidArgument("residual and multiplier sizes differ".into()));
    }
    for (l, r) in [
        (&mut lam.safe, &residuals.safe),
        (&mut lam.ring, &residuals.ring),
        (&mut lam.flow, &residuals.flow),
        (&mut lam.jump, &residuals.jump),
    ] {
        l.iter_mut().zip(r).for_each(|(l, r)| *l = dual_update(*l, *r, beta));
    }
    Ok(())
}

#[inline]
fn dual_update(lam: f64, r: f64, beta: f64) -> f64 {
    (lam + beta * r).max(0.0)
}

const CHUNK: usize = 64;

struct Scratch {
    ws: Workspace,
    g: Vec<f64>,
    dir: Vec<f64>,
}

trait Term: Sync {
    /// Residual; leaves `ws` and `g` ready for `accumulate`.
    fn residual(&self, net: &BarrierNet, s: &mut Scratch, hp: &Hyperparams) -> f64;
    /// Adds `w ∇_θ r` to `grad`.
    fn accumulate(&self, net: &BarrierNet, s: &mut Scratch, w: f64, hp: &Hyperparams, grad: &mut [f64]);
}

struct SafePoint<'a>(&'a [f64]);
struct RingPoint<'a>(&'a [f64]);

impl Term for SafePoint<'_> {
    fn residual(&self, net: &BarrierNet, s: &mut Scratch, hp: &Hyperparams) -> f64 {
        hp.gamma_safe - net.forward_ws(&mut s.ws, self.0)
    }
    fn accumulate(&self, net: &BarrierNet, s: &mut Scratch, w: f64, _: &Hyperparams, grad: &mut [f64]) {
        s.dir.fill(0.0);
        net.accumulate_ws(&mut s.ws, -w, &s.dir, grad);
    }
}

impl Term for RingPoint<'_> {
    fn residual(&self, net: &BarrierNet, s: &mut Scratch, hp: &Hyperparams) -> f64 {
        net.forward_ws(&mut s.ws, self.0) + hp.gamma_unsafe
    }
    fn accumulate(&self, net: &BarrierNet, s: &mut Scratch, w: f64, _: &Hyperparams, grad: &mut [f64]) {
        s.dir.fill(0.0);
        net.accumulate_ws(&mut s.ws, w, &s.dir, grad);
    }
}

impl Term for FlowTerm {
    fn residual(&self, net: &BarrierNet, s: &mut Scratch, hp: &Hyperparams) -> f64 {
        let h = net.forward_ws(&mut s.ws, &self.z);
        net.grad_ws(&mut s.ws, &mut s.g);
        hp.gamma_dyn_c - flow_margin(h, &s.g, &self.w_hat, self.delta, hp.alpha_gain)
    }
    fn accumulate(&self, net: &BarrierNet, s: &mut Scratch, w: f64, hp: &Hyperparams, grad: &mut [f64]) {
        let len = norm(&s.g);
        let scale = if len > 0.0 { w * self.delta / len } else { 0.0 };
        for ((d, wh), g) in s.dir.iter_mut().zip(&self.w_hat).zip(&s.g) {
            *d = -w * wh + scale * g;
        }
        net.accumulate_ws(&mut s.ws, -w * hp.alpha_gain, &s.dir, grad);
    }
}

impl Term for JumpTerm {
    fn residual(&self, net: &BarrierNet, s: &mut Scratch, hp: &Hyperparams) -> f64 {
        hp.gamma_dyn_d - net.forward_ws(&mut s.ws, &self.z_plus) + hp.lip_bar * self.delta
    }
    fn accumulate(&self, net: &BarrierNet, s: &mut Scratch, w: f64, _: &Hyperparams, grad: &mut [f64]) {
        s.dir.fill(0.0);
        net.accumulate_ws(&mut s.ws, -w, &s.dir, grad);
    }
}

struct FamilyOut {
    hinge: f64,
    residuals: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// One sweep over a family: optional dual update from the fresh residuals,
/// then the weighted hinge sum and optionally its gradient. Chunks are
/// reduced in index order so the result does not depend on scheduling.
fn family_pass<T: Term>(
    net: &BarrierNet,
    items: &[T],
    lam: &mut [f64],
    hp: &Hyperparams,
    dual: Option<f64>,
    want_grad: bool,
) -> FamilyOut {
    let n = items.len();
    if n == 0 {
        return FamilyOut { hinge: 0.0, residuals: Vec::new(), grad: want_grad.then(|| vec![0.0; net.num_params()]) };
    }
    let inv_n = 1.0 / n as f64;
    let chunks: Vec<(f64, Vec<f64>, Option<Vec<f64>>)> = items
        .par_chunks(CHUNK)
        .zip(lam.par_chunks_mut(CHUNK))
        .map(|(items, lam)| {
            let mut s = Scratch { ws: net.workspace(), g: vec![0.0; net.input_dim()], dir: vec![0.0; net.input_dim()] };
            let mut grad = want_grad.then(|| vec![0.0; net.num_params()]);
            let mut hinge = 0.0;
            let mut res = Vec::with_capacity(items.len());
            for (item, l) in items.iter().zip(lam.iter_mut()) {
                let r = item.residual(net, &mut s, hp);
                if let Some(beta) = dual {
                    *l = dual_update(*l, r, beta);
                }
                res.push(r);
                if r > 0.0 {
                    let w = *l * inv_n;
                    hinge += w * r;
                    if let Some(grad) = grad.as_mut() {
                        if w != 0.0 {
                            item.accumulate(net, &mut s, w, hp, grad);
                        }
                    }
                }
            }
            (hinge, res, grad)
        })
        .collect();
    let mut out = FamilyOut { hinge: 0.0, residuals: Vec::with_capacity(n), grad: want_grad.then(|| vec![0.0; net.num_params()]) };
    for (hinge, res, grad) in chunks {
        out.hinge += hinge;
        out.residuals.extend(res);
        if let (Some(total), Some(g)) = (out.grad.as_mut(), grad) {
            total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
        }
    }
    out
}

struct Pass {
    loss: f64,
    residuals: Residuals,
    grad: Option<Vec<f64>>,
}

fn full_pass(
    net: &BarrierNet,
    set: &TrainingSet,
    hp: &Hyperparams,
    lam: &mut DualVars,
    dual: Option<f64>,
    want_grad: bool,
) -> Result<Pass> {
    if lam.sizes() != set.sizes() {
        return Err(Error::InvalidArgument(format!(
            "multiplier sizes {:?} do not match data sizes {:?}",
            lam.sizes(),
            set.sizes()
        )));
    }
    let n = net.input_dim();
    let dims_ok = set.safe.iter().chain(&set.ring).all(|z| z.len() == n)
        && set.flow.iter().all(|f| f.z.len() == n && f.w_hat.len() == n)
        && set.jump.iter().all(|j| j.z_plus.len() == n);
    if !dims_ok {
        return Err(Error::DimensionMismatch { expected: n, got: usize::MAX });
    }
    let safe: Vec<SafePoint> = set.safe.iter().map(|z| SafePoint(z)).collect();
    let ring: Vec<RingPoint> = set.ring.iter().map(|z| RingPoint(z)).collect();
    let outs = [
        family_pass(net, &safe, &mut lam.safe, hp, dual, want_grad),
        family_pass(net, &ring, &mut lam.ring, hp, dual, want_grad),
        family_pass(net, &set.flow, &mut lam.flow, hp, dual, want_grad),
        family_pass(net, &set.jump, &mut lam.jump, hp, dual, want_grad),
    ];
    let theta = net.params();
    let mut loss = hp.weight_decay * dot(theta, theta);
    let mut grad = want_grad.then(|| theta.iter().map(|p| 2.0 * hp.weight_decay * p).collect::<Vec<f64>>());
    let mut fams = Vec::with_capacity(4);
    for out in outs {
        loss += out.hinge;
        if let (Some(total), Some(g)) = (grad.as_mut(), out.grad) {
            total.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
        }
        fams.push(out.residuals);
    }
    let [safe, ring, flow, jump]: [Vec<f64>; 4] = fams.try_into().unwrap();
    Ok(Pass { loss, residuals: Residuals { safe, ring, flow, jump }, grad })
}

/// `L(θ, λ)` and the residuals.
pub fn lagrangian(net: &BarrierNet, set: &TrainingSet, hp: &Hyperparams, lam: &DualVars) -> Result<(f64, Residuals)> {
    let mut lam = lam.clone();
    let p = full_pass(net, set, hp, &mut lam, None, false)?;
    Ok((p.loss, p.residuals))
}

/// `L(θ, λ)`, the residuals, and `∇_θ L`.
pub fn lagrangian_grad(
    net: &BarrierNet,
    set: &TrainingSet,
    hp: &Hyperparams,
    lam: &DualVars,
) -> Result<(f64, Residuals, Vec<f64>)> {
    let mut lam = lam.clone();
    let p = full_pass(net, set, hp, &mut lam, None, true)?;
    Ok((p.loss, p.residuals, p.grad.unwrap()))
}

fn apply_primal(net: &mut BarrierNet, grad: &[f64], eta: f64, epoch: usize) -> Result<()> {
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalDivergence(format!(
            "non-finite gradient at parameter {k} in epoch {epoch} (|θ|² = {:.3e})",
            net.squared_norm()
        )));
    }
    net.params_mut().iter_mut().zip(grad).for_each(|(p, g)| *p -= eta * g);
    Ok(())
}

/// `θ ← θ − η ∇_θ L(θ, λ)`.
pub fn primal_step(net: &mut BarrierNet, set: &TrainingSet, hp: &Hyperparams, lam: &DualVars) -> Result<()> {
    let (_, _, grad) = lagrangian_grad(net, set, hp, lam)?;
    apply_primal(net, &grad, hp.eta, 0)
}

/// One trace row, describing `θ_k` and `λ_k` after `k` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lagrangian: f64,
    pub violation: [f64; 4],
    pub theta_norm: f64,
    pub max_lambda: [f64; 4],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,lagrangian,viol_safe,viol_ring,viol_flow,viol_jump,theta_norm,max_lambda_safe,max_lambda_ring,max_lambda_flow,max_lambda_jump"
        )?;
        for r in &self.rows {
            let v = r.violation;
            let m = r.max_lambda;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.lagrangian, v[0], v[1], v[2], v[3], r.theta_norm, m[0], m[1], m[2], m[3]
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub net: BarrierNet,
    /// Parameters with the fewest violations seen.
    pub best: BarrierNet,
    pub best_epoch: usize,
    pub trace: TrainingTrace,
    pub duals: DualVars,
    pub residuals: Residuals,
}

/// [`train_from`] starting at a freshly initialised network of the given widths.
pub fn train(set: &TrainingSet, hp: &Hyperparams, dims: &[usize]) -> Result<TrainOutcome> {
    train_from(set, hp, BarrierNet::init(dims, hp.seed)?, &mut |_| {})
}

/// Runs `hp.epochs` alternating primal and dual steps from `net` with all
/// multipliers at one, calling `observe` on every trace row.
pub fn train_from(
    set: &TrainingSet,
    hp: &Hyperparams,
    mut net: BarrierNet,
    observe: &mut dyn FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    hp.validate()?;
    if set.flow.is_empty() {
        return Err(Error::EmptyDataset("training needs at least one flow sample".into()));
    }
    let mut lam = DualVars::ones(set);
    let mut trace = TrainingTrace::default();
    let mut best = (net.clone(), 0usize, (f64::INFINITY, f64::INFINITY));
    let mut residuals = Residuals::default();
    for epoch in 0..=hp.epochs {
        // The dual half of epoch k−1 and the primal half of epoch k share one sweep at θ_k.
        let dual = (epoch > 0).then_some(hp.beta);
        let want_grad = epoch < hp.epochs;
        let pass = full_pass(&net, set, hp, &mut lam, dual, want_grad)?;
        if !pass.loss.is_finite() {
            return Err(Error::NumericalDivergence(format!(
                "Lagrangian is {} at epoch {epoch}; last finite row: {:?}",
                pass.loss,
                trace.last()
            )));
        }
        let row = TraceRow {
            epoch,
            lagrangian: pass.loss,
            violation: pass.residuals.violation_fractions(),
            theta_norm: net.squared_norm().sqrt(),
            max_lambda: lam.max(),
        };
        observe(&row);
        let score = (row.violation.iter().sum::<f64>(), pass.residuals.mean_hinge().iter().sum::<f64>());
        if score < best.2 {
            best = (net.clone(), epoch, score);
        }
        trace.rows.push(row);
        residuals = pass.residuals;
        if let Some(grad) = pass.grad {
            apply_primal(&mut net, &grad, hp.eta, epoch)?;
        }
    }
    Ok(TrainOutcome { net, best: best.0, best_epoch: best.1, trace, duals: lam, residuals })
}
