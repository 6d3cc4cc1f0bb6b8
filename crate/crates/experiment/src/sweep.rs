//! Step-count sweeps of the walker over a grid of swing initial conditions.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhcbf::compass_gait::{count_steps, energy_expert, paper_initial_conditions};
use rhcbf::derive_seed;
use rhcbf::filter::{FilterStats, FilteredFlow, SafetyFilter};
use rhcbf::hybrid::{simulate, zero_law, Controls, DisturbancePolicy, Horizon, HybridSystem};
use rhcbf::net::BarrierNet;
use serde::{Deserialize, Serialize};

use crate::config::{Controller, ExperimentConfig, SweepMode, Variant};
use crate::pipeline::{flow_options, load_checkpoint, to_json, walker_model, walker_reference_energy, write_resolved, Layout};
use crate::{write_file, ExpError, Result};

/// Steps taken from one initial condition under one controller, level and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub controller: Controller,
    pub level: f64,
    pub theta_swing: f64,
    pub theta_dot_swing: f64,
    pub seed: u64,
    pub steps: usize,
}

/// Mean steps per controller and level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub controller: Controller,
    pub level: f64,
    pub mean_steps: f64,
    /// Mean over the grid for each seed, in configured seed order.
    pub seed_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub level_name: String,
    pub records: Vec<GridRecord>,
    pub aggregate: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn mean(&self, controller: Controller, level: f64) -> Option<f64> {
        self.aggregate.iter().find(|r| r.controller == controller && r.level == level).map(|r| r.mean_steps)
    }
}

/// Nets for the filtered controllers, keyed by variant.
#[derive(Debug, Clone, Default)]
pub struct SweepNets {
    pub robust: Option<BarrierNet>,
    pub nonrobust: Option<BarrierNet>,
}

impl SweepNets {
    fn get(&self, v: Variant) -> Option<&BarrierNet> {
        match v {
            Variant::Robust => self.robust.as_ref(),
            Variant::Nonrobust => self.nonrobust.as_ref(),
        }
    }
}

/// Simulates every (controller, level, initial condition, seed) and averages.
/// Random streams depend on level, initial condition and seed only, so all
/// controllers face the same draws.
pub fn run_sweep(cfg: &ExperimentConfig, nets: &SweepNets) -> Result<SweepResult> {
    let s = &cfg.sweep;
    for c in &s.controllers {
        if let Some(v) = c.variant() {
            if nets.get(v).is_none() {
                return Err(ExpError::Missing(format!("{} checkpoint for the {} controller", v.name(), c.name())));
            }
        }
    }
    let e_ref = walker_reference_energy(cfg)?;
    let base = walker_model(cfg, 0.0)?;
    let est = base.est;
    let bx = base.input_box_c().clone();
    let gain = cfg.expert.gain;
    let ics = paper_initial_conditions(s.grid, (s.halfwidth[0], s.halfwidth[1]))?;
    let opts = flow_options(s.step);
    let horizon = Horizon { t_max: s.t_max, max_jumps: s.max_steps };
    let hp = cfg.train.hyperparams;

    let mut jobs = Vec::new();
    for (ci, &c) in s.controllers.iter().enumerate() {
        for (li, &level) in s.levels().iter().enumerate() {
            for (ii, z0) in ics.iter().enumerate() {
                for &seed in &s.seeds {
                    jobs.push((ci, c, li, level, ii, z0, seed));
                }
            }
        }
    }

    let steps: Vec<Result<usize>> = jobs
        .par_iter()
        .map(|&(_, c, li, level, ii, z0, seed)| {
            let delta_c = match c.variant() {
                Some(Variant::Robust) => cfg.plant.delta_c(),
                _ => 0.0,
            };
            let (sys, disturbance) = match s.mode {
                SweepMode::Noise => (walker_model(cfg, delta_c)?, DisturbancePolicy::uniform_flow(level)),
                SweepMode::HipMass => {
                    (walker_model(cfg, delta_c)?.with_truth(est.with_hip_mass(level))?, DisturbancePolicy::nominal())
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[li as u64, ii as u64, seed]));
            let energy = |z: &[f64], _: f64| energy_expert(&est, z, e_ref, gain, &bx);
            let mut jump = zero_law(0);
            let arc = match c {
                Controller::Energy => {
                    let mut flow = energy;
                    simulate(&sys, z0, Controls { flow: &mut flow, jump: &mut jump }, &disturbance, horizon, &opts, &mut rng)?
                }
                Controller::Zero => {
                    let mut flow = zero_law(2);
                    simulate(&sys, z0, Controls { flow: &mut flow, jump: &mut jump }, &disturbance, horizon, &opts, &mut rng)?
                }
                Controller::Robust | Controller::Nonrobust => {
                    let net = nets.get(c.variant().unwrap()).unwrap();
                    let filter = SafetyFilter::new(net, &sys, hp.alpha_gain, hp.lip_bar)?;
                    let mut flow = FilteredFlow { filter: &filter, nominal: &energy, stats: FilterStats::default() };
                    simulate(&sys, z0, Controls { flow: &mut flow, jump: &mut jump }, &disturbance, horizon, &opts, &mut rng)?
                }
            };
            Ok(count_steps(&arc, s.max_steps))
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len());
    for (job, steps) in jobs.iter().zip(steps) {
        let &(_, controller, _, level, _, z0, seed) = job;
        records.push(GridRecord { controller, level, theta_swing: z0[1], theta_dot_swing: z0[3], seed, steps: steps? });
    }

    let mut aggregate = Vec::new();
    for &controller in &s.controllers {
        for &level in s.levels() {
            let seed_means: Vec<f64> = s
                .seeds
                .iter()
                .map(|&seed| {
                    let hits: Vec<f64> = records
                        .iter()
                        .filter(|r| r.controller == controller && r.level == level && r.seed == seed)
                        .map(|r| r.steps as f64)
                        .collect();
                    hits.iter().sum::<f64>() / hits.len() as f64
                })
                .collect();
            let mean_steps = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
            aggregate.push(AggregateRow { controller, level, mean_steps, seed_means });
        }
    }
    Ok(SweepResult { level_name: s.level_name().to_string(), records, aggregate })
}

pub const GRID_HEADER: &str = "theta_swing,theta_dot_swing,seed,steps";

/// File name of the grid CSV for one controller and level.
pub fn grid_file_name(controller: Controller, level_name: &str, level: f64) -> String {
    format!("grid_{}_{}_{}.csv", controller.name(), level_name, level)
}

pub fn grid_csv(result: &SweepResult, controller: Controller, level: f64) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for r in result.records.iter().filter(|r| r.controller == controller && r.level == level) {
        writeln!(out, "{},{},{},{}", r.theta_swing, r.theta_dot_swing, r.seed, r.steps).unwrap();
    }
    out
}

pub fn aggregate_csv(result: &SweepResult) -> String {
    let mut out = format!("controller,{},mean_steps,min_seed_mean,max_seed_mean\n", result.level_name);
    for r in &result.aggregate {
        let lo = r.seed_means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.seed_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(out, "{},{},{},{},{}", r.controller.name(), r.level, r.mean_steps, lo, hi).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub config_hash: String,
    pub level_name: String,
    pub files: Vec<String>,
}

pub fn write_sweep(result: &SweepResult, dir: &Path, config_hash: &str) -> Result<()> {
    let mut files = Vec::new();
    let mut seen = Vec::new();
    for r in &result.aggregate {
        if seen.contains(&(r.controller, r.level.to_bits())) {
            continue;
        }
        seen.push((r.controller, r.level.to_bits()));
        let name = grid_file_name(r.controller, &result.level_name, r.level);
        write_file(&dir.join(&name), grid_csv(result, r.controller, r.level).as_bytes())?;
        files.push(name);
    }
    write_file(&dir.join("aggregate.csv"), aggregate_csv(result).as_bytes())?;
    files.push("aggregate.csv".into());
    let meta = SweepMeta { config_hash: config_hash.to_string(), level_name: result.level_name.clone(), files };
    write_file(&dir.join("meta.json"), &to_json(&meta)?)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, force: bool) -> Result<SweepResult> {
    let mut nets = SweepNets::default();
    for c in &cfg.sweep.controllers {
        match c.variant() {
            Some(Variant::Robust) if nets.robust.is_none() => nets.robust = Some(load_checkpoint(cfg, Variant::Robust, force)?),
            Some(Variant::Nonrobust) if nets.nonrobust.is_none() => {
                nets.nonrobust = Some(load_checkpoint(cfg, Variant::Nonrobust, force)?)
            }
            _ => {}
        }
    }
    let result = run_sweep(cfg, &nets)?;
    let dir = Layout::new(&cfg.out).sweep();
    write_sweep(&result, &dir, &cfg.sweep_hash())?;
    write_resolved(cfg, &dir)?;
    Ok(result)
}
