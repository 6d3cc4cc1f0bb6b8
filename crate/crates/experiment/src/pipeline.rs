//! Collection, training and verification stages.

use std::path::{Path, PathBuf};

use rhcbf::compass_gait::{energy_expert, has_fallen, paper_initial_conditions, passive_reference_energy, CompassGait};
use rhcbf::datasets::{build_ring, collect_expert, CollectSpec, DatasetBundle, Geometry};
use rhcbf::derive_seed;
use rhcbf::hybrid::{DisturbancePolicy, FlowOptions, HybridSystem, Horizon, InputBox};
use rhcbf::net::BarrierNet;
use rhcbf::train::{train_from, Hyperparams, TrainOutcome, TrainingSet};
use rhcbf::verifier::{verify, VerificationReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PlantConfig, Variant};
use crate::{check_hash, read_file, write_file, ExpError, Result};

/// Where each stage keeps its files.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_dir(&self, v: Variant) -> PathBuf {
        self.root.join("train").join(v.name())
    }
    pub fn checkpoint(&self, v: Variant) -> PathBuf {
        self.train_dir(v).join("checkpoint.json")
    }
    pub fn train_summary(&self, v: Variant) -> PathBuf {
        self.train_dir(v).join("summary.json")
    }
    pub fn verify_report(&self, v: Variant) -> PathBuf {
        self.root.join("verify").join(format!("{}.json", v.name()))
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Writes the resolved config into `dir`.
pub fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

/// Integrator settings for a step size.
pub fn flow_options(step: f64) -> FlowOptions {
    FlowOptions { step, ..FlowOptions::default() }
}

/// The walker model used for training and filtering, with flow uncertainty `delta_c`.
pub fn walker_model(cfg: &ExperimentConfig, delta_c: f64) -> Result<CompassGait> {
    match &cfg.plant {
        PlantConfig::Walker { params, u_max, .. } => Ok(CompassGait::new(*params, delta_c, InputBox::symmetric(2, *u_max))?),
        _ => Err(ExpError::Config("the plant is not a walker".into())),
    }
}

/// Reference energy of the passive gait of the walker model.
pub fn walker_reference_energy(cfg: &ExperimentConfig) -> Result<f64> {
    match &cfg.plant {
        PlantConfig::Walker { params, .. } => Ok(passive_reference_energy(params, &flow_options(cfg.expert.step))?),
        _ => Err(ExpError::Config("the plant is not a walker".into())),
    }
}

/// The model with the given variant's flow uncertainty.
pub fn model(cfg: &ExperimentConfig, variant: Variant) -> Result<Box<dyn HybridSystem>> {
    let delta_c = match variant {
        Variant::Robust => cfg.plant.delta_c(),
        Variant::Nonrobust => 0.0,
    };
    Ok(match &cfg.plant {
        PlantConfig::Walker { .. } => Box::new(walker_model(cfg, delta_c)?),
        PlantConfig::Rotor(r) => Box::new(rhcbf::toy::KickedRotor { delta_c, ..*r }.system()),
    })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Runs the expert and samples the boundary ring.
pub fn collect(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let e = &cfg.expert;
    let sys = model(cfg, Variant::Robust)?;
    let disturbance = DisturbancePolicy::uniform_flow(e.noise);
    let horizon = Horizon { t_max: e.t_max, max_jumps: e.max_jumps };
    let jump_law = |_: &[f64], _: f64| Vec::new();
    let seed = derive_seed(cfg.seed, &[1]);
    let (flows, jumps, stats, expert) = match &cfg.plant {
        PlantConfig::Walker { params, u_max, .. } => {
            let e_ref = walker_reference_energy(cfg)?;
            let bx = InputBox::symmetric(2, *u_max);
            let flow_law = |z: &[f64], _: f64| energy_expert(params, z, e_ref, e.gain, &bx);
            let safe = |z: &[f64]| !has_fallen(params, z);
            let ics = paper_initial_conditions(e.grid, (e.halfwidth[0], e.halfwidth[1]))?;
            let spec = CollectSpec {
                initial_conditions: &ics,
                flow_law: &flow_law,
                jump_law: &jump_law,
                disturbance: &disturbance,
                sample_dt: e.sample_dt,
                horizon,
                opts: flow_options(e.step),
                seed,
                safe: &safe,
            };
            let (f, j, s) = collect_expert(sys.as_ref(), &spec)?;
            (f, j, s, serde_json::json!({ "law": "energy", "e_ref": e_ref, "gain": e.gain, "u_max": u_max }))
        }
        PlantConfig::Rotor(r) => {
            let flow_law = |z: &[f64], _: f64| r.expert(z);
            let safe = |_: &[f64]| true;
            let ics = r.initial_conditions(&linspace(e.radii[0], e.radii[1], e.grid));
            let spec = CollectSpec {
                initial_conditions: &ics,
                flow_law: &flow_law,
                jump_law: &jump_law,
                disturbance: &disturbance,
                sample_dt: e.sample_dt,
                horizon,
                opts: flow_options(e.step),
                seed,
                safe: &safe,
            };
            let (f, j, s) = collect_expert(sys.as_ref(), &spec)?;
            (f, j, s, serde_json::json!({ "law": "rotation", "omega": r.omega }))
        }
    };
    let g = &cfg.geometry;
    let mut bundle = DatasetBundle::new(flows, jumps, Geometry::new(g.eps_c, g.eps_d, g.sigma)?)?;
    build_ring(&mut bundle, sys.as_ref(), g.ring_size, derive_seed(cfg.seed, &[2]))?;
    bundle.manifest.seed = cfg.seed;
    bundle.manifest.config_hash = cfg.data_hash();
    bundle.manifest.expert = expert;
    bundle.manifest.stats = stats;
    Ok(bundle)
}

pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let layout = Layout::new(&cfg.out);
    let bundle = collect(cfg)?;
    bundle.save(&layout.data())?;
    write_resolved(cfg, &layout.data())?;
    Ok(bundle)
}

/// Loads the dataset and checks that the current config produced it.
pub fn load_dataset(cfg: &ExperimentConfig, force: bool) -> Result<DatasetBundle> {
    let dir = Layout::new(&cfg.out).data();
    if !dir.join("manifest.json").exists() {
        return Err(ExpError::Missing(format!("dataset in {} (run `collect` first)", dir.display())));
    }
    let bundle = DatasetBundle::load(&dir)?;
    check_hash(&dir, &cfg.data_hash(), &bundle.manifest.config_hash, force)?;
    Ok(bundle)
}

/// Hyperparameters of one variant; the seed follows the experiment seed.
pub fn variant_hyperparams(cfg: &ExperimentConfig) -> Hyperparams {
    Hyperparams { seed: derive_seed(cfg.seed, &[3]), ..cfg.train.hyperparams }
}

pub fn training_set(cfg: &ExperimentConfig, bundle: &DatasetBundle, variant: Variant) -> Result<TrainingSet> {
    let sys = model(cfg, variant)?;
    let set = TrainingSet::from_bundle(sys.as_ref(), bundle, cfg.geometry.standoff())?;
    Ok(match variant {
        Variant::Robust => set,
        Variant::Nonrobust => set.without_flow_uncertainty(),
    })
}

/// Final state of a training run as stored next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub config_hash: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub sizes: [usize; 4],
    pub final_violation: [f64; 4],
    pub best_violation: [f64; 4],
}

pub fn train_variant(cfg: &ExperimentConfig, bundle: &DatasetBundle, variant: Variant) -> Result<(TrainOutcome, TrainSummary)> {
    let set = training_set(cfg, bundle, variant)?;
    let hp = variant_hyperparams(cfg);
    let mut net = BarrierNet::init(&cfg.layer_dims(), hp.seed)?;
    net.metadata.config_hash = cfg.train_hash();
    let outcome = train_from(&set, &hp, net, &mut |_| {})?;
    let final_violation = outcome.trace.rows.last().map(|r| r.violation).unwrap_or_default();
    let best_violation = outcome.trace.rows[outcome.best_epoch].violation;
    let summary = TrainSummary {
        variant,
        config_hash: cfg.train_hash(),
        epochs: hp.epochs,
        best_epoch: outcome.best_epoch,
        sizes: set.sizes(),
        final_violation,
        best_violation,
    };
    Ok((outcome, summary))
}

/// Trains every configured variant. The checkpoint kept for later stages is
/// the one with the fewest violations; the last iterate is stored alongside.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<Vec<TrainSummary>> {
    let bundle = load_dataset(cfg, force)?;
    let layout = Layout::new(&cfg.out);
    let mut summaries = Vec::new();
    for &variant in &cfg.train.variants {
        let (outcome, summary) = train_variant(cfg, &bundle, variant)?;
        let dir = layout.train_dir(variant);
        std::fs::create_dir_all(&dir).map_err(|e| ExpError::io(&dir, e))?;
        outcome.best.save(&layout.checkpoint(variant))?;
        outcome.net.save(&dir.join("last.json"))?;
        outcome.trace.save(&dir.join("trace.csv"))?;
        write_file(&layout.train_summary(variant), &to_json(&summary)?)?;
        write_resolved(cfg, &dir)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Loads a variant's checkpoint and checks that the current config produced it.
pub fn load_checkpoint(cfg: &ExperimentConfig, variant: Variant, force: bool) -> Result<BarrierNet> {
    let path = Layout::new(&cfg.out).checkpoint(variant);
    if !path.exists() {
        return Err(ExpError::Missing(format!("{} checkpoint {} (run `train` first)", variant.name(), path.display())));
    }
    let net = BarrierNet::load(&path)?;
    check_hash(&path, &cfg.train_hash(), &net.metadata.config_hash, force)?;
    Ok(net)
}

pub fn verify_variant(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    net: &BarrierNet,
    variant: Variant,
) -> Result<VerificationReport> {
    let sys = model(cfg, variant)?;
    let mut report = verify(net, sys.as_ref(), bundle, &variant_hyperparams(cfg), &cfg.verify)?;
    report.config_hash = cfg.verify_hash();
    Ok(report)
}

/// Verifies every configured variant; the flag is whether all were certified.
pub fn cmd_verify(cfg: &ExperimentConfig, force: bool) -> Result<(Vec<VerificationReport>, bool)> {
    let bundle = load_dataset(cfg, force)?;
    let layout = Layout::new(&cfg.out);
    let mut reports = Vec::new();
    for &variant in &cfg.train.variants {
        let net = load_checkpoint(cfg, variant, force)?;
        let report = verify_variant(cfg, &bundle, &net, variant)?;
        let path = layout.verify_report(variant);
        write_file(&path, report.to_json()?.as_bytes())?;
        write_file(&path.with_extension("txt"), report.summary().as_bytes())?;
        reports.push(report);
    }
    write_resolved(cfg, &layout.root.join("verify"))?;
    let certified = reports.iter().all(|r| r.certified);
    Ok((reports, certified))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(value).map_err(rhcbf::Error::from)?;
    text.push(b'\n');
    Ok(text)
}

pub(crate) fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| ExpError::Invalid(format!("{}: {e}", path.display())))
}
