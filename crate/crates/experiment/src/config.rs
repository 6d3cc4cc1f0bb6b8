//! Experiment configuration files.

use std::path::{Path, PathBuf};

use rhcbf::compass_gait::WalkerParams;
use rhcbf::toy::KickedRotor;
use rhcbf::train::Hyperparams;
use rhcbf::verifier::VerifyOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{ExpError, Result};

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub plant: PlantConfig,
    #[serde(default)]
    pub expert: ExpertConfig,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub plot: PlotConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    /// Compass-gait walker; `params` is the model used for training and filtering.
    Walker {
        #[serde(default)]
        params: WalkerParams,
        delta_c: f64,
        u_max: f64,
    },
    /// Planar rotor with a kick on every turn.
    Rotor(KickedRotor),
}

impl PlantConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            PlantConfig::Walker { .. } => 4,
            PlantConfig::Rotor(_) => 2,
        }
    }

    pub fn delta_c(&self) -> f64 {
        match self {
            PlantConfig::Walker { delta_c, .. } => *delta_c,
            PlantConfig::Rotor(r) => r.delta_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Energy-shaping gain of the walker expert.
    pub gain: f64,
    /// Points per axis of the initial-condition grid.
    pub grid: usize,
    /// Walker grid half-widths in swing angle and swing rate.
    pub halfwidth: [f64; 2],
    /// Rotor initial radii `[min, max]`.
    pub radii: [f64; 2],
    /// Radius of the uniform flow disturbance during collection.
    pub noise: f64,
    pub sample_dt: f64,
    pub t_max: f64,
    pub max_jumps: usize,
    pub step: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            grid: 7,
            halfwidth: [0.1, 0.3],
            radii: [0.6, 0.8],
            noise: 0.0,
            sample_dt: 0.1,
            t_max: 8.0,
            max_jumps: 100,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub eps_c: f64,
    pub eps_d: f64,
    pub sigma: f64,
    pub ring_size: usize,
    /// Safe points closer than this to a ring sample are left out of training; defaults to `sigma`.
    #[serde(default)]
    pub standoff: Option<f64>,
}

impl GeometryConfig {
    pub fn standoff(&self) -> f64 {
        self.standoff.unwrap_or(self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Trained and filtered with the plant's `Δ_c`.
    Robust,
    /// Trained and filtered with `Δ_c ≡ 0`.
    Nonrobust,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Robust => "robust",
            Variant::Nonrobust => "nonrobust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub variants: Vec<Variant>,
    pub hyperparams: Hyperparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: vec![16, 16], variants: vec![Variant::Robust], hyperparams: Hyperparams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Test-time uniform flow noise of each radius in `delta_c`.
    Noise,
    /// Noise-free simulation with the true hip mass set to each entry of `hip_mass`.
    HipMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Robust,
    Nonrobust,
    Energy,
    Zero,
}

impl Controller {
    pub fn name(self) -> &'static str {
        match self {
            Controller::Robust => "robust",
            Controller::Nonrobust => "nonrobust",
            Controller::Energy => "energy",
            Controller::Zero => "zero",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Controller::Robust => Some(Variant::Robust),
            Controller::Nonrobust => Some(Variant::Nonrobust),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub controllers: Vec<Controller>,
    pub grid: usize,
    pub halfwidth: [f64; 2],
    pub delta_c: Vec<f64>,
    pub hip_mass: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub t_max: f64,
    pub step: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mode: SweepMode::Noise,
            controllers: vec![Controller::Robust, Controller::Nonrobust, Controller::Energy, Controller::Zero],
            grid: 20,
            halfwidth: [0.3, 1.0],
            delta_c: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            hip_mass: vec![9.25, 9.5, 10.5, 10.75],
            seeds: vec![0, 1, 2],
            max_steps: 20,
            t_max: 30.0,
            step: 1e-3,
        }
    }
}

impl SweepConfig {
    /// The swept values for the configured mode.
    pub fn levels(&self) -> &[f64] {
        match self.mode {
            SweepMode::Noise => &self.delta_c,
            SweepMode::HipMass => &self.hip_mass,
        }
    }

    pub fn level_name(&self) -> &'static str {
        match self.mode {
            SweepMode::Noise => "delta_c",
            SweepMode::HipMass => "hip_mass",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Cells per axis of the contour grid.
    pub resolution: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { resolution: 100 }
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(ExpError::Config(format!("{name} must be > 0, got {x}")))
    }
}

fn non_negative(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(ExpError::Config(format!("{name} must be >= 0, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ExpError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.plant {
            PlantConfig::Walker { params, delta_c, u_max } => {
                params.validate()?;
                non_negative("plant.delta_c", *delta_c)?;
                non_negative("plant.u_max", *u_max)?;
            }
            PlantConfig::Rotor(r) => {
                positive("plant.omega", r.omega)?;
                positive("plant.u_max", r.u_max)?;
                non_negative("plant.delta_c", r.delta_c)?;
                non_negative("plant.delta_d", r.delta_d)?;
            }
        }
        let e = &self.expert;
        if e.grid == 0 {
            return Err(ExpError::Config("expert.grid must be >= 1".into()));
        }
        non_negative("expert.gain", e.gain)?;
        e.halfwidth.iter().try_for_each(|w| non_negative("expert.halfwidth", *w))?;
        if !(e.radii[0] > 0.0 && e.radii[0] <= e.radii[1] && e.radii[1].is_finite()) {
            return Err(ExpError::Config(format!("expert.radii must satisfy 0 < min <= max, got {:?}", e.radii)));
        }
        non_negative("expert.noise", e.noise)?;
        positive("expert.sample_dt", e.sample_dt)?;
        positive("expert.t_max", e.t_max)?;
        positive("expert.step", e.step)?;

        let g = &self.geometry;
        positive("geometry.eps_c", g.eps_c)?;
        positive("geometry.eps_d", g.eps_d)?;
        positive("geometry.sigma", g.sigma)?;
        non_negative("geometry.standoff", g.standoff())?;
        if g.ring_size == 0 {
            return Err(ExpError::Config("geometry.ring_size must be >= 1".into()));
        }

        let t = &self.train;
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return Err(ExpError::Config("train.hidden needs at least one non-zero width".into()));
        }
        if t.variants.is_empty() {
            return Err(ExpError::Config("train.variants is empty".into()));
        }
        t.hyperparams.validate()?;

        let s = &self.sweep;
        if s.grid == 0 || s.seeds.is_empty() || s.controllers.is_empty() || s.levels().is_empty() {
            return Err(ExpError::Config("sweep needs a grid, seeds, controllers and levels".into()));
        }
        s.halfwidth.iter().try_for_each(|w| non_negative("sweep.halfwidth", *w))?;
        match s.mode {
            SweepMode::Noise => s.delta_c.iter().try_for_each(|d| non_negative("sweep.delta_c", *d))?,
            SweepMode::HipMass => s.hip_mass.iter().try_for_each(|m| positive("sweep.hip_mass", *m))?,
        }
        positive("sweep.t_max", s.t_max)?;
        positive("sweep.step", s.step)?;
        if s.max_steps == 0 {
            return Err(ExpError::Config("sweep.max_steps must be >= 1".into()));
        }
        if self.plot.resolution < 2 {
            return Err(ExpError::Config("plot.resolution must be >= 2".into()));
        }
        Ok(())
    }

    /// Layer widths of the barrier network.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.plant.state_dim()];
        dims.extend(&self.train.hidden);
        dims.push(1);
        dims
    }

    /// Hash of the settings that determine the dataset.
    pub fn data_hash(&self) -> String {
        digest(&(self.seed, &self.plant, &self.expert, &self.geometry))
    }

    /// Hash of the settings that determine the checkpoints.
    pub fn train_hash(&self) -> String {
        digest(&(self.data_hash(), &self.train))
    }

    /// Hash of the settings that determine the verification reports.
    pub fn verify_hash(&self) -> String {
        digest(&(self.train_hash(), &self.verify))
    }

    /// Hash of the settings that determine the sweep outputs.
    pub fn sweep_hash(&self) -> String {
        let needs_checkpoint = self.sweep.controllers.iter().any(|c| c.variant().is_some());
        let upstream = if needs_checkpoint { self.train_hash() } else { digest(&(self.seed, &self.plant, &self.expert)) };
        digest(&(upstream, &self.sweep))
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialise");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
