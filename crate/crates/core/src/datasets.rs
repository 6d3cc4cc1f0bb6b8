//! Expert demonstrations, ε-ball covers, and boundary-ring samples.
//!
//! The data-covered set is `𝒟 = 𝒟_C ∪ 𝒟_D` with `𝒟_C` the open union of
//! `ε_c`-balls around flow samples intersected with `C`, and `𝒟_D` the
//! closed union of `ε_d`-balls around jump samples intersected with `D`.
//! The ring `𝒩` is the `σ`-shell outside `𝒟`. Distances to `𝒟` are taken
//! to the ball union without the `C`/`D` clipping.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hybrid::{
    sample_ball, sample_sphere, simulate, Controls, DisturbancePolicy, FlowOptions, HybridArc, HybridSystem, Horizon,
    Mode, Termination,
};
use crate::spatial::GridIndex;
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub z: Vec<f64>,
    pub u_c: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSample {
    pub z: Vec<f64>,
    pub u_d: Vec<f64>,
    pub t: f64,
}

/// Cover and ring radii. `eps_bar` is filled in once a ring exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub eps_c: f64,
    pub eps_d: f64,
    pub sigma: f64,
    pub eps_bar: Option<f64>,
}

impl Geometry {
    pub fn new(eps_c: f64, eps_d: f64, sigma: f64) -> Result<Self> {
        if [eps_c, eps_d, sigma].iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("geometry radii must be > 0".into()));
        }
        Ok(Self { eps_c, eps_d, sigma, eps_bar: None })
    }
}

/// Counters reported by [`collect_expert`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub runs: usize,
    pub dropped_runs: usize,
    pub excluded_samples: usize,
    pub flow_samples: usize,
    pub jump_samples: usize,
}

/// Provenance stored next to the sample files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub expert: serde_json::Value,
    pub stats: CollectStats,
    pub ring_count: usize,
    pub ring_proposals: usize,
    /// Ring samples lying outside `C ∪ D`, whose status relative to the clipped cover is ambiguous.
    pub ring_ambiguous: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// The data-covered set `𝒟`.
    Covered,
    /// The boundary ring `𝒩`.
    Ring,
}

/// Expert data, ring samples, and the geometry of their covers.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub flow: Vec<FlowSample>,
    pub jump: Vec<JumpSample>,
    pub ring: Vec<Vec<f64>>,
    pub geometry: Geometry,
    pub manifest: Manifest,
    flow_index: GridIndex,
    jump_index: GridIndex,
}

impl DatasetBundle {
    pub fn new(flow: Vec<FlowSample>, jump: Vec<JumpSample>, geometry: Geometry) -> Result<Self> {
        if flow.is_empty() && jump.is_empty() {
            return Err(Error::EmptyDataset("no flow or jump samples".into()));
        }
        let dim = flow.first().map(|s| s.z.len()).or_else(|| jump.first().map(|s| s.z.len())).unwrap();
        for z in flow.iter().map(|s| &s.z).chain(jump.iter().map(|s| &s.z)) {
            Error::check_dim(dim, z.len())?;
        }
        let flow_index = GridIndex::new(flow.iter().map(|s| s.z.clone()).collect(), geometry.eps_c)?;
        let jump_index = GridIndex::new(jump.iter().map(|s| s.z.clone()).collect(), geometry.eps_d)?;
        Ok(Self { flow, jump, ring: Vec::new(), geometry, manifest: Manifest::default(), flow_index, jump_index })
    }

    pub fn state_dim(&self) -> usize {
        self.flow.first().map(|s| s.z.len()).or_else(|| self.jump.first().map(|s| s.z.len())).unwrap_or(0)
    }

    /// Safe-set points `Z_safe^c`.
    pub fn safe_flow(&self) -> impl Iterator<Item = &[f64]> {
        self.flow.iter().map(|s| s.z.as_slice())
    }

    /// Safe-set points `Z_safe^d`.
    pub fn safe_jump(&self) -> impl Iterator<Item = &[f64]> {
        self.jump.iter().map(|s| s.z.as_slice())
    }

    /// Membership in `𝒟_C` (open balls, `which = Flow`) or `𝒟_D` (closed balls, `which = Jump`).
    pub fn cover_contains<S: HybridSystem + ?Sized>(&self, sys: &S, z: &[f64], which: Mode) -> bool {
        match which {
            Mode::Flow => self.flow_index.any_within(z, self.geometry.eps_c, true) && sys.in_flow_set(z),
            Mode::Jump => self.jump_index.any_within(z, self.geometry.eps_d, false) && sys.in_jump_set(z),
        }
    }

    pub fn in_covered<S: HybridSystem + ?Sized>(&self, sys: &S, z: &[f64]) -> bool {
        self.cover_contains(sys, z, Mode::Flow) || self.cover_contains(sys, z, Mode::Jump)
    }

    /// Whether `z` lies in the unclipped ball union.
    pub fn in_ball_union(&self, z: &[f64]) -> bool {
        self.flow_index.any_within(z, self.geometry.eps_c, false)
            || self.jump_index.any_within(z, self.geometry.eps_d, false)
    }

    /// Distance from `z` to the nearest ball surface of the union (negative inside).
    pub fn union_distance(&self, z: &[f64]) -> f64 {
        let f = self.flow_index.nearest(z).map_or(f64::INFINITY, |(_, d)| d - self.geometry.eps_c);
        let j = self.jump_index.nearest(z).map_or(f64::INFINITY, |(_, d)| d - self.geometry.eps_d);
        f.min(j)
    }

    /// Membership in the ring `𝒩` as sampled: outside the closed ball union
    /// and within `σ` of it.
    pub fn in_ring(&self, z: &[f64]) -> bool {
        let d = self.union_distance(z);
        d > 0.0 && d <= self.geometry.sigma
    }

    fn sources(&self) -> Vec<(&[f64], f64)> {
        self.flow
            .iter()
            .map(|s| (s.z.as_slice(), self.geometry.eps_c))
            .chain(self.jump.iter().map(|s| (s.z.as_slice(), self.geometry.eps_d)))
            .collect()
    }

    /// Draws `count` points of `𝒩` by rejection. Returns the points and the
    /// number of proposals used.
    pub fn sample_ring_points<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<(Vec<Vec<f64>>, usize)> {
        let sources = self.sources();
        let n = self.state_dim();
        let sigma = self.geometry.sigma;
        let mut out = Vec::with_capacity(count);
        let mut proposals = 0usize;
        while out.len() < count {
            if proposals >= RING_PROBE_BUDGET && (out.len() as f64) < RING_MIN_ACCEPTANCE * proposals as f64 {
                return Err(Error::Geometry(format!(
                    "ring acceptance {} / {proposals} below {RING_MIN_ACCEPTANCE}; sigma {sigma} too small for the cover",
                    out.len()
                )));
            }
            proposals += 1;
            let (src, eps) = sources[rng.random_range(0..sources.len())];
            let r = eps + sigma * (1.0 - rng.random::<f64>());
            let dir = sample_sphere(n, rng);
            let z: Vec<f64> = src.iter().zip(&dir).map(|(a, d)| a + r * d).collect();
            if self.in_ring(&z) {
                out.push(z);
            }
        }
        Ok((out, proposals))
    }

    /// Draws `count` points of the ball union intersected with `C` (for
    /// `Flow`) or `D` (for `Jump`), uniformly within each chosen ball.
    pub fn sample_cover_points<S: HybridSystem + ?Sized, R: Rng + ?Sized>(
        &self,
        sys: &S,
        which: Mode,
        count: usize,
        rng: &mut R,
    ) -> Vec<Vec<f64>> {
        let (points, eps): (Vec<&[f64]>, f64) = match which {
            Mode::Flow => (self.safe_flow().collect(), self.geometry.eps_c),
            Mode::Jump => (self.safe_jump().collect(), self.geometry.eps_d),
        };
        let mut out = Vec::with_capacity(count);
        if points.is_empty() {
            return out;
        }
        let n = self.state_dim();
        let mut tries = 0usize;
        while out.len() < count && tries < 1000 * count.max(1) {
            tries += 1;
            let src = points[rng.random_range(0..points.len())];
            let d = sample_ball(n, eps, rng);
            let z: Vec<f64> = src.iter().zip(&d).map(|(a, b)| a + b).collect();
            if self.cover_contains(sys, &z, which) {
                out.push(z);
            }
        }
        out
    }
}

const RING_PROBE_BUDGET: usize = 1_000_000;
const RING_MIN_ACCEPTANCE: f64 = 1e-4;

/// Inputs to [`collect_expert`].
pub struct CollectSpec<'a> {
    pub initial_conditions: &'a [Vec<f64>],
    pub flow_law: &'a (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub jump_law: &'a (dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    pub disturbance: &'a DisturbancePolicy,
    pub sample_dt: f64,
    pub horizon: Horizon,
    pub opts: FlowOptions,
    pub seed: u64,
    /// Interior of the geometric safe set `S`.
    pub safe: &'a (dyn Fn(&[f64]) -> bool + Sync),
}

/// Simulates the expert from every initial condition and samples flows every
/// `sample_dt` and every jump. Runs that leave the domain are dropped whole;
/// individual samples outside `S` are excluded and counted.
pub fn collect_expert<S: HybridSystem + ?Sized>(
    sys: &S,
    spec: &CollectSpec<'_>,
) -> Result<(Vec<FlowSample>, Vec<JumpSample>, CollectStats)> {
    if !(spec.sample_dt > 0.0) {
        return Err(Error::InvalidArgument("sample_dt must be > 0".into()));
    }
    let arcs: Vec<Result<HybridArc>> = spec
        .initial_conditions
        .par_iter()
        .enumerate()
        .map(|(i, z0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[i as u64]));
            let mut flow = |z: &[f64], t: f64| (spec.flow_law)(z, t);
            let mut jump = |z: &[f64], t: f64| (spec.jump_law)(z, t);
            simulate(
                sys,
                z0,
                Controls { flow: &mut flow, jump: &mut jump },
                spec.disturbance,
                spec.horizon,
                &spec.opts,
                &mut rng,
            )
        })
        .collect();

    let mut stats = CollectStats { runs: arcs.len(), ..Default::default() };
    let mut flows = Vec::new();
    let mut jumps = Vec::new();
    for arc in arcs {
        let arc = arc?;
        if arc.termination != Termination::HorizonReached {
            stats.dropped_runs += 1;
            continue;
        }
        let (f, j) = sample_arc(&arc, spec.sample_dt, spec.horizon.t_max);
        for s in f {
            if (spec.safe)(&s.z) {
                flows.push(s);
            } else {
                stats.excluded_samples += 1;
            }
        }
        for s in j {
            if (spec.safe)(&s.z) {
                jumps.push(s);
            } else {
                stats.excluded_samples += 1;
            }
        }
    }
    if flows.is_empty() && jumps.is_empty() {
        return Err(Error::EmptyDataset(format!("all {} expert runs were dropped", stats.runs)));
    }
    stats.flow_samples = flows.len();
    stats.jump_samples = jumps.len();
    Ok((flows, jumps, stats))
}

/// Flow states at `t = k·dt < t_max` (first stored state at or after each
/// grid time) and every jump pre-state.
pub fn sample_arc(arc: &HybridArc, dt: f64, t_max: f64) -> (Vec<FlowSample>, Vec<JumpSample>) {
    let mut flows = Vec::new();
    let mut k = 0u64;
    for seg in &arc.segments {
        let mut idx = 0;
        loop {
            let target = k as f64 * dt;
            if target >= t_max - 1e-9 {
                break;
            }
            while idx < seg.times.len() && seg.times[idx] < target - 1e-9 {
                idx += 1;
            }
            if idx >= seg.times.len() {
                break;
            }
            // The final state of a guard-terminated segment belongs to the jump.
            if idx + 1 == seg.times.len() && seg.times[idx] - target > 1e-9 {
                break;
            }
            flows.push(FlowSample { z: seg.states[idx].clone(), u_c: seg.inputs[idx].clone(), t: seg.times[idx] });
            k += 1;
        }
    }
    let jumps = arc.jumps.iter().map(|j| JumpSample { z: j.z_before.clone(), u_d: j.u_d.clone(), t: j.t }).collect();
    (flows, jumps)
}

/// Adds `n_target` ring samples to the bundle, deterministically in `seed`.
pub fn build_ring<S: HybridSystem + ?Sized>(bundle: &mut DatasetBundle, sys: &S, n_target: usize, seed: u64) -> Result<()> {
    if n_target == 0 {
        return Err(Error::InvalidArgument("ring size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7269_6e67]));
    let (ring, proposals) = bundle.sample_ring_points(n_target, &mut rng)?;
    bundle.manifest.ring_ambiguous = ring.iter().filter(|z| !sys.in_flow_set(z) && !sys.in_jump_set(z)).count();
    bundle.manifest.ring_count = ring.len();
    bundle.manifest.ring_proposals = proposals;
    bundle.ring = ring;
    Ok(())
}

/// Empirical covering radius `max_p min_i ‖p − x_i‖`.
pub fn epsilon_net_radius(points: &[Vec<f64>], probes: &[Vec<f64>]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    if points.is_empty() {
        return Ok(f64::INFINITY);
    }
    let index = GridIndex::new(points.to_vec(), typical_spacing(points))?;
    Ok(probes
        .par_iter()
        .map(|p| index.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .reduce(|| 0.0, f64::max))
}

fn typical_spacing(points: &[Vec<f64>]) -> f64 {
    let n = points[0].len();
    let mut extent: f64 = 0.0;
    for k in 0..n {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
        extent = extent.max(hi - lo);
    }
    (extent / (points.len() as f64).powf(1.0 / n.max(1) as f64)).max(1e-9)
}

/// Safe-set points farther than `standoff` from every ring sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThinnedSafe {
    pub flow: Vec<Vec<f64>>,
    pub jump: Vec<Vec<f64>>,
}

pub fn thin_safe_sets(bundle: &DatasetBundle, standoff: f64) -> Result<ThinnedSafe> {
    if !(standoff >= 0.0) {
        return Err(Error::InvalidArgument("standoff must be >= 0".into()));
    }
    let flow: Vec<Vec<f64>> = bundle.safe_flow().map(<[f64]>::to_vec).collect();
    let jump: Vec<Vec<f64>> = bundle.safe_jump().map(<[f64]>::to_vec).collect();
    if standoff == 0.0 || bundle.ring.is_empty() {
        return Ok(ThinnedSafe { flow, jump });
    }
    let ring = GridIndex::new(bundle.ring.clone(), standoff)?;
    let keep = |pts: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        pts.into_iter().filter(|z| ring.nearest(z).is_none_or(|(_, d)| d > standoff)).collect()
    };
    Ok(ThinnedSafe { flow: keep(flow), jump: keep(jump) })
}

/// Probe points for a region, either a lattice of the given spacing over the
/// padded bounding box of the data or uniform rejection samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeSpec {
    Lattice { resolution: f64 },
    Random { count: usize, seed: u64 },
}

pub fn region_probes<S: HybridSystem + ?Sized>(
    bundle: &DatasetBundle,
    sys: &S,
    region: Region,
    spec: ProbeSpec,
) -> Result<Vec<Vec<f64>>> {
    let member = |z: &[f64]| match region {
        Region::Covered => bundle.in_covered(sys, z),
        Region::Ring => bundle.in_ring(z),
    };
    match spec {
        ProbeSpec::Lattice { resolution } => {
            if !(resolution > 0.0) {
                return Err(Error::InvalidArgument("probe resolution must be > 0".into()));
            }
            let (lo, hi) = padded_bounds(bundle);
            let counts: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| ((h - l) / resolution).floor() as usize + 1).collect();
            let total: f64 = counts.iter().map(|c| *c as f64).product();
            if total > 5e7 {
                return Err(Error::InvalidArgument(format!("lattice of {total:.0} points is too large")));
            }
            let total = total as usize;
            let probes: Vec<Vec<f64>> = (0..total)
                .into_par_iter()
                .filter_map(|mut flat| {
                    let z: Vec<f64> = counts
                        .iter()
                        .zip(&lo)
                        .map(|(c, l)| {
                            let i = flat % c;
                            flat /= c;
                            l + i as f64 * resolution
                        })
                        .collect();
                    member(&z).then_some(z)
                })
                .collect();
            Ok(probes)
        }
        ProbeSpec::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match region {
                Region::Ring => Ok(bundle.sample_ring_points(count, &mut rng)?.0),
                Region::Covered => {
                    let n_flow = if bundle.jump.is_empty() { count } else { count - count / 10 };
                    let mut probes = bundle.sample_cover_points(sys, Mode::Flow, n_flow, &mut rng);
                    probes.extend(bundle.sample_cover_points(sys, Mode::Jump, count - n_flow, &mut rng));
                    Ok(probes)
                }
            }
        }
    }
}

fn padded_bounds(bundle: &DatasetBundle) -> (Vec<f64>, Vec<f64>) {
    let n = bundle.state_dim();
    let pad = bundle.geometry.eps_c.max(bundle.geometry.eps_d) + bundle.geometry.sigma;
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for z in bundle.safe_flow().chain(bundle.safe_jump()) {
        for k in 0..n {
            lo[k] = lo[k].min(z[k] - pad);
            hi[k] = hi[k].max(z[k] + pad);
        }
    }
    (lo, hi)
}

fn write_rows<W: Write>(mut out: W, kind: &str, n_z: usize, m: usize, rows: &[(Option<f64>, &[f64], &[f64])]) -> Result<()> {
    let mut header = vec!["kind".to_string(), "t".to_string()];
    header.extend((1..=n_z).map(|i| format!("z_{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (t, z, u) in rows {
        let mut row = vec![kind.to_string(), t.map_or(String::new(), |t| format!("{t}"))];
        row.extend(z.iter().map(|x| format!("{x}")));
        row.extend(u.iter().map(|x| format!("{x}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

type Row = (Option<f64>, Vec<f64>, Vec<f64>);

fn read_rows(path: &Path, expect_kind: &str) -> Result<Vec<Row>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
    let cols: Vec<&str> = header.split(',').collect();
    let n_z = cols.iter().filter(|c| c.starts_with("z_")).count();
    let m = cols.iter().filter(|c| c.starts_with("u_")).count();
    if cols.len() != 2 + n_z + m || cols[0] != "kind" || cols[1] != "t" {
        return Err(Error::Parse(format!("{}: bad header {header:?}", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e} in {s:?}", path.display())));
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() || f[0] != expect_kind {
            return Err(Error::Parse(format!("{}: malformed row {line:?}", path.display())));
        }
        let t = if f[1].is_empty() { None } else { Some(num(f[1])?) };
        let z = f[2..2 + n_z].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let u = f[2 + n_z..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        rows.push((t, z, u));
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    geometry: Geometry,
    #[serde(flatten)]
    manifest: Manifest,
}

pub const FLOW_FILE: &str = "flow.csv";
pub const JUMP_FILE: &str = "jump.csv";
pub const RING_FILE: &str = "ring.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetBundle {
    /// Writes `flow.csv`, `jump.csv`, `ring.csv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.state_dim();
        let m_c = self.flow.first().map_or(0, |s| s.u_c.len());
        let m_d = self.jump.first().map_or(0, |s| s.u_d.len());
        let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        let flow: Vec<_> = self.flow.iter().map(|s| (Some(s.t), s.z.as_slice(), s.u_c.as_slice())).collect();
        write_rows(open(FLOW_FILE)?, "flow", n, m_c, &flow)?;
        let jump: Vec<_> = self.jump.iter().map(|s| (Some(s.t), s.z.as_slice(), s.u_d.as_slice())).collect();
        write_rows(open(JUMP_FILE)?, "jump", n, m_d, &jump)?;
        let ring: Vec<_> = self.ring.iter().map(|z| (None, z.as_slice(), &[][..])).collect();
        write_rows(open(RING_FILE)?, "ring", n, 0, &ring)?;
        let manifest = ManifestFile { geometry: self.geometry, manifest: self.manifest.clone() };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mf: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let flow = read_rows(&dir.join(FLOW_FILE), "flow")?
            .into_iter()
            .map(|(t, z, u)| FlowSample { z, u_c: u, t: t.unwrap_or(0.0) })
            .collect();
        let jump = read_rows(&dir.join(JUMP_FILE), "jump")?
            .into_iter()
            .map(|(t, z, u)| JumpSample { z, u_d: u, t: t.unwrap_or(0.0) })
            .collect();
        let ring = read_rows(&dir.join(RING_FILE), "ring")?.into_iter().map(|(_, z, _)| z).collect();
        let mut bundle = Self::new(flow, jump, mf.geometry)?;
        bundle.ring = ring;
        bundle.manifest = mf.manifest;
        Ok(bundle)
    }
}

/// Nearest flow-sample distance; exposed for diagnostics.
pub fn nearest_flow_distance(bundle: &DatasetBundle, z: &[f64]) -> f64 {
    bundle.flow_index.nearest(z).map_or(f64::INFINITY, |(_, d)| d)
}
