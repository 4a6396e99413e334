//! Experiment configuration, SER Monte Carlo, parameter sweeps and
//! reproducible result persistence.
//!
//! A run has two phases. Phase 1 estimates the symbol-conditioned moment
//! tables from `demod.moment_runs` trajectories per symbol. Phase 2 runs
//! `run.trials` independent trials: draw a symbol uniformly, simulate,
//! observe every configured measurement choice on the same trajectory and
//! demodulate at `t_d`. The two phases draw from disjoint seed ranges.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chem::{make_ligand_receptor_network, ChemError, Reaction, ReactionNetwork};
use crate::demod::{required_moments, uniform_grid, DemodError, Demodulator, MomentBank};
use crate::filtergen::{generate_filter_spec_with, FilterError, FilterOptions, FilterSpec};
use crate::rdme::{Boundary, CtmpSystem, Receiver, SimError, TransmitterModel, VoxelGrid};
use crate::rng::indexed_rng;
use crate::stats::{mcnemar_one_sided, wilson_interval, Interval, Z95};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("sweep path `{path}`: {reason}")]
    SweepPath { path: String, reason: String },
    #[error("manifest config hash {recorded} does not match its contents ({actual})")]
    HashMismatch { recorded: String, actual: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Demod(#[from] DemodError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    #[default]
    Absorbing,
    Reflecting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    /// Voxel edge in µm.
    pub voxel_edge: f64,
    /// Diffusion coefficient of the signalling species in µm²/s.
    pub diffusion: f64,
    #[serde(default)]
    pub boundary: BoundaryKind,
    /// Per-face escape rate at the absorbing boundary; defaults to `d / 50`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterConfig {
    /// One-based `(x, y, z)`.
    pub voxel: [usize; 3],
    #[serde(default = "default_ligand")]
    pub species: String,
    /// Emission rate per symbol, molecules per second.
    pub rates: Vec<f64>,
}

fn default_ligand() -> String {
    "S".into()
}

fn default_receptor() -> String {
    "E".into()
}

/// Units of the bimolecular constants given in the `[receiver]` table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RateUnits {
    /// Already per molecule count.
    #[default]
    Count,
    /// Per concentration; divided by the voxel volume before use.
    Concentration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverConfig {
    /// One-based `(x, y, z)`.
    pub voxel: [usize; 3],
    #[serde(rename = "M")]
    pub receptors: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mus: Option<Vec<f64>>,
    /// Explicit circuit instead of `n_sites`: species names and
    /// `"A + B -> C @ rate"` lines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reactions: Option<Vec<String>>,
    #[serde(default = "default_receptor")]
    pub receptor: String,
    #[serde(default)]
    pub rate_units: RateUnits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemodConfig {
    /// Measurement choices, each a list of receiver species.
    pub measure: Vec<Vec<String>>,
    /// Simulation horizon in seconds.
    pub horizon: f64,
    /// Decision time; defaults to the horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_d: Option<f64>,
    #[serde(default = "default_moment_runs")]
    pub moment_runs: usize,
    /// Number of intervals in the moment grid.
    #[serde(default = "default_moment_steps")]
    pub moment_steps: usize,
}

fn default_moment_runs() -> usize {
    500
}

fn default_moment_steps() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub trials: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub transmitter: TransmitterConfig,
    pub receiver: ReceiverConfig,
    pub demod: DemodConfig,
    pub run: RunConfig,
}

const REQUIRED: &[&str] = &[
    "grid.dims",
    "grid.voxel_edge",
    "grid.diffusion",
    "transmitter.voxel",
    "transmitter.rates",
    "receiver.voxel",
    "receiver.M",
    "demod.measure",
    "demod.horizon",
    "run.trials",
    "run.seed",
];

fn lookup<'a>(value: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(value, |v, key| v.get(key))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        Self::from_value(toml::Value::Table(table))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn from_value(value: toml::Value) -> Result<Self, HarnessError> {
        if let Some(missing) = REQUIRED.iter().find(|k| lookup(&value, k).is_none()) {
            return Err(HarnessError::MissingKey(missing.to_string()));
        }
        let receiver = value.get("receiver");
        let has = |k: &str| receiver.and_then(|r| r.get(k)).is_some();
        if !has("species") && !has("reactions") {
            for k in ["n_sites", "lambdas", "mus"] {
                if !has(k) {
                    return Err(HarnessError::MissingKey(format!("receiver.{k}")));
                }
            }
        } else {
            for k in ["species", "reactions"] {
                if !has(k) {
                    return Err(HarnessError::MissingKey(format!("receiver.{k}")));
                }
            }
        }
        let config: Self = value.try_into().map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config serializes to TOML")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.run.trials == 0 {
            return bad("run.trials must be at least 1".into());
        }
        if self.transmitter.rates.is_empty() {
            return bad("transmitter.rates needs at least one symbol".into());
        }
        if !(self.demod.horizon.is_finite() && self.demod.horizon > 0.0) {
            return bad(format!("demod.horizon must be positive, got {}", self.demod.horizon));
        }
        let t_d = self.t_d();
        if !(t_d > 0.0 && t_d <= self.demod.horizon) {
            return bad(format!("demod.t_d must lie in (0, horizon], got {t_d}"));
        }
        if self.demod.moment_runs < 2 {
            return bad("demod.moment_runs must be at least 2".into());
        }
        if self.demod.moment_steps == 0 {
            return bad("demod.moment_steps must be at least 1".into());
        }
        if self.demod.measure.is_empty() || self.demod.measure.iter().any(|m| m.is_empty()) {
            return bad("demod.measure needs at least one non-empty species list".into());
        }
        let network = self.network()?;
        for m in self.demod.measure.iter().flatten() {
            if network.species_id(m).is_none() {
                return bad(format!("measured species `{m}` is not in the receiver circuit"));
            }
        }
        if network.species_id(&self.receiver.receptor).is_none() {
            return bad(format!("receptor `{}` is not in the receiver circuit", self.receiver.receptor));
        }
        for (name, v) in [("transmitter.voxel", self.transmitter.voxel), ("receiver.voxel", self.receiver.voxel)] {
            if (0..3).any(|a| v[a] == 0 || v[a] > self.grid.dims[a]) {
                return bad(format!("{name} {v:?} lies outside the one-based grid {:?}", self.grid.dims));
            }
        }
        Ok(())
    }

    pub fn t_d(&self) -> f64 {
        self.demod.t_d.unwrap_or(self.demod.horizon)
    }

    pub fn n_symbols(&self) -> usize {
        self.transmitter.rates.len()
    }

    /// Receiver circuit with count-based constants.
    pub fn network(&self) -> Result<ReactionNetwork, HarnessError> {
        let r = &self.receiver;
        let raw = match (&r.species, &r.reactions) {
            (Some(species), Some(reactions)) => ReactionNetwork::parse(species, reactions)?,
            _ => {
                let missing = |k: &str| HarnessError::MissingKey(format!("receiver.{k}"));
                let n = r.n_sites.ok_or_else(|| missing("n_sites"))?;
                let lambdas = r.lambdas.as_ref().ok_or_else(|| missing("lambdas"))?;
                let mus = r.mus.as_ref().ok_or_else(|| missing("mus"))?;
                make_ligand_receptor_network(n, lambdas, mus)?
            }
        };
        match r.rate_units {
            RateUnits::Count => Ok(raw),
            RateUnits::Concentration => {
                let volume = self.grid.voxel_edge.powi(3);
                let reactions = raw
                    .reactions()
                    .iter()
                    .map(|rx| {
                        let k = if rx.order() == 2 { rx.rate_constant() / volume } else { rx.rate_constant() };
                        Reaction::new(
                            rx.reactants().iter().map(|(&s, &c)| (s, c)),
                            rx.products().iter().map(|(&s, &c)| (s, c)),
                            k,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ReactionNetwork::new(raw.species().to_vec(), reactions)?)
            }
        }
    }

    pub fn build_system(&self) -> Result<CtmpSystem, HarnessError> {
        let g = &self.grid;
        let hop = g.diffusion / (g.voxel_edge * g.voxel_edge);
        let boundary = match g.boundary {
            BoundaryKind::Reflecting => Boundary::Reflecting,
            BoundaryKind::Absorbing => Boundary::Absorbing {
                escape_rate: g.escape_rate.unwrap_or(hop / 50.0),
            },
        };
        let grid = VoxelGrid::new(g.dims, g.voxel_edge, boundary)?.with_diffusion(&self.transmitter.species, g.diffusion)?;
        let tx = grid.index_one_based(self.transmitter.voxel)?;
        let rx = grid.index_one_based(self.receiver.voxel)?;
        Ok(CtmpSystem::build(
            grid,
            TransmitterModel {
                voxel: tx,
                species: self.transmitter.species.clone(),
                emission_rates: self.transmitter.rates.clone(),
            },
            Receiver {
                network: self.network()?,
                voxel: rx,
                receptor: self.receiver.receptor.clone(),
                receptor_count: self.receiver.receptors,
            },
        )?)
    }
}

/// Circuit species that only change through the circuit's own reactions.
pub fn closed_species(system: &CtmpSystem) -> Vec<String> {
    let tx = &system.transmitter().species;
    system
        .network()
        .species()
        .iter()
        .filter(|s| *s != tx && system.grid().hop_rate(s) == 0.0)
        .cloned()
        .collect()
}

/// Filter spec for `measured`, with conservation totals bound to the
/// system's initial receiver state.
pub fn filter_spec_for(system: &CtmpSystem, measured: &[String]) -> Result<FilterSpec, HarnessError> {
    let options = FilterOptions {
        closed: closed_species(system),
    };
    let spec = generate_filter_spec_with(system.network(), measured, &options)?;
    let init = system.initial_state();
    let rx = system.rx_voxel();
    Ok(spec.bind_totals(|s| init.count(rx, s)))
}

pub fn measure_label(measured: &[String]) -> String {
    measured.join("+")
}

/// System, per-measurement filter specs and the shared moment bank.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub system: CtmpSystem,
    pub specs: Vec<FilterSpec>,
    pub bank: MomentBank,
}

/// Phase 1: builds the system and estimates every moment any configured
/// measurement needs. Uses streams `0 .. K * moment_runs` of the run seed.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let system = config.build_system()?;
    let specs = config
        .demod
        .measure
        .iter()
        .map(|m| filter_spec_for(&system, m))
        .collect::<Result<Vec<_>, _>>()?;
    let descriptors: Vec<_> = specs
        .iter()
        .flat_map(required_moments)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let grid = uniform_grid(config.demod.horizon, config.demod.moment_steps);
    let bank = MomentBank::estimate(&system, &descriptors, config.demod.moment_runs, &grid, config.run.seed)?;
    Ok(Prepared { system, specs, bank })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementResult {
    pub measured: Vec<String>,
    pub trials: u64,
    pub errors: u64,
    pub ser: f64,
    pub ci: Interval,
    /// `confusion[sent][decided]`.
    pub confusion: Vec<Vec<u64>>,
    /// Jumps whose rate was clamped at the floor, over all trials.
    pub clamped: u64,
    /// Decided symbol per trial.
    pub decisions: Vec<usize>,
}

/// Everything a run determines from its config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerOutcome {
    /// Sent symbol per trial.
    pub sent: Vec<usize>,
    pub measurements: Vec<MeasurementResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerResult {
    pub outcome: SerOutcome,
    pub runtime: Duration,
}

impl SerOutcome {
    pub fn find(&self, measured: &[&str]) -> Option<&MeasurementResult> {
        self.measurements.iter().find(|m| m.measured.iter().map(String::as_str).eq(measured.iter().copied()))
    }

    /// Exact one-sided McNemar p-value for "`a` errs more often than `b`"
    /// on the paired trials.
    pub fn mcnemar_worse(&self, a: &MeasurementResult, b: &MeasurementResult) -> f64 {
        let (mut only_a, mut only_b) = (0, 0);
        for (t, &s) in self.sent.iter().enumerate() {
            match (a.decisions[t] != s, b.decisions[t] != s) {
                (true, false) => only_a += 1,
                (false, true) => only_b += 1,
                _ => {}
            }
        }
        mcnemar_one_sided(only_a, only_b)
    }

    /// CSV `measure,trials,errors,ser,ci_low,ci_high,clamped`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "measure,trials,errors,ser,ci_low,ci_high,clamped")?;
        for m in &self.measurements {
            writeln!(
                w,
                "{},{},{},{:.6},{:.6},{:.6},{}",
                measure_label(&m.measured),
                m.trials,
                m.errors,
                m.ser,
                m.ci.lo,
                m.ci.hi,
                m.clamped
            )?;
        }
        Ok(())
    }

    /// CSV `measure,sent,decided,count`.
    pub fn write_confusion_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "measure,sent,decided,count")?;
        for m in &self.measurements {
            for (s, row) in m.confusion.iter().enumerate() {
                for (d, n) in row.iter().enumerate() {
                    writeln!(w, "{},{s},{d},{n}", measure_label(&m.measured))?;
                }
            }
        }
        Ok(())
    }

    /// CSV `trial,sent,<one decided column per measurement>`.
    pub fn write_trials_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let labels: Vec<String> = self.measurements.iter().map(|m| measure_label(&m.measured)).collect();
        writeln!(w, "trial,sent,{}", labels.join(","))?;
        for (t, s) in self.sent.iter().enumerate() {
            let d: Vec<String> = self.measurements.iter().map(|m| m.decisions[t].to_string()).collect();
            writeln!(w, "{t},{s},{}", d.join(","))?;
        }
        Ok(())
    }
}

/// Phase 2 on an already prepared system. Trial `i` draws its symbol and its
/// trajectory from stream `K * moment_runs + i` of the run seed.
pub fn run_trials(config: &ExperimentConfig, prepared: &Prepared) -> Result<SerOutcome, HarnessError> {
    let k = config.n_symbols();
    let first = (k * config.demod.moment_runs) as u64;
    let t_d = config.t_d();
    let demods: Vec<Demodulator> = prepared.specs.iter().map(|s| Demodulator::new(s, &prepared.bank)).collect();
    let per_trial: Vec<(usize, Vec<(usize, usize)>)> = (0..config.run.trials)
        .into_par_iter()
        .map(|i| -> Result<_, HarnessError> {
            let mut rng = indexed_rng(config.run.seed, first + i as u64);
            let symbol = rng.random_range(0..k);
            let traj = prepared.system.simulate_rng(symbol, config.demod.horizon, &mut rng)?;
            let decisions = config
                .demod
                .measure
                .iter()
                .zip(&demods)
                .map(|(m, demod)| {
                    let history = prepared.system.observe(&traj, m)?;
                    let state = demod.run(&history, t_d)?;
                    let d = crate::demod::decide(&state)?;
                    Ok((d.symbol, d.clamped))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok((symbol, decisions))
        })
        .collect::<Result<_, _>>()?;

    let sent: Vec<usize> = per_trial.iter().map(|(s, _)| *s).collect();
    let measurements = config
        .demod
        .measure
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let mut confusion = vec![vec![0u64; k]; k];
            let mut clamped = 0u64;
            let mut decisions = Vec::with_capacity(sent.len());
            for (s, ds) in &per_trial {
                let (d, c) = ds[j];
                confusion[*s][d] += 1;
                clamped += c as u64;
                decisions.push(d);
            }
            let trials = sent.len() as u64;
            let errors = trials - (0..k).map(|s| confusion[s][s]).sum::<u64>();
            MeasurementResult {
                measured: m.clone(),
                trials,
                errors,
                ser: errors as f64 / trials as f64,
                ci: wilson_interval(errors, trials, Z95),
                confusion,
                clamped,
                decisions,
            }
        })
        .collect();
    Ok(SerOutcome { sent, measurements })
}

pub fn run_ser(config: &ExperimentConfig) -> Result<SerResult, HarnessError> {
    let start = Instant::now();
    let prepared = prepare(config)?;
    let outcome = run_trials(config, &prepared)?;
    Ok(SerResult {
        outcome,
        runtime: start.elapsed(),
    })
}

/// A scalar config field and the values to give it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Dotted path with optional array indices, e.g. `receiver.lambdas[2]`.
    pub path: String,
    pub values: Vec<toml::Value>,
}

/// Replaces the scalar at `path` in `root`.
pub fn set_path(root: &mut toml::Value, path: &str, new: toml::Value) -> Result<(), HarnessError> {
    let err = |reason: &str| HarnessError::SweepPath {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let mut cur = root;
    for part in path.split('.') {
        let (key, indices) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        cur = cur.get_mut(key).ok_or_else(|| err(&format!("no key `{key}`")))?;
        for idx in indices.split('[').skip(1) {
            let n: usize = idx
                .strip_suffix(']')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad index"))?;
            cur = cur.get_mut(n).ok_or_else(|| err(&format!("index {n} out of range")))?;
        }
    }
    if cur.is_table() || cur.is_array() {
        return Err(err("does not address a scalar"));
    }
    *cur = new;
    Ok(())
}

/// One config per sweep value; all share the base seed, so a single-value
/// sweep reproduces [`run_ser`] exactly.
pub fn sweep_configs(config: &ExperimentConfig, sweep: &SweepSpec) -> Result<Vec<ExperimentConfig>, HarnessError> {
    sweep
        .values
        .iter()
        .map(|v| {
            let mut value = config.to_value();
            set_path(&mut value, &sweep.path, v.clone())?;
            ExperimentConfig::from_value(value)
        })
        .collect()
}

pub fn run_sweep(config: &ExperimentConfig, sweep: &SweepSpec) -> Result<Vec<SerResult>, HarnessError> {
    sweep_configs(config, sweep)?.iter().map(run_ser).collect()
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Tidy CSV, one row per (value, measurement):
/// `parameter,value,measure,trials,errors,ser,ci_low,ci_high`.
pub fn write_sweep_csv<W: Write>(sweep: &SweepSpec, results: &[SerResult], mut w: W) -> io::Result<()> {
    writeln!(w, "parameter,value,measure,trials,errors,ser,ci_low,ci_high")?;
    for (v, r) in sweep.values.iter().zip(results) {
        for m in &r.outcome.measurements {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6}",
                sweep.path,
                value_text(v),
                measure_label(&m.measured),
                m.trials,
                m.errors,
                m.ser,
                m.ci.lo,
                m.ci.hi
            )?;
        }
    }
    Ok(())
}

/// Reproducibility record stored next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, sweep: Option<SweepSpec>) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: config.hash(),
            seed: config.run.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            sweep,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// The config with a `[manifest]` table appended; loadable by [`load_manifest`].
pub fn manifest_text(config: &ExperimentConfig, manifest: &Manifest) -> String {
    let mut value = config.to_value();
    if let toml::Value::Table(t) = &mut value {
        t.insert("manifest".into(), toml::Value::try_from(manifest).expect("manifest serializes"));
    }
    toml::to_string(&value).expect("manifest serializes")
}

/// Reads a manifest written by [`persist_ser`] or [`persist_sweep`] and
/// checks its config hash.
pub fn load_manifest(path: &Path) -> Result<(ExperimentConfig, Manifest), HarnessError> {
    let mut table: toml::Table = toml::from_str(&fs::read_to_string(path)?).map_err(|e| HarnessError::Parse(e.to_string()))?;
    let manifest: Manifest = table
        .remove("manifest")
        .ok_or_else(|| HarnessError::MissingKey("manifest".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
    let config = ExperimentConfig::from_value(toml::Value::Table(table))?;
    let actual = config.hash();
    if actual != manifest.config_sha256 {
        return Err(HarnessError::HashMismatch {
            recorded: manifest.config_sha256,
            actual,
        });
    }
    Ok((config, manifest))
}

fn write_file(path: PathBuf, write: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<PathBuf, HarnessError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(&path, buf)?;
    Ok(path)
}

/// Writes `ser.csv`, `confusion.csv`, `trials.csv` and the manifest into `dir`.
pub fn persist_ser(config: &ExperimentConfig, result: &SerResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let o = &result.outcome;
    Ok(vec![
        write_file(dir.join("ser.csv"), |b| o.write_csv(b))?,
        write_file(dir.join("confusion.csv"), |b| o.write_confusion_csv(b))?,
        write_file(dir.join("trials.csv"), |b| o.write_trials_csv(b))?,
        write_file(dir.join(MANIFEST_FILE), |b| {
            b.write_all(manifest_text(config, &Manifest::new("ser", config, None)).as_bytes())
        })?,
    ])
}

/// Writes `sweep.csv` and the manifest into `dir`.
pub fn persist_sweep(config: &ExperimentConfig, sweep: &SweepSpec, results: &[SerResult], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    Ok(vec![
        write_file(dir.join("sweep.csv"), |b| write_sweep_csv(sweep, results, b))?,
        write_file(dir.join(MANIFEST_FILE), |b| {
            b.write_all(manifest_text(config, &Manifest::new("sweep", config, Some(sweep.clone()))).as_bytes())
        })?,
    ])
}

/// Re-runs whatever a manifest records and writes the same files into `dir`.
pub fn rerun_manifest(path: &Path, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let (config, manifest) = load_manifest(path)?;
    match (manifest.command.as_str(), &manifest.sweep) {
        ("sweep", Some(sweep)) => persist_sweep(&config, sweep, &run_sweep(&config, sweep)?, dir),
        ("ser", None) => persist_ser(&config, &run_ser(&config)?, dir),
        (other, _) => Err(HarnessError::Invalid(format!("manifest command `{other}` cannot be re-run"))),
    }
}

/// The 6×6×3 grid experiment with the three-site receptor, measured four ways.
pub const THREE_SITE_CONFIG: &str = include_str!("../../../configs/three_site.toml");
/// The five-site receptor variant.
pub const FIVE_SITE_CONFIG: &str = include_str!("../../../configs/five_site.toml");

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml_str(THREE_SITE_CONFIG).unwrap();
        c.run.trials = 12;
        c.demod.moment_runs = 20;
        c.demod.moment_steps = 20;
        c
    }

    #[test]
    fn shipped_configs_load() {
        let c = ExperimentConfig::from_toml_str(THREE_SITE_CONFIG).unwrap();
        assert_eq!(c.grid.dims, [6, 6, 3]);
        assert_eq!(c.transmitter.voxel, [2, 3, 2]);
        assert_eq!(c.receiver.voxel, [5, 3, 2]);
        assert_eq!(c.demod.measure.len(), 4);
        let sys = c.build_system().unwrap();
        assert_eq!(sys.grid().index_one_based([5, 3, 2]).unwrap(), sys.rx_voxel());
        match sys.grid().boundary() {
            Boundary::Absorbing { escape_rate } => assert!((escape_rate - 9.0 / 50.0).abs() < 1e-12),
            b => panic!("{b:?}"),
        }
        let f = ExperimentConfig::from_toml_str(FIVE_SITE_CONFIG).unwrap();
        assert_eq!(f.receiver.n_sites, Some(5));
        assert_eq!(f.demod.measure.len(), 6);
    }

    #[test]
    fn missing_keys_are_named() {
        let text = THREE_SITE_CONFIG.replace("M = ", "receptors_typo = ");
        match ExperimentConfig::from_toml_str(&text) {
            Err(HarnessError::MissingKey(k)) => assert_eq!(k, "receiver.M"),
            other => panic!("{other:?}"),
        }
        let text = THREE_SITE_CONFIG.replace("lambdas = ", "# lambdas = ");
        match ExperimentConfig::from_toml_str(&text) {
            Err(HarnessError::MissingKey(k)) => assert_eq!(k, "receiver.lambdas"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut v = small().to_value();
        set_path(&mut v, "run.trials", toml::Value::Integer(0)).unwrap();
        assert!(matches!(ExperimentConfig::from_value(v), Err(HarnessError::Invalid(_))));
        let mut v = small().to_value();
        set_path(&mut v, "receiver.voxel[0]", toml::Value::Integer(0)).unwrap();
        assert!(matches!(ExperimentConfig::from_value(v), Err(HarnessError::Invalid(_))));
        let mut v = small().to_value();
        set_path(&mut v, "demod.measure[0][0]", toml::Value::String("Q".into())).unwrap();
        assert!(matches!(ExperimentConfig::from_value(v), Err(HarnessError::Invalid(_))));
        assert!(matches!(ExperimentConfig::from_toml_str("grid = 3"), Err(HarnessError::MissingKey(_))));
    }

    #[test]
    fn sweep_paths() {
        let mut v = small().to_value();
        set_path(&mut v, "receiver.lambdas[2]", toml::Value::Float(2.0)).unwrap();
        set_path(&mut v, "receiver.M", toml::Value::Integer(50)).unwrap();
        let c = ExperimentConfig::from_value(v.clone()).unwrap();
        assert_eq!(c.receiver.lambdas.as_ref().unwrap()[2], 2.0);
        assert_eq!(c.receiver.receptors, 50);
        assert!(set_path(&mut v, "receiver.lambdas", toml::Value::Float(1.0)).is_err());
        assert!(set_path(&mut v, "receiver.nope", toml::Value::Float(1.0)).is_err());
        assert!(set_path(&mut v, "receiver.lambdas[9]", toml::Value::Float(1.0)).is_err());
    }

    #[test]
    fn concentration_units_scale_binding_only() {
        let mut c = small();
        c.receiver.rate_units = RateUnits::Concentration;
        let net = c.network().unwrap();
        let w3 = c.grid.voxel_edge.powi(3);
        assert!((net.reactions()[0].rate_constant() - c.receiver.lambdas.as_ref().unwrap()[0] / w3).abs() < 1e-9);
        assert_eq!(net.reactions()[1].rate_constant(), c.receiver.mus.as_ref().unwrap()[0]);
    }

    #[test]
    fn closed_species_exclude_the_ligand() {
        let sys = small().build_system().unwrap();
        assert_eq!(closed_species(&sys), ["E", "C1", "C2", "C3"]);
        let spec = filter_spec_for(&sys, &["C1".into(), "C2".into(), "C3".into()]).unwrap();
        assert_eq!(spec.laws.len(), 1);
        assert_eq!(spec.laws[0].total, Some(10));
    }

    #[test]
    fn ser_is_deterministic_and_well_formed() {
        let c = small();
        let a = run_ser(&c).unwrap();
        let b = run_ser(&c).unwrap();
        assert_eq!(a.outcome, b.outcome);
        for m in &a.outcome.measurements {
            assert_eq!(m.trials, 12);
            assert!(m.errors <= m.trials);
            assert!(m.ci.lo >= 0.0 && m.ci.hi <= 1.0 && m.ci.contains(m.ser));
            assert_eq!(m.confusion.iter().flatten().sum::<u64>(), 12);
        }
        let mut csv = Vec::new();
        a.outcome.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("measure,trials,errors,ser,ci_low,ci_high,clamped\nC1,12,"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn single_value_sweep_matches_ser() {
        let c = small();
        let sweep = SweepSpec {
            path: "receiver.M".into(),
            values: vec![toml::Value::Integer(10)],
        };
        let r = run_sweep(&c, &sweep).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].outcome, run_ser(&c).unwrap().outcome);
        let mut csv = Vec::new();
        write_sweep_csv(&sweep, &r, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.lines().nth(1).unwrap().starts_with("receiver.M,10,C1,12,"));
    }

    #[test]
    fn manifest_round_trip_reproduces_files() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        let files = persist_ser(&c, &run_ser(&c).unwrap(), &first).unwrap();
        let (loaded, m) = load_manifest(&first.join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, c);
        assert_eq!(m.seed, c.run.seed);
        assert_eq!(m.config_sha256, c.hash());
        rerun_manifest(&first.join(MANIFEST_FILE), &second).unwrap();
        for f in files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(&f).unwrap(), fs::read(second.join(name)).unwrap(), "{name:?}");
        }
        let tampered = fs::read_to_string(first.join(MANIFEST_FILE)).unwrap().replace("trials = 12", "trials = 13");
        fs::write(first.join(MANIFEST_FILE), tampered).unwrap();
        assert!(matches!(load_manifest(&first.join(MANIFEST_FILE)), Err(HarnessError::HashMismatch { .. })));
    }
}
