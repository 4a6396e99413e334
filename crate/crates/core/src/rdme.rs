//! End-to-end continuous-time Markov model on a voxel lattice and its exact
//! stochastic simulation.
//!
//! Every jump of the model is one [`Channel`]: a receiver reaction in the
//! receiver voxel, a diffusion hop of one molecule to a face neighbour, an
//! escape through an outward boundary face, or a transmitter emission. The
//! simulator is Gillespie's direct method with a linear channel scan.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{ChemError, ReactionNetwork, SpeciesId};
use crate::rng::stream_rng;

/// Total propensity above which a run is aborted.
pub const DEFAULT_PROPENSITY_CAP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("voxel {0:?} lies outside the grid")]
    VoxelOutOfRange([usize; 3]),
    #[error("voxel index {0} lies outside the grid")]
    VoxelIndexOutOfRange(usize),
    #[error("unknown species `{0}`")]
    UnknownSpecies(String),
    #[error("invalid transmitter: {0}")]
    InvalidTransmitter(String),
    #[error("symbol {symbol} is not defined (transmitter has {k} symbols)")]
    UnknownSymbol { symbol: usize, k: usize },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("total propensity {total:e} at t = {time} exceeds the cap {cap:e}")]
    PropensityOverflow { total: f64, time: f64, cap: f64 },
    #[error("species `{0}` is not measured at the receiver voxel")]
    NotMeasurable(String),
    #[error("at least one measured species is required")]
    NothingMeasured,
    #[error(transparent)]
    Chem(#[from] ChemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    Reflecting,
    /// Molecules leave through each outward face of a boundary voxel at
    /// `escape_rate` per molecule.
    Absorbing { escape_rate: f64 },
}

/// Cubic lattice of `nx × ny × nz` voxels of edge `W` (µm).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_edge: f64,
    diffusion: BTreeMap<String, f64>,
    boundary: Boundary,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_edge: f64, boundary: Boundary) -> Result<Self, SimError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SimError::InvalidGrid(format!("all dimensions must be >= 1, got {dims:?}")));
        }
        if !(voxel_edge.is_finite() && voxel_edge > 0.0) {
            return Err(SimError::InvalidGrid(format!("voxel edge must be positive, got {voxel_edge}")));
        }
        if let Boundary::Absorbing { escape_rate } = boundary {
            if !(escape_rate.is_finite() && escape_rate >= 0.0) {
                return Err(SimError::InvalidGrid(format!("escape rate must be >= 0, got {escape_rate}")));
            }
        }
        Ok(Self {
            dims,
            voxel_edge,
            diffusion: BTreeMap::new(),
            boundary,
        })
    }

    /// Declares `species` diffusible with coefficient `coeff` (µm²/s).
    pub fn with_diffusion(mut self, species: &str, coeff: f64) -> Result<Self, SimError> {
        if !(coeff.is_finite() && coeff >= 0.0) {
            return Err(SimError::InvalidGrid(format!("diffusion coefficient must be >= 0, got {coeff}")));
        }
        self.diffusion.insert(species.to_string(), coeff);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_edge(&self) -> f64 {
        self.voxel_edge
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn diffusion(&self) -> &BTreeMap<String, f64> {
        &self.diffusion
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Hop rate `d = D / W²` for one molecule towards one neighbour.
    pub fn hop_rate(&self, species: &str) -> f64 {
        let d = self.diffusion.get(species).copied().unwrap_or(0.0);
        d / (self.voxel_edge * self.voxel_edge)
    }

    /// Linear index of a zero-based coordinate, x fastest.
    pub fn index(&self, coord: [usize; 3]) -> Result<usize, SimError> {
        let [nx, ny, nz] = self.dims;
        let [x, y, z] = coord;
        if x >= nx || y >= ny || z >= nz {
            return Err(SimError::VoxelOutOfRange(coord));
        }
        Ok(x + nx * (y + ny * z))
    }

    /// Linear index of a one-based coordinate such as `(2, 3, 2)`.
    pub fn index_one_based(&self, coord: [usize; 3]) -> Result<usize, SimError> {
        if coord.iter().any(|&c| c == 0) {
            return Err(SimError::VoxelOutOfRange(coord));
        }
        self.index([coord[0] - 1, coord[1] - 1, coord[2] - 1])
            .map_err(|_| SimError::VoxelOutOfRange(coord))
    }

    pub fn coord(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Face neighbours of `index` (up to six).
    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        let c = self.coord(index);
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            if c[axis] > 0 {
                let mut n = c;
                n[axis] -= 1;
                out.push(self.index(n).expect("in range"));
            }
            if c[axis] + 1 < self.dims[axis] {
                let mut n = c;
                n[axis] += 1;
                out.push(self.index(n).expect("in range"));
            }
        }
        out
    }

    /// Number of faces of `index` that lie on the outer surface.
    pub fn outward_faces(&self, index: usize) -> usize {
        let c = self.coord(index);
        (0..3)
            .map(|axis| usize::from(c[axis] == 0) + usize::from(c[axis] + 1 == self.dims[axis]))
            .sum()
    }
}

/// Transmitter emitting one species as a Poisson stream whose rate depends on the symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmitterModel {
    pub voxel: usize,
    pub species: String,
    /// Mean molecules per second for symbol `s` at index `s`.
    pub emission_rates: Vec<f64>,
}

impl TransmitterModel {
    pub fn n_symbols(&self) -> usize {
        self.emission_rates.len()
    }
}

/// Receiver circuit placed in a single voxel with `receptor_count` free receptors at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Receiver {
    pub network: ReactionNetwork,
    pub voxel: usize,
    pub receptor: String,
    pub receptor_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    Reaction { reaction: usize },
    Diffusion { from: usize, to: usize, species: SpeciesId },
    Emission,
    Escape { voxel: usize, species: SpeciesId },
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::Reaction { reaction } => write!(f, "reaction:R{}", reaction + 1),
            ChannelKind::Diffusion { from, to, .. } => write!(f, "diffusion:{from}->{to}"),
            ChannelKind::Emission => f.write_str("emission"),
            ChannelKind::Escape { voxel, .. } => write!(f, "escape:{voxel}"),
        }
    }
}

/// One jump channel. Reactant and delta entries address the flat count
/// vector (`voxel * n_species + species`).
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub kind: ChannelKind,
    reactants: Vec<(usize, u32)>,
    rate: f64,
    delta: Vec<(usize, i64)>,
}

impl Channel {
    pub fn rate_constant(&self) -> f64 {
        self.rate
    }
}

/// Counts of every species in every voxel at one instant.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SystemState {
    pub counts: Vec<u64>,
    pub n_species: usize,
}

impl SystemState {
    pub fn count(&self, voxel: usize, species: SpeciesId) -> u64 {
        self.counts[voxel * self.n_species + species.0]
    }

    pub fn total(&self, species: SpeciesId) -> u64 {
        self.counts.iter().skip(species.0).step_by(self.n_species).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDelta {
    pub voxel: usize,
    pub species: SpeciesId,
    pub change: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub channel: ChannelKind,
    pub delta: Vec<StateDelta>,
}

/// The assembled CTMP: species table, channels and initial state.
#[derive(Debug, Clone)]
pub struct CtmpSystem {
    grid: VoxelGrid,
    species: Vec<String>,
    network: ReactionNetwork,
    transmitter: TransmitterModel,
    rx_voxel: usize,
    channels: Vec<Channel>,
    /// For each channel, the channels whose propensity changes when it fires.
    affected: Vec<Vec<usize>>,
    initial: Vec<u64>,
    propensity_cap: f64,
}

impl CtmpSystem {
    pub fn build(grid: VoxelGrid, transmitter: TransmitterModel, receiver: Receiver) -> Result<Self, SimError> {
        let n_voxels = grid.n_voxels();
        for v in [transmitter.voxel, receiver.voxel] {
            if v >= n_voxels {
                return Err(SimError::VoxelIndexOutOfRange(v));
            }
        }
        if transmitter.emission_rates.is_empty() {
            return Err(SimError::InvalidTransmitter("no symbols defined".into()));
        }
        if let Some(r) = transmitter.emission_rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(SimError::InvalidTransmitter(format!("emission rate must be >= 0, got {r}")));
        }

        let network = receiver.network;
        let mut species: Vec<String> = network.species().to_vec();
        let mut declare = |name: &str| -> usize {
            match species.iter().position(|s| s == name) {
                Some(i) => i,
                None => {
                    species.push(name.to_string());
                    species.len() - 1
                }
            }
        };
        let tx_species = declare(&transmitter.species);
        let diffusible: Vec<(usize, f64)> = grid
            .diffusion()
            .iter()
            .filter(|(_, &d)| d > 0.0)
            .map(|(name, _)| (declare(name), grid.hop_rate(name)))
            .collect();
        let receptor = network
            .species_id(&receiver.receptor)
            .ok_or_else(|| SimError::UnknownSpecies(receiver.receptor.clone()))?;

        let ns = species.len();
        let flat = |voxel: usize, s: usize| voxel * ns + s;
        let mut channels = Vec::new();

        for (i, r) in network.reactions().iter().enumerate() {
            channels.push(Channel {
                kind: ChannelKind::Reaction { reaction: i },
                reactants: r.reactants().iter().map(|(&s, &c)| (flat(receiver.voxel, s.0), c)).collect(),
                rate: r.rate_constant(),
                delta: r.net_change().into_iter().map(|(s, c)| (flat(receiver.voxel, s.0), c)).collect(),
            });
        }
        for &(s, hop) in &diffusible {
            for v in 0..n_voxels {
                for to in grid.neighbors(v) {
                    channels.push(Channel {
                        kind: ChannelKind::Diffusion {
                            from: v,
                            to,
                            species: SpeciesId(s),
                        },
                        reactants: vec![(flat(v, s), 1)],
                        rate: hop,
                        delta: vec![(flat(v, s), -1), (flat(to, s), 1)],
                    });
                }
            }
        }
        if let Boundary::Absorbing { escape_rate } = grid.boundary() {
            if escape_rate > 0.0 {
                for &(s, _) in &diffusible {
                    for v in 0..n_voxels {
                        for _ in 0..grid.outward_faces(v) {
                            channels.push(Channel {
                                kind: ChannelKind::Escape {
                                    voxel: v,
                                    species: SpeciesId(s),
                                },
                                reactants: vec![(flat(v, s), 1)],
                                rate: escape_rate,
                                delta: vec![(flat(v, s), -1)],
                            });
                        }
                    }
                }
            }
        }
        channels.push(Channel {
            kind: ChannelKind::Emission,
            reactants: Vec::new(),
            rate: 0.0,
            delta: vec![(flat(transmitter.voxel, tx_species), 1)],
        });

        let mut readers: Vec<Vec<usize>> = vec![Vec::new(); n_voxels * ns];
        for (c, ch) in channels.iter().enumerate() {
            for &(idx, _) in &ch.reactants {
                readers[idx].push(c);
            }
        }
        let affected = channels
            .iter()
            .map(|ch| {
                let mut list: Vec<usize> = ch.delta.iter().flat_map(|&(idx, _)| readers[idx].iter().copied()).collect();
                list.sort_unstable();
                list.dedup();
                list
            })
            .collect();

        let mut initial = vec![0; n_voxels * ns];
        initial[flat(receiver.voxel, receptor.0)] = receiver.receptor_count;

        Ok(Self {
            grid,
            species,
            network,
            transmitter,
            rx_voxel: receiver.voxel,
            channels,
            affected,
            initial,
            propensity_cap: DEFAULT_PROPENSITY_CAP,
        })
    }

    /// Overrides the initial count of `species` in `voxel`.
    pub fn with_initial_count(mut self, voxel: usize, species: &str, count: u64) -> Result<Self, SimError> {
        let s = self.species_id(species)?;
        if voxel >= self.grid.n_voxels() {
            return Err(SimError::VoxelIndexOutOfRange(voxel));
        }
        let idx = self.flat(voxel, s);
        self.initial[idx] = count;
        Ok(self)
    }

    pub fn with_propensity_cap(mut self, cap: f64) -> Self {
        self.propensity_cap = cap;
        self
    }

    /// Same system with the transmitter's per-symbol emission rates replaced.
    pub fn with_emission_rates(mut self, rates: Vec<f64>) -> Self {
        self.transmitter.emission_rates = rates;
        self
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn network(&self) -> &ReactionNetwork {
        &self.network
    }

    pub fn transmitter(&self) -> &TransmitterModel {
        &self.transmitter
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.transmitter.n_symbols()
    }

    pub fn rx_voxel(&self) -> usize {
        self.rx_voxel
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn species_id(&self, name: &str) -> Result<SpeciesId, SimError> {
        self.species
            .iter()
            .position(|s| s == name)
            .map(SpeciesId)
            .ok_or_else(|| SimError::UnknownSpecies(name.to_string()))
    }

    pub fn flat(&self, voxel: usize, species: SpeciesId) -> usize {
        voxel * self.species.len() + species.0
    }

    pub fn initial_state(&self) -> SystemState {
        SystemState {
            counts: self.initial.clone(),
            n_species: self.species.len(),
        }
    }

    fn check_symbol(&self, symbol: usize) -> Result<(), SimError> {
        if symbol >= self.n_symbols() {
            return Err(SimError::UnknownSymbol {
                symbol,
                k: self.n_symbols(),
            });
        }
        Ok(())
    }

    /// Jump rate of `channel` in `counts` when `symbol` is being sent.
    ///
    /// Reactions use the mass-action product with falling factorials, so a
    /// reaction needing two molecules of one species has rate `κ n (n - 1)`;
    /// this equals `κ ∏ n^a` for the single-copy reactants of all receptor circuits.
    pub fn propensity(&self, channel: usize, counts: &[u64], symbol: usize) -> f64 {
        let ch = &self.channels[channel];
        if let ChannelKind::Emission = ch.kind {
            return self.transmitter.emission_rates.get(symbol).copied().unwrap_or(0.0);
        }
        ch.rate * ch.reactants.iter().map(|&(idx, a)| falling_power(counts[idx], a)).product::<f64>()
    }

    /// The sparse state change caused by `channel`.
    pub fn channel_delta(&self, channel: usize) -> Vec<StateDelta> {
        let ns = self.species.len();
        self.channels[channel]
            .delta
            .iter()
            .map(|&(idx, change)| StateDelta {
                voxel: idx / ns,
                species: SpeciesId(idx % ns),
                change,
            })
            .collect()
    }

    pub(crate) fn apply(&self, channel: usize, counts: &mut [u64]) {
        for &(idx, change) in &self.channels[channel].delta {
            let next = counts[idx] as i64 + change;
            debug_assert!(next >= 0, "channel {channel} drove a count negative");
            counts[idx] = next.max(0) as u64;
        }
    }

    /// Runs the direct method from `initial` until `horizon`.
    ///
    /// `on_event(time, channel, counts_before)` is called for each jump before
    /// it is applied. Returns the counts at `horizon`.
    pub fn run_with<R, F>(
        &self,
        symbol: usize,
        horizon: f64,
        initial: &[u64],
        rng: &mut R,
        mut on_event: F,
    ) -> Result<Vec<u64>, SimError>
    where
        R: Rng + ?Sized,
        F: FnMut(f64, usize, &[u64]),
    {
        self.check_symbol(symbol)?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SimError::BadHorizon(horizon));
        }
        let mut counts = initial.to_vec();
        let mut props: Vec<f64> = (0..self.channels.len())
            .map(|c| self.propensity(c, &counts, symbol))
            .collect();
        let mut t = 0.0;
        loop {
            let total: f64 = props.iter().sum();
            if !total.is_finite() || total > self.propensity_cap {
                return Err(SimError::PropensityOverflow {
                    total,
                    time: t,
                    cap: self.propensity_cap,
                });
            }
            if total <= 0.0 {
                break;
            }
            // 1 - U lies in (0, 1], keeping the logarithm finite
            let u: f64 = 1.0 - rng.random::<f64>();
            t += -u.ln() / total;
            if t > horizon {
                break;
            }
            let chosen = select(&props, rng.random::<f64>() * total);
            on_event(t, chosen, &counts);
            self.apply(chosen, &mut counts);
            for &c in &self.affected[chosen] {
                props[c] = self.propensity(c, &counts, symbol);
            }
        }
        Ok(counts)
    }

    /// One exact realisation for `symbol` over `[0, horizon]`, seeded by `seed`.
    pub fn simulate(&self, symbol: usize, horizon: f64, seed: u64) -> Result<Trajectory, SimError> {
        self.simulate_rng(symbol, horizon, &mut stream_rng(seed))
    }

    /// As [`CtmpSystem::simulate`], drawing from a caller-owned stream.
    pub fn simulate_rng<R: Rng + ?Sized>(&self, symbol: usize, horizon: f64, rng: &mut R) -> Result<Trajectory, SimError> {
        let mut events = Vec::new();
        self.run_with(symbol, horizon, &self.initial, rng, |time, c, _| {
            events.push(JumpEvent {
                time,
                channel: self.channels[c].kind,
                delta: self.channel_delta(c),
            })
        })?;
        Ok(Trajectory {
            initial: self.initial_state(),
            events,
            horizon,
        })
    }

    /// Projects a trajectory onto the counts of `measured` receiver species.
    pub fn observe<S: AsRef<str>>(&self, traj: &Trajectory, measured: &[S]) -> Result<ObservedHistory, SimError> {
        if measured.is_empty() {
            return Err(SimError::NothingMeasured);
        }
        let ids = measured
            .iter()
            .map(|m| {
                self.network
                    .species_id(m.as_ref())
                    .ok_or_else(|| SimError::NotMeasurable(m.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let initial = ids.iter().map(|&s| traj.initial.count(self.rx_voxel, s)).collect();
        let events = traj
            .events
            .iter()
            .filter_map(|ev| {
                let delta: Vec<i64> = ids
                    .iter()
                    .map(|&s| {
                        ev.delta
                            .iter()
                            .filter(|d| d.voxel == self.rx_voxel && d.species == s)
                            .map(|d| d.change)
                            .sum()
                    })
                    .collect();
                delta.iter().any(|&d| d != 0).then_some(ObservedEvent { time: ev.time, delta })
            })
            .collect();
        Ok(ObservedHistory {
            measured: measured.iter().map(|m| m.as_ref().to_string()).collect(),
            initial,
            events,
        })
    }
}

fn falling_power(n: u64, k: u32) -> f64 {
    (0..k as u64).map(|i| n.saturating_sub(i) as f64).product()
}

fn select(props: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (c, &p) in props.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = c;
            if target < acc {
                return c;
            }
        }
    }
    // rounding pushed `target` past the running sum
    last_positive
}

/// A recorded realisation of the CTMP.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: SystemState,
    pub events: Vec<JumpEvent>,
    pub horizon: f64,
}

impl Trajectory {
    /// Replays the events, calling `f(time, state_after)` for the initial
    /// state (at t = 0) and after every jump. Returns `false` if any count
    /// would go negative.
    pub fn replay<F: FnMut(f64, &SystemState)>(&self, mut f: F) -> bool {
        let mut state = self.initial.clone();
        f(0.0, &state);
        for ev in &self.events {
            for d in &ev.delta {
                let idx = d.voxel * state.n_species + d.species.0;
                let next = state.counts[idx] as i64 + d.change;
                if next < 0 {
                    return false;
                }
                state.counts[idx] = next as u64;
            }
            f(ev.time, &state);
        }
        true
    }

    pub fn final_state(&self) -> SystemState {
        let mut last = self.initial.clone();
        self.replay(|_, s| last = s.clone());
        last
    }

    /// Right-continuous state at time `t`.
    pub fn state_at(&self, t: f64) -> SystemState {
        let mut state = self.initial.clone();
        for ev in self.events.iter().take_while(|e| e.time <= t) {
            for d in &ev.delta {
                let idx = d.voxel * state.n_species + d.species.0;
                state.counts[idx] = (state.counts[idx] as i64 + d.change) as u64;
            }
        }
        state
    }

    /// One line per event: time, channel kind, then `voxel:species:change` triples.
    pub fn write_text<W: Write>(&self, system: &CtmpSystem, mut w: W) -> io::Result<()> {
        writeln!(w, "# horizon {}", self.horizon)?;
        for ev in &self.events {
            write!(w, "{:.9}\t{}\t", ev.time, ev.channel)?;
            let parts: Vec<String> = ev
                .delta
                .iter()
                .map(|d| format!("{}:{}:{:+}", d.voxel, system.species()[d.species.0], d.change))
                .collect();
            writeln!(w, "{}", parts.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedEvent {
    pub time: f64,
    /// Change of each measured species, aligned with [`ObservedHistory::measured`].
    pub delta: Vec<i64>,
}

/// Time-ordered record of the measured receiver species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedHistory {
    pub measured: Vec<String>,
    pub initial: Vec<u64>,
    pub events: Vec<ObservedEvent>,
}

impl ObservedHistory {
    /// Counts of the measured species just after all events with time `<= t`.
    pub fn counts_at(&self, t: f64) -> Vec<u64> {
        let mut counts: Vec<i64> = self.initial.iter().map(|&c| c as i64).collect();
        for ev in self.events.iter().take_while(|e| e.time <= t) {
            for (c, d) in counts.iter_mut().zip(&ev.delta) {
                *c += d;
            }
        }
        counts.into_iter().map(|c| c as u64).collect()
    }

    /// CSV with header `time,species,delta`, one row per nonzero component.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,species,delta")?;
        for ev in &self.events {
            for (name, &d) in self.measured.iter().zip(&ev.delta) {
                if d != 0 {
                    writeln!(w, "{:.9},{},{}", ev.time, name, d)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::make_ligand_receptor_network;

    fn two_site() -> ReactionNetwork {
        make_ligand_receptor_network(2, &[1.0, 1.0], &[1.0, 2.0]).unwrap()
    }

    fn receiver(network: ReactionNetwork, voxel: usize, m: u64) -> Receiver {
        Receiver {
            network,
            voxel,
            receptor: "E".into(),
            receptor_count: m,
        }
    }

    fn tx(voxel: usize, rates: Vec<f64>) -> TransmitterModel {
        TransmitterModel {
            voxel,
            species: "S".into(),
            emission_rates: rates,
        }
    }

    fn count_kind(sys: &CtmpSystem, pred: impl Fn(&ChannelKind) -> bool) -> usize {
        sys.channels().iter().filter(|c| pred(&c.kind)).count()
    }

    #[test]
    fn six_by_six_by_three_grid_geometry() {
        let grid = VoxelGrid::new([6, 6, 3], 1.0 / 3.0, Boundary::Absorbing { escape_rate: 9.0 / 50.0 })
            .unwrap()
            .with_diffusion("S", 1.0)
            .unwrap();
        assert_eq!(grid.n_voxels(), 108);
        assert!((grid.hop_rate("S") - 9.0).abs() < 1e-12);
        let txv = grid.index_one_based([2, 3, 2]).unwrap();
        let rxv = grid.index_one_based([5, 3, 2]).unwrap();
        assert_eq!(grid.coord(txv), [1, 2, 1]);
        assert_eq!(grid.coord(rxv), [4, 2, 1]);
        // both interior in x/y, middle layer in z
        assert_eq!(grid.outward_faces(txv), 0);
        assert_eq!(grid.outward_faces(grid.index([0, 0, 0]).unwrap()), 3);
        let sys = CtmpSystem::build(grid.clone(), tx(txv, vec![10.0, 20.0]), receiver(two_site(), rxv, 10)).unwrap();
        // 2 * (5*6*3 + 6*5*3 + 6*6*2) directed hops
        assert_eq!(count_kind(&sys, |k| matches!(k, ChannelKind::Diffusion { .. })), 2 * (90 + 90 + 72));
        // 2 faces per voxel column end: 2*(6*3) + 2*(6*3) + 2*(6*6)
        assert_eq!(count_kind(&sys, |k| matches!(k, ChannelKind::Escape { .. })), 36 + 36 + 72);
        assert_eq!(count_kind(&sys, |k| matches!(k, ChannelKind::Reaction { .. })), 4);
        assert_eq!(sys.initial_state().count(rxv, SpeciesId(1)), 10);
        assert!(grid.index_one_based([7, 1, 1]).is_err());
    }

    #[test]
    fn single_reflecting_voxel_has_no_transport_channels() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, Boundary::Reflecting)
            .unwrap()
            .with_diffusion("S", 1.0)
            .unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![1.0]), receiver(two_site(), 0, 3)).unwrap();
        assert_eq!(sys.channels().len(), 4 + 1);
    }

    #[test]
    fn two_voxel_line_has_two_hops() {
        let grid = VoxelGrid::new([2, 1, 1], 0.5, Boundary::Reflecting)
            .unwrap()
            .with_diffusion("S", 2.0)
            .unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![0.0]), receiver(two_site(), 1, 0))
            .unwrap()
            .with_initial_count(0, "S", 7)
            .unwrap();
        let hops: Vec<usize> = (0..sys.channels().len())
            .filter(|&c| matches!(sys.channels()[c].kind, ChannelKind::Diffusion { .. }))
            .collect();
        assert_eq!(hops.len(), 2);
        let counts = sys.initial_state().counts;
        let rates: Vec<f64> = hops.iter().map(|&c| sys.propensity(c, &counts, 0)).collect();
        // d = 2 / 0.25 = 8 per molecule, 7 molecules in voxel 0, none in voxel 1
        assert_eq!(rates, [56.0, 0.0]);
    }

    #[test]
    fn mass_action_propensities() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![10.0]), receiver(two_site(), 0, 10)).unwrap();
        let s = sys.species_id("S").unwrap();
        let e = sys.species_id("E").unwrap();
        let c1 = sys.species_id("C1").unwrap();
        let c2 = sys.species_id("C2").unwrap();
        let mut counts = vec![0; sys.n_species()];
        counts[s.0] = 3;
        counts[e.0] = 7;
        counts[c1.0] = 2;
        counts[c2.0] = 1;
        // λ1 n_R (M - b1 - b2) with M = 10
        assert_eq!(sys.propensity(0, &counts, 0), 21.0);
        counts[c2.0] = 4;
        // μ2 b2 with μ2 = 2
        assert_eq!(sys.propensity(3, &counts, 0), 8.0);
        let mut empty = counts.clone();
        empty[s.0] = 0;
        assert_eq!(sys.propensity(0, &empty, 0), 0.0);
        assert_eq!(sys.propensity(2, &empty, 0), 0.0);
        let emission = sys.channels().len() - 1;
        assert_eq!(sys.propensity(emission, &counts, 0), 10.0);
    }

    #[test]
    fn zero_rates_give_empty_trajectory() {
        let grid = VoxelGrid::new([2, 2, 1], 1.0, Boundary::Reflecting).unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![0.0]), receiver(two_site(), 3, 0)).unwrap();
        let traj = sys.simulate(0, 5.0, 11).unwrap();
        assert!(traj.events.is_empty());
        assert!(matches!(sys.simulate(0, 0.0, 1), Err(SimError::BadHorizon(_))));
        assert!(matches!(sys.simulate(1, 1.0, 1), Err(SimError::UnknownSymbol { .. })));
    }

    #[test]
    fn overflow_guard_trips() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![1e6]), receiver(two_site(), 0, 0))
            .unwrap()
            .with_propensity_cap(1e3);
        assert!(matches!(sys.simulate(0, 1.0, 1), Err(SimError::PropensityOverflow { .. })));
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let grid = VoxelGrid::new([2, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        assert!(matches!(
            CtmpSystem::build(grid.clone(), tx(5, vec![1.0]), receiver(two_site(), 0, 1)),
            Err(SimError::VoxelIndexOutOfRange(5))
        ));
        let mut rx = receiver(two_site(), 0, 1);
        rx.receptor = "R".into();
        assert!(matches!(
            CtmpSystem::build(grid, tx(0, vec![1.0]), rx),
            Err(SimError::UnknownSpecies(_))
        ));
        assert!(VoxelGrid::new([0, 1, 1], 1.0, Boundary::Reflecting).is_err());
        assert!(VoxelGrid::new([1, 1, 1], 0.0, Boundary::Reflecting).is_err());
    }

    fn reaction_event(sys: &CtmpSystem, reaction: usize, time: f64) -> JumpEvent {
        JumpEvent {
            time,
            channel: ChannelKind::Reaction { reaction },
            delta: sys.channel_delta(reaction),
        }
    }

    #[test]
    fn observation_projects_and_drops_invisible_jumps() {
        let grid = VoxelGrid::new([1, 1, 1], 1.0, Boundary::Reflecting).unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![1.0]), receiver(two_site(), 0, 4))
            .unwrap()
            .with_initial_count(0, "C1", 2)
            .unwrap()
            .with_initial_count(0, "S", 3)
            .unwrap();
        let traj = Trajectory {
            initial: sys.initial_state(),
            events: vec![
                reaction_event(&sys, 1, 0.4), // C1 -> S + E
                reaction_event(&sys, 2, 0.7), // S + C1 -> C2
                JumpEvent {
                    time: 0.9,
                    channel: ChannelKind::Emission,
                    delta: sys.channel_delta(sys.channels().len() - 1),
                },
            ],
            horizon: 1.0,
        };
        let h1 = sys.observe(&traj, &["C1"]).unwrap();
        assert_eq!(h1.initial, [2]);
        assert_eq!(
            h1.events,
            [
                ObservedEvent { time: 0.4, delta: vec![-1] },
                ObservedEvent { time: 0.7, delta: vec![-1] }
            ]
        );
        let ha = sys.observe(&traj, &["C1", "C2"]).unwrap();
        assert_eq!(ha.events[1], ObservedEvent { time: 0.7, delta: vec![-1, 1] });
        let h2 = sys.observe(&traj, &["C2"]).unwrap();
        assert_eq!(h2.events.len(), 1);
        assert_eq!(h1.counts_at(0.5), [1]);
        assert!(sys.observe(&traj, &["X"]).is_err());
        assert!(sys.observe::<&str>(&traj, &[]).is_err());

        let mut csv = Vec::new();
        ha.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(
            csv,
            "time,species,delta\n0.400000000,C1,-1\n0.700000000,C1,-1\n0.700000000,C2,1\n"
        );
    }

    #[test]
    fn seed_determinism_and_text_export() {
        let grid = VoxelGrid::new([3, 2, 1], 0.5, Boundary::Absorbing { escape_rate: 0.3 })
            .unwrap()
            .with_diffusion("S", 0.5)
            .unwrap();
        let sys = CtmpSystem::build(grid, tx(0, vec![15.0]), receiver(two_site(), 5, 4)).unwrap();
        let a = sys.simulate(0, 2.0, 99).unwrap();
        let b = sys.simulate(0, 2.0, 99).unwrap();
        let c = sys.simulate(0, 2.0, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut text = Vec::new();
        a.write_text(&sys, &mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        assert_eq!(text.lines().count(), a.events.len() + 1);
        assert!(text.contains("emission\t0:S:+1"));
    }
}
