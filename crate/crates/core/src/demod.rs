//! Sub-optimal MAP demodulation.
//!
//! Each symbol `s` gets a log-posterior statistic `Z_s(t)` started at zero.
//! Between observed events it drifts by minus the total conditional rate of
//! the observable channels; at an event with delta `δ` it jumps by the log of
//! the summed rates of the channels producing `δ`. Unmeasured moments are the
//! symbol-conditioned means `E[· | s]` estimated offline by simulation.

use std::collections::BTreeSet;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtergen::{falling_power, FilterError, FilterSpec, MomentDescriptor};
use crate::rdme::{CtmpSystem, ObservedHistory, SimError};
use crate::rng::indexed_rng;

/// Lower bound applied to a jump's rate before taking its logarithm.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DemodError {
    #[error("observed delta {delta:?} at t = {time} matches no filter channel")]
    ModelMismatch { time: f64, delta: Vec<i64> },
    #[error("no moment table for `{descriptor}` under symbol {symbol}")]
    MissingMoment { symbol: usize, descriptor: String },
    #[error("history measures {history:?} but the filter expects {spec:?}")]
    MeasuredMismatch { history: Vec<String>, spec: Vec<String> },
    #[error("moment grid must start at 0 and strictly increase")]
    BadGrid,
    #[error("need at least 2 runs to estimate moments, got {0}")]
    TooFewRuns(usize),
    #[error("decision time must be positive and finite, got {0}")]
    BadDecisionTime(f64),
    #[error("no symbols to decide between")]
    NoSymbols,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Distinct non-constant moments needed by the observable channels of `spec`.
pub fn required_moments(spec: &FilterSpec) -> BTreeSet<MomentDescriptor> {
    spec.channels
        .iter()
        .filter(|c| !c.is_silent() && !c.moment.is_constant())
        .map(|c| c.moment.clone())
        .collect()
}

/// `n_steps + 1` evenly spaced points covering `[0, horizon]`.
pub fn uniform_grid(horizon: f64, n_steps: usize) -> Vec<f64> {
    let n = n_steps.max(1);
    (0..=n).map(|g| horizon * g as f64 / n as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<(), DemodError> {
    let ok = grid.len() >= 2 && grid[0] == 0.0 && grid.windows(2).all(|w| w[1] > w[0]) && grid.iter().all(|t| t.is_finite());
    if ok {
        Ok(())
    } else {
        Err(DemodError::BadGrid)
    }
}

/// `E[∏ n_Uj^b_j | s]` sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub symbol: usize,
    pub descriptor: MomentDescriptor,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard error of each value.
    pub std_err: Vec<f64>,
    pub n_runs: usize,
}

impl MomentTable {
    /// A table holding `value` at every grid point, with zero error.
    pub fn constant(symbol: usize, descriptor: MomentDescriptor, grid: Vec<f64>, value: f64) -> Self {
        let n = grid.len();
        Self {
            symbol,
            descriptor,
            grid,
            values: vec![value; n],
            std_err: vec![0.0; n],
            n_runs: 0,
        }
    }

    /// Linear interpolation; held flat outside the grid.
    pub fn value_at(&self, t: f64) -> f64 {
        let g = &self.grid;
        if t <= g[0] {
            return self.values[0];
        }
        let last = g.len() - 1;
        if t >= g[last] {
            return self.values[last];
        }
        let hi = g.partition_point(|&x| x <= t);
        let lo = hi - 1;
        let w = (t - g[lo]) / (g[hi] - g[lo]);
        self.values[lo] + w * (self.values[hi] - self.values[lo])
    }
}

/// Sample means of `descriptors` at the receiver voxel over `n_runs`
/// trajectories for `symbol`; run `r` draws from stream `first_stream + r`
/// of `base_seed`.
///
/// Counts are right-continuous, so a grid point coinciding with a jump sees
/// the post-jump state.
pub fn estimate_moments(
    system: &CtmpSystem,
    symbol: usize,
    descriptors: &[MomentDescriptor],
    n_runs: usize,
    grid: &[f64],
    base_seed: u64,
    first_stream: u64,
) -> Result<Vec<MomentTable>, DemodError> {
    if n_runs < 2 {
        return Err(DemodError::TooFewRuns(n_runs));
    }
    check_grid(grid)?;
    let horizon = *grid.last().unwrap();
    let rx = system.rx_voxel();
    let idx: Vec<Vec<(usize, u32)>> = descriptors
        .iter()
        .map(|d| d.factors().iter().map(|&(s, b)| (system.flat(rx, s), b)).collect())
        .collect();
    let monomial = |counts: &[u64], f: &[(usize, u32)]| -> f64 { f.iter().map(|&(i, b)| falling_power(counts[i], b)).product() };
    let sample_run = |run: usize| -> Result<Vec<f64>, SimError> {
        let mut rng = indexed_rng(base_seed, first_stream + run as u64);
        let mut samples = vec![0.0; descriptors.len() * grid.len()];
        let mut g = 0;
        let mut record = |g: usize, counts: &[u64]| {
            for (d, f) in idx.iter().enumerate() {
                samples[d * grid.len() + g] = monomial(counts, f);
            }
        };
        let last = system.run_with(symbol, horizon, &system.initial_state().counts, &mut rng, |t, _, before| {
            while g < grid.len() && grid[g] < t {
                record(g, before);
                g += 1;
            }
        })?;
        while g < grid.len() {
            record(g, &last);
            g += 1;
        }
        Ok(samples)
    };
    let runs: Vec<Vec<f64>> = (0..n_runs).into_par_iter().map(sample_run).collect::<Result<_, _>>()?;

    let n = n_runs as f64;
    Ok(descriptors
        .iter()
        .enumerate()
        .map(|(d, desc)| {
            let mut values = Vec::with_capacity(grid.len());
            let mut std_err = Vec::with_capacity(grid.len());
            for g in 0..grid.len() {
                let k = d * grid.len() + g;
                let mean = runs.iter().map(|r| r[k]).sum::<f64>() / n;
                let var = runs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                values.push(mean);
                std_err.push((var / n).sqrt());
            }
            MomentTable {
                symbol,
                descriptor: desc.clone(),
                grid: grid.to_vec(),
                values,
                std_err,
                n_runs,
            }
        })
        .collect())
}

/// Moment tables for every symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBank {
    /// `tables[s]` holds the tables for symbol `s`.
    pub tables: Vec<Vec<MomentTable>>,
}

impl MomentBank {
    /// Estimates every descriptor for every symbol of `system`. Symbol `s`
    /// uses streams `s * n_runs ..` of `base_seed`, so no two runs share one.
    pub fn estimate(
        system: &CtmpSystem,
        descriptors: &[MomentDescriptor],
        n_runs: usize,
        grid: &[f64],
        base_seed: u64,
    ) -> Result<Self, DemodError> {
        let tables = (0..system.n_symbols())
            .map(|s| estimate_moments(system, s, descriptors, n_runs, grid, base_seed, (s * n_runs) as u64))
            .collect::<Result<_, _>>()?;
        Ok(Self { tables })
    }

    pub fn n_symbols(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, symbol: usize, descriptor: &MomentDescriptor) -> Option<&MomentTable> {
        self.tables.get(symbol)?.iter().find(|t| &t.descriptor == descriptor)
    }

    /// Moment value at `t`; the constant descriptor is 1.
    pub fn value(&self, symbol: usize, descriptor: &MomentDescriptor, t: f64, names: &[String]) -> Result<f64, DemodError> {
        if descriptor.is_constant() {
            return Ok(1.0);
        }
        self.table(symbol, descriptor)
            .map(|tab| tab.value_at(t))
            .ok_or_else(|| DemodError::MissingMoment {
                symbol,
                descriptor: descriptor.label(names),
            })
    }

    /// Union of all table grid points.
    pub fn grid_points(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.tables.iter().flatten().flat_map(|t| t.grid.iter().copied()).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// The bank with the tables of symbols `a` and `b` exchanged.
    pub fn swapped(&self, a: usize, b: usize) -> Self {
        let mut out = self.clone();
        out.tables.swap(a, b);
        for (s, tabs) in out.tables.iter_mut().enumerate() {
            for t in tabs {
                t.symbol = s;
            }
        }
        out
    }

    /// CSV with header `symbol,moment,time,mean,std_err`.
    pub fn write_csv<W: Write>(&self, names: &[String], mut w: W) -> io::Result<()> {
        writeln!(w, "symbol,moment,time,mean,std_err")?;
        for tabs in &self.tables {
            for t in tabs {
                let label = t.descriptor.label(names);
                for g in 0..t.grid.len() {
                    writeln!(w, "{},{},{:.9},{:.9e},{:.9e}", t.symbol, label, t.grid[g], t.values[g], t.std_err[g])?;
                }
            }
        }
        Ok(())
    }
}

/// Which channels contribute to the drift of `Z_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftMode {
    #[default]
    Full,
    /// Drop channels whose rate depends only on observed counts. They shift
    /// every `Z_s` by the same amount, so the decision is unchanged.
    SymbolDependentOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemodState {
    pub z: Vec<f64>,
    pub time: f64,
    /// Jumps whose rate fell below [`RATE_FLOOR`] and were clamped.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub symbol: usize,
    pub z: Vec<f64>,
    pub time: f64,
    pub clamped: usize,
}

/// Argmax of `Z`, ties going to the lowest symbol.
pub fn decide(state: &DemodState) -> Result<Decision, DemodError> {
    if state.z.is_empty() {
        return Err(DemodError::NoSymbols);
    }
    let mut best = 0;
    for (s, &z) in state.z.iter().enumerate() {
        if z > state.z[best] {
            best = s;
        }
    }
    Ok(Decision {
        symbol: best,
        z: state.z.clone(),
        time: state.time,
        clamped: state.clamped,
    })
}

/// The K parallel filters for one filter spec and moment bank.
#[derive(Debug, Clone)]
pub struct Demodulator<'a> {
    spec: &'a FilterSpec,
    bank: &'a MomentBank,
    drift: DriftMode,
    /// Observable channels grouped by observed delta.
    groups: Vec<(Vec<i64>, Vec<usize>)>,
}

impl<'a> Demodulator<'a> {
    pub fn new(spec: &'a FilterSpec, bank: &'a MomentBank) -> Self {
        let mut groups: Vec<(Vec<i64>, Vec<usize>)> = Vec::new();
        for (i, ch) in spec.channels.iter().enumerate().filter(|(_, c)| !c.is_silent()) {
            match groups.iter_mut().find(|(d, _)| *d == ch.observed_delta) {
                Some((_, members)) => members.push(i),
                None => groups.push((ch.observed_delta.clone(), vec![i])),
            }
        }
        Self {
            spec,
            bank,
            drift: DriftMode::Full,
            groups,
        }
    }

    pub fn with_drift(mut self, drift: DriftMode) -> Self {
        self.drift = drift;
        self
    }

    fn rate(&self, channel: usize, symbol: usize, counts: &[u64], t: f64) -> Result<f64, DemodError> {
        let ch = &self.spec.channels[channel];
        let factor = self.spec.observed_factor(channel, counts)?;
        if factor == 0.0 {
            return Ok(0.0);
        }
        Ok(factor * self.bank.value(symbol, &ch.moment, t, &self.spec.species)?)
    }

    fn drift_rate(&self, symbol: usize, counts: &[u64], t: f64) -> Result<f64, DemodError> {
        let mut total = 0.0;
        for (_, members) in &self.groups {
            for &i in members {
                if self.drift == DriftMode::SymbolDependentOnly && self.spec.channels[i].moment.is_constant() {
                    continue;
                }
                total += self.rate(i, symbol, counts, t)?;
            }
        }
        Ok(total)
    }

    /// Integrates every `Z_s` over `[0, t_d]`. `on_step(t, z)` sees the
    /// statistics at every quadrature node and just after every jump.
    pub fn run_traced<F: FnMut(f64, &[f64])>(
        &self,
        history: &ObservedHistory,
        t_d: f64,
        mut on_step: F,
    ) -> Result<DemodState, DemodError> {
        if !(t_d.is_finite() && t_d > 0.0) {
            return Err(DemodError::BadDecisionTime(t_d));
        }
        let spec_names = self.spec.measured_names();
        if history.measured != spec_names {
            return Err(DemodError::MeasuredMismatch {
                history: history.measured.clone(),
                spec: spec_names.iter().map(|s| s.to_string()).collect(),
            });
        }
        let k = self.bank.n_symbols();
        if k == 0 {
            return Err(DemodError::NoSymbols);
        }
        let events: Vec<_> = history.events.iter().filter(|e| e.time <= t_d).collect();
        let mut nodes: Vec<f64> = self.bank.grid_points().into_iter().filter(|&t| t > 0.0 && t < t_d).collect();
        nodes.extend(events.iter().map(|e| e.time));
        nodes.push(t_d);
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();

        let mut z = vec![0.0; k];
        let mut clamped = 0;
        let mut counts: Vec<u64> = history.initial.clone();
        let mut next_event = 0;
        let mut t0 = 0.0;
        on_step(0.0, &z);
        for &t1 in &nodes {
            // counts are constant on (t0, t1), so the trapezoid integrates the
            // piecewise-linear moment interpolant exactly
            for (s, zs) in z.iter_mut().enumerate() {
                let r0 = self.drift_rate(s, &counts, t0)?;
                let r1 = self.drift_rate(s, &counts, t1)?;
                *zs -= 0.5 * (t1 - t0) * (r0 + r1);
            }
            if next_event < events.len() && events[next_event].time == t1 {
                let ev = events[next_event];
                let members = self
                    .groups
                    .iter()
                    .find(|(d, _)| *d == ev.delta)
                    .map(|(_, m)| m)
                    .ok_or_else(|| DemodError::ModelMismatch {
                        time: ev.time,
                        delta: ev.delta.clone(),
                    })?;
                for (s, zs) in z.iter_mut().enumerate() {
                    let mut rate = 0.0;
                    for &i in members {
                        rate += self.rate(i, s, &counts, t1)?;
                    }
                    if !(rate >= RATE_FLOOR) {
                        clamped += 1;
                        rate = RATE_FLOOR;
                    }
                    *zs += rate.ln();
                }
                for (c, d) in counts.iter_mut().zip(&ev.delta) {
                    *c = (*c as i64 + d).max(0) as u64;
                }
                next_event += 1;
            }
            on_step(t1, &z);
            t0 = t1;
        }
        Ok(DemodState { z, time: t_d, clamped })
    }

    pub fn run(&self, history: &ObservedHistory, t_d: f64) -> Result<DemodState, DemodError> {
        self.run_traced(history, t_d, |_, _| {})
    }

    /// CSV `time,Z_0,...,Z_{K-1}` of the filter evolution.
    pub fn write_trace<W: Write>(&self, history: &ObservedHistory, t_d: f64, mut w: W) -> Result<(), DemodError> {
        let k = self.bank.n_symbols();
        let header: Vec<String> = (0..k).map(|s| format!("Z_{s}")).collect();
        let mut rows = vec![format!("time,{}", header.join(","))];
        self.run_traced(history, t_d, |t, z| {
            let vals: Vec<String> = z.iter().map(|v| format!("{v:.9e}")).collect();
            rows.push(format!("{t:.9},{}", vals.join(",")));
        })?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    }
}

/// Runs the filters to `t_d` and returns the MAP decision.
pub fn integrate_filter(spec: &FilterSpec, bank: &MomentBank, history: &ObservedHistory, t_d: f64) -> Result<Decision, DemodError> {
    decide(&Demodulator::new(spec, bank).run(history, t_d)?)
}
