//! Independent checks for small systems.
//!
//! * [`master_equation_transient`] computes the exact transient law of a
//!   CTMP by uniformization over its enumerated (capped) state space.
//! * [`empirical_vs_exact`] compares SSA samples against that law.
//! * [`brute_force_filter_check`] estimates the one-step observed-delta
//!   probabilities directly from trajectory ensembles that share an observed
//!   history, and compares them with the generated filter terms.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::chem::ReactionNetwork;
use crate::filtergen::{falling_power, FilterError, FilterSpec};
use crate::rdme::{Boundary, CtmpSystem, Receiver, SimError, TransmitterModel, VoxelGrid};
use crate::rng::indexed_rng;
use crate::stats::{Interval, Z95};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state space exceeds {limit} states")]
    StateSpaceTooLarge { limit: usize },
    #[error("time must be finite and non-negative, got {0}")]
    BadTime(f64),
    #[error("no trajectory fell into the conditioning bin")]
    EmptyBin,
    #[error("need at least one window length")]
    NoWindows,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// A one-voxel system: ligand `S` emitted in place at `emission_rates[s]`,
/// leaving through the six faces at `escape_rate` each (reflecting if zero),
/// with `receptors` free `E` of `network`.
pub fn single_voxel_system(
    network: ReactionNetwork,
    receptors: u64,
    emission_rates: Vec<f64>,
    escape_rate: f64,
) -> Result<CtmpSystem, SimError> {
    let boundary = if escape_rate > 0.0 {
        Boundary::Absorbing { escape_rate }
    } else {
        Boundary::Reflecting
    };
    let grid = VoxelGrid::new([1, 1, 1], 1.0, boundary)?.with_diffusion("S", 1.0)?;
    CtmpSystem::build(
        grid,
        TransmitterModel {
            voxel: 0,
            species: "S".into(),
            emission_rates,
        },
        Receiver {
            network,
            voxel: 0,
            receptor: "E".into(),
            receptor_count: receptors,
        },
    )
}

/// The reference oracle system: two-site receptors with unit constants,
/// ligand emitted at 10/s and escaping at 1/s through each of six faces.
pub fn small_two_site_system(receptors: u64) -> Result<CtmpSystem, SimError> {
    let network = crate::chem::make_ligand_receptor_network(2, &[1.0, 1.0], &[1.0, 1.0])?;
    single_voxel_system(network, receptors, vec![10.0], 1.0)
}

/// Truncation of the enumerated state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateCap {
    /// Largest count any species may reach in any voxel; transitions beyond
    /// it go to an absorbing overflow state.
    pub max_count: u64,
    pub max_states: usize,
}

impl Default for StateCap {
    fn default() -> Self {
        Self {
            max_count: 64,
            max_states: 100_000,
        }
    }
}

/// Exact transient law over the enumerated states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientDistribution {
    pub states: Vec<Vec<u64>>,
    pub probs: Vec<f64>,
    /// Mass that left the capped state space.
    pub overflow: f64,
}

impl TransientDistribution {
    pub fn prob(&self, state: &[u64]) -> f64 {
        self.states.iter().position(|s| s == state).map_or(0.0, |i| self.probs[i])
    }

    /// Law of `key(state)`, sorted by key.
    pub fn marginal<K: Ord + Clone, F: Fn(&[u64]) -> K>(&self, key: F) -> Vec<(K, f64)> {
        let mut m = std::collections::BTreeMap::new();
        for (s, &p) in self.states.iter().zip(&self.probs) {
            *m.entry(key(s)).or_insert(0.0) += p;
        }
        m.into_iter().collect()
    }
}

struct Generator {
    states: Vec<Vec<u64>>,
    /// `(from, to, rate)`; `to == states.len()` is the overflow sink.
    moves: Vec<(usize, usize, f64)>,
    exit: Vec<f64>,
}

fn enumerate(system: &CtmpSystem, symbol: usize, cap: StateCap) -> Result<Generator, OracleError> {
    let initial = system.initial_state().counts;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut states = vec![initial.clone()];
    index.insert(initial, 0);
    let mut queue = VecDeque::from([0usize]);
    let mut edges: Vec<(usize, Option<usize>, f64)> = Vec::new();
    while let Some(i) = queue.pop_front() {
        let here = states[i].clone();
        for c in 0..system.channels().len() {
            let rate = system.propensity(c, &here, symbol);
            if rate <= 0.0 {
                continue;
            }
            let mut next = here.clone();
            system.apply(c, &mut next);
            if next.iter().any(|&n| n > cap.max_count) {
                edges.push((i, None, rate));
                continue;
            }
            let j = match index.get(&next) {
                Some(&j) => j,
                None => {
                    if states.len() >= cap.max_states {
                        return Err(OracleError::StateSpaceTooLarge { limit: cap.max_states });
                    }
                    states.push(next.clone());
                    index.insert(next, states.len() - 1);
                    queue.push_back(states.len() - 1);
                    states.len() - 1
                }
            };
            edges.push((i, Some(j), rate));
        }
    }
    let sink = states.len();
    let mut exit = vec![0.0; states.len()];
    let moves = edges
        .into_iter()
        .map(|(i, j, r)| {
            exit[i] += r;
            (i, j.unwrap_or(sink), r)
        })
        .collect();
    Ok(Generator { states, moves, exit })
}

/// Transient law at time `t` by uniformization, with Poisson weights
/// truncated once the remaining tail is below 10⁻¹².
pub fn master_equation_transient(
    system: &CtmpSystem,
    symbol: usize,
    t: f64,
    cap: StateCap,
) -> Result<TransientDistribution, OracleError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(OracleError::BadTime(t));
    }
    if symbol >= system.n_symbols() {
        return Err(SimError::UnknownSymbol {
            symbol,
            k: system.n_symbols(),
        }
        .into());
    }
    let gen = enumerate(system, symbol, cap)?;
    let n = gen.states.len();
    let lambda = gen.exit.iter().copied().fold(0.0, f64::max);
    let mut v = vec![0.0; n + 1];
    v[0] = 1.0;
    if lambda == 0.0 || t == 0.0 {
        v.truncate(n);
        return Ok(TransientDistribution {
            states: gen.states,
            probs: v,
            overflow: 0.0,
        });
    }
    let lt = lambda * t;
    let mut acc = vec![0.0; n + 1];
    let mut log_w = -lt;
    let mut covered = 0.0;
    let mut k = 0u64;
    loop {
        let w = log_w.exp();
        covered += w;
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += w * x;
        }
        if (k as f64 > lt && 1.0 - covered < 1e-12) || k > 10 * (lt as u64 + 100) {
            break;
        }
        // one step of P = I + Q / Λ; the sink keeps its mass
        let mut next = v.clone();
        for i in 0..n {
            next[i] -= v[i] * gen.exit[i] / lambda;
        }
        for &(i, j, r) in &gen.moves {
            next[j] += v[i] * r / lambda;
        }
        v = next;
        k += 1;
        log_w += lt.ln() - (k as f64).ln();
    }
    let overflow = acc[n];
    acc.truncate(n);
    Ok(TransientDistribution {
        states: gen.states,
        probs: acc,
        overflow,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvReport {
    pub tv: f64,
    pub n_runs: usize,
    pub n_states: usize,
    pub overflow: f64,
}

impl fmt::Display for TvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tv={:.6} runs={} states={} overflow={:.3e}",
            self.tv, self.n_runs, self.n_states, self.overflow
        )
    }
}

/// Total-variation distance between `dist` and the empirical law of `samples`.
pub fn tv_distance(dist: &TransientDistribution, samples: &[Vec<u64>]) -> f64 {
    let mut counts: HashMap<&[u64], usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    let mut tv = dist.overflow;
    for (s, &p) in dist.states.iter().zip(&dist.probs) {
        let q = counts.remove(s.as_slice()).unwrap_or(0) as f64 / n;
        tv += (p - q).abs();
    }
    tv += counts.values().map(|&c| c as f64 / n).sum::<f64>();
    0.5 * tv
}

/// Full system states at time `t` from `n_runs` SSA runs on streams `0 ..` of `base_seed`.
pub fn sample_states(system: &CtmpSystem, symbol: usize, t: f64, n_runs: usize, base_seed: u64) -> Result<Vec<Vec<u64>>, OracleError> {
    let init = system.initial_state().counts;
    (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = indexed_rng(base_seed, r as u64);
            Ok(system.run_with(symbol, t, &init, &mut rng, |_, _, _| {})?)
        })
        .collect()
}

/// SSA empirical law at `t` against uniformization.
pub fn empirical_vs_exact(
    system: &CtmpSystem,
    symbol: usize,
    t: f64,
    n_runs: usize,
    base_seed: u64,
    cap: StateCap,
) -> Result<TvReport, OracleError> {
    let exact = master_equation_transient(system, symbol, t, cap)?;
    let samples = sample_states(system, symbol, t, n_runs, base_seed)?;
    Ok(TvReport {
        tv: tv_distance(&exact, &samples),
        n_runs,
        n_states: exact.states.len(),
        overflow: exact.overflow,
    })
}

/// Which observed-history class to condition on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinChoice {
    MostPopulated,
    /// Most populated class whose measured counts at `t` are all at least these.
    MostPopulatedWithAtLeast(Vec<u64>),
    /// Exactly this sequence of observed deltas up to `t`.
    Sequence(Vec<Vec<i64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaComparison {
    pub delta: Vec<i64>,
    /// Conditional frequency of the delta within the bin.
    pub direct: f64,
    /// Summed filter-channel probabilities with in-bin moments.
    pub predicted: f64,
    /// 95% interval for `direct - predicted`.
    pub ci: Interval,
}

impl DeltaComparison {
    pub fn agrees(&self) -> bool {
        self.ci.contains(0.0)
    }

    pub fn discrepancy(&self) -> f64 {
        (self.direct - self.predicted).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub dt: f64,
    pub deltas: Vec<DeltaComparison>,
    /// Frequency of net changes that no single channel produces.
    pub other: f64,
}

impl WindowReport {
    pub fn total_discrepancy(&self) -> f64 {
        self.deltas.iter().map(|d| d.discrepancy()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterCheckReport {
    pub bin: Vec<Vec<i64>>,
    pub bin_size: usize,
    pub n_runs: usize,
    /// Measured counts at `t` for the bin.
    pub observed: Vec<u64>,
    pub windows: Vec<WindowReport>,
}

impl fmt::Display for FilterCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "bin events={} size={}/{} observed={:?}",
            self.bin.len(),
            self.bin_size,
            self.n_runs,
            self.observed
        )?;
        for w in &self.windows {
            writeln!(f, "dt={} other={:.3e} total_discrepancy={:.3e}", w.dt, w.other, w.total_discrepancy())?;
            for d in &w.deltas {
                writeln!(
                    f,
                    "  delta={:?} direct={:.6e} predicted={:.6e} ci=[{:.3e}, {:.3e}] {}",
                    d.delta,
                    d.direct,
                    d.predicted,
                    d.ci.lo,
                    d.ci.hi,
                    if d.agrees() { "agree" } else { "DISAGREE" }
                )?;
            }
        }
        Ok(())
    }
}

struct RunSummary {
    key: Vec<Vec<i64>>,
    at_t: Vec<u64>,
    observed: Vec<u64>,
    /// Net observed change over `(t, t + dt]` per window.
    outcomes: Vec<Vec<i64>>,
}

/// Compares the filter terms of `spec` with conditional frequencies at `t`
/// for every window length in `dts`.
///
/// Both sides are computed on the same trajectories: for each run in the bin
/// the paired difference `1[δ] - Σ_{i: o_i = δ} κ_i ∏ n_O^a ∏ n_U^b · dt` is
/// averaged, which equals the direct frequency minus the filter prediction
/// with in-bin conditional moments.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_filter_check(
    system: &CtmpSystem,
    spec: &FilterSpec,
    symbol: usize,
    t: f64,
    dts: &[f64],
    n_runs: usize,
    base_seed: u64,
    bin: &BinChoice,
) -> Result<FilterCheckReport, OracleError> {
    if dts.is_empty() {
        return Err(OracleError::NoWindows);
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(OracleError::BadTime(t));
    }
    let rx = system.rx_voxel();
    let measured: Vec<usize> = spec.measured.iter().map(|&s| system.flat(rx, s)).collect();
    let project = |counts: &[u64]| -> Vec<u64> { measured.iter().map(|&i| counts[i]).collect() };
    let dt_max = dts.iter().copied().fold(0.0, f64::max);
    let init = system.initial_state().counts;

    let summaries: Vec<RunSummary> = (0..n_runs)
        .into_par_iter()
        .map(|r| -> Result<RunSummary, OracleError> {
            let mut rng = indexed_rng(base_seed, r as u64);
            let mut key = Vec::new();
            let mut at_t: Option<Vec<u64>> = None;
            let mut later: Vec<(f64, Vec<u64>)> = Vec::new();
            let mut prev_obs = project(&init);
            let end = system.run_with(symbol, t + dt_max, &init, &mut rng, |time, c, before| {
                let mut after = before.to_vec();
                system.apply(c, &mut after);
                let obs = project(&after);
                if time <= t {
                    if obs != prev_obs {
                        key.push(obs.iter().zip(&prev_obs).map(|(&a, &b)| a as i64 - b as i64).collect());
                    }
                } else {
                    if at_t.is_none() {
                        at_t = Some(before.to_vec());
                    }
                    later.push((time, obs.clone()));
                }
                prev_obs = obs;
            })?;
            let at_t = at_t.unwrap_or(end);
            let observed = project(&at_t);
            let outcomes = dts
                .iter()
                .map(|&dt| {
                    let fin = later.iter().rev().find(|(time, _)| *time <= t + dt).map_or(&observed, |(_, o)| o);
                    fin.iter().zip(&observed).map(|(&a, &b)| a as i64 - b as i64).collect()
                })
                .collect();
            Ok(RunSummary {
                key,
                at_t,
                observed,
                outcomes,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut bins: HashMap<&[Vec<i64>], Vec<usize>> = HashMap::new();
    for (i, s) in summaries.iter().enumerate() {
        bins.entry(s.key.as_slice()).or_default().push(i);
    }
    let chosen: Vec<usize> = match bin {
        BinChoice::Sequence(seq) => bins.get(seq.as_slice()).cloned().unwrap_or_default(),
        BinChoice::MostPopulated | BinChoice::MostPopulatedWithAtLeast(_) => {
            let floor = match bin {
                BinChoice::MostPopulatedWithAtLeast(m) => m.clone(),
                _ => vec![0; measured.len()],
            };
            bins.iter()
                .filter(|(_, members)| summaries[members[0]].observed.iter().zip(&floor).all(|(a, b)| a >= b))
                // ties broken by the key so the choice is independent of hash order
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(a.0)))
                .map(|(_, m)| m.clone())
                .unwrap_or_default()
        }
    };
    if chosen.is_empty() {
        return Err(OracleError::EmptyBin);
    }
    let first = &summaries[chosen[0]];
    let observed = first.observed.clone();

    let mut deltas: Vec<Vec<i64>> = spec
        .channels
        .iter()
        .filter(|c| !c.is_silent())
        .map(|c| c.observed_delta.clone())
        .collect();
    deltas.push(vec![0; measured.len()]);
    deltas.dedup();
    let mut unique = Vec::new();
    for d in deltas {
        if !unique.contains(&d) {
            unique.push(d);
        }
    }

    // per-run channel rates at t, with the actual unmeasured counts
    let channel_rates: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&r| {
            let s = &summaries[r];
            spec.channels
                .iter()
                .enumerate()
                .map(|(i, ch)| {
                    let unmeasured: f64 = ch
                        .moment
                        .factors()
                        .iter()
                        .map(|&(sp, b)| falling_power(s.at_t[system.flat(rx, sp)], b))
                        .product();
                    Ok(spec.observed_factor(i, &s.observed)? * unmeasured)
                })
                .collect::<Result<Vec<f64>, FilterError>>()
        })
        .collect::<Result<_, _>>()?;

    let nb = chosen.len() as f64;
    let windows = dts
        .iter()
        .enumerate()
        .map(|(w, &dt)| {
            let mut other = 0usize;
            for &r in &chosen {
                if !unique.contains(&summaries[r].outcomes[w]) {
                    other += 1;
                }
            }
            let comparisons = unique
                .iter()
                .map(|delta| {
                    let zero = delta.iter().all(|&d| d == 0);
                    let mut direct = 0.0;
                    let mut predicted = 0.0;
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for (k, &r) in chosen.iter().enumerate() {
                        let hit = (summaries[r].outcomes[w] == *delta) as u8 as f64;
                        let q: f64 = if zero {
                            1.0 - dt
                                * spec
                                    .channels
                                    .iter()
                                    .zip(&channel_rates[k])
                                    .filter(|(c, _)| !c.is_silent())
                                    .map(|(_, &x)| x)
                                    .sum::<f64>()
                        } else {
                            dt * spec
                                .channels
                                .iter()
                                .zip(&channel_rates[k])
                                .filter(|(c, _)| c.observed_delta == *delta)
                                .map(|(_, &x)| x)
                                .sum::<f64>()
                        };
                        direct += hit;
                        predicted += q;
                        sum += hit - q;
                        sum_sq += (hit - q) * (hit - q);
                    }
                    let mean = sum / nb;
                    let var = if nb > 1.0 { (sum_sq - nb * mean * mean).max(0.0) / (nb - 1.0) } else { 0.0 };
                    let half = Z95 * (var / nb).sqrt();
                    DeltaComparison {
                        delta: delta.clone(),
                        direct: direct / nb,
                        predicted: predicted / nb,
                        ci: Interval {
                            lo: mean - half,
                            hi: mean + half,
                        },
                    }
                })
                .collect();
            WindowReport {
                dt,
                deltas: comparisons,
                other: other as f64 / nb,
            }
        })
        .collect();

    Ok(FilterCheckReport {
        bin: first.key.clone(),
        bin_size: chosen.len(),
        n_runs,
        observed,
        windows,
    })
}
