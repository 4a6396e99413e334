//! Bayesian filter terms for an arbitrary receiver circuit and measurement choice.
//!
//! Given a reaction network and the species the demodulator measures, every
//! reaction that touches a measured species contributes one term to the
//! one-step prediction `P[n_O(t+dt) | s, B(t)]`:
//!
//! ```text
//! indicator(n_O(t+dt) = n_O(t) + o_i) * κ_i ∏ n_Oj^a_ij * E[∏ n_Uj^b_ij | s, B(t)] * dt
//! ```
//!
//! plus a no-change term `1 - Σ_i Q_i`. The generator reads `o_i`, `a_ij` and
//! `b_ij` straight off the reaction graph; no per-circuit derivation is needed.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{ReactionNetwork, SpeciesId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("at least one measured species is required")]
    NothingMeasured,
    #[error("measured species `{0}` is not part of the network")]
    UnknownSpecies(String),
    #[error("species `{0}` is listed twice in the measured set")]
    DuplicateMeasured(String),
    #[error("dt = {dt} is too large: channel probabilities sum to {total} > 1")]
    DtTooLarge { dt: f64, total: f64 },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("moment value must be finite and non-negative, got {0}")]
    BadMoment(f64),
    #[error("malformed filter spec: {0}")]
    Parse(String),
    #[error("conserved total for `{0}` has not been bound")]
    UnboundTotal(String),
    #[error("closed species `{0}` is not part of the network")]
    UnknownClosed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    /// Species node → reaction node, the species being a reactant.
    Consumes { species: SpeciesId, reaction: usize, stoich: u32 },
    /// Reaction node → species node, the species being a product.
    Produces { reaction: usize, species: SpeciesId, stoich: u32 },
}

/// Reaction graph restricted to the reactions that involve a measured species.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionGraph {
    /// Measured species (circular nodes), in the caller's order.
    pub measured: Vec<SpeciesId>,
    /// Unmeasured species incident to a retained reaction (square nodes).
    pub unmeasured: Vec<SpeciesId>,
    /// Retained reactions (rectangular nodes), in declaration order.
    pub reactions: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl ReactionGraph {
    pub fn m_o(&self) -> usize {
        self.measured.len()
    }

    pub fn m_r(&self) -> usize {
        self.reactions.len()
    }

    pub fn m_u(&self) -> usize {
        self.unmeasured.len()
    }
}

fn resolve_measured<S: AsRef<str>>(network: &ReactionNetwork, measured: &[S]) -> Result<Vec<SpeciesId>, FilterError> {
    if measured.is_empty() {
        return Err(FilterError::NothingMeasured);
    }
    let mut ids = Vec::with_capacity(measured.len());
    for name in measured {
        let name = name.as_ref();
        let id = network
            .species_id(name)
            .ok_or_else(|| FilterError::UnknownSpecies(name.to_string()))?;
        if ids.contains(&id) {
            return Err(FilterError::DuplicateMeasured(name.to_string()));
        }
        ids.push(id);
    }
    Ok(ids)
}

pub fn build_reaction_graph<S: AsRef<str>>(network: &ReactionNetwork, measured: &[S]) -> Result<ReactionGraph, FilterError> {
    let measured = resolve_measured(network, measured)?;
    let mut reactions = Vec::new();
    let mut unmeasured = BTreeSet::new();
    let mut edges = Vec::new();
    for (i, r) in network.reactions().iter().enumerate() {
        if !measured.iter().any(|&m| r.involves(m)) {
            continue;
        }
        reactions.push(i);
        for (&species, &stoich) in r.reactants() {
            edges.push(Edge::Consumes { species, reaction: i, stoich });
        }
        for (&species, &stoich) in r.products() {
            edges.push(Edge::Produces { reaction: i, species, stoich });
        }
        unmeasured.extend(r.species().filter(|s| !measured.contains(s)));
    }
    Ok(ReactionGraph {
        measured,
        unmeasured: unmeasured.into_iter().collect(),
        reactions,
        edges,
    })
}

/// Monomial `∏ n_Uj^b_j` over unmeasured species whose symbol-conditioned
/// mean a channel needs. Empty means the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct MomentDescriptor {
    factors: Vec<(SpeciesId, u32)>,
}

impl MomentDescriptor {
    pub fn new<I: IntoIterator<Item = (SpeciesId, u32)>>(factors: I) -> Self {
        let mut factors: Vec<(SpeciesId, u32)> = factors.into_iter().filter(|&(_, b)| b > 0).collect();
        factors.sort();
        factors.dedup_by(|a, b| {
            if a.0 == b.0 {
                b.1 += a.1;
                true
            } else {
                false
            }
        });
        Self { factors }
    }

    pub fn constant() -> Self {
        Self::default()
    }

    pub fn factors(&self) -> &[(SpeciesId, u32)] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    /// Value of the monomial for the given per-species counts (falling powers).
    pub fn evaluate(&self, count: impl Fn(SpeciesId) -> u64) -> f64 {
        self.factors.iter().map(|&(s, b)| falling_power(count(s), b)).product()
    }

    /// `S*C2`-style label; `1` for the constant.
    pub fn label(&self, names: &[String]) -> String {
        if self.factors.is_empty() {
            return "1".to_string();
        }
        self.factors
            .iter()
            .map(|&(s, b)| if b == 1 { names[s.0].clone() } else { format!("{}^{b}", names[s.0]) })
            .collect::<Vec<_>>()
            .join("*")
    }

    pub(crate) fn relabel(&self, perm: &[usize]) -> Self {
        Self::new(self.factors.iter().map(|&(s, b)| (SpeciesId(perm[s.0]), b)))
    }
}

pub(crate) fn falling_power(n: u64, k: u32) -> f64 {
    (0..u64::from(k)).map(|i| n.saturating_sub(i) as f64).product()
}

/// Generator options.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOptions {
    /// Species whose counts change only through the network's own reactions
    /// (nothing diffuses in or out, nothing emits them), e.g. a receptor
    /// family. Conservation laws are only sought among these.
    pub closed: Vec<String>,
}

impl FilterOptions {
    pub fn closed<S: AsRef<str>>(species: &[S]) -> Self {
        Self {
            closed: species.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

/// `n_species + Σ_j w_j n_Oj = total`: an unmeasured species pinned by the
/// measured counts. The total is a property of the initial state and is
/// bound separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationLaw {
    pub species: SpeciesId,
    /// `w_j` per measured species.
    pub measured_weights: Vec<i64>,
    pub total: Option<u64>,
}

impl ConservationLaw {
    /// Count of the pinned species implied by `observed_counts`.
    pub fn value(&self, observed_counts: &[u64]) -> Option<u64> {
        let total = self.total? as i64;
        let seen: i64 = self
            .measured_weights
            .iter()
            .zip(observed_counts)
            .map(|(&w, &n)| w * n as i64)
            .sum();
        Some((total - seen).max(0) as u64)
    }
}

/// Searches for a law `n_target + Σ w_j n_Oj = const` over every reaction of
/// the network, with integer weights on the closed measured species.
fn find_conservation_law(
    network: &ReactionNetwork,
    measured: &[SpeciesId],
    closed: &[SpeciesId],
    target: SpeciesId,
) -> Option<ConservationLaw> {
    if !closed.contains(&target) {
        return None;
    }
    let cols: Vec<usize> = (0..measured.len()).filter(|&j| closed.contains(&measured[j])).collect();
    let nets: Vec<_> = network.reactions().iter().map(|r| r.net_change()).collect();
    let delta = |r: usize, s: SpeciesId| nets[r].get(&s).copied().unwrap_or(0);
    // augmented rows [Δ_O.. | -Δ_target]
    let mut rows: Vec<Vec<f64>> = (0..nets.len())
        .map(|r| {
            let mut row: Vec<f64> = cols.iter().map(|&j| delta(r, measured[j]) as f64).collect();
            row.push(-(delta(r, target) as f64));
            row
        })
        .collect();
    let n = cols.len();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..n {
        let Some(p) = (row..rows.len()).max_by(|&a, &b| rows[a][col].abs().total_cmp(&rows[b][col].abs())) else {
            break;
        };
        if rows[p][col].abs() < 1e-9 {
            continue;
        }
        rows.swap(row, p);
        let pivot = rows[row][col];
        for v in rows[row].iter_mut() {
            *v /= pivot;
        }
        for r in 0..rows.len() {
            if r != row && rows[r][col] != 0.0 {
                let factor = rows[r][col];
                for c in 0..=n {
                    rows[r][c] -= factor * rows[row][c];
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    let mut weights = vec![0i64; measured.len()];
    for (r, &col) in pivots.iter().enumerate() {
        weights[cols[col]] = rows[r][n].round() as i64;
    }
    // exact integer check over every reaction
    let holds = (0..nets.len()).all(|r| {
        delta(r, target) + measured.iter().zip(&weights).map(|(&m, &w)| w * delta(r, m)).sum::<i64>() == 0
    });
    holds.then_some(ConservationLaw {
        species: target,
        measured_weights: weights,
        total: None,
    })
}

/// One reaction's term of the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterChannel {
    /// Index of the source reaction in the network.
    pub reaction: usize,
    pub label: String,
    pub rate_constant: f64,
    /// `c_ij - a_ij` per measured species, aligned with [`FilterSpec::measured`].
    pub observed_delta: Vec<i64>,
    /// `a_ij` per measured species.
    pub observed_exponents: Vec<u32>,
    /// Unmeasured reactants pinned by a conservation law: `(law index, exponent)`.
    pub determined: Vec<(usize, u32)>,
    pub moment: MomentDescriptor,
}

impl FilterChannel {
    /// True when the reaction only touches measured species catalytically, so
    /// its firing cannot be seen in the history.
    pub fn is_silent(&self) -> bool {
        self.observed_delta.iter().all(|&d| d == 0)
    }

    /// `κ_i ∏ n_Oj^a_ij`, times any law-pinned factors: the part of the rate
    /// known from the observations.
    pub fn observed_factor(&self, laws: &[ConservationLaw], observed_counts: &[u64], names: &[String]) -> Result<f64, FilterError> {
        let mut f = self.rate_constant
            * self
                .observed_exponents
                .iter()
                .zip(observed_counts)
                .map(|(&a, &n)| falling_power(n, a))
                .product::<f64>();
        for &(l, e) in &self.determined {
            let law = &laws[l];
            let n = law
                .value(observed_counts)
                .ok_or_else(|| FilterError::UnboundTotal(names[law.species.0].clone()))?;
            f *= falling_power(n, e);
        }
        Ok(f)
    }
}

/// The generated filter: one channel per reaction-graph reaction node plus the
/// implicit no-change term `Q_n = 1 - Σ Q_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    /// Names of all network species, indexed by [`SpeciesId`].
    pub species: Vec<String>,
    pub measured: Vec<SpeciesId>,
    pub laws: Vec<ConservationLaw>,
    pub channels: Vec<FilterChannel>,
}

/// Filter terms with every unmeasured reactant left as a raw moment.
pub fn generate_filter_spec<S: AsRef<str>>(network: &ReactionNetwork, measured: &[S]) -> Result<FilterSpec, FilterError> {
    generate_filter_spec_with(network, measured, &FilterOptions::default())
}

/// Filter terms; unmeasured closed reactants that a conservation law pins to
/// the measured counts become observed factors instead of moments.
pub fn generate_filter_spec_with<S: AsRef<str>>(
    network: &ReactionNetwork,
    measured: &[S],
    options: &FilterOptions,
) -> Result<FilterSpec, FilterError> {
    let graph = build_reaction_graph(network, measured)?;
    let closed = options
        .closed
        .iter()
        .map(|n| network.species_id(n).ok_or_else(|| FilterError::UnknownClosed(n.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut laws: Vec<ConservationLaw> = Vec::new();
    for &u in &graph.unmeasured {
        let reactant = graph.reactions.iter().any(|&i| network.reactions()[i].reactant_coeff(u) > 0);
        if reactant {
            if let Some(law) = find_conservation_law(network, &graph.measured, &closed, u) {
                laws.push(law);
            }
        }
    }
    let law_of = |s: SpeciesId| laws.iter().position(|l| l.species == s);
    let channels = graph
        .reactions
        .iter()
        .map(|&i| {
            let r = &network.reactions()[i];
            FilterChannel {
                reaction: i,
                label: network.describe(i),
                rate_constant: r.rate_constant(),
                observed_delta: graph
                    .measured
                    .iter()
                    .map(|&m| i64::from(r.product_coeff(m)) - i64::from(r.reactant_coeff(m)))
                    .collect(),
                observed_exponents: graph.measured.iter().map(|&m| r.reactant_coeff(m)).collect(),
                determined: r
                    .reactants()
                    .iter()
                    .filter_map(|(&s, &b)| law_of(s).map(|l| (l, b)))
                    .collect(),
                moment: MomentDescriptor::new(
                    r.reactants()
                        .iter()
                        .filter(|(s, _)| !graph.measured.contains(s) && law_of(**s).is_none())
                        .map(|(&s, &b)| (s, b)),
                ),
            }
        })
        .collect();
    Ok(FilterSpec {
        species: network.species().to_vec(),
        measured: graph.measured,
        laws,
        channels,
    })
}

/// `Q_i = κ_i ∏ n_Oj^a_ij · moment · dt` for channel `channel` of `spec`.
pub fn evaluate_channel_probability(
    spec: &FilterSpec,
    channel: usize,
    observed_counts: &[u64],
    moment_value: f64,
    dt: f64,
) -> Result<f64, FilterError> {
    let channel = &spec.channels[channel];
    if observed_counts.len() != channel.observed_exponents.len() {
        return Err(FilterError::Length {
            expected: channel.observed_exponents.len(),
            got: observed_counts.len(),
        });
    }
    if !(moment_value.is_finite() && moment_value >= 0.0) {
        return Err(FilterError::BadMoment(moment_value));
    }
    let q = channel.observed_factor(&spec.laws, observed_counts, &spec.species)? * moment_value * dt;
    if q > 1.0 {
        return Err(FilterError::DtTooLarge { dt, total: q });
    }
    Ok(q)
}

/// All terms of the one-step prediction at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProbabilities {
    /// `Q_i` per channel.
    pub channels: Vec<f64>,
    /// `1 - Σ Q_i`.
    pub no_reaction: f64,
}

impl StepProbabilities {
    /// Probability of each distinct observed change, the zero change
    /// collecting the no-reaction term and every silent channel.
    pub fn by_delta(&self, spec: &FilterSpec) -> Vec<(Vec<i64>, f64)> {
        let mut out: Vec<(Vec<i64>, f64)> = vec![(vec![0; spec.measured.len()], self.no_reaction)];
        for (ch, &q) in spec.channels.iter().zip(&self.channels) {
            match out.iter_mut().find(|(d, _)| *d == ch.observed_delta) {
                Some((_, p)) => *p += q,
                None => out.push((ch.observed_delta.clone(), q)),
            }
        }
        out
    }
}

impl FilterSpec {
    pub fn measured_names(&self) -> Vec<&str> {
        self.measured.iter().map(|s| self.species[s.0].as_str()).collect()
    }

    /// Binds every conservation-law total from the initial counts of the
    /// receiver species.
    pub fn bind_totals(mut self, initial: impl Fn(SpeciesId) -> u64) -> Self {
        let measured = self.measured.clone();
        for law in &mut self.laws {
            let seen: i64 = measured
                .iter()
                .zip(&law.measured_weights)
                .map(|(&m, &w)| w * initial(m) as i64)
                .sum();
            law.total = Some((initial(law.species) as i64 + seen).max(0) as u64);
        }
        self
    }

    /// `κ_i ∏ n_Oj^a_ij` (with pinned factors) for channel `i`.
    pub fn observed_factor(&self, channel: usize, observed_counts: &[u64]) -> Result<f64, FilterError> {
        self.channels[channel].observed_factor(&self.laws, observed_counts, &self.species)
    }

    /// Unmeasured species referenced by any channel moment.
    pub fn unmeasured(&self) -> Vec<SpeciesId> {
        let set: BTreeSet<SpeciesId> = self
            .channels
            .iter()
            .flat_map(|c| c.moment.factors().iter().map(|&(s, _)| s))
            .collect();
        set.into_iter().collect()
    }

    /// Evaluates every `Q_i` and `Q_n` given the observed counts and each
    /// channel's moment value.
    pub fn step_probabilities(&self, observed_counts: &[u64], moments: &[f64], dt: f64) -> Result<StepProbabilities, FilterError> {
        if moments.len() != self.channels.len() {
            return Err(FilterError::Length {
                expected: self.channels.len(),
                got: moments.len(),
            });
        }
        let channels = moments
            .iter()
            .enumerate()
            .map(|(i, &m)| evaluate_channel_probability(self, i, observed_counts, m, dt))
            .collect::<Result<Vec<_>, _>>()?;
        let total: f64 = channels.iter().sum();
        if total > 1.0 {
            return Err(FilterError::DtTooLarge { dt, total });
        }
        Ok(StepProbabilities {
            channels,
            no_reaction: 1.0 - total,
        })
    }

    /// Human-readable listing of the terms.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let names = &self.species;
        let measured: Vec<&str> = self.measured_names();
        let unmeasured: Vec<&str> = self.unmeasured().iter().map(|s| names[s.0].as_str()).collect();
        let _ = writeln!(out, "measured: {}", measured.join(", "));
        let _ = writeln!(
            out,
            "terms: {} reaction terms + no-reaction term; moments over: {}",
            self.channels.len(),
            if unmeasured.is_empty() { "-".to_string() } else { unmeasured.join(", ") }
        );
        for law in &self.laws {
            let _ = writeln!(
                out,
                "conserved: {} = {}    [{}_tot = {}]",
                names[law.species.0],
                self.law_text(law),
                names[law.species.0],
                law.total.map_or("unbound".to_string(), |t| t.to_string())
            );
        }
        for (i, ch) in self.channels.iter().enumerate() {
            let mut factors = vec![format!("{}", ch.rate_constant)];
            for (&a, &m) in ch.observed_exponents.iter().zip(&self.measured) {
                match a {
                    0 => {}
                    1 => factors.push(format!("{}(t)", names[m.0])),
                    _ => factors.push(format!("{}(t)^{a}", names[m.0])),
                }
            }
            for &(l, e) in &ch.determined {
                let pinned = format!("({})", self.law_text(&self.laws[l]));
                factors.push(if e == 1 { pinned } else { format!("{pinned}^{e}") });
            }
            let moment = if ch.moment.is_constant() {
                "1".to_string()
            } else {
                format!("E[{}(t) | s, B(t)]", ch.moment.label(names))
            };
            factors.push(moment);
            factors.push("dt".into());
            let change: Vec<String> = measured
                .iter()
                .zip(&ch.observed_delta)
                .map(|(n, d)| format!("{n}{d:+}"))
                .collect();
            let _ = writeln!(
                out,
                "Q_{} = {}    [R{}: {}; {}]",
                i + 1,
                factors.join(" * "),
                ch.reaction + 1,
                ch.label,
                if ch.is_silent() { "no visible change".to_string() } else { change.join(", ") }
            );
        }
        let sum: Vec<String> = (1..=self.channels.len()).map(|i| format!("Q_{i}")).collect();
        let _ = writeln!(
            out,
            "Q_n = 1 - ({})    [no change]",
            if sum.is_empty() { "0".to_string() } else { sum.join(" + ") }
        );
        out
    }

    fn law_text(&self, law: &ConservationLaw) -> String {
        let mut text = format!("{}_tot", self.species[law.species.0]);
        for (&w, &m) in law.measured_weights.iter().zip(&self.measured) {
            let name = &self.species[m.0];
            match w {
                0 => {}
                1 => text.push_str(&format!(" - {name}(t)")),
                -1 => text.push_str(&format!(" + {name}(t)")),
                w if w > 0 => text.push_str(&format!(" - {w} {name}(t)")),
                w => text.push_str(&format!(" + {} {name}(t)", -w)),
            }
        }
        text
    }

    /// JSON form; [`FilterSpec::from_json`] inverts it exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("filter spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, FilterError> {
        serde_json::from_str(text).map_err(|e| FilterError::Parse(e.to_string()))
    }

    /// Spec with species relabelled by `perm[old] = new` and renamed to `names[new]`.
    pub fn relabel(&self, perm: &[usize], names: &[String]) -> Self {
        Self {
            species: names.to_vec(),
            measured: self.measured.iter().map(|s| SpeciesId(perm[s.0])).collect(),
            laws: self
                .laws
                .iter()
                .map(|l| ConservationLaw {
                    species: SpeciesId(perm[l.species.0]),
                    ..l.clone()
                })
                .collect(),
            channels: self
                .channels
                .iter()
                .map(|c| FilterChannel {
                    moment: c.moment.relabel(perm),
                    ..c.clone()
                })
                .collect(),
        }
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::make_ligand_receptor_network;

    fn two_site() -> ReactionNetwork {
        make_ligand_receptor_network(2, &[1.0, 1.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn graph_node_counts() {
        let net = two_site();
        let g = build_reaction_graph(&net, &["C1", "C2"]).unwrap();
        assert_eq!((g.m_o(), g.m_u(), g.m_r()), (2, 2, 4));
        let g = build_reaction_graph(&net, &["C2"]).unwrap();
        assert_eq!((g.m_o(), g.m_u(), g.m_r()), (1, 2, 2));
        let names: Vec<&str> = g.unmeasured.iter().map(|&s| net.name(s)).collect();
        assert_eq!(names, ["S", "C1"]);
        let g = build_reaction_graph(&net, &["C1"]).unwrap();
        assert_eq!((g.m_o(), g.m_u(), g.m_r()), (1, 3, 4));
    }

    #[test]
    fn graph_edges_follow_stoichiometry() {
        let net = two_site();
        let g = build_reaction_graph(&net, &["C2"]).unwrap();
        let s = net.species_id("S").unwrap();
        let c1 = net.species_id("C1").unwrap();
        let c2 = net.species_id("C2").unwrap();
        assert!(g.edges.contains(&Edge::Consumes { species: s, reaction: 2, stoich: 1 }));
        assert!(g.edges.contains(&Edge::Consumes { species: c1, reaction: 2, stoich: 1 }));
        assert!(g.edges.contains(&Edge::Produces { reaction: 2, species: c2, stoich: 1 }));
        assert_eq!(g.edges.len(), 6);
    }

    #[test]
    fn isolated_reaction_is_excluded() {
        let net = ReactionNetwork::parse(&["A", "B", "O", "X"], &["A -> B @ 1", "X -> O @ 2", "O -> X @ 3"]).unwrap();
        let g = build_reaction_graph(&net, &["O"]).unwrap();
        assert_eq!(g.reactions, [1, 2]);
        let spec = generate_filter_spec(&net, &["O"]).unwrap();
        assert_eq!(spec.channels.len(), 2);
    }

    #[test]
    fn graph_errors() {
        let net = two_site();
        assert_eq!(build_reaction_graph::<&str>(&net, &[]), Err(FilterError::NothingMeasured));
        assert_eq!(build_reaction_graph(&net, &["Z"]), Err(FilterError::UnknownSpecies("Z".into())));
        assert_eq!(
            build_reaction_graph(&net, &["C1", "C1"]),
            Err(FilterError::DuplicateMeasured("C1".into()))
        );
    }

    #[test]
    fn catalytic_measured_reactant_gives_silent_channel() {
        let net = ReactionNetwork::parse(&["O", "U", "V"], &["O + U -> O + V @ 2", "U -> O @ 1"]).unwrap();
        let spec = generate_filter_spec(&net, &["O"]).unwrap();
        assert_eq!(spec.channels.len(), 2);
        assert!(spec.channels[0].is_silent());
        assert_eq!(spec.channels[0].observed_exponents, [1]);
        let p = spec.step_probabilities(&[3], &[1.0, 2.0], 0.01).unwrap();
        let groups = p.by_delta(&spec);
        // silent channel merges into the no-change indicator
        assert_eq!(groups.len(), 2);
        assert!((groups[0].1 - (1.0 - 0.02)).abs() < 1e-15);
        assert!((groups[1].1 - 0.02).abs() < 1e-15);
    }

    #[test]
    fn channel_probability_arithmetic() {
        let spec = generate_filter_spec(&make_ligand_receptor_network(2, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), &["C1"]).unwrap();
        // S + C1 -> C2 with λ2 = 1, b1 = 2, E[n_R | s] = 3
        let q = evaluate_channel_probability(&spec, 2, &[2], 3.0, 1e-3).unwrap();
        assert!((q - 6e-3).abs() < 1e-15);
        assert_eq!(evaluate_channel_probability(&spec, 2, &[0], 3.0, 1e-3).unwrap(), 0.0);
        assert!(matches!(
            evaluate_channel_probability(&spec, 2, &[2], 3.0, 1.0),
            Err(FilterError::DtTooLarge { .. })
        ));
        assert!(evaluate_channel_probability(&spec, 2, &[2], -1.0, 1e-3).is_err());
        assert!(evaluate_channel_probability(&spec, 2, &[2, 1], 1.0, 1e-3).is_err());
    }

    #[test]
    fn no_reaction_term_complements_channels() {
        let spec = generate_filter_spec(&two_site(), &["C1", "C2"]).unwrap();
        // unit constants, counts and moments: four channels of 0.05 each
        let p = spec.step_probabilities(&[1, 1], &[1.0, 1.0, 1.0, 1.0], 0.05).unwrap();
        let total: f64 = p.channels.iter().sum();
        assert!((total - 0.2).abs() < 1e-15, "{total}");
        assert!((p.no_reaction - 0.8).abs() < 1e-15);
        assert!(matches!(
            spec.step_probabilities(&[1, 1], &[50.0, 1.0, 1.0, 1.0], 0.05),
            Err(FilterError::DtTooLarge { .. })
        ));
    }

    #[test]
    fn text_rendering() {
        let spec = generate_filter_spec(&two_site(), &["C1"]).unwrap();
        let text = spec.render_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("Q_")).count(), 5);
        assert!(text.contains("Q_2 = 1 * C1(t) * 1 * dt    [R2: C1 -> S + E; C1-1]"), "{text}");
        assert!(text.contains("Q_3 = 1 * C1(t) * E[S(t) | s, B(t)] * dt    [R3: S + C1 -> C2; C1-1]"), "{text}");
        assert!(text.contains("Q_n = 1 - (Q_1 + Q_2 + Q_3 + Q_4)"));
    }

    fn receptor_family(n: usize) -> Vec<String> {
        (0..=n).map(crate::chem::complex_name).collect()
    }

    #[test]
    fn conservation_pins_free_receptors_only_when_all_complexes_measured() {
        let net = two_site();
        let closed = FilterOptions::closed(&receptor_family(2));
        let e = net.species_id("E").unwrap();
        let s = net.species_id("S").unwrap();

        let all = generate_filter_spec_with(&net, &["C1", "C2"], &closed).unwrap();
        assert_eq!(
            all.laws,
            [ConservationLaw {
                species: e,
                measured_weights: vec![1, 1],
                total: None
            }]
        );
        let bind = all.channels.iter().find(|c| c.label == "S + E -> C1").unwrap();
        assert_eq!(bind.determined, [(0, 1)]);
        assert_eq!(bind.moment, MomentDescriptor::new([(s, 1)]));
        assert!(matches!(all.observed_factor(0, &[1, 1]), Err(FilterError::UnboundTotal(_))));
        let bound = all.clone().bind_totals(|sp| if sp == e { 10 } else { 0 });
        // λ1 (M - b1 - b2) with M = 10
        assert_eq!(bound.observed_factor(0, &[3, 2]).unwrap(), 5.0);
        assert!(bound.render_text().contains("Q_1 = 1 * (E_tot - C1(t) - C2(t)) * E[S(t) | s, B(t)] * dt"), "{}", bound.render_text());
        assert!(bound.render_text().contains("[E_tot = 10]"));

        // C2 unmeasured: E is not determined by C1 alone
        let one = generate_filter_spec_with(&net, &["C1"], &closed).unwrap();
        assert!(one.laws.is_empty());
        // S is never closed, so no law is ever found for it
        let raw = generate_filter_spec_with(&net, &["C1", "C2"], &FilterOptions::default()).unwrap();
        assert!(raw.laws.is_empty());
        assert_eq!(raw.channels[0].moment, MomentDescriptor::new([(s, 1), (e, 1)]));
        assert!(matches!(
            generate_filter_spec_with(&net, &["C1"], &FilterOptions::closed(&["Q"])),
            Err(FilterError::UnknownClosed(_))
        ));
    }

    #[test]
    fn law_with_weights_other_than_one() {
        // dimerising receptor: 2 P <-> D, measured D, P pinned with weight 2
        let net = ReactionNetwork::parse(&["P", "D"], &["2P -> D @ 1", "D -> 2P @ 3"]).unwrap();
        let spec = generate_filter_spec_with(&net, &["D"], &FilterOptions::closed(&["P", "D"])).unwrap();
        assert_eq!(spec.laws[0].measured_weights, [2]);
        let spec = spec.bind_totals(|s| if s.0 == 0 { 6 } else { 0 });
        // P = 6 - 2 D = 2 when D = 2; rate 1 * P (P - 1) = 2
        assert_eq!(spec.observed_factor(0, &[2]).unwrap(), 2.0);
        assert!(spec.channels[0].moment.is_constant());
    }

    #[test]
    fn json_round_trip() {
        for measured in [vec!["C1"], vec!["C2"], vec!["C1", "C2"]] {
            let net = make_ligand_receptor_network(2, &[0.1, 1.0 / 3.0], &[2.5, 1e-7]).unwrap();
            let spec = generate_filter_spec_with(&net, &measured, &FilterOptions::closed(&receptor_family(2)))
                .unwrap()
                .bind_totals(|s| s.0 as u64 * 7);
            assert_eq!(FilterSpec::from_json(&spec.to_json()).unwrap(), spec);
        }
        assert!(FilterSpec::from_json("{").is_err());
    }
}
