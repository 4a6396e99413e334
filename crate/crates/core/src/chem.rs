//! Chemical species, elementary mass-action reactions and reaction networks.
//!
//! Rate constants stored on a [`Reaction`] are always count based: per
//! second for unimolecular reactions and per second per molecule for
//! bimolecular ones. Converting a concentration-based constant is an explicit
//! step through [`scale_rate`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a species inside a [`ReactionNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeciesId(pub usize);

impl SpeciesId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("rate constant must be positive and finite, got {0}")]
    NonPositiveRate(f64),
    #[error("reaction has neither reactants nor products")]
    EmptyReaction,
    #[error("reaction consumes {0} molecules; only elementary reactions with at most 2 reactant molecules are supported")]
    NotElementary(u32),
    #[error("unknown species `{0}`")]
    UnknownSpecies(String),
    #[error("reaction references species index {0}, which is not declared")]
    UndeclaredSpecies(usize),
    #[error("duplicate species name `{0}`")]
    DuplicateSpecies(String),
    #[error("empty species name")]
    EmptyName,
    #[error("expected {expected} rate constants, got {got}")]
    RateCount { expected: usize, got: usize },
    #[error("a ligand-receptor chain needs at least one binding site")]
    NoBindingSites,
    #[error("cannot parse reaction `{text}`: {reason}")]
    Syntax { text: String, reason: String },
    #[error("voxel volume must be positive, got {0}")]
    NonPositiveVolume(f64),
}

/// An elementary reaction `reactants -> products` with a count-based rate constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    reactants: BTreeMap<SpeciesId, u32>,
    products: BTreeMap<SpeciesId, u32>,
    rate_constant: f64,
}

impl Reaction {
    pub fn new<R, P>(reactants: R, products: P, rate_constant: f64) -> Result<Self, ChemError>
    where
        R: IntoIterator<Item = (SpeciesId, u32)>,
        P: IntoIterator<Item = (SpeciesId, u32)>,
    {
        let reactants = collect_side(reactants);
        let products = collect_side(products);
        if reactants.is_empty() && products.is_empty() {
            return Err(ChemError::EmptyReaction);
        }
        if !(rate_constant.is_finite() && rate_constant > 0.0) {
            return Err(ChemError::NonPositiveRate(rate_constant));
        }
        let order: u32 = reactants.values().sum();
        if order > 2 {
            return Err(ChemError::NotElementary(order));
        }
        Ok(Self {
            reactants,
            products,
            rate_constant,
        })
    }

    pub fn reactants(&self) -> &BTreeMap<SpeciesId, u32> {
        &self.reactants
    }

    pub fn products(&self) -> &BTreeMap<SpeciesId, u32> {
        &self.products
    }

    pub fn rate_constant(&self) -> f64 {
        self.rate_constant
    }

    /// Stoichiometric multiplicity of `species` among the reactants.
    pub fn reactant_coeff(&self, species: SpeciesId) -> u32 {
        self.reactants.get(&species).copied().unwrap_or(0)
    }

    pub fn product_coeff(&self, species: SpeciesId) -> u32 {
        self.products.get(&species).copied().unwrap_or(0)
    }

    /// Total number of reactant molecules.
    pub fn order(&self) -> u32 {
        self.reactants.values().sum()
    }

    /// Products minus reactants, with zero entries omitted.
    ///
    /// Catalytic species cancel: `RNA -> RNA + S` yields `{S: +1}`.
    pub fn net_change(&self) -> BTreeMap<SpeciesId, i64> {
        let mut net: BTreeMap<SpeciesId, i64> = BTreeMap::new();
        for (&s, &c) in &self.products {
            *net.entry(s).or_default() += i64::from(c);
        }
        for (&s, &c) in &self.reactants {
            *net.entry(s).or_default() -= i64::from(c);
        }
        net.retain(|_, v| *v != 0);
        net
    }

    /// Every species appearing on either side.
    pub fn species(&self) -> impl Iterator<Item = SpeciesId> + '_ {
        let mut all: Vec<SpeciesId> = self.reactants.keys().chain(self.products.keys()).copied().collect();
        all.sort();
        all.dedup();
        all.into_iter()
    }

    pub fn involves(&self, species: SpeciesId) -> bool {
        self.reactants.contains_key(&species) || self.products.contains_key(&species)
    }
}

fn collect_side<I: IntoIterator<Item = (SpeciesId, u32)>>(side: I) -> BTreeMap<SpeciesId, u32> {
    let mut map = BTreeMap::new();
    for (s, c) in side {
        if c > 0 {
            *map.entry(s).or_insert(0) += c;
        }
    }
    map
}

/// Free function form of [`Reaction::net_change`].
pub fn net_change(reaction: &Reaction) -> BTreeMap<SpeciesId, i64> {
    reaction.net_change()
}

/// Species names plus the reactions over them.
///
/// Immutable once built; cloning is cheap enough to hand one to every
/// simulation worker, and `&ReactionNetwork` is `Sync`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    species: Vec<String>,
    reactions: Vec<Reaction>,
}

impl ReactionNetwork {
    pub fn new(species: Vec<String>, reactions: Vec<Reaction>) -> Result<Self, ChemError> {
        for (i, name) in species.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(ChemError::EmptyName);
            }
            if species[..i].contains(name) {
                return Err(ChemError::DuplicateSpecies(name.clone()));
            }
        }
        for r in &reactions {
            if let Some(bad) = r.species().find(|s| s.0 >= species.len()) {
                return Err(ChemError::UndeclaredSpecies(bad.0));
            }
        }
        Ok(Self { species, reactions })
    }

    /// Builds a network from species names and `"reactants -> products @ rate"` lines.
    pub fn parse<S: AsRef<str>, R: AsRef<str>>(species: &[S], reactions: &[R]) -> Result<Self, ChemError> {
        let names: Vec<String> = species.iter().map(|s| s.as_ref().trim().to_string()).collect();
        let shell = Self::new(names, Vec::new())?;
        let parsed = reactions
            .iter()
            .map(|line| shell.parse_reaction(line.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(shell.species, parsed)
    }

    /// Parses `"S + C1 -> C2 @ 0.5"`. Coefficients are written as `2 A` or `2A`;
    /// an empty side is written `0` or left blank.
    pub fn parse_reaction(&self, text: &str) -> Result<Reaction, ChemError> {
        let syntax = |reason: &str| ChemError::Syntax {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        let (lhs_rhs, rate) = text.split_once('@').ok_or_else(|| syntax("missing `@ rate`"))?;
        let rate: f64 = rate.trim().parse().map_err(|_| syntax("rate is not a number"))?;
        let (lhs, rhs) = lhs_rhs.split_once("->").ok_or_else(|| syntax("missing `->`"))?;
        let reactants = self.parse_side(lhs).map_err(|e| match e {
            ChemError::Syntax { reason, .. } => syntax(&reason),
            other => other,
        })?;
        let products = self.parse_side(rhs).map_err(|e| match e {
            ChemError::Syntax { reason, .. } => syntax(&reason),
            other => other,
        })?;
        Reaction::new(reactants, products, rate)
    }

    fn parse_side(&self, side: &str) -> Result<Vec<(SpeciesId, u32)>, ChemError> {
        let side = side.trim();
        if side.is_empty() || side == "0" || side == "∅" {
            return Ok(Vec::new());
        }
        side.split('+')
            .map(|term| {
                let term = term.trim();
                let digits = term.chars().take_while(|c| c.is_ascii_digit()).count();
                let (coeff, name) = term.split_at(digits);
                let coeff = if coeff.is_empty() {
                    1
                } else {
                    coeff.parse::<u32>().map_err(|_| ChemError::Syntax {
                        text: term.to_string(),
                        reason: "bad coefficient".into(),
                    })?
                };
                let name = name.trim();
                if name.is_empty() {
                    return Err(ChemError::Syntax {
                        text: term.to_string(),
                        reason: "missing species name".into(),
                    });
                }
                let id = self.species_id(name).ok_or_else(|| ChemError::UnknownSpecies(name.to_string()))?;
                Ok((id, coeff))
            })
            .collect()
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn reactions(&self) -> &[Reaction] {
        &self.reactions
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn species_id(&self, name: &str) -> Option<SpeciesId> {
        self.species.iter().position(|s| s == name).map(SpeciesId)
    }

    pub fn require(&self, name: &str) -> Result<SpeciesId, ChemError> {
        self.species_id(name).ok_or_else(|| ChemError::UnknownSpecies(name.to_string()))
    }

    pub fn name(&self, id: SpeciesId) -> &str {
        &self.species[id.0]
    }

    /// Human-readable form of reaction `index`, e.g. `S + C1 -> C2`.
    pub fn describe(&self, index: usize) -> String {
        let r = &self.reactions[index];
        format!("{} -> {}", self.side_text(r.reactants()), self.side_text(r.products()))
    }

    fn side_text(&self, side: &BTreeMap<SpeciesId, u32>) -> String {
        if side.is_empty() {
            return "0".to_string();
        }
        side.iter()
            .map(|(&s, &c)| {
                if c == 1 {
                    self.name(s).to_string()
                } else {
                    format!("{c} {}", self.name(s))
                }
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }

    /// Line form accepted by [`ReactionNetwork::parse`].
    pub fn reaction_line(&self, index: usize) -> String {
        format!("{} @ {}", self.describe(index), self.reactions[index].rate_constant())
    }

    /// Same network with species renamed and reordered by `perm`
    /// (`perm[old] = new`). Used to check that derived objects are label-free.
    pub fn relabel(&self, perm: &[usize], names: &[String]) -> Result<Self, ChemError> {
        let mut species = vec![String::new(); self.species.len()];
        for (old, &new) in perm.iter().enumerate() {
            species[new] = names[old].clone();
        }
        let map = |side: &BTreeMap<SpeciesId, u32>| -> Vec<(SpeciesId, u32)> {
            side.iter().map(|(&s, &c)| (SpeciesId(perm[s.0]), c)).collect()
        };
        let reactions = self
            .reactions
            .iter()
            .map(|r| Reaction::new(map(r.reactants()), map(r.products()), r.rate_constant()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(species, reactions)
    }
}

impl fmt::Display for ReactionNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "species: {}", self.species.join(", "))?;
        for i in 0..self.reactions.len() {
            writeln!(f, "R{}: {}", i + 1, self.reaction_line(i))?;
        }
        Ok(())
    }
}

/// Name of the `k`-th bound complex (`C1`, `C2`, ...). `k = 0` is the free receptor `E`.
pub fn complex_name(k: usize) -> String {
    if k == 0 {
        "E".to_string()
    } else {
        format!("C{k}")
    }
}

/// Receptor with `n_sites` sequential binding sites:
/// `S + E <-> C1`, `S + C1 <-> C2`, ..., `S + C(n-1) <-> Cn`.
///
/// Species are ordered `S, E, C1..Cn`. Reactions are declared per site as
/// forward (`lambdas[k]`) then reverse (`mus[k]`). Forward constants must
/// already be volume scaled.
pub fn make_ligand_receptor_network(
    n_sites: usize,
    lambdas: &[f64],
    mus: &[f64],
) -> Result<ReactionNetwork, ChemError> {
    if n_sites == 0 {
        return Err(ChemError::NoBindingSites);
    }
    for got in [lambdas.len(), mus.len()] {
        if got != n_sites {
            return Err(ChemError::RateCount {
                expected: n_sites,
                got,
            });
        }
    }
    let mut species = vec!["S".to_string()];
    species.extend((0..=n_sites).map(complex_name));
    let ligand = SpeciesId(0);
    // complex k (0 = E) lives at index k + 1
    let complex = |k: usize| SpeciesId(k + 1);
    let mut reactions = Vec::with_capacity(2 * n_sites);
    for k in 1..=n_sites {
        reactions.push(Reaction::new(
            [(ligand, 1), (complex(k - 1), 1)],
            [(complex(k), 1)],
            lambdas[k - 1],
        )?);
        reactions.push(Reaction::new(
            [(complex(k), 1)],
            [(ligand, 1), (complex(k - 1), 1)],
            mus[k - 1],
        )?);
    }
    ReactionNetwork::new(species, reactions)
}

/// Voxel volume used to turn concentration-based constants into count-based ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateScaling {
    volume: f64,
}

impl RateScaling {
    pub fn new(volume: f64) -> Result<Self, ChemError> {
        if !(volume.is_finite() && volume > 0.0) {
            return Err(ChemError::NonPositiveVolume(volume));
        }
        Ok(Self { volume })
    }

    /// Scaling for a cubic voxel of edge `w` (volume `w³`).
    pub fn for_voxel_edge(w: f64) -> Result<Self, ChemError> {
        Self::new(w * w * w)
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Molecularity {
    Unimolecular,
    Bimolecular,
}

/// Converts a rate constant to count-based units: bimolecular constants are
/// divided by the voxel volume, unimolecular ones pass through.
pub fn scale_rate(constant: f64, scaling: RateScaling, molecularity: Molecularity) -> Result<f64, ChemError> {
    if !(constant.is_finite() && constant > 0.0) {
        return Err(ChemError::NonPositiveRate(constant));
    }
    Ok(match molecularity {
        Molecularity::Unimolecular => constant,
        Molecularity::Bimolecular => constant / scaling.volume(),
    })
}
