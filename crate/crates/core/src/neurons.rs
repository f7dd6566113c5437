//! Group neurons and property neurons derived from activation patterns.
//!
//! For each group `i` of a property, the candidate set `N_i` holds neurons that
//! appear in the neuron sets of at least a `coverage` share of the group's keys.
//! Group neurons are `G_i = N_i \ ∪_{j≠i} N_j`, and the property neurons are
//! `P = ∪ G_i`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{BroadClass, Gender, PhoneInventory, PitchBin};
use crate::patterns::{ActivationPatternSet, NeuronSet};
use crate::stats::{Condition, StatKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    PhonesBroad,
    PhonesIndividual,
    Gender,
    Pitch,
}

impl Property {
    pub const ALL: [Property; 4] =
        [Property::PhonesBroad, Property::PhonesIndividual, Property::Gender, Property::Pitch];

    pub fn name(self) -> &'static str {
        match self {
            Property::PhonesBroad => "phones_broad",
            Property::PhonesIndividual => "phones_individual",
            Property::Gender => "gender",
            Property::Pitch => "pitch",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown property `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub label: String,
    pub keys: Vec<StatKey>,
}

/// The groups a property is split into, each a list of (phone, condition) keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub property: Property,
    pub groups: Vec<Group>,
}

impl GroupSpec {
    pub fn for_property(property: Property, inv: &PhoneInventory) -> Self {
        let phones_with = |phones: &[&str], cond: Condition| -> Vec<StatKey> {
            phones.iter().map(|p| StatKey::new(*p, cond)).collect()
        };
        let all: Vec<&str> = inv.all().collect();
        let voiced: Vec<&str> = inv.voiced().collect();
        let groups = match property {
            Property::PhonesBroad => [BroadClass::Vowel, BroadClass::VoicedConsonant, BroadClass::UnvoicedConsonant]
                .into_iter()
                .map(|c| Group {
                    label: c.label().to_owned(),
                    keys: phones_with(inv.class_members(c), Condition::None),
                })
                .collect(),
            Property::PhonesIndividual => all
                .iter()
                .map(|p| Group { label: (*p).to_owned(), keys: vec![StatKey::new(*p, Condition::None)] })
                .collect(),
            Property::Gender => [Gender::Male, Gender::Female]
                .into_iter()
                .map(|g| Group { label: g.label().to_owned(), keys: phones_with(&all, Condition::Gender(g)) })
                .collect(),
            Property::Pitch => [PitchBin::Low, PitchBin::Mid, PitchBin::High]
                .into_iter()
                .map(|b| Group { label: b.label().to_owned(), keys: phones_with(&voiced, Condition::Pitch(b)) })
                .collect(),
        };
        GroupSpec { property, groups }
    }

    /// Every key used by any group, deduplicated and sorted.
    pub fn keys(&self) -> Vec<StatKey> {
        let mut keys: Vec<StatKey> = self.groups.iter().flat_map(|g| g.keys.iter().cloned()).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// Group label a key belongs to (first match).
    pub fn group_of(&self, key: &StatKey) -> Option<&str> {
        self.groups
            .iter()
            .find(|g| g.keys.contains(key))
            .map(|g| g.label.as_str())
    }
}

/// Minimum number of keys a neuron must appear in: `ceil(coverage * present)`, at least 1.
pub fn required_keys(coverage: f64, present: usize) -> usize {
    // tolerance absorbs products like 0.8 * 5 landing a hair above an integer
    ((coverage * present as f64 - 1e-9).ceil() as usize).max(1)
}

/// `N_i`: neurons present in at least `coverage` of the group's present keys.
/// Returns the set and the number of present keys.
pub fn candidate_neurons(
    patterns: &ActivationPatternSet,
    group: &Group,
    coverage: f64,
) -> Result<(NeuronSet, usize)> {
    let m = patterns.m();
    let mut hits = vec![0usize; m];
    let mut present = 0;
    for key in &group.keys {
        if let Some(s) = patterns.neuron_set(key) {
            present += 1;
            for &j in s.members() {
                hits[j] += 1;
            }
        }
    }
    if present == 0 {
        return Err(Error::MissingData(format!("no patterns for any key of group `{}`", group.label)));
    }
    if present < group.keys.len() {
        warn!(
            "group `{}`: only {present} of {} keys have patterns",
            group.label,
            group.keys.len()
        );
    }
    let need = required_keys(coverage, present);
    let set = NeuronSet::new(m, hits.iter().enumerate().filter(|(_, &h)| h >= need).map(|(j, _)| j))?;
    Ok((set, present))
}

/// `G_i = N_i \ ∪_{j≠i} N_j`.
pub fn group_neurons(candidates: &[NeuronSet]) -> Result<Vec<NeuronSet>> {
    let Some(first) = candidates.first() else { return Ok(Vec::new()) };
    let m = first.m();
    let mut owners = vec![0usize; m];
    for s in candidates {
        first.same_universe(s)?;
        for &j in s.members() {
            owners[j] += 1;
        }
    }
    candidates
        .iter()
        .map(|s| NeuronSet::new(m, s.members().iter().copied().filter(|&j| owners[j] == 1)))
        .collect()
}

/// `P = ∪ G_i`.
pub fn property_neurons(groups: &[NeuronSet]) -> Result<NeuronSet> {
    let Some(first) = groups.first() else {
        return Err(Error::InsufficientData("no groups given".into()));
    };
    groups.iter().try_fold(NeuronSet::empty(first.m()), |acc, g| acc.union(g))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRegion {
    /// Names of the sets an element of this region belongs to (and no others).
    pub sets: Vec<String>,
    pub count: usize,
}

/// Venn decomposition of named neuron sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub regions: Vec<OverlapRegion>,
    pub totals: BTreeMap<String, usize>,
    pub union: usize,
}

/// Up to this many sets every region is listed, including empty ones;
/// beyond it only occupied regions are.
const FULL_REGION_LIMIT: usize = 8;

pub fn overlap_report(sets: &[(String, NeuronSet)]) -> Result<OverlapReport> {
    let Some((_, first)) = sets.first() else {
        return Ok(OverlapReport { regions: Vec::new(), totals: BTreeMap::new(), union: 0 });
    };
    for (_, s) in sets {
        first.same_universe(s)?;
    }
    let m = first.m();
    // element -> membership signature over the input sets
    let mut signature: Vec<Vec<bool>> = vec![vec![false; sets.len()]; m];
    for (i, (_, s)) in sets.iter().enumerate() {
        for &j in s.members() {
            signature[j][i] = true;
        }
    }
    let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut union = 0;
    for sig in signature {
        if sig.iter().any(|&b| b) {
            union += 1;
            *counts.entry(sig).or_default() += 1;
        }
    }
    let names = |sig: &[bool]| -> Vec<String> {
        sig.iter()
            .zip(sets)
            .filter(|(&b, _)| b)
            .map(|(_, (n, _))| n.clone())
            .collect()
    };
    let regions = if sets.len() <= FULL_REGION_LIMIT {
        (1u32..(1 << sets.len()))
            .map(|mask| {
                let sig: Vec<bool> = (0..sets.len()).map(|i| mask & (1 << i) != 0).collect();
                OverlapRegion { sets: names(&sig), count: counts.get(&sig).copied().unwrap_or(0) }
            })
            .collect()
    } else {
        counts
            .iter()
            .map(|(sig, &count)| OverlapRegion { sets: names(sig), count })
            .collect()
    };
    let totals = sets.iter().map(|(n, s)| (n.clone(), s.len())).collect();
    Ok(OverlapReport { regions, totals, union })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub label: String,
    pub n_keys: usize,
    pub n_present: usize,
    pub n_candidates: usize,
    pub n_group: usize,
    pub candidates: Vec<usize>,
    pub group_neurons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyNeuronResult {
    pub property: Property,
    pub m: usize,
    pub coverage: f64,
    pub groups: Vec<GroupResult>,
    pub n_property: usize,
    pub property_neurons: Vec<usize>,
    /// Venn decomposition of the candidate sets `N_i`.
    pub overlap: OverlapReport,
}

impl PropertyNeuronResult {
    pub fn group_set(&self, label: &str) -> Option<NeuronSet> {
        self.groups
            .iter()
            .find(|g| g.label == label)
            .map(|g| NeuronSet::new(self.m, g.group_neurons.iter().copied()).expect("in range"))
    }

    pub fn property_set(&self) -> NeuronSet {
        NeuronSet::new(self.m, self.property_neurons.iter().copied()).expect("in range")
    }
}

/// Runs candidate selection, Eq. 4 exclusivity and the union for one property.
pub fn find_property_neurons(
    patterns: &ActivationPatternSet,
    spec: &GroupSpec,
    coverage: f64,
) -> Result<PropertyNeuronResult> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage must be in (0, 1], got {coverage}")));
    }
    let mut candidates = Vec::with_capacity(spec.groups.len());
    let mut present = Vec::with_capacity(spec.groups.len());
    for g in &spec.groups {
        let (set, n) = candidate_neurons(patterns, g, coverage)?;
        candidates.push(set);
        present.push(n);
    }
    let groups = group_neurons(&candidates)?;
    let p = property_neurons(&groups)?;
    let named: Vec<(String, NeuronSet)> = spec
        .groups
        .iter()
        .zip(&candidates)
        .map(|(g, s)| (g.label.clone(), s.clone()))
        .collect();
    let overlap = overlap_report(&named)?;
    Ok(PropertyNeuronResult {
        property: spec.property,
        m: patterns.m(),
        coverage,
        groups: spec
            .groups
            .iter()
            .zip(candidates.iter().zip(&groups))
            .zip(&present)
            .map(|((g, (n, gi)), &pr)| GroupResult {
                label: g.label.clone(),
                n_keys: g.keys.len(),
                n_present: pr,
                n_candidates: n.len(),
                n_group: gi.len(),
                candidates: n.members().to_vec(),
                group_neurons: gi.members().to_vec(),
            })
            .collect(),
        n_property: p.len(),
        property_neurons: p.members().to_vec(),
        overlap,
    })
}
