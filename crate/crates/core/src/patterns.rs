//! Per-key neuron sets and binary activation patterns over their union.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{CooccurrenceTable, StatKey};
use crate::tensor::{Tensor, TensorArchive};

/// Sorted, deduplicated neuron indices within `[0, m)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronSet {
    m: usize,
    members: Vec<usize>,
}

impl NeuronSet {
    pub fn new(m: usize, members: impl IntoIterator<Item = usize>) -> Result<Self> {
        let members: BTreeSet<usize> = members.into_iter().collect();
        if let Some(&last) = members.last() {
            if last >= m {
                return Err(Error::Dimension(format!("neuron {last} outside universe of {m}")));
            }
        }
        Ok(NeuronSet { m, members: members.into_iter().collect() })
    }

    pub fn empty(m: usize) -> Self {
        NeuronSet { m, members: Vec::new() }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.members.binary_search(&j).is_ok()
    }

    pub fn union(&self, other: &NeuronSet) -> Result<NeuronSet> {
        self.same_universe(other)?;
        NeuronSet::new(self.m, self.members.iter().chain(&other.members).copied())
    }

    pub fn difference(&self, other: &NeuronSet) -> Result<NeuronSet> {
        self.same_universe(other)?;
        Ok(NeuronSet {
            m: self.m,
            members: self.members.iter().copied().filter(|&j| !other.contains(j)).collect(),
        })
    }

    pub fn intersection(&self, other: &NeuronSet) -> Result<NeuronSet> {
        self.same_universe(other)?;
        Ok(NeuronSet {
            m: self.m,
            members: self.members.iter().copied().filter(|&j| other.contains(j)).collect(),
        })
    }

    pub fn same_universe(&self, other: &NeuronSet) -> Result<()> {
        if self.m != other.m {
            return Err(Error::Dimension(format!(
                "neuron sets over universes of {} and {}",
                self.m, other.m
            )));
        }
        Ok(())
    }

    /// i32 vector `[m, members...]`; the leading `m` keeps the empty set representable.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut v = Vec::with_capacity(self.members.len() + 1);
        v.push(self.m as i32);
        v.extend(self.members.iter().map(|&j| j as i32));
        Tensor::from_i32(&[v.len()], &v)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.to_i32_vec()?;
        let (&m, rest) = v
            .split_first()
            .ok_or_else(|| Error::Format("empty neuron-set tensor".into()))?;
        if m < 0 || rest.iter().any(|&j| j < 0) {
            return Err(Error::Format("negative entry in neuron-set tensor".into()));
        }
        NeuronSet::new(m as usize, rest.iter().map(|&j| j as usize))
    }
}

/// Neurons whose activation probability is strictly above `threshold_pct` percent.
pub fn select_neurons(prob: &[f64], threshold_pct: f64) -> NeuronSet {
    let cut = threshold_pct / 100.0;
    NeuronSet {
        m: prob.len(),
        members: prob
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > cut)
            .map(|(j, _)| j)
            .collect(),
    }
}

/// Binary patterns `v_k` over the universe `S` of all involved neurons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPatternSet {
    universe: NeuronSet,
    rows: Vec<(StatKey, Vec<u8>)>,
}

/// Side information produced while building patterns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildNotes {
    /// Keys whose neuron set came out empty.
    pub dropped: Vec<StatKey>,
    /// Keys backed by fewer frames than `min_frames`.
    pub low_count: Vec<(StatKey, u64)>,
}

impl ActivationPatternSet {
    pub fn from_sets(m: usize, sets: Vec<(StatKey, NeuronSet)>) -> Result<Self> {
        let mut sets = sets;
        sets.sort_by(|a, b| a.0.cmp(&b.0));
        let mut all = NeuronSet::empty(m);
        for (_, s) in &sets {
            all = all.union(s)?;
        }
        let rows = sets
            .into_iter()
            .map(|(key, s)| {
                let bits = all.members.iter().map(|&j| u8::from(s.contains(j))).collect();
                (key, bits)
            })
            .collect();
        Ok(ActivationPatternSet { universe: all, rows })
    }

    pub fn universe(&self) -> &NeuronSet {
        &self.universe
    }

    pub fn m(&self) -> usize {
        self.universe.m
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &StatKey> {
        self.rows.iter().map(|(k, _)| k)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&StatKey, &[u8])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn pattern(&self, key: &StatKey) -> Option<&[u8]> {
        self.rows
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| self.rows[i].1.as_slice())
    }

    /// Position of neuron `j` within the universe.
    pub fn index_of(&self, j: usize) -> Option<usize> {
        self.universe.members.binary_search(&j).ok()
    }

    /// Recovers `S_k` (in original neuron indices) from its pattern.
    pub fn neuron_set(&self, key: &StatKey) -> Option<NeuronSet> {
        self.pattern(key).map(|bits| NeuronSet {
            m: self.universe.m,
            members: bits
                .iter()
                .zip(&self.universe.members)
                .filter(|(&b, _)| b == 1)
                .map(|(_, &j)| j)
                .collect(),
        })
    }

    /// `patterns` (u8, keys x |S|) and `universe` (i32 with leading m).
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert("universe", self.universe.to_tensor()?)?;
        if !self.rows.is_empty() && !self.universe.is_empty() {
            let flat: Vec<u8> = self.rows.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            a.insert("patterns", Tensor::from_u8(&[self.rows.len(), self.universe.len()], &flat)?)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive, keys: &[StatKey]) -> Result<Self> {
        let universe = NeuronSet::from_tensor(a.require("universe")?)?;
        let width = universe.len();
        let rows = match a.get("patterns") {
            Some(t) => {
                let (n, w) = t.matrix_dims();
                if n != keys.len() || w != width {
                    return Err(Error::Dimension(format!(
                        "pattern matrix {n}x{w} does not match {} keys over |S| = {width}",
                        keys.len()
                    )));
                }
                let flat = t.to_u8_vec()?;
                keys.iter()
                    .cloned()
                    .zip(flat.chunks_exact(w).map(<[u8]>::to_vec))
                    .collect()
            }
            None if keys.is_empty() => Vec::new(),
            None => return Err(Error::MissingData("archive entry `patterns`".into())),
        };
        let set = ActivationPatternSet { universe, rows };
        if set.rows.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Format("pattern keys are not in sorted order".into()));
        }
        Ok(set)
    }
}

/// Builds `S_k` for every key, the universe `S = ∪ S_k`, and the indicator patterns.
pub fn build_patterns(
    table: &CooccurrenceTable,
    keys: &[StatKey],
    threshold_pct: f64,
    min_frames: u64,
) -> Result<(ActivationPatternSet, BuildNotes)> {
    let mut notes = BuildNotes::default();
    let mut sets = Vec::with_capacity(keys.len());
    let unique: BTreeSet<&StatKey> = keys.iter().collect();
    for key in unique {
        let prob = table.conditional_probability(&key.phone, key.condition)?;
        let total = table.total(key);
        if total < min_frames {
            notes.low_count.push((key.clone(), total));
        }
        let s = select_neurons(&prob, threshold_pct);
        if s.is_empty() {
            warn!("no neuron above {threshold_pct}% for key {key}; dropping it");
            notes.dropped.push(key.clone());
        } else {
            sets.push((key.clone(), s));
        }
    }
    Ok((ActivationPatternSet::from_sets(table.m(), sets)?, notes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{FrameRecord, Gender};
    use crate::stats::{Condition, ConditionKinds};
    use proptest::prelude::*;

    fn key(p: &str) -> StatKey {
        StatKey::new(p, Condition::None)
    }

    #[test]
    fn strict_threshold() {
        let s = select_neurons(&[0.005, 0.02, 0.01], 1.0);
        assert_eq!(s.members(), [1]);
        assert!(select_neurons(&[0.0; 5], 1.0).is_empty());
    }

    #[test]
    fn union_and_indicators() {
        let sets = vec![
            (key("B"), NeuronSet::new(8, [2, 5]).unwrap()),
            (key("AA"), NeuronSet::new(8, [1, 2]).unwrap()),
        ];
        let p = ActivationPatternSet::from_sets(8, sets).unwrap();
        assert_eq!(p.universe().members(), [1, 2, 5]);
        assert_eq!(p.pattern(&key("AA")).unwrap(), [1, 1, 0]);
        assert_eq!(p.pattern(&key("B")).unwrap(), [0, 1, 1]);
        assert_eq!(p.index_of(5), Some(2));
        assert_eq!(p.neuron_set(&key("B")).unwrap().members(), [2, 5]);
    }

    #[test]
    fn single_key_is_all_ones() {
        let p = ActivationPatternSet::from_sets(8, vec![(key("AA"), NeuronSet::new(8, [0, 7]).unwrap())])
            .unwrap();
        assert_eq!(p.universe().members(), [0, 7]);
        assert_eq!(p.pattern(&key("AA")).unwrap(), [1, 1]);
    }

    fn frame(p: &str) -> FrameRecord {
        FrameRecord {
            utterance_id: "u".into(),
            frame_index: 0,
            phone: p.into(),
            gender: Gender::Male,
            pitch_hz: 0.0,
        }
    }

    #[test]
    fn build_from_table_drops_empty_and_reports_low_counts() {
        let mut t = CooccurrenceTable::new(4, 1);
        for j in [0, 0, 1] {
            t.add_frame(&[j], &frame("AA"), ConditionKinds::NONE, None).unwrap();
        }
        t.add_frame(&[3], &frame("B"), ConditionKinds::NONE, None).unwrap();
        let (p, notes) = build_patterns(&t, &[key("AA"), key("B")], 50.0, 2).unwrap();
        // AA: p = [2/3, 1/3, 0, 0] -> {0}; B: p = [0, 0, 0, 1] -> {3}
        assert_eq!(p.universe().members(), [0, 3]);
        assert!(notes.dropped.is_empty());
        assert_eq!(notes.low_count, vec![(key("B"), 1)]);

        let (p, notes) = build_patterns(&t, &[key("AA")], 90.0, 0).unwrap();
        assert!(p.is_empty());
        assert_eq!(notes.dropped, vec![key("AA")]);

        assert!(matches!(build_patterns(&t, &[key("EH")], 1.0, 0), Err(Error::MissingData(_))));
    }

    #[test]
    fn neuron_set_tensor_round_trip() {
        let s = NeuronSet::new(64, [3, 9, 40]).unwrap();
        assert_eq!(NeuronSet::from_tensor(&s.to_tensor().unwrap()).unwrap(), s);
        let e = NeuronSet::empty(64);
        assert_eq!(NeuronSet::from_tensor(&e.to_tensor().unwrap()).unwrap(), e);
        assert!(NeuronSet::new(4, [4]).is_err());
    }

    proptest! {
        #[test]
        fn select_matches_filter(prob in prop::collection::vec(0.0f64..0.05, 0..64), thr in 0.1f64..5.0) {
            let s = select_neurons(&prob, thr);
            let mut oracle = Vec::new();
            for j in 0..prob.len() {
                if prob[j] > thr / 100.0 {
                    oracle.push(j);
                }
            }
            prop_assert_eq!(s.members(), oracle.as_slice());
        }

        #[test]
        fn patterns_recover_sets_and_ignore_order(
            raw in prop::collection::vec(prop::collection::btree_set(0usize..32, 1..8), 1..6)
        ) {
            let names = ["AA", "AE", "AH", "AO", "AW", "AY"];
            let sets: Vec<(StatKey, NeuronSet)> = raw
                .iter()
                .enumerate()
                .map(|(i, s)| (key(names[i]), NeuronSet::new(32, s.iter().copied()).unwrap()))
                .collect();
            let p = ActivationPatternSet::from_sets(32, sets.clone()).unwrap();
            let mut reversed = sets.clone();
            reversed.reverse();
            prop_assert_eq!(&ActivationPatternSet::from_sets(32, reversed).unwrap(), &p);
            for (k, s) in &sets {
                prop_assert_eq!(&p.neuron_set(k).unwrap(), s);
                prop_assert!(p.pattern(k).unwrap().contains(&1));
            }
            let keys: Vec<StatKey> = p.keys().cloned().collect();
            prop_assert_eq!(ActivationPatternSet::from_archive(&p.to_archive().unwrap(), &keys).unwrap(), p);
        }
    }
}
