//! Neuron activation events and phone-conditioned co-occurrence counts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{broad_class, pitch_bin, BroadClass, FrameRecord, Gender, PitchBin, PitchBins};
use crate::tensor::{Tensor, TensorArchive};

/// The condition a phone-level statistic is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    None,
    Gender(Gender),
    Pitch(PitchBin),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::None => f.write_str("none"),
            Condition::Gender(g) => write!(f, "gender={g}"),
            Condition::Pitch(b) => write!(f, "pitch={b}"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown condition `{s}`"));
        match s.split_once('=') {
            None if s == "none" => Ok(Condition::None),
            Some(("gender", g)) => match g {
                "male" => Ok(Condition::Gender(Gender::Male)),
                "female" => Ok(Condition::Gender(Gender::Female)),
                _ => Err(bad()),
            },
            Some(("pitch", b)) => match b {
                "low" => Ok(Condition::Pitch(PitchBin::Low)),
                "mid" => Ok(Condition::Pitch(PitchBin::Mid)),
                "high" => Ok(Condition::Pitch(PitchBin::High)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// (phone, condition) key of a conditional statistic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatKey {
    pub phone: String,
    pub condition: Condition,
}

impl StatKey {
    pub fn new(phone: impl Into<String>, condition: Condition) -> Self {
        StatKey { phone: phone.into(), condition }
    }
}

impl fmt::Display for StatKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.phone, self.condition)
    }
}

/// Which condition kinds to accumulate in addition to the unconditioned key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionKinds {
    pub gender: bool,
    pub pitch: bool,
}

impl ConditionKinds {
    pub const ALL: ConditionKinds = ConditionKinds { gender: true, pitch: true };
    pub const NONE: ConditionKinds = ConditionKinds { gender: false, pitch: false };
}

/// Element-wise magnitude of a post-nonlinearity activation row.
pub fn activation_values(row: &[f32], location: &str) -> Result<Vec<f32>> {
    if let Some(j) = row.iter().position(|v| v.is_nan()) {
        return Err(Error::Data {
            location: location.to_owned(),
            reason: format!("NaN activation at neuron {j}"),
        });
    }
    Ok(row.iter().map(|v| v.abs()).collect())
}

/// Number of activated neurons per frame: `max(1, floor(lambda_pct / 100 * m))`.
pub fn activated_count(m: usize, lambda_pct: f64) -> usize {
    // the epsilon keeps exact products such as 29 * 100 / 100 from flooring down
    let k = (lambda_pct * m as f64 / 100.0 + 1e-9).floor() as usize;
    k.clamp(1, m.max(1))
}

/// Indices of the `k` largest values, ties broken towards the lower index; sorted ascending.
pub fn topk_activated(values: &[f32], lambda_pct: f64) -> Vec<usize> {
    let m = values.len();
    if m == 0 {
        return Vec::new();
    }
    let k = activated_count(m, lambda_pct);
    let mut idx: Vec<usize> = (0..m).collect();
    let by_rank = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < m {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Cell {
    counts: Vec<u64>,
    total: u64,
}

/// Per-key neuron activation counts and frame totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceTable {
    m: usize,
    k: usize,
    cells: BTreeMap<StatKey, Cell>,
}

impl CooccurrenceTable {
    pub fn new(m: usize, k: usize) -> Self {
        CooccurrenceTable { m, k, cells: BTreeMap::new() }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn keys(&self) -> impl Iterator<Item = &StatKey> {
        self.cells.keys()
    }

    pub fn counts(&self, key: &StatKey) -> Option<&[u64]> {
        self.cells.get(key).map(|c| c.counts.as_slice())
    }

    pub fn total(&self, key: &StatKey) -> u64 {
        self.cells.get(key).map_or(0, |c| c.total)
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn bump(&mut self, key: StatKey, activated: &[usize]) {
        let m = self.m;
        let cell = self
            .cells
            .entry(key)
            .or_insert_with(|| Cell { counts: vec![0; m], total: 0 });
        cell.total += 1;
        for &j in activated {
            cell.counts[j] += 1;
        }
    }

    /// Records one frame's activated set under every key that applies to it.
    pub fn add_frame(
        &mut self,
        activated: &[usize],
        frame: &FrameRecord,
        kinds: ConditionKinds,
        bins: Option<PitchBins>,
    ) -> Result<()> {
        if activated.len() != self.k {
            return Err(Error::Dimension(format!(
                "frame {}#{} has {} activated neurons, table expects {}",
                frame.utterance_id,
                frame.frame_index,
                activated.len(),
                self.k
            )));
        }
        if let Some(&j) = activated.iter().find(|&&j| j >= self.m) {
            return Err(Error::Dimension(format!(
                "neuron index {j} out of range for m = {}",
                self.m
            )));
        }
        let class = broad_class(&frame.phone)?;
        if class == BroadClass::Silence {
            return Ok(());
        }
        self.bump(StatKey::new(frame.phone.as_str(), Condition::None), activated);
        if kinds.gender && frame.gender != Gender::Unknown {
            self.bump(StatKey::new(frame.phone.as_str(), Condition::Gender(frame.gender)), activated);
        }
        if kinds.pitch && class != BroadClass::UnvoicedConsonant {
            if let Some(bins) = bins {
                let bin = pitch_bin(frame.pitch_hz, bins);
                if bin != PitchBin::Unvoiced {
                    self.bump(StatKey::new(frame.phone.as_str(), Condition::Pitch(bin)), activated);
                }
            }
        }
        Ok(())
    }

    /// Key-wise sum of two tables over the same neuron universe.
    pub fn merge(mut self, other: &CooccurrenceTable) -> Result<CooccurrenceTable> {
        self.merge_from(other)?;
        Ok(self)
    }

    pub fn merge_from(&mut self, other: &CooccurrenceTable) -> Result<()> {
        if self.m != other.m || self.k != other.k {
            return Err(Error::Dimension(format!(
                "cannot merge tables with (m, k) = ({}, {}) and ({}, {})",
                self.m, self.k, other.m, other.k
            )));
        }
        for (key, cell) in &other.cells {
            let mine = self
                .cells
                .entry(key.clone())
                .or_insert_with(|| Cell { counts: vec![0; other.m], total: 0 });
            mine.total += cell.total;
            for (a, b) in mine.counts.iter_mut().zip(&cell.counts) {
                *a += b;
            }
        }
        Ok(())
    }

    /// `p(neuron j activated | key)` for every neuron.
    pub fn conditional_probability(&self, phone: &str, condition: Condition) -> Result<Vec<f64>> {
        let key = StatKey::new(phone, condition);
        match self.cells.get(&key) {
            Some(c) if c.total > 0 => {
                let total = c.total as f64;
                Ok(c.counts.iter().map(|&n| n as f64 / total).collect())
            }
            _ => Err(Error::MissingData(format!("no frames for key {key}"))),
        }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert("meta/m", Tensor::from_i64(&[1], &[self.m as i64])?)?;
        a.insert("meta/k", Tensor::from_i64(&[1], &[self.k as i64])?)?;
        for (key, cell) in &self.cells {
            let counts: Vec<i64> = cell.counts.iter().map(|&c| c as i64).collect();
            a.insert(
                format!("counts/{}/{}", key.phone, key.condition),
                Tensor::from_i64(&[self.m], &counts)?,
            )?;
            a.insert(
                format!("totals/{}/{}", key.phone, key.condition),
                Tensor::from_i64(&[1], &[cell.total as i64])?,
            )?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let scalar = |name: &str| -> Result<usize> {
            let v = a.require(name)?.to_i64_vec()?;
            match v.as_slice() {
                [x] if *x >= 0 => Ok(*x as usize),
                _ => Err(Error::Format(format!("`{name}` must be a non-negative scalar"))),
            }
        };
        let mut table = CooccurrenceTable::new(scalar("meta/m")?, scalar("meta/k")?);
        for (name, t) in a.iter() {
            let Some(rest) = name.strip_prefix("counts/") else { continue };
            let (phone, cond) = rest
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad counts entry `{name}`")))?;
            let key = StatKey::new(phone, cond.parse()?);
            let counts: Vec<u64> = t.to_i64_vec()?.into_iter().map(|c| c.max(0) as u64).collect();
            if counts.len() != table.m {
                return Err(Error::Dimension(format!("`{name}` has {} entries", counts.len())));
            }
            let total = scalar(&format!("totals/{rest}"))? as u64;
            table.cells.insert(key, Cell { counts, total });
        }
        Ok(table)
    }
}

/// Folds a stream of (activated set, frame) events into a fresh table.
pub fn accumulate<'a, I>(
    m: usize,
    k: usize,
    events: I,
    kinds: ConditionKinds,
    bins: Option<PitchBins>,
) -> Result<CooccurrenceTable>
where
    I: IntoIterator<Item = (&'a [usize], &'a FrameRecord)>,
{
    let mut table = CooccurrenceTable::new(m, k);
    for (activated, frame) in events {
        table.add_frame(activated, frame, kinds, bins)?;
    }
    Ok(table)
}
