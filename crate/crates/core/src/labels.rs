//! Frame-level labels: phones, speaker gender and pitch.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SILENCE: &str = "SIL";

pub const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];
// semi-vowels R, Y, W, L are grouped with the voiced consonants
pub const VOICED_CONSONANTS: [&str; 15] = [
    "B", "D", "DH", "G", "JH", "L", "M", "N", "NG", "R", "V", "W", "Y", "Z", "ZH",
];
pub const UNVOICED_CONSONANTS: [&str; 9] = ["CH", "F", "HH", "K", "P", "S", "SH", "T", "TH"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadClass {
    Vowel,
    VoicedConsonant,
    UnvoicedConsonant,
    Silence,
}

impl BroadClass {
    pub fn label(self) -> &'static str {
        match self {
            BroadClass::Vowel => "vowel",
            BroadClass::VoicedConsonant => "voiced_consonant",
            BroadClass::UnvoicedConsonant => "unvoiced_consonant",
            BroadClass::Silence => "silence",
        }
    }
}

/// Phone inventory partitioned into broad classes.
#[derive(Debug, Clone)]
pub struct PhoneInventory {
    pub vowels: Vec<&'static str>,
    pub voiced_consonants: Vec<&'static str>,
    pub unvoiced_consonants: Vec<&'static str>,
}

impl PhoneInventory {
    /// The fixed 39-phone inventory, validated on construction.
    pub fn standard() -> Self {
        let inv = PhoneInventory {
            vowels: VOWELS.to_vec(),
            voiced_consonants: VOICED_CONSONANTS.to_vec(),
            unvoiced_consonants: UNVOICED_CONSONANTS.to_vec(),
        };
        inv.validate().expect("built-in inventory is valid");
        inv
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = (self.vowels.len(), self.voiced_consonants.len(), self.unvoiced_consonants.len());
        if sizes != (15, 15, 9) {
            return Err(Error::Labels(format!("inventory sizes {sizes:?}, expected (15, 15, 9)")));
        }
        let mut all: Vec<&str> = self.all().collect();
        all.sort_unstable();
        all.dedup();
        if all.len() != 39 {
            return Err(Error::Labels(format!("inventory has {} distinct phones", all.len())));
        }
        Ok(())
    }

    /// All 39 phones: vowels, voiced consonants, then unvoiced consonants.
    pub fn all(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.vowels
            .iter()
            .chain(&self.voiced_consonants)
            .chain(&self.unvoiced_consonants)
            .copied()
    }

    /// Phones that carry pitch (vowels and voiced consonants).
    pub fn voiced(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.vowels.iter().chain(&self.voiced_consonants).copied()
    }

    pub fn class_members(&self, class: BroadClass) -> &[&'static str] {
        match class {
            BroadClass::Vowel => &self.vowels,
            BroadClass::VoicedConsonant => &self.voiced_consonants,
            BroadClass::UnvoicedConsonant => &self.unvoiced_consonants,
            BroadClass::Silence => &[],
        }
    }
}

pub fn broad_class(phone: &str) -> Result<BroadClass> {
    if phone == SILENCE {
        Ok(BroadClass::Silence)
    } else if VOWELS.contains(&phone) {
        Ok(BroadClass::Vowel)
    } else if VOICED_CONSONANTS.contains(&phone) {
        Ok(BroadClass::VoicedConsonant)
    } else if UNVOICED_CONSONANTS.contains(&phone) {
        Ok(BroadClass::UnvoicedConsonant)
    } else {
        Err(Error::UnknownPhone(phone.to_owned()))
    }
}

/// Normalizes a raw alignment symbol: uppercases and strips lexical stress digits.
/// Common silence markers map to `SIL`.
pub fn normalize_phone(raw: &str) -> Result<String> {
    let p: String = raw
        .trim()
        .chars()
        .filter(|c| !c.is_ascii_digit())
        .collect::<String>()
        .to_ascii_uppercase();
    let p = match p.as_str() {
        "" | "SIL" | "SP" | "SPN" | "<SIL>" | "<EPS>" => SILENCE.to_owned(),
        _ => p,
    };
    broad_class(&p)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" | "male" => Ok(Gender::Male),
            "F" | "f" | "female" => Ok(Gender::Female),
            "U" | "u" | "unknown" => Ok(Gender::Unknown),
            other => Err(Error::Labels(format!("unknown gender code `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitchBin {
    Low,
    Mid,
    High,
    Unvoiced,
}

impl PitchBin {
    pub fn label(self) -> &'static str {
        match self {
            PitchBin::Low => "low",
            PitchBin::Mid => "mid",
            PitchBin::High => "high",
            PitchBin::Unvoiced => "unvoiced",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl fmt::Display for PitchBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Tertile boundaries: `[.., low_upper)` is low, `[low_upper, high_lower]` mid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchBins {
    pub low_upper: f64,
    pub high_lower: f64,
}

impl PitchBins {
    pub fn new(low_upper: f64, high_lower: f64) -> Result<Self> {
        if !(low_upper > 0.0 && low_upper < high_lower) {
            return Err(Error::InsufficientData(format!(
                "degenerate pitch bins ({low_upper}, {high_lower})"
            )));
        }
        Ok(PitchBins { low_upper, high_lower })
    }
}

/// Empirical quantile: order statistic at index `ceil(n * q) - 1` of the sorted sample.
fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((n as f64 * q).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

pub fn compute_tertiles(pitch_values: &[f64]) -> Result<PitchBins> {
    let mut v: Vec<f64> = pitch_values.iter().copied().filter(|&p| p > 0.0).collect();
    if v.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 voiced pitch values, got {}",
            v.len()
        )));
    }
    v.sort_by(f64::total_cmp);
    PitchBins::new(order_statistic(&v, 1.0 / 3.0), order_statistic(&v, 2.0 / 3.0))
}

pub fn pitch_bin(hz: f64, bins: PitchBins) -> PitchBin {
    if hz <= 0.0 {
        PitchBin::Unvoiced
    } else if hz < bins.low_upper {
        PitchBin::Low
    } else if hz <= bins.high_lower {
        PitchBin::Mid
    } else {
        PitchBin::High
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub utterance_id: String,
    pub frame_index: usize,
    pub phone: String,
    pub gender: Gender,
    pub pitch_hz: f64,
}

/// One row of an alignment file: `[start, end)` in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub utterance_id: String,
    pub start: f64,
    pub end: f64,
    pub phone: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub speaker_id: String,
    pub gender: Gender,
}

/// Labels each frame with the phone whose interval contains the frame center.
pub fn frames_from_alignment(
    rows: &[AlignmentRow],
    meta: &UtteranceMeta,
    pitch: Option<&[f32]>,
    frame_period_s: f64,
    n_frames: usize,
) -> Result<Vec<FrameRecord>> {
    let utt = &meta.utterance_id;
    if !(frame_period_s > 0.0) {
        return Err(Error::Config(format!("frame period must be positive, got {frame_period_s}")));
    }
    if let Some(p) = pitch {
        if p.len() != n_frames {
            return Err(Error::Alignment {
                utterance: utt.clone(),
                reason: format!("pitch track has {} frames, expected {n_frames}", p.len()),
            });
        }
    }
    let mut intervals: Vec<&AlignmentRow> = rows.iter().collect();
    for r in &intervals {
        if !(r.start >= 0.0 && r.end >= r.start) {
            return Err(Error::Alignment {
                utterance: utt.clone(),
                reason: format!("invalid interval [{}, {})", r.start, r.end),
            });
        }
    }
    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
    for pair in intervals.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::Alignment {
                utterance: utt.clone(),
                reason: format!(
                    "intervals [{}, {}) and [{}, {}) overlap",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                ),
            });
        }
    }

    let mut out = Vec::with_capacity(n_frames);
    let mut cursor = 0;
    for t in 0..n_frames {
        let center = (t as f64 + 0.5) * frame_period_s;
        while cursor < intervals.len() && intervals[cursor].end <= center {
            cursor += 1;
        }
        let phone = match intervals.get(cursor) {
            Some(r) if r.start <= center => normalize_phone(&r.phone)?,
            _ => SILENCE.to_owned(),
        };
        out.push(FrameRecord {
            utterance_id: utt.clone(),
            frame_index: t,
            phone,
            gender: meta.gender,
            pitch_hz: pitch.map_or(0.0, |p| f64::from(p[t]).max(0.0)),
        });
    }
    Ok(out)
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Labels(format!("{}: {e}", path.display())))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::Labels(format!("{}:{line}: missing column {}", path.display(), i + 1)))
}

/// Reads `utt_id \t start_sec \t end_sec \t phone` rows, grouped by utterance.
pub fn read_alignments(path: &Path) -> Result<BTreeMap<String, Vec<AlignmentRow>>> {
    let mut out: BTreeMap<String, Vec<AlignmentRow>> = BTreeMap::new();
    for (i, rec) in tsv_reader(path)?.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Labels(format!("{}:{line}: {e}", path.display())))?;
        let num = |j: usize| -> Result<f64> {
            field(&rec, j, path, line)?
                .trim()
                .parse()
                .map_err(|e| Error::Labels(format!("{}:{line}: {e}", path.display())))
        };
        let row = AlignmentRow {
            utterance_id: field(&rec, 0, path, line)?.trim().to_owned(),
            start: num(1)?,
            end: num(2)?,
            phone: field(&rec, 3, path, line)?.trim().to_owned(),
        };
        out.entry(row.utterance_id.clone()).or_default().push(row);
    }
    Ok(out)
}

/// Reads `utt_id \t speaker_id \t gender(M|F|U)` rows.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, UtteranceMeta>> {
    let mut out = BTreeMap::new();
    for (i, rec) in tsv_reader(path)?.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Labels(format!("{}:{line}: {e}", path.display())))?;
        let meta = UtteranceMeta {
            utterance_id: field(&rec, 0, path, line)?.trim().to_owned(),
            speaker_id: field(&rec, 1, path, line)?.trim().to_owned(),
            gender: field(&rec, 2, path, line)?.parse()?,
        };
        if out.insert(meta.utterance_id.clone(), meta).is_some() {
            return Err(Error::Labels(format!("{}:{line}: duplicate utterance", path.display())));
        }
    }
    Ok(out)
}

pub fn write_alignments(path: &Path, rows: &[AlignmentRow]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    for r in rows {
        w.write_record([
            r.utterance_id.as_str(),
            &format!("{:.6}", r.start),
            &format!("{:.6}", r.end),
            r.phone.as_str(),
        ])
        .map_err(|e| Error::Labels(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(0, e))
}

pub fn write_metadata(path: &Path, rows: &[UtteranceMeta]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    for m in rows {
        let code = match m.gender {
            Gender::Male => "M",
            Gender::Female => "F",
            Gender::Unknown => "U",
        };
        w.write_record([m.utterance_id.as_str(), m.speaker_id.as_str(), code])
            .map_err(|e| Error::Labels(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(0, e))
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Labels(format!("{}: {e}", path.display())))
}
