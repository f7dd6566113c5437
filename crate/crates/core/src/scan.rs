//! Corpus scan: activation dumps + labels → one co-occurrence table per layer.
//!
//! Layout on disk: `<activations>/<utt>/layer<L>.act.pnt` (frames x m, f32),
//! alignment and metadata TSVs, and optionally `<pitch_dir>/<utt>.pitch.pnt`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{
    broad_class, compute_tertiles, frames_from_alignment, read_alignments, read_metadata, AlignmentRow,
    BroadClass, FrameRecord, PitchBins, UtteranceMeta,
};
use crate::stats::{activated_count, activation_values, topk_activated, ConditionKinds, CooccurrenceTable};
use crate::tensor::{load_tensor, DType};

/// One utterance's activation rows (`frames x m`) with its frame labels.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceView<'a> {
    pub activations: &'a [f32],
    pub frames: &'a [FrameRecord],
}

fn scan_one(table: &mut CooccurrenceTable, u: UtteranceView<'_>, lambda_pct: f64, kinds: ConditionKinds, bins: Option<PitchBins>) -> Result<()> {
    let m = table.m();
    if u.activations.len() != u.frames.len() * m {
        let utt = u.frames.first().map_or("?", |f| f.utterance_id.as_str());
        return Err(Error::Dimension(format!(
            "utterance {utt}: {} activation values for {} frames of width {m}",
            u.activations.len(),
            u.frames.len()
        )));
    }
    for (row, frame) in u.activations.chunks_exact(m.max(1)).zip(u.frames) {
        let location = format!("{}#{}", frame.utterance_id, frame.frame_index);
        let values = activation_values(row, &location)?;
        table.add_frame(&topk_activated(&values, lambda_pct), frame, kinds, bins)?;
    }
    Ok(())
}

/// Accumulates a table over `utts`, split into `shards` contiguous shards
/// processed in parallel and merged in order. `shards <= 1` runs serially.
pub fn scan_table(
    utts: &[UtteranceView<'_>],
    m: usize,
    lambda_pct: f64,
    kinds: ConditionKinds,
    bins: Option<PitchBins>,
    shards: usize,
) -> Result<CooccurrenceTable> {
    let k = activated_count(m, lambda_pct);
    if shards <= 1 || utts.len() <= 1 {
        let mut table = CooccurrenceTable::new(m, k);
        for &u in utts {
            scan_one(&mut table, u, lambda_pct, kinds, bins)?;
        }
        return Ok(table);
    }
    let chunk = utts.len().div_ceil(shards);
    let partial: Vec<CooccurrenceTable> = utts
        .par_chunks(chunk)
        .map(|shard| {
            let mut t = CooccurrenceTable::new(m, k);
            for &u in shard {
                scan_one(&mut t, u, lambda_pct, kinds, bins)?;
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut table = CooccurrenceTable::new(m, k);
    for t in &partial {
        table.merge_from(t)?;
    }
    Ok(table)
}

/// Positive pitch values of voiced-phone frames, the sample pitch tertiles are taken over.
pub fn voiced_pitch(frames: &[FrameRecord]) -> Vec<f64> {
    frames
        .iter()
        .filter(|f| f.pitch_hz > 0.0)
        .filter(|f| matches!(broad_class(&f.phone), Ok(BroadClass::Vowel | BroadClass::VoicedConsonant)))
        .map(|f| f.pitch_hz)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub m: usize,
    pub k: usize,
    /// All frames read, silence included.
    pub frames: u64,
    /// Frames that reached at least one table key.
    pub labeled_frames: u64,
    pub keys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub utterances: usize,
    pub pitch_bins: Option<PitchBins>,
    pub layers: Vec<LayerSummary>,
}

/// Labels and file locations of a corpus, resolved before any activation is read.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub utterances: Vec<CorpusUtterance>,
    pub layers: Vec<usize>,
    pub pitch_bins: Option<PitchBins>,
    pub frame_period_s: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusUtterance {
    pub meta: UtteranceMeta,
    pub alignment: Vec<AlignmentRow>,
    pub pitch: Option<Vec<f32>>,
    /// Activation file per layer.
    pub activations: BTreeMap<usize, PathBuf>,
}

fn layer_of(file_name: &str) -> Option<usize> {
    file_name.strip_prefix("layer")?.strip_suffix(".act.pnt")?.parse().ok()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Labels(format!("{}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::Labels(format!("{}: {e}", dir.display())))?;
    out.sort();
    Ok(out)
}

impl Corpus {
    /// Resolves utterances under `activations_dir` against the label files.
    pub fn load(
        activations_dir: &Path,
        alignments: &Path,
        metadata: &Path,
        pitch_dir: Option<&Path>,
        frame_period_s: f64,
    ) -> Result<Corpus> {
        let mut align = read_alignments(alignments)?;
        let mut meta = read_metadata(metadata)?;
        let mut utterances = Vec::new();
        let mut all_layers: Option<BTreeSet<usize>> = None;
        for dir in read_dir_sorted(activations_dir)? {
            if !dir.is_dir() {
                continue;
            }
            let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let mut activations = BTreeMap::new();
            for f in read_dir_sorted(&dir)? {
                if let Some(l) = f.file_name().and_then(|s| s.to_str()).and_then(layer_of) {
                    activations.insert(l, f);
                }
            }
            if activations.is_empty() {
                continue;
            }
            let layers: BTreeSet<usize> = activations.keys().copied().collect();
            match &all_layers {
                None => all_layers = Some(layers),
                Some(expected) if *expected != layers => {
                    let missing = expected.symmetric_difference(&layers).next().copied().unwrap_or(0);
                    return Err(Error::Alignment {
                        utterance: id,
                        reason: format!("layer {missing} present for some utterances but not others"),
                    });
                }
                Some(_) => {}
            }
            let m = meta
                .remove(&id)
                .ok_or_else(|| Error::Labels(format!("utterance {id} has no metadata row")))?;
            let alignment = align
                .remove(&id)
                .ok_or_else(|| Error::Labels(format!("utterance {id} has no alignment rows")))?;
            let pitch = match pitch_dir {
                Some(p) => {
                    let t = load_tensor(&p.join(format!("{id}.pitch.pnt")))?;
                    Some(t.to_f32_lossy()?)
                }
                None => None,
            };
            utterances.push(CorpusUtterance { meta: m, alignment, pitch, activations });
        }
        if utterances.is_empty() {
            return Err(Error::MissingData(format!(
                "no `<utt>/layer<L>.act.pnt` files under {}",
                activations_dir.display()
            )));
        }
        let pitch_bins = if pitch_dir.is_some() {
            let mut sample = Vec::new();
            for u in &utterances {
                let p = u.pitch.as_deref().expect("pitch loaded");
                let frames = frames_from_alignment(&u.alignment, &u.meta, Some(p), frame_period_s, p.len())?;
                sample.extend(voiced_pitch(&frames));
            }
            Some(compute_tertiles(&sample)?)
        } else {
            None
        };
        Ok(Corpus {
            utterances,
            layers: all_layers.unwrap_or_default().into_iter().collect(),
            pitch_bins,
            frame_period_s,
        })
    }

    /// Reads one utterance's activations for `layer` and labels its frames.
    pub fn load_layer(&self, u: &CorpusUtterance, layer: usize) -> Result<(usize, Vec<f32>, Vec<FrameRecord>)> {
        let id = &u.meta.utterance_id;
        let mismatch = |reason: String| Error::Alignment { utterance: id.clone(), reason: format!("layer {layer}: {reason}") };
        let path = u
            .activations
            .get(&layer)
            .ok_or_else(|| mismatch("activation file missing".into()))?;
        let t = load_tensor(path)?;
        if t.dtype() != DType::F32 && t.dtype() != DType::F64 {
            return Err(mismatch(format!("activations must be float, got {:?}", t.dtype())));
        }
        let [n_frames, m] = *t.shape() else {
            return Err(mismatch(format!("activation tensor has shape {:?}, expected frames x m", t.shape())));
        };
        if let Some(p) = &u.pitch {
            if p.len() != n_frames {
                return Err(mismatch(format!("{n_frames} activation frames but {} pitch frames", p.len())));
            }
        }
        let covered = u.alignment.iter().map(|r| r.end).fold(0.0f64, f64::max);
        let label_frames = (covered / self.frame_period_s - 1e-6).ceil().max(0.0) as usize;
        if label_frames > n_frames {
            return Err(mismatch(format!("{n_frames} activation frames but alignment spans {label_frames}")));
        }
        let frames = frames_from_alignment(&u.alignment, &u.meta, u.pitch.as_deref(), self.frame_period_s, n_frames)?;
        Ok((m, t.to_f32_lossy()?, frames))
    }

    /// Scans every utterance for one layer, `shards` utterance shards in parallel.
    pub fn scan_layer(
        &self,
        layer: usize,
        lambda_pct: f64,
        kinds: ConditionKinds,
        shards: usize,
    ) -> Result<(CooccurrenceTable, LayerSummary)> {
        let loaded: Vec<(usize, Vec<f32>, Vec<FrameRecord>)> = self
            .utterances
            .par_iter()
            .map(|u| self.load_layer(u, layer))
            .collect::<Result<_>>()?;
        let m = loaded[0].0;
        if let Some((i, (mi, _, _))) = loaded.iter().enumerate().find(|(_, (mi, _, _))| *mi != m) {
            return Err(Error::Alignment {
                utterance: self.utterances[i].meta.utterance_id.clone(),
                reason: format!("layer {layer}: width {mi}, other utterances have {m}"),
            });
        }
        let kinds = ConditionKinds { pitch: kinds.pitch && self.pitch_bins.is_some(), ..kinds };
        let views: Vec<UtteranceView<'_>> = loaded
            .iter()
            .map(|(_, a, f)| UtteranceView { activations: a, frames: f })
            .collect();
        let table = scan_table(&views, m, lambda_pct, kinds, self.pitch_bins, shards)?;
        let frames: u64 = loaded.iter().map(|(_, _, f)| f.len() as u64).sum();
        let labeled_frames = loaded
            .iter()
            .flat_map(|(_, _, f)| f)
            .filter(|f| !matches!(broad_class(&f.phone), Ok(BroadClass::Silence)))
            .count() as u64;
        let summary = LayerSummary { layer, m, k: table.k(), frames, labeled_frames, keys: table.keys().count() };
        Ok((table, summary))
    }
}
