//! Planted-property fixtures: a toy encoder plus a labeled corpus whose
//! property neurons are known by construction.
//!
//! Every non-silent frame of group `g` carries `a·e_g + c·u_r + b·φ_phone`,
//! where `e_g` is the group direction, `u_r` one of `plant_size` slot
//! directions (assigned round-robin within each (phone, group) population)
//! and `φ_phone` a phone direction. Planted neuron `r` of group `g` has key
//! `e_g + u_r`, so for its own frames it scores `a + c` while every other
//! neuron scores at most `a` (same group) or `c` (other groups). All
//! directions are orthonormal and orthogonal to the all-ones vector, so
//! layer normalization only rescales them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, AttentionWeights, EncoderLayer, EncoderModel, LayerNorm};
use crate::error::{Error, Result};
use crate::ffn::{Activation, FfnWeights};
use crate::labels::{
    broad_class, compute_tertiles, pitch_bin, write_alignments, write_metadata, AlignmentRow, BroadClass,
    FrameRecord, Gender, PhoneInventory, PitchBin, PitchBins, UtteranceMeta, SILENCE,
};
use crate::neurons::Property;
use crate::patterns::NeuronSet;
use crate::scan::voiced_pitch;
use crate::stats::{activation_values, topk_activated};
use crate::tensor::{save_archive, save_tensor, Tensor};

const SPEAKERS_PER_GENDER: usize = 4;
const SIL_PAD: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub m: usize,
    pub n_layers: usize,
    /// `gender` (2 groups) or `pitch` (3 tertile groups).
    pub property: Property,
    pub plant_size: usize,
    pub frames_per_phone: usize,
    pub seed: u64,
    /// Approximate non-silent frames per utterance.
    pub utterance_frames: usize,
    pub group_gain: f64,
    pub slot_gain: f64,
    pub phone_gain: f64,
    pub noise: f64,
    /// Norm of planted value rows (along their group direction).
    pub planted_value: f64,
    /// Norm of background value rows; large so an L1 ranking prefers them.
    pub background_value: f64,
    /// λ and selection threshold the construction is checked against.
    pub lambda_top_pct: f64,
    pub threshold_pct: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 16,
            m: 64,
            n_layers: 1,
            property: Property::Gender,
            plant_size: 8,
            frames_per_phone: 200,
            seed: 7,
            utterance_frames: 100,
            group_gain: 3.0,
            slot_gain: 2.0,
            phone_gain: 1.5,
            noise: 0.1,
            planted_value: 0.1,
            background_value: 3.0,
            lambda_top_pct: 1.0,
            threshold_pct: 1.0,
        }
    }
}

impl SynthConfig {
    fn group_labels(&self) -> Result<Vec<&'static str>> {
        match self.property {
            Property::Gender => Ok(vec![Gender::Male.label(), Gender::Female.label()]),
            Property::Pitch => Ok(vec![PitchBin::Low.label(), PitchBin::Mid.label(), PitchBin::High.label()]),
            other => Err(Error::Config(format!("cannot plant property `{other}`; use gender or pitch"))),
        }
    }

    fn check_capacity(&self) -> Result<()> {
        let g = self.group_labels()?.len();
        if self.d < 3 || g + self.plant_size + 1 > self.d - 1 {
            return Err(Error::Capacity(format!(
                "d = {} cannot host {g} group and {} slot directions plus a phone subspace",
                self.d, self.plant_size
            )));
        }
        let slack = 8;
        if self.m < g * self.plant_size + slack {
            return Err(Error::Capacity(format!(
                "m = {} cannot host {g} x {} planted neurons plus {slack} background",
                self.m, self.plant_size
            )));
        }
        if self.n_layers == 0 || self.frames_per_phone == 0 || self.utterance_frames == 0 {
            return Err(Error::Config("n_layers, frames_per_phone and utterance_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub meta: UtteranceMeta,
    pub frames: Vec<FrameRecord>,
    /// `frames x d`.
    pub inputs: Vec<f32>,
    pub pitch: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSets {
    pub property: Property,
    pub groups: Vec<(String, Vec<usize>)>,
}

impl PlantedSets {
    pub fn set(&self, label: &str, m: usize) -> Option<NeuronSet> {
        self.groups
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| NeuronSet::new(m, v.iter().copied()).expect("planted indices in range"))
    }

    pub fn all(&self, m: usize) -> NeuronSet {
        NeuronSet::new(m, self.groups.iter().flat_map(|(_, v)| v.iter().copied())).expect("in range")
    }
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub config: SynthConfig,
    pub model: EncoderModel<f32>,
    pub utterances: Vec<SynthUtterance>,
    pub planted: PlantedSets,
    pub pitch_bins: PitchBins,
}

#[derive(Serialize)]
struct PlantedManifest<'a> {
    property: Property,
    plant_size: usize,
    groups: BTreeMap<&'a str, &'a [usize]>,
    pitch_bins: PitchBins,
    utterances: usize,
    frames: usize,
    config: &'a SynthConfig,
}

/// Orthonormal basis of the subspace orthogonal to the all-ones vector.
fn zero_mean_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.remove(0);
    basis
}

fn combine(dirs: &[Vec<f64>], rng: &mut ChaCha8Rng, norm: f64) -> Vec<f64> {
    let d = dirs[0].len();
    let w: Vec<f64> = (0..dirs.len()).map(|_| rng.sample(StandardNormal)).collect();
    let mut v = vec![0.0; d];
    for (wi, dir) in w.iter().zip(dirs) {
        v.iter_mut().zip(dir).for_each(|(x, y)| *x += wi * y);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / n).collect()
}

struct Directions {
    groups: Vec<Vec<f64>>,
    slots: Vec<Vec<f64>>,
    phone_space: Vec<Vec<f64>>,
}

fn build_layer(cfg: &SynthConfig, dirs: &Directions, planted: &[(usize, usize, usize)], rng: &mut ChaCha8Rng) -> EncoderLayer<f32> {
    let (d, m) = (cfg.d, cfg.m);
    let mut w_in = vec![0.0f32; m * d];
    let mut b_in = vec![0.0f32; m];
    let mut w_out = vec![0.0f32; m * d];
    let mut is_planted = vec![false; m];
    for &(j, g, r) in planted {
        is_planted[j] = true;
        for c in 0..d {
            w_in[j * d + c] = (dirs.groups[g][c] + dirs.slots[r][c]) as f32;
            w_out[j * d + c] = (cfg.planted_value * dirs.groups[g][c]) as f32;
        }
    }
    for j in (0..m).filter(|&j| !is_planted[j]) {
        let key = combine(&dirs.phone_space, rng, 0.5);
        let value = combine(&dirs.phone_space, rng, cfg.background_value);
        for c in 0..d {
            w_in[j * d + c] = key[c] as f32;
            w_out[j * d + c] = value[c] as f32;
        }
        b_in[j] = rng.gen_range(-0.1..0.1);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut mat = |s: f64| -> Vec<f32> { (0..d * d).map(|_| (rng.gen_range(-1.0..1.0) * s) as f32).collect() };
    EncoderLayer {
        ln_attn: LayerNorm::identity(d),
        attn: AttentionWeights { wq: mat(scale), wk: mat(scale), wv: mat(scale), wo: mat(0.02 * scale) },
        ln_ffn: LayerNorm::identity(d),
        ffn: FfnWeights { m, d, w_in, b_in, w_out, b_out: vec![0.0; d], activation: Activation::Gelu },
    }
}

/// Per-frame group index for the planted property, `None` for frames outside every group.
fn frame_group(cfg: &SynthConfig, f: &FrameRecord, bins: PitchBins) -> Option<usize> {
    let class = broad_class(&f.phone).ok()?;
    match cfg.property {
        Property::Gender => match (class, f.gender) {
            (BroadClass::Silence, _) | (_, Gender::Unknown) => None,
            (_, Gender::Male) => Some(0),
            (_, Gender::Female) => Some(1),
        },
        Property::Pitch => match class {
            BroadClass::Vowel | BroadClass::VoicedConsonant => match pitch_bin(f.pitch_hz, bins) {
                PitchBin::Low => Some(0),
                PitchBin::Mid => Some(1),
                PitchBin::High => Some(2),
                PitchBin::Unvoiced => None,
            },
            _ => None,
        },
        _ => None,
    }
}

/// Phone sequence and speakers of the corpus.
fn build_corpus(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(UtteranceMeta, Vec<&'static str>, Vec<f32>)> {
    let inv = PhoneInventory::standard();
    let mut segments: Vec<(&'static str, usize)> = Vec::new();
    for p in inv.all() {
        let mut left = cfg.frames_per_phone;
        while left > 0 {
            let len = rng.gen_range(3..=8).min(left);
            segments.push((p, len));
            left -= len;
        }
    }
    segments.shuffle(rng);

    let speakers: Vec<(String, Gender, f64)> = (0..2 * SPEAKERS_PER_GENDER)
        .map(|s| {
            let (g, mean) = if s % 2 == 0 {
                (Gender::Male, rng.gen_range(95.0..135.0))
            } else {
                (Gender::Female, rng.gen_range(170.0..230.0))
            };
            (format!("spk{s:02}"), g, mean)
        })
        .collect();

    let mut out = Vec::new();
    let mut seg = segments.into_iter().peekable();
    while seg.peek().is_some() {
        let (spk, gender, mean) = &speakers[out.len() % speakers.len()];
        let mut phones: Vec<&'static str> = vec![SILENCE; SIL_PAD];
        let mut body = 0;
        while body < cfg.utterance_frames {
            let Some((p, len)) = seg.next() else { break };
            phones.extend(std::iter::repeat(p).take(len));
            body += len;
        }
        phones.extend(std::iter::repeat(SILENCE).take(SIL_PAD));
        let pitch = phones
            .iter()
            .map(|p| match broad_class(p) {
                Ok(BroadClass::Vowel | BroadClass::VoicedConsonant) => (mean * rng.gen_range(0.92..1.08)) as f32,
                _ => 0.0,
            })
            .collect();
        let meta = UtteranceMeta {
            utterance_id: format!("utt{:04}", out.len()),
            speaker_id: spk.clone(),
            gender: *gender,
        };
        out.push((meta, phones, pitch));
    }
    out
}

/// Builds the fixture and verifies the planted margin on the model's own activations.
pub fn synth_planted(cfg: &SynthConfig) -> Result<PlantedFixture> {
    cfg.check_capacity()?;
    let labels = cfg.group_labels()?;
    let n_groups = labels.len();
    let (d, p) = (cfg.d, cfg.plant_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let basis = zero_mean_basis(d, &mut rng);
    let dirs = Directions {
        groups: basis[..n_groups].to_vec(),
        slots: basis[n_groups..n_groups + p].to_vec(),
        phone_space: basis[n_groups + p..].to_vec(),
    };

    let mut order: Vec<usize> = (0..cfg.m).collect();
    order.shuffle(&mut rng);
    let planted: Vec<(usize, usize, usize)> = (0..n_groups)
        .flat_map(|g| (0..p).map(move |r| (g, r)))
        .zip(order)
        .map(|((g, r), j)| (j, g, r))
        .collect();
    let layers = (0..cfg.n_layers).map(|_| build_layer(cfg, &dirs, &planted, &mut rng)).collect();
    let model = EncoderModel { d, layers };

    let corpus = build_corpus(cfg, &mut rng);
    let phone_dirs: BTreeMap<&str, Vec<f64>> = PhoneInventory::standard()
        .all()
        .chain([SILENCE])
        .map(|ph| (ph, combine(&dirs.phone_space, &mut rng, 1.0)))
        .collect();

    let mut all_frames = Vec::new();
    let mut utt_frames = Vec::with_capacity(corpus.len());
    for (meta, phones, pitch) in &corpus {
        let frames: Vec<FrameRecord> = phones
            .iter()
            .zip(pitch)
            .enumerate()
            .map(|(t, (ph, &hz))| FrameRecord {
                utterance_id: meta.utterance_id.clone(),
                frame_index: t,
                phone: (*ph).to_owned(),
                gender: meta.gender,
                pitch_hz: f64::from(hz),
            })
            .collect();
        all_frames.extend(frames.iter().cloned());
        utt_frames.push(frames);
    }
    let pitch_bins = compute_tertiles(&voiced_pitch(&all_frames))?;

    let mut slot_counter: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut utterances = Vec::with_capacity(corpus.len());
    for ((meta, _, pitch), frames) in corpus.into_iter().zip(utt_frames) {
        let mut inputs = Vec::with_capacity(frames.len() * d);
        for f in &frames {
            let mut x: Vec<f64> = (0..d).map(|_| cfg.noise * rng.sample::<f64, _>(StandardNormal)).collect();
            let phi = &phone_dirs[f.phone.as_str()];
            x.iter_mut().zip(phi).for_each(|(v, e)| *v += cfg.phone_gain * e);
            if let Some(g) = frame_group(cfg, f, pitch_bins) {
                x.iter_mut().zip(&dirs.groups[g]).for_each(|(v, e)| *v += cfg.group_gain * e);
                if p > 0 {
                    let c = slot_counter.entry((f.phone.clone(), g)).or_insert(0);
                    let r = *c % p;
                    *c += 1;
                    x.iter_mut().zip(&dirs.slots[r]).for_each(|(v, e)| *v += cfg.slot_gain * e);
                }
            }
            inputs.extend(x.into_iter().map(|v| v as f32));
        }
        utterances.push(SynthUtterance { meta, frames, inputs, pitch });
    }

    let mut groups: Vec<(String, Vec<usize>)> = labels.iter().map(|l| ((*l).to_owned(), Vec::new())).collect();
    for &(j, g, _) in &planted {
        groups[g].1.push(j);
    }
    groups.iter_mut().for_each(|(_, v)| v.sort_unstable());
    let fixture = PlantedFixture {
        config: cfg.clone(),
        model,
        utterances,
        planted: PlantedSets { property: cfg.property, groups },
        pitch_bins,
    };
    fixture.verify_margin()?;
    Ok(fixture)
}

impl PlantedFixture {
    pub fn frame_group(&self, f: &FrameRecord) -> Option<usize> {
        frame_group(&self.config, f, self.pitch_bins)
    }

    /// Checks, on every layer, that an own-group planted neuron is activated in
    /// ≥ 95% of each group's frames and that no planted neuron exceeds the
    /// selection threshold on any other group's (phone, group) population.
    pub fn verify_margin(&self) -> Result<()> {
        let m = self.config.m;
        let n_groups = self.planted.groups.len();
        if self.config.plant_size == 0 {
            return Ok(());
        }
        let mut owner = vec![None; m];
        for (g, (_, v)) in self.planted.groups.iter().enumerate() {
            for &j in v {
                owner[j] = Some(g);
            }
        }
        for l in 0..self.model.layers.len() {
            let mut hits = vec![0usize; n_groups];
            let mut seen = vec![0usize; n_groups];
            // (phone, group) -> (frames, per-neuron activation counts)
            let mut pops: BTreeMap<(&str, usize), (usize, Vec<usize>)> = BTreeMap::new();
            for u in &self.utterances {
                let trace = encoder_forward(&self.model, &u.inputs)?;
                for (t, f) in u.frames.iter().enumerate() {
                    let Some(g) = self.frame_group(f) else { continue };
                    let row = &trace.inner[l][t * m..(t + 1) * m];
                    let top = topk_activated(&activation_values(row, &f.utterance_id)?, self.config.lambda_top_pct);
                    seen[g] += 1;
                    if top.iter().any(|&j| owner[j] == Some(g)) {
                        hits[g] += 1;
                    }
                    let pop = pops.entry((f.phone.as_str(), g)).or_insert_with(|| (0, vec![0; m]));
                    pop.0 += 1;
                    top.iter().for_each(|&j| pop.1[j] += 1);
                }
            }
            for g in 0..n_groups {
                if seen[g] == 0 || (hits[g] as f64) < 0.95 * seen[g] as f64 {
                    return Err(Error::Capacity(format!(
                        "layer {l}: group {} planted neurons lead only {}/{} frames",
                        self.planted.groups[g].0, hits[g], seen[g]
                    )));
                }
            }
            for ((phone, g), (n, counts)) in &pops {
                for (j, &c) in counts.iter().enumerate() {
                    if matches!(owner[j], Some(h) if h != *g) && c as f64 / *n as f64 > self.config.threshold_pct / 100.0 {
                        return Err(Error::Capacity(format!(
                            "layer {l}: planted neuron {j} fires on {c}/{n} frames of ({phone}, {})",
                            self.planted.groups[*g].0
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.utterances.iter().flat_map(|u| u.frames.iter())
    }

    /// Writes `model.pnta`, `inputs/`, `pitch/`, `alignments.tsv`, `metadata.tsv`, `planted.json`.
    pub fn write(&self, dir: &Path, frame_period_s: f64) -> Result<()> {
        let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(0, e));
        mkdir(&dir.join("inputs"))?;
        mkdir(&dir.join("pitch"))?;
        save_archive(&dir.join("model.pnta"), &self.model.to_archive()?)?;
        let mut rows = Vec::new();
        for u in &self.utterances {
            let id = &u.meta.utterance_id;
            let n = u.frames.len();
            save_tensor(&dir.join("inputs").join(format!("{id}.input.pnt")), &Tensor::from_f32(&[n, self.config.d], &u.inputs)?)?;
            save_tensor(&dir.join("pitch").join(format!("{id}.pitch.pnt")), &Tensor::from_f32(&[n], &u.pitch)?)?;
            let mut start = 0;
            for t in 1..=n {
                if t == n || u.frames[t].phone != u.frames[start].phone {
                    rows.push(AlignmentRow {
                        utterance_id: id.clone(),
                        start: start as f64 * frame_period_s,
                        end: t as f64 * frame_period_s,
                        phone: u.frames[start].phone.clone(),
                    });
                    start = t;
                }
            }
        }
        write_alignments(&dir.join("alignments.tsv"), &rows)?;
        let metas: Vec<UtteranceMeta> = self.utterances.iter().map(|u| u.meta.clone()).collect();
        write_metadata(&dir.join("metadata.tsv"), &metas)?;
        let manifest = PlantedManifest {
            property: self.planted.property,
            plant_size: self.config.plant_size,
            groups: self.planted.groups.iter().map(|(l, v)| (l.as_str(), v.as_slice())).collect(),
            pitch_bins: self.pitch_bins,
            utterances: self.utterances.len(),
            frames: self.utterances.iter().map(|u| u.frames.len()).sum(),
            config: &self.config,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("planted.json"), json + "\n").map_err(|e| Error::io(0, e))
    }
}

/// Reads the `groups` map back out of a `planted.json`.
pub fn read_planted(path: &Path) -> Result<PlantedSets> {
    #[derive(Deserialize)]
    struct Manifest {
        property: Property,
        groups: BTreeMap<String, Vec<usize>>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(0, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(PlantedSets { property: m.property, groups: m.groups.into_iter().collect() })
}
