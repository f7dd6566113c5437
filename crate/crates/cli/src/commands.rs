use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use propneuron::config::RunConfig;
use propneuron::encoder::{encoder_forward, EncoderModel};
use propneuron::geometry::{embed_patterns, Metric};
use propneuron::labels::PhoneInventory;
use propneuron::neurons::{find_property_neurons, overlap_report, GroupSpec, Property, PropertyNeuronResult};
use propneuron::patterns::{build_patterns, ActivationPatternSet, NeuronSet};
use propneuron::scan::{Corpus, LayerSummary};
use propneuron::stats::{Condition, ConditionKinds, CooccurrenceTable, StatKey};
use propneuron::surgery::{
    archive_layer_count, erase_archive_layer, ffn_from_archive, l1_scores, make_prune_mask, prune_archive_layer,
};
use propneuron::synth::{synth_planted, SynthConfig};
use propneuron::tensor::{load_archive, load_tensor, save_archive, save_tensor, Tensor};

use crate::UsageError;

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn record(config: &mut RunConfig, name: &str, path: &Path) {
    config.paths.insert(name.to_owned(), path.display().to_string());
}

/// Layer number from names like `layer3.cooc.pnta`.
fn layer_from_name(path: &Path, suffix: &str) -> Option<usize> {
    path.file_name()?.to_str()?.strip_prefix("layer")?.strip_suffix(suffix)?.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

// ---------------------------------------------------------------- scan

#[derive(Args, Debug)]
pub struct ScanArgs {
    /// Directory of `<utt>/layer<L>.act.pnt` activation dumps.
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    alignments: PathBuf,
    #[arg(long)]
    metadata: PathBuf,
    /// Directory of `<utt>.pitch.pnt` tracks; without it no pitch keys are built.
    #[arg(long = "pitch-dir")]
    pitch_dir: Option<PathBuf>,
    /// Scan only this layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Utterance shards accumulated in parallel.
    #[arg(long, default_value_t = 4)]
    shards: usize,
    /// Top-λ% activation rule.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ScanReport {
    utterances: usize,
    pitch_bins: Option<propneuron::PitchBins>,
    layers: Vec<LayerSummary>,
    config: RunConfig,
}

pub fn scan(a: ScanArgs, mut config: RunConfig) -> Result<()> {
    if let Some(l) = a.lambda {
        config.lambda_top_pct = l;
    }
    config.validate()?;
    record(&mut config, "activations", &a.activations);
    record(&mut config, "alignments", &a.alignments);
    record(&mut config, "metadata", &a.metadata);
    if let Some(p) = &a.pitch_dir {
        record(&mut config, "pitch_dir", p);
    }
    let corpus = Corpus::load(&a.activations, &a.alignments, &a.metadata, a.pitch_dir.as_deref(), config.frame_period_s)
        .context("corpus-labels")?;
    let layers: Vec<usize> = match a.layer {
        Some(l) if corpus.layers.contains(&l) => vec![l],
        Some(l) => return Err(UsageError(format!("layer {l} not found; available: {:?}", corpus.layers)).into()),
        None => corpus.layers.clone(),
    };
    mkdir(&a.out)?;
    let mut summaries = Vec::new();
    for l in layers {
        let (table, summary) = corpus
            .scan_layer(l, config.lambda_top_pct, ConditionKinds::ALL, a.shards)
            .context("activation-stats")?;
        save_archive(&a.out.join(format!("layer{l}.cooc.pnta")), &table.to_archive()?)?;
        println!(
            "layer {l}: {} frames ({} labeled), m = {}, k = {}, {} keys",
            summary.frames, summary.labeled_frames, summary.m, summary.k, summary.keys
        );
        summaries.push(summary);
    }
    let report = ScanReport {
        utterances: corpus.utterances.len(),
        pitch_bins: corpus.pitch_bins,
        layers: summaries,
        config,
    };
    write_json(&a.out.join("scan.json"), &report)
}

// ------------------------------------------------------------ patterns

#[derive(Args, Debug)]
pub struct PatternsArgs {
    /// Directory of `layer<L>.cooc.pnta` tables written by `scan`.
    #[arg(long)]
    tables: PathBuf,
    /// phones_broad, phones_individual, gender or pitch.
    #[arg(long)]
    property: Property,
    #[arg(long)]
    layer: Option<usize>,
    /// Selection threshold in percent.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct KeyRow {
    pub phone: String,
    pub condition: String,
}

impl KeyRow {
    fn of(k: &StatKey) -> Self {
        KeyRow { phone: k.phone.clone(), condition: k.condition.to_string() }
    }

    fn key(&self) -> Result<StatKey> {
        Ok(StatKey::new(self.phone.as_str(), self.condition.parse::<Condition>()?))
    }
}

#[derive(Serialize, Deserialize, Debug)]
pub struct PatternIndex {
    pub layer: usize,
    pub property: Property,
    pub m: usize,
    pub universe_size: usize,
    pub rows: Vec<KeyRow>,
    /// Keys of the property with no frames in the table.
    pub absent: Vec<KeyRow>,
    /// Keys with no neuron above threshold.
    pub dropped: Vec<KeyRow>,
    /// Keys with fewer than `min_frames` frames.
    pub low_count: Vec<(KeyRow, u64)>,
    pub config: RunConfig,
}

fn pattern_stem(layer: usize, property: Property) -> String {
    format!("layer{layer}.{property}.patterns")
}

pub fn patterns(a: PatternsArgs, mut config: RunConfig) -> Result<()> {
    if let Some(t) = a.threshold {
        config.eq3_threshold_pct = t;
    }
    config.validate()?;
    record(&mut config, "tables", &a.tables);
    let tables: Vec<(usize, PathBuf)> = sorted_entries(&a.tables)?
        .into_iter()
        .filter_map(|p| layer_from_name(&p, ".cooc.pnta").map(|l| (l, p)))
        .filter(|(l, _)| a.layer.map_or(true, |want| want == *l))
        .collect();
    if tables.is_empty() {
        return Err(UsageError(format!("no matching layer<L>.cooc.pnta under {}", a.tables.display())).into());
    }
    let spec = GroupSpec::for_property(a.property, &PhoneInventory::standard());
    mkdir(&a.out)?;
    for (layer, path) in tables {
        let table = CooccurrenceTable::from_archive(&load_archive(&path)?).context("activation-stats")?;
        let (present, absent): (Vec<StatKey>, Vec<StatKey>) =
            spec.keys().into_iter().partition(|k| table.total(k) > 0);
        let (set, notes) = build_patterns(&table, &present, config.eq3_threshold_pct, config.min_frames)
            .context("pattern-builder")?;
        let stem = pattern_stem(layer, a.property);
        save_archive(&a.out.join(format!("{stem}.pnta")), &set.to_archive()?)?;
        let index = PatternIndex {
            layer,
            property: a.property,
            m: set.m(),
            universe_size: set.universe().len(),
            rows: set.keys().map(KeyRow::of).collect(),
            absent: absent.iter().map(KeyRow::of).collect(),
            dropped: notes.dropped.iter().map(KeyRow::of).collect(),
            low_count: notes.low_count.iter().map(|(k, n)| (KeyRow::of(k), *n)).collect(),
            config: config.clone(),
        };
        write_json(&a.out.join(format!("{stem}.json")), &index)?;
        println!(
            "layer {layer}: {} patterns over |S| = {} ({} absent, {} dropped, {} below {} frames)",
            index.rows.len(),
            index.universe_size,
            index.absent.len(),
            index.dropped.len(),
            index.low_count.len(),
            config.min_frames
        );
    }
    Ok(())
}

/// Loads `<stem>.pnta` with its `<stem>.json` index.
fn load_patterns(path: &Path) -> Result<(ActivationPatternSet, PatternIndex)> {
    let index: PatternIndex = read_json(&path.with_extension("json"))?;
    let keys: Vec<StatKey> = index.rows.iter().map(KeyRow::key).collect::<Result<_>>()?;
    let set = ActivationPatternSet::from_archive(&load_archive(path)?, &keys).context("pattern-builder")?;
    Ok((set, index))
}

// ----------------------------------------------------------------- mds

#[derive(Args, Debug)]
pub struct MdsArgs {
    /// A `<stem>.pnta` pattern archive; its `<stem>.json` index is read alongside.
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct MdsReport {
    layer: usize,
    property: Property,
    silhouette: Option<f64>,
    clamped_eigenmass: f64,
    eigenvalues: Vec<f64>,
    points: usize,
    config: RunConfig,
}

pub fn mds(a: MdsArgs, mut config: RunConfig) -> Result<()> {
    if let Some(m) = a.metric {
        config.metric = m;
    }
    if let Some(d) = a.dim {
        config.mds_dim = d;
    }
    config.validate()?;
    record(&mut config, "patterns", &a.patterns);
    let (set, index) = load_patterns(&a.patterns)?;
    let spec = GroupSpec::for_property(index.property, &PhoneInventory::standard());
    let e = embed_patterns(&set, config.metric, config.mds_dim, |k| spec.group_of(k).map(str::to_owned))
        .context("pattern-geometry")?;
    mkdir(&a.out)?;
    let stem = format!("layer{}.{}.mds", index.layer, index.property);
    let csv_path = a.out.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    let mut header = vec!["key".to_owned(), "condition".to_owned()];
    let axes = ["x", "y", "z"];
    for c in 0..e.embedding.dim {
        header.push(axes.get(c).map_or_else(|| format!("dim{c}"), |s| (*s).to_owned()));
    }
    header.push("group".to_owned());
    w.write_record(&header)?;
    for (i, key) in e.keys.iter().enumerate() {
        let mut rec = vec![key.phone.clone(), key.condition.to_string()];
        rec.extend(e.embedding.point(i).iter().map(|v| format!("{v}")));
        rec.push(e.groups[i].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let report = MdsReport {
        layer: index.layer,
        property: index.property,
        silhouette: e.silhouette,
        clamped_eigenmass: e.embedding.clamped_eigenmass,
        eigenvalues: e.embedding.eigenvalues.clone(),
        points: e.keys.len(),
        config,
    };
    write_json(&a.out.join(format!("{stem}.json")), &report)?;
    match e.silhouette {
        Some(s) => println!("layer {}: {} points, silhouette {s:.6}", index.layer, e.keys.len()),
        None => println!("layer {}: {} points, silhouette undefined (one group)", index.layer, e.keys.len()),
    }
    Ok(())
}

// ------------------------------------------------------------- neurons

#[derive(Args, Debug)]
pub struct NeuronsArgs {
    /// Pattern archives written by `patterns` (repeatable).
    #[arg(long, required = true)]
    patterns: Vec<PathBuf>,
    #[arg(long)]
    coverage: Option<f64>,
    /// Output directory: `neurons.json`, `neurons.csv` and `sets/*.pnt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct NeuronEntry {
    layer: usize,
    result: PropertyNeuronResult,
}

#[derive(Serialize)]
struct CrossOverlap {
    layer: usize,
    overlap: propneuron::neurons::OverlapReport,
}

#[derive(Serialize)]
struct NeuronsReport {
    results: Vec<NeuronEntry>,
    cross_property: Vec<CrossOverlap>,
    config: RunConfig,
}

pub fn neurons(a: NeuronsArgs, mut config: RunConfig) -> Result<()> {
    if let Some(c) = a.coverage {
        config.coverage = c;
    }
    config.validate()?;
    for (i, p) in a.patterns.iter().enumerate() {
        record(&mut config, &format!("patterns.{i}"), p);
    }
    let inv = PhoneInventory::standard();
    let sets_dir = a.out.join("sets");
    mkdir(&sets_dir)?;
    let mut results = Vec::new();
    let mut csv_rows = vec!["layer,property,group,n_keys,n_present,n_candidates,n_group".to_owned()];
    for path in &a.patterns {
        let (set, index) = load_patterns(path)?;
        let spec = GroupSpec::for_property(index.property, &inv);
        let r = find_property_neurons(&set, &spec, config.coverage).context("property-neurons")?;
        for g in &r.groups {
            let s = r.group_set(&g.label).expect("group present");
            save_tensor(&sets_dir.join(format!("layer{}.{}.{}.pnt", index.layer, r.property, g.label)), &s.to_tensor()?)?;
            csv_rows.push(format!(
                "{},{},{},{},{},{},{}",
                index.layer, r.property, g.label, g.n_keys, g.n_present, g.n_candidates, g.n_group
            ));
        }
        save_tensor(&sets_dir.join(format!("layer{}.{}.pnt", index.layer, r.property)), &r.property_set().to_tensor()?)?;
        println!(
            "layer {} {}: {} property neurons ({})",
            index.layer,
            r.property,
            r.n_property,
            r.groups.iter().map(|g| format!("{} {}", g.label, g.n_group)).collect::<Vec<_>>().join(", ")
        );
        results.push(NeuronEntry { layer: index.layer, result: r });
    }
    let mut by_layer: BTreeMap<usize, Vec<(String, NeuronSet)>> = BTreeMap::new();
    for e in &results {
        by_layer
            .entry(e.layer)
            .or_default()
            .push((e.result.property.to_string(), e.result.property_set()));
    }
    let mut cross_property = Vec::new();
    for (layer, sets) in by_layer {
        if sets.len() >= 2 {
            cross_property.push(CrossOverlap { layer, overlap: overlap_report(&sets).context("property-neurons")? });
        }
    }
    fs::write(a.out.join("neurons.csv"), csv_rows.join("\n") + "\n")?;
    write_json(&a.out.join("neurons.json"), &NeuronsReport { results, cross_property, config })
}

// --------------------------------------------------------------- prune

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Neuron sets (`.pnt`) that must survive; their union is protected (repeatable).
    #[arg(long)]
    protect: Vec<PathBuf>,
    /// Fraction of neurons to keep; overrides every configured value.
    #[arg(long)]
    keep: Option<f64>,
    /// Prune only this layer (default: every layer).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for `layer<L>.mask.pnt` files and `prune.json`.
    #[arg(long = "mask-out")]
    mask_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PruneLayer {
    layer: usize,
    m: usize,
    keep_fraction: f64,
    kept: usize,
    protected: usize,
    budget_exceeded: bool,
}

#[derive(Serialize)]
struct PruneReport {
    layers: Vec<PruneLayer>,
    config: RunConfig,
}

fn union_of(paths: &[PathBuf]) -> Result<Option<NeuronSet>> {
    let mut acc: Option<NeuronSet> = None;
    for p in paths {
        let s = NeuronSet::from_tensor(&load_tensor(p)?).with_context(|| format!("reading {}", p.display()))?;
        acc = Some(match acc {
            None => s,
            Some(a) => a.union(&s).with_context(|| format!("combining {}", p.display()))?,
        });
    }
    Ok(acc)
}

fn target_layers(layer: Option<usize>, n: usize) -> Result<Vec<usize>> {
    match layer {
        Some(l) if l < n => Ok(vec![l]),
        Some(l) => Err(UsageError(format!("layer {l} out of range; model has {n} layers")).into()),
        None => Ok((0..n).collect()),
    }
}

pub fn prune(a: PruneArgs, mut config: RunConfig) -> Result<()> {
    if let Some(k) = a.keep {
        config.keep_fraction = k;
        config.keep_fraction_layers.clear();
    }
    config.validate()?;
    record(&mut config, "model", &a.model);
    let mut archive = load_archive(&a.model)?;
    let n = archive_layer_count(&archive);
    let layers = target_layers(a.layer, n)?;
    let protected = union_of(&a.protect)?;
    if let Some(dir) = &a.mask_out {
        mkdir(dir)?;
    }
    let mut report = Vec::new();
    for l in layers {
        let w = ffn_from_archive(&archive, l).context("model-surgery")?;
        let protect = protected.clone().unwrap_or_else(|| NeuronSet::empty(w.m));
        let keep = config.keep_fraction_for(l);
        let mask = make_prune_mask(&l1_scores(&w), &protect, keep)
            .with_context(|| format!("model-surgery: layer {l}"))?;
        archive = prune_archive_layer(&archive, l, &mask).context("model-surgery")?;
        if let Some(dir) = &a.mask_out {
            save_tensor(&dir.join(format!("layer{l}.mask.pnt")), &mask.to_tensor()?)?;
        }
        println!(
            "layer {l}: kept {}/{} ({} protected{})",
            mask.keep.len(),
            w.m,
            mask.protected.len(),
            if mask.budget_exceeded { ", protected set exceeds budget" } else { "" }
        );
        report.push(PruneLayer {
            layer: l,
            m: w.m,
            keep_fraction: keep,
            kept: mask.keep.len(),
            protected: mask.protected.len(),
            budget_exceeded: mask.budget_exceeded,
        });
    }
    save_archive(&a.out, &archive)?;
    if let Some(dir) = &a.mask_out {
        write_json(&dir.join("prune.json"), &PruneReport { layers: report, config })?;
    }
    Ok(())
}

// --------------------------------------------------------------- erase

#[derive(Args, Debug)]
pub struct EraseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Neuron sets (`.pnt`) whose value rows are zeroed (repeatable).
    #[arg(long, required = true)]
    neurons: Vec<PathBuf>,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn erase(a: EraseArgs, _config: RunConfig) -> Result<()> {
    let archive = load_archive(&a.model)?;
    target_layers(Some(a.layer), archive_layer_count(&archive))?;
    let set = union_of(&a.neurons)?.expect("clap requires at least one set");
    let out = erase_archive_layer(&archive, a.layer, &set).context("model-surgery")?;
    save_archive(&a.out, &out)?;
    println!("layer {}: erased {} value slots", a.layer, set.len());
    Ok(())
}

// ------------------------------------------------------------- forward

#[derive(Args, Debug)]
pub struct ForwardArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of `<utt>.input.pnt` tensors (frames x d).
    #[arg(long)]
    inputs: PathBuf,
    /// Dump only this layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

pub fn forward(a: ForwardArgs, _config: RunConfig) -> Result<()> {
    let model = EncoderModel::<f32>::from_archive(&load_archive(&a.model)?).context("toy-encoder")?;
    let layers = target_layers(a.layer, model.n_layers())?;
    let mut count = 0;
    for path in sorted_entries(&a.inputs)? {
        let Some(utt) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".input.pnt")) else {
            continue;
        };
        let x = load_tensor(&path)?;
        let trace = encoder_forward(&model, &x.to_f32_lossy()?).with_context(|| format!("toy-encoder: {utt}"))?;
        let dir = a.out.join(utt);
        mkdir(&dir)?;
        for &l in &layers {
            let m = model.layers[l].ffn.m;
            save_tensor(&dir.join(format!("layer{l}.act.pnt")), &Tensor::from_f32(&[trace.frames, m], &trace.inner[l])?)?;
        }
        count += 1;
    }
    if count == 0 {
        return Err(UsageError(format!("no `<utt>.input.pnt` files under {}", a.inputs.display())).into());
    }
    println!("{count} utterances, {} layers", layers.len());
    Ok(())
}

// --------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// gender or pitch.
    #[arg(long, default_value = "gender")]
    property: Property,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Planted neurons per group.
    #[arg(long, default_value_t = 8)]
    plant: usize,
    #[arg(long = "frames-per-phone", default_value_t = 200)]
    frames_per_phone: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(a: SynthArgs, config: RunConfig) -> Result<()> {
    config.validate()?;
    let cfg = SynthConfig {
        d: a.d,
        m: a.m,
        n_layers: a.layers,
        property: a.property,
        plant_size: a.plant,
        frames_per_phone: a.frames_per_phone,
        seed: config.seed,
        lambda_top_pct: config.lambda_top_pct,
        threshold_pct: config.eq3_threshold_pct,
        ..SynthConfig::default()
    };
    let fixture = synth_planted(&cfg).context("toy-encoder")?;
    mkdir(&a.out)?;
    fixture.write(&a.out, config.frame_period_s)?;
    let frames: usize = fixture.utterances.iter().map(|u| u.frames.len()).sum();
    println!(
        "{} utterances, {frames} frames, {} planted groups of {}",
        fixture.utterances.len(),
        fixture.planted.groups.len(),
        a.plant
    );
    Ok(())
}
