//! The end-to-end commands behind the `evocomp` binary.
//!
//! Each command is a plain serializable config. [`execute`] runs one and
//! writes a [`RunManifest`] whose `config` field is the fully resolved
//! config, so passing a manifest back as a config file repeats the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench::{bench, evaluation_order, LatencyScorer};
use crate::compressor::{
    adapt_dim, grad_check_suite, init_params, read_params, select_top_r, train, write_history_csv, write_params,
    CompressorConfig, CompressorParams, InitSource, TrainItem,
};
use crate::container::{read_anchors, read_dataset, write_anchors, write_dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Budget, EvalInputs};
use crate::evolution::{search_traced, EvoConfig};
use crate::grouping::{partition, restrict_top_groups, GroupingConfig, Restriction};
use crate::hash::sha256_hex;
use crate::label::{read_labels, write_labels, LabelRecord};
use crate::mask::{apply_mask, GroupPartition, Mask};
use crate::render::{render_ppm, render_text};
use crate::sample::{AnchorSet, Sample};
use crate::scorer::remote::{Endpoint, DEFAULT_TIMEOUT};
use crate::scorer::{brute_force_best, PlantedScorer, PooledScorer, RemoteClient, RemoteScorer, Scorer, ScorerSpec};
use crate::synth::{generate, Family, GenConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    /// SHA-256 of every output file.
    pub outputs: BTreeMap<PathBuf, String>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    /// Command-specific results (checksums, metrics).
    pub summary: Value,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Everything a command reports back besides its files.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub summary: Value,
    /// Human-readable report for the terminal.
    pub display: String,
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenCommand {
    pub gen: GenConfig,
    /// Seed of the planted scorer whose optimum the salient tokens mark;
    /// defaults to `gen.seed`.
    pub planted_seed: Option<u64>,
    pub out: PathBuf,
}

impl Default for GenCommand {
    fn default() -> Self {
        GenCommand { gen: GenConfig::default(), planted_seed: None, out: PathBuf::from("data") }
    }
}

/// File layout of a generated dataset directory.
pub struct DataFiles {
    pub samples: PathBuf,
    pub anchors: PathBuf,
    pub planted: PathBuf,
    pub groups: PathBuf,
}

impl DataFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DataFiles {
            samples: dir.join("samples.evc"),
            anchors: dir.join("anchors.evc"),
            planted: dir.join("planted.jsonl"),
            groups: dir.join("groups.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsLine {
    pub sample_id: String,
    pub partition: GroupPartition,
}

pub fn run_gen(cmd: &GenCommand) -> Result<Outcome> {
    let planted_seed = cmd.planted_seed.unwrap_or(cmd.gen.seed);
    let data = generate(&cmd.gen, planted_seed)?;
    fs::create_dir_all(&cmd.out)?;
    let files = DataFiles::in_dir(&cmd.out);
    let manifest = write_dataset(&files.samples, &data.samples)?;
    write_anchors(&files.anchors, &data.anchors)?;
    let mut groups = String::new();
    for (s, p) in data.samples.iter().zip(&data.partitions) {
        groups += &serde_json::to_string(&GroupsLine { sample_id: s.id.clone(), partition: p.clone() })?;
        groups.push('\n');
    }
    fs::write(&files.groups, groups)?;
    let mut outputs = vec![files.samples.clone(), files.anchors.clone(), files.groups.clone()];
    if cmd.gen.family == Family::Planted {
        write_labels(&files.planted, &data.planted)?;
        outputs.push(files.planted.clone());
    }
    Ok(Outcome {
        inputs: vec![],
        outputs,
        seeds: BTreeMap::from([("gen".into(), cmd.gen.seed), ("planted".into(), planted_seed)]),
        summary: json!({ "records": manifest.records, "checksum": manifest.checksum }),
        display: format!("wrote {} samples to {} (checksum {})\n", manifest.records, cmd.out.display(), manifest.checksum),
    })
}

// ---------------------------------------------------------------- label

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelCommand {
    pub dataset: PathBuf,
    pub anchors: PathBuf,
    pub out: PathBuf,
    pub scorer: ScorerSpec,
    pub evo: EvoConfig,
    pub restrict: Restriction,
    /// Samples searched concurrently.
    pub workers: usize,
    /// Exhaustive search instead of evolution.
    pub oracle: bool,
    pub space_cap: u64,
    pub timeout_secs: f64,
    /// Optional JSONL of per-generation statistics.
    pub trace: Option<PathBuf>,
}

impl Default for LabelCommand {
    fn default() -> Self {
        LabelCommand {
            dataset: PathBuf::from("data/samples.evc"),
            anchors: PathBuf::from("data/anchors.evc"),
            out: PathBuf::from("labels.jsonl"),
            scorer: ScorerSpec::Planted { seed: 0 },
            evo: EvoConfig::default(),
            restrict: Restriction::None,
            workers: 1,
            oracle: false,
            space_cap: crate::scorer::DEFAULT_SPACE_CAP as u64,
            timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
            trace: None,
        }
    }
}

/// Partitions every sample, applying the restriction.
pub fn partitions_for(samples: &[Sample], anchors: &AnchorSet, restrict: Restriction) -> Result<Vec<GroupPartition>> {
    let cfg = GroupingConfig { restriction: restrict };
    samples
        .iter()
        .map(|s| restrict_top_groups(&partition(s, anchors)?, &cfg))
        .collect()
}

/// Builds the scorer a `ScorerSpec` names. Remote scorers connect immediately.
pub fn open_scorer(spec: &ScorerSpec, dataset: &Path, timeout: Duration) -> Result<Box<dyn Scorer>> {
    Ok(match spec {
        ScorerSpec::Planted { seed } => Box::new(PlantedScorer::new(*seed)),
        ScorerSpec::Pooled { seed } => Box::new(PooledScorer::new(*seed)),
        ScorerSpec::Remote { endpoint, concurrency } => {
            let client = RemoteClient::open(endpoint, dataset, timeout).map_err(|source| Error::Scorer {
                sample: String::new(),
                candidate: 0,
                source,
            })?;
            Box::new(RemoteScorer::new(Arc::new(client), *concurrency))
        }
    })
}

fn run_concurrently<T: Send, F>(count: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot is filled")).collect()
}

pub fn run_label(cmd: &LabelCommand) -> Result<Outcome> {
    let samples = read_dataset(&cmd.dataset)?;
    let anchors = read_anchors(&cmd.anchors)?;
    let partitions = partitions_for(&samples, &anchors, cmd.restrict)?;
    let timeout = Duration::from_secs_f64(cmd.timeout_secs.max(0.001));
    let scorer = open_scorer(&cmd.scorer, &cmd.dataset, timeout)?;
    let results = run_concurrently(samples.len(), cmd.workers, |i| {
        let (sample, part) = (&samples[i], &partitions[i]);
        if cmd.oracle {
            let best = brute_force_best(sample, part, scorer.as_ref(), cmd.space_cap as u128)?;
            let record = LabelRecord {
                sample_id: sample.id.clone(),
                mask: best.mask,
                loss: best.loss,
                partition_digest: part.digest(),
                scorer_id: scorer.id(),
                seed: cmd.evo.seed,
            };
            Ok((record, Vec::new(), best.evaluations))
        } else {
            let out = search_traced(sample, part, scorer.as_ref(), &cmd.evo)?;
            log::info!("{}: loss {} after {} evaluations", sample.id, out.record.loss, out.evaluations);
            Ok((out.record, out.trace, out.evaluations))
        }
    });
    let results = results?;
    let labels: Vec<LabelRecord> = results.iter().map(|r| r.0.clone()).collect();
    write_labels(&cmd.out, &labels)?;
    let mut outputs = vec![cmd.out.clone()];
    if let Some(trace) = &cmd.trace {
        let mut text = String::new();
        for (record, stats, _) in &results {
            for s in stats {
                text += &serde_json::to_string(&json!({ "sample_id": record.sample_id, "stats": s }))?;
                text.push('\n');
            }
        }
        fs::write(trace, text)?;
        outputs.push(trace.clone());
    }
    let evaluations: usize = results.iter().map(|r| r.2).sum();
    let mean_loss = labels.iter().map(|l| l.loss).sum::<f64>() / labels.len().max(1) as f64;
    let mut seeds = BTreeMap::from([("evo".into(), cmd.evo.seed)]);
    match cmd.scorer {
        ScorerSpec::Planted { seed } | ScorerSpec::Pooled { seed } => {
            seeds.insert("scorer".into(), seed);
        }
        ScorerSpec::Remote { .. } => {}
    }
    Ok(Outcome {
        inputs: vec![cmd.dataset.clone(), cmd.anchors.clone()],
        outputs,
        seeds,
        summary: json!({ "labels": labels.len(), "evaluations": evaluations, "mean_loss": mean_loss }),
        display: format!(
            "labeled {} samples ({} evaluations, mean loss {mean_loss:.6}) -> {}\n",
            labels.len(),
            evaluations,
            cmd.out.display()
        ),
    })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCommand {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub out: PathBuf,
    /// History CSV; defaults to `<out>.csv`.
    pub history: Option<PathBuf>,
    pub compressor: CompressorConfig,
}

impl Default for TrainCommand {
    fn default() -> Self {
        TrainCommand {
            dataset: PathBuf::from("data/samples.evc"),
            labels: PathBuf::from("labels.jsonl"),
            out: PathBuf::from("compressor.evp"),
            history: None,
            compressor: CompressorConfig::default(),
        }
    }
}

/// Pools samples to width `d` when their width differs.
pub fn fit_width(samples: Vec<Sample>, d: usize) -> Result<Vec<Sample>> {
    samples
        .into_iter()
        .map(|s| {
            if s.width() == d {
                return Ok(s);
            }
            let mut out = Sample::new(s.id.clone(), adapt_dim(s.visual.view(), d)?, adapt_dim(s.text.view(), d)?)?;
            out.meta = s.meta;
            Ok(out)
        })
        .collect()
}

/// Pairs every sample with its label.
pub fn train_items(samples: &[Sample], labels: &[LabelRecord]) -> Result<Vec<TrainItem>> {
    let by_id: BTreeMap<&str, &LabelRecord> = labels.iter().map(|l| (l.sample_id.as_str(), l)).collect();
    samples
        .iter()
        .map(|s| {
            let label = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::LabelMismatch(format!("no label for sample {:?}", s.id)))?;
            TrainItem::new(s, label)
        })
        .collect()
}

pub fn load_donor(cfg: &CompressorConfig) -> Result<Option<CompressorParams>> {
    match &cfg.init {
        InitSource::Random => Ok(None),
        InitSource::Donor(path) => Ok(Some(read_params(path)?.0)),
    }
}

fn history_path(cmd: &TrainCommand) -> PathBuf {
    cmd.history.clone().unwrap_or_else(|| {
        let mut p = cmd.out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    })
}

pub fn run_train(cmd: &TrainCommand) -> Result<Outcome> {
    let cfg = &cmd.compressor;
    let samples = fit_width(read_dataset(&cmd.dataset)?, cfg.d_model)?;
    let labels = read_labels(&cmd.labels)?;
    let items = train_items(&samples, &labels)?;
    let donor = load_donor(cfg)?;
    let outcome = train(&items, cfg, donor.as_ref())?;
    let file_hash = write_params(&cmd.out, &outcome.params, cfg)?;
    let history = history_path(cmd);
    write_history_csv(&history, &outcome.history)?;
    let first = outcome.history.first().map(|r| r.total);
    let last = outcome.history.last().map(|r| r.total);
    let checksum = outcome.params.checksum();
    let mut inputs = vec![cmd.dataset.clone(), cmd.labels.clone()];
    if let InitSource::Donor(p) = &cfg.init {
        inputs.push(p.clone());
    }
    Ok(Outcome {
        inputs,
        outputs: vec![cmd.out.clone(), history],
        seeds: BTreeMap::from([("train".into(), cfg.seed)]),
        summary: json!({
            "params_checksum": checksum,
            "file_sha256": file_hash,
            "best_epoch": outcome.best_epoch,
            "first_epoch_total": first,
            "last_epoch_total": last,
            "train_samples": outcome.train_count,
            "val_samples": outcome.val_count,
            "loss": cfg.loss.to_string(),
        }),
        display: format!(
            "trained {} epochs ({} train / {} val samples, loss {}): total {:.6} -> {:.6}, best epoch {}\nparams checksum {checksum}\n",
            outcome.history.len(),
            outcome.train_count,
            outcome.val_count,
            cfg.loss,
            first.unwrap_or(f64::NAN),
            last.unwrap_or(f64::NAN),
            outcome.best_epoch
        ),
    })
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCommand {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub params: PathBuf,
    /// Ground-truth planted masks, for planted-token recall.
    pub planted: Option<PathBuf>,
    pub budget: Budget,
    pub baseline_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for EvalCommand {
    fn default() -> Self {
        EvalCommand {
            dataset: PathBuf::from("data/samples.evc"),
            labels: PathBuf::from("labels.jsonl"),
            params: PathBuf::from("compressor.evp"),
            planted: None,
            budget: Budget::Label,
            baseline_seed: 0,
            out: None,
        }
    }
}

/// Parameters the trained model started from (same seed and donor).
pub fn untrained_params(cfg: &CompressorConfig) -> Result<CompressorParams> {
    use rand::SeedableRng;
    let donor = load_donor(cfg)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    init_params(cfg, donor.as_ref(), &mut rng)
}

pub fn run_eval(cmd: &EvalCommand) -> Result<Outcome> {
    let (trained, cfg) = read_params(&cmd.params)?;
    let samples = fit_width(read_dataset(&cmd.dataset)?, cfg.d_model)?;
    let labels = read_labels(&cmd.labels)?;
    let planted = cmd.planted.as_deref().map(read_labels).transpose()?;
    let untrained = untrained_params(&cfg)?;
    let report = evaluate(&EvalInputs {
        samples: &samples,
        labels: &labels,
        planted: planted.as_deref(),
        trained: &trained,
        untrained: &untrained,
        config: &cfg,
        budget: cmd.budget,
        baseline_seed: cmd.baseline_seed,
    })?;
    let mut outputs = Vec::new();
    if let Some(out) = &cmd.out {
        fs::write(out, serde_json::to_vec_pretty(&report)?)?;
        outputs.push(out.clone());
    }
    let mut inputs = vec![cmd.dataset.clone(), cmd.labels.clone(), cmd.params.clone()];
    inputs.extend(cmd.planted.clone());
    Ok(Outcome {
        inputs,
        outputs,
        seeds: BTreeMap::from([("baseline".into(), cmd.baseline_seed)]),
        summary: json!({
            "trained": report.trained,
            "untrained": report.untrained,
            "random": report.random,
            "planted_recall": report.planted_recall,
        }),
        display: report.table(),
    })
}

// ---------------------------------------------------------------- compress

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressCommand {
    pub dataset: PathBuf,
    pub params: PathBuf,
    /// `Label` is not meaningful here; use a count or a ratio.
    pub budget: Budget,
    pub out: PathBuf,
    /// JSONL of kept indices per sample; defaults to `<out>.kept.jsonl`.
    pub kept: Option<PathBuf>,
}

impl Default for CompressCommand {
    fn default() -> Self {
        CompressCommand {
            dataset: PathBuf::from("data/samples.evc"),
            params: PathBuf::from("compressor.evp"),
            budget: Budget::Ratio(1.0 / 3.0),
            out: PathBuf::from("compressed.evc"),
            kept: None,
        }
    }
}

pub fn run_compress(cmd: &CompressCommand) -> Result<Outcome> {
    if cmd.budget == Budget::Label {
        return Err(Error::InvalidConfig("compress needs a count or ratio budget".into()));
    }
    let (params, cfg) = read_params(&cmd.params)?;
    let original = read_dataset(&cmd.dataset)?;
    let fitted = fit_width(original.clone(), cfg.d_model)?;
    let mut compressed = Vec::with_capacity(original.len());
    let mut kept_lines = String::new();
    let mut retained = 0;
    for (raw, sample) in original.iter().zip(&fitted) {
        let n = sample.n_visual();
        let r = cmd.budget.resolve(n, &Mask::zeros(n));
        let probs = crate::compressor::forward(sample, &params, &cfg)?.probs;
        let mask = select_top_r(&probs, r)?;
        let (visual, kept) = apply_mask(raw, &mask)?;
        retained += kept.len();
        kept_lines += &serde_json::to_string(&json!({ "sample_id": raw.id, "kept": kept }))?;
        kept_lines.push('\n');
        let mut out = Sample { id: raw.id.clone(), visual, text: raw.text.clone(), meta: raw.meta.clone() };
        if out.visual.nrows() == 0 {
            // a sample must keep at least one token to stay valid
            out.visual = raw.visual.slice(ndarray::s![..1, ..]).to_owned();
        }
        compressed.push(out);
    }
    let manifest = write_dataset(&cmd.out, &compressed)?;
    let kept_path = cmd.kept.clone().unwrap_or_else(|| {
        let mut p = cmd.out.as_os_str().to_owned();
        p.push(".kept.jsonl");
        PathBuf::from(p)
    });
    fs::write(&kept_path, kept_lines)?;
    Ok(Outcome {
        inputs: vec![cmd.dataset.clone(), cmd.params.clone()],
        outputs: vec![cmd.out.clone(), kept_path],
        seeds: BTreeMap::new(),
        summary: json!({ "samples": compressed.len(), "retained_tokens": retained, "checksum": manifest.checksum }),
        display: format!("kept {retained} tokens across {} samples -> {}\n", compressed.len(), cmd.out.display()),
    })
}

// ---------------------------------------------------------------- render

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderCommand {
    /// Label file holding the mask to draw.
    pub masks: Option<PathBuf>,
    /// Sample to draw; defaults to the first record.
    pub sample: Option<String>,
    /// Literal mask such as `1,0,0,1`, used instead of `masks`.
    pub bits: Option<String>,
    /// Grid width; defaults to the ceiling of the square root of n.
    pub width: Option<usize>,
    /// Output path; `.ppm` writes an image, anything else text. Absent
    /// prints the text grid.
    pub out: Option<PathBuf>,
    pub cell: usize,
}

impl Default for RenderCommand {
    fn default() -> Self {
        RenderCommand { masks: None, sample: None, bits: None, width: None, out: None, cell: 16 }
    }
}

pub fn parse_bits(text: &str) -> Result<Mask> {
    let bits = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u8>().map_err(|_| Error::InvalidConfig(format!("bad mask bit {t:?}"))))
        .collect::<Result<Vec<u8>>>()?;
    Mask::from_bits(bits)
}

pub fn run_render(cmd: &RenderCommand) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let (mask, label) = match (&cmd.bits, &cmd.masks) {
        (Some(bits), _) => (parse_bits(bits)?, "inline".to_string()),
        (None, Some(path)) => {
            inputs.push(path.clone());
            let records = read_labels(path)?;
            let record = match &cmd.sample {
                Some(id) => records.into_iter().find(|r| &r.sample_id == id),
                None => records.into_iter().next(),
            }
            .ok_or_else(|| Error::LabelMismatch("no matching mask record".into()))?;
            (record.mask, record.sample_id)
        }
        (None, None) => return Err(Error::InvalidConfig("render needs a mask file or inline bits".into())),
    };
    let width = cmd.width.unwrap_or_else(|| (mask.len() as f64).sqrt().ceil().max(1.0) as usize);
    let text = render_text(&mask, width)?;
    let mut outputs = Vec::new();
    let mut display = String::new();
    match &cmd.out {
        Some(path) if path.extension().is_some_and(|e| e == "ppm") => {
            fs::write(path, render_ppm(&mask, width, cmd.cell)?)?;
            outputs.push(path.clone());
        }
        Some(path) => {
            fs::write(path, &text)?;
            outputs.push(path.clone());
        }
        None => display = text.clone(),
    }
    Ok(Outcome {
        inputs,
        outputs,
        seeds: BTreeMap::new(),
        summary: json!({ "sample_id": label, "width": width, "kept": mask.retained(), "n": mask.len() }),
        display,
    })
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchCommand {
    pub dataset: PathBuf,
    pub anchors: PathBuf,
    pub evo: EvoConfig,
    pub restrict: Restriction,
    pub scorer_seed: u64,
    /// Artificial latency per evaluation, milliseconds.
    pub latency_ms: f64,
    pub workers: Vec<usize>,
    /// Only the first samples are searched.
    pub max_samples: Option<usize>,
    pub out: Option<PathBuf>,
    /// Single-worker evaluation order log.
    pub order_log: Option<PathBuf>,
}

impl Default for BenchCommand {
    fn default() -> Self {
        BenchCommand {
            dataset: PathBuf::from("data/samples.evc"),
            anchors: PathBuf::from("data/anchors.evc"),
            evo: EvoConfig::default(),
            restrict: Restriction::None,
            scorer_seed: 0,
            latency_ms: 1.0,
            workers: vec![1, 2, 4, 8],
            max_samples: Some(4),
            out: None,
            order_log: None,
        }
    }
}

pub fn run_bench(cmd: &BenchCommand) -> Result<Outcome> {
    let mut samples = read_dataset(&cmd.dataset)?;
    if let Some(k) = cmd.max_samples {
        samples.truncate(k);
    }
    let partitions = if samples.is_empty() {
        Vec::new()
    } else {
        partitions_for(&samples, &read_anchors(&cmd.anchors)?, cmd.restrict)?
    };
    let scorer = LatencyScorer {
        inner: PlantedScorer::new(cmd.scorer_seed),
        latency: Duration::from_secs_f64(cmd.latency_ms.max(0.0) / 1000.0),
    };
    let report = bench(&samples, &partitions, &scorer, &cmd.evo, &cmd.workers)?;
    let mut outputs = Vec::new();
    if let Some(out) = &cmd.out {
        fs::write(out, serde_json::to_vec_pretty(&report)?)?;
        outputs.push(out.clone());
    }
    if let Some(log_path) = &cmd.order_log {
        let order = evaluation_order(&samples, &partitions, PlantedScorer::new(cmd.scorer_seed), &cmd.evo)?;
        let mut text = order.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(log_path, text)?;
        outputs.push(log_path.clone());
    }
    Ok(Outcome {
        inputs: vec![cmd.dataset.clone(), cmd.anchors.clone()],
        outputs,
        seeds: BTreeMap::from([("evo".into(), cmd.evo.seed), ("scorer".into(), cmd.scorer_seed)]),
        summary: serde_json::to_value(&report)?,
        display: report.table(),
    })
}

// ---------------------------------------------------------------- grad-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckCommand {
    pub seed: u64,
    pub draws: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradCheckCommand {
    fn default() -> Self {
        GradCheckCommand { seed: 0, draws: 25, h: 1e-5, tolerance: 1e-4 }
    }
}

pub fn run_grad_check(cmd: &GradCheckCommand) -> Result<Outcome> {
    let draws = grad_check_suite(cmd.seed, cmd.draws, cmd.h)?;
    let mut display = String::new();
    let mut worst: f64 = 0.0;
    for (i, d) in draws.iter().enumerate() {
        worst = worst.max(d.report.max_rel_error);
        display += &format!(
            "draw {i:>3}: heads {} rotary {:<5} no_text {:<5} loss {:<8} n {} m {} coords {} max rel err {:.3e} ({})\n",
            d.config.heads,
            d.config.use_positions,
            d.config.no_text,
            d.config.loss.to_string(),
            d.n_visual,
            d.n_text,
            d.report.coords,
            d.report.max_rel_error,
            d.report.worst_tensor
        );
    }
    let passed = worst < cmd.tolerance;
    display += &format!("worst {worst:.3e} vs tolerance {:.1e}: {}\n", cmd.tolerance, if passed { "pass" } else { "FAIL" });
    if !passed {
        return Err(Error::InvalidConfig(format!("gradient check failed: {worst:.3e} >= {:.1e}\n{display}", cmd.tolerance)));
    }
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![],
        seeds: BTreeMap::from([("suite".into(), cmd.seed)]),
        summary: json!({ "worst": worst, "draws": draws.len(), "passed": passed }),
        display,
    })
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Command {
    Gen(GenCommand),
    Label(LabelCommand),
    Train(TrainCommand),
    Eval(EvalCommand),
    Compress(CompressCommand),
    Render(RenderCommand),
    Bench(BenchCommand),
    GradCheck(GradCheckCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Label(_) => "label",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Compress(_) => "compress",
            Command::Render(_) => "render",
            Command::Bench(_) => "bench",
            Command::GradCheck(_) => "grad-check",
        }
    }

    fn config(&self) -> Result<Value> {
        Ok(match self {
            Command::Gen(c) => serde_json::to_value(c)?,
            Command::Label(c) => serde_json::to_value(c)?,
            Command::Train(c) => serde_json::to_value(c)?,
            Command::Eval(c) => serde_json::to_value(c)?,
            Command::Compress(c) => serde_json::to_value(c)?,
            Command::Render(c) => serde_json::to_value(c)?,
            Command::Bench(c) => serde_json::to_value(c)?,
            Command::GradCheck(c) => serde_json::to_value(c)?,
        })
    }

    /// Where the manifest goes when no path is given.
    pub fn default_manifest_path(&self) -> PathBuf {
        let beside = |p: &Path| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        };
        match self {
            Command::Gen(c) => c.out.join("gen.manifest.json"),
            Command::Label(c) => beside(&c.out),
            Command::Train(c) => beside(&c.out),
            Command::Compress(c) => beside(&c.out),
            Command::Eval(EvalCommand { out: Some(p), .. })
            | Command::Render(RenderCommand { out: Some(p), .. })
            | Command::Bench(BenchCommand { out: Some(p), .. }) => beside(p),
            _ => PathBuf::from(format!("{}.manifest.json", self.name())),
        }
    }

    fn run(&self) -> Result<Outcome> {
        match self {
            Command::Gen(c) => run_gen(c),
            Command::Label(c) => run_label(c),
            Command::Train(c) => run_train(c),
            Command::Eval(c) => run_eval(c),
            Command::Compress(c) => run_compress(c),
            Command::Render(c) => run_render(c),
            Command::Bench(c) => run_bench(c),
            Command::GradCheck(c) => run_grad_check(c),
        }
    }
}

/// Runs a command and writes its manifest (to `manifest` or the command's
/// default location).
pub fn execute(cmd: &Command, manifest: Option<&Path>) -> Result<(RunManifest, Outcome)> {
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let outcome = cmd.run()?;
    let mut outputs = BTreeMap::new();
    for path in &outcome.outputs {
        outputs.insert(path.clone(), sha256_hex(&fs::read(path)?));
    }
    let run = RunManifest {
        command: cmd.name().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config: cmd.config()?,
        seeds: outcome.seeds.clone(),
        inputs: outcome.inputs.clone(),
        outputs,
        started_unix,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        summary: outcome.summary.clone(),
    };
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cmd.default_manifest_path());
    run.write(&path)?;
    Ok((run, outcome))
}

/// Reconstructs the command a manifest records.
pub fn command_from_manifest(manifest: &RunManifest) -> Result<Command> {
    Ok(serde_json::from_value(json!({ "command": manifest.command, "config": manifest.config }))?)
}

/// Loads a config value from TOML, JSON, or a run manifest (whose `config`
/// field is used).
pub fn load_config_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        let table: toml::Table = text.parse().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table)?
    };
    match value {
        Value::Object(ref map) if map.contains_key("command") && map.contains_key("config") => Ok(map["config"].clone()),
        v => Ok(v),
    }
}

/// Default remote endpoint parsing: `tcp:host:port` or a shell command.
pub fn parse_endpoint(text: &str) -> Endpoint {
    match text.strip_prefix("tcp:") {
        Some(addr) => Endpoint::Tcp(addr.to_string()),
        None => Endpoint::Command(text.to_string()),
    }
}

/// Process exit code for an error: 2 usage, 3 data, 4 remote scorer.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::Scorer { source, .. } if source.is_remote() => 4,
        _ => 3,
    }
}

/// Config keys (dotted paths) whose default values come from the published
/// method description; every other default is a local choice.
pub const PUBLISHED_DEFAULTS: &[(&str, &str)] = &[
    ("evo.population_size", "population size q = 48"),
    ("evo.parent_count", "parents p = 12"),
    ("evo.iterations", "iterations L = 10"),
    ("evo.crossover_prob", "crossover probability 0.9"),
    ("evo.mutation_prob", "mutation probability 0.2"),
    ("compressor.epochs", "30 training epochs"),
    ("compressor.lr0", "initial learning rate 0.003, cosine schedule"),
    ("compressor.alpha", "cosine-term weight alpha = 1"),
    ("compressor.loss.class.kind", "GHM classification term"),
    ("compressor.loss.cosine", "cosine-similarity term enabled"),
    ("compressor.ghm.bins", "unit-region GHM with 100 bins"),
];

/// Default config of `cmd` as TOML, each line tagged as a published or a
/// local default.
pub fn describe_defaults(name: &str, config: &Value) -> Result<String> {
    let mut config = config.clone();
    strip_nulls(&mut config);
    let text = toml::to_string(&config).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = format!("# defaults for `{name}`\n");
    let mut section = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(s) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = format!("{s}.");
            out += line;
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let path = format!("{section}{key}");
            out += line;
            match PUBLISHED_DEFAULTS.iter().find(|(k, _)| *k == path) {
                Some((_, what)) => out += &format!("  # published default: {what}"),
                None if !trimmed.is_empty() => out += "  # local default",
                None => {}
            }
        } else {
            out += line;
        }
        out.push('\n');
    }
    Ok(out)
}

// TOML has no null; unset optional fields are simply left out
fn strip_nulls(value: &mut Value) {
    if let Value::Object(map) = value {
        map.retain(|_, v| !v.is_null());
        map.values_mut().for_each(strip_nulls);
    }
}

/// Replaces every numeric `seed` / `*_seed` field, at any depth.
pub fn override_seeds(value: &mut Value, seed: u64) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if (k == "seed" || k.ends_with("_seed")) && v.is_number() {
                    *v = json!(seed);
                } else {
                    override_seeds(v, seed);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| override_seeds(v, seed)),
        _ => {}
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge_values(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    // tagged enums switch variant wholesale
                    Some(slot) if !(v.get("kind").is_some() && slot.get("kind") != v.get("kind")) => merge_values(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
