use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use evocomp::commands::{
    describe_defaults, execute, exit_code, load_config_value, merge_values, override_seeds, parse_endpoint,
    BenchCommand, Command, CompressCommand, EvalCommand, GenCommand, GradCheckCommand, LabelCommand, RenderCommand,
    TrainCommand,
};
use evocomp::compressor::{DensityScope, InitSource};
use evocomp::eval::Budget;
use evocomp::grouping::Restriction;
use evocomp::losses::{GhmConfig, LossArm};
use evocomp::scorer::remote::{serve, BridgeAdapter, EchoAdapter, PooledAdapter};
use evocomp::scorer::{Concurrency, PooledScorer, ScorerSpec};
use evocomp::synth::Family;
use evocomp::{Error, Result};

#[derive(Parser)]
#[command(name = "evocomp", version, about = "Visual token compression: grouping, evolutionary labeling, compressor training")]
struct Cli {
    /// TOML or JSON config, or a previous run manifest to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Print the subcommand's defaults and exit.
    #[arg(long, global = true)]
    show_defaults: bool,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic dataset.
    Gen(GenFlags),
    /// Label every sample with the evolutionary search.
    Label(LabelFlags),
    /// Train the compressor on labels.
    Train(TrainFlags),
    /// Compare trained, untrained and random top-r selections.
    Eval(EvalFlags),
    /// Keep the top-r tokens of every sample.
    Compress(CompressFlags),
    /// Draw a mask as a text grid or PPM image.
    Render(RenderFlags),
    /// Time the search at several worker counts.
    Bench(BenchFlags),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckFlags),
    /// Serve the scorer protocol (echo or pooled loss).
    #[command(hide = true)]
    ServeScorer(ServeFlags),
}

#[derive(Args)]
struct GenFlags {
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    text_tokens: Option<usize>,
    #[arg(long)]
    extra_anchors: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    salience: Option<f64>,
    #[arg(long)]
    text_keyed: bool,
    #[arg(long)]
    keys: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    planted_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvoFlags {
    /// Population size.
    #[arg(long)]
    q: Option<usize>,
    /// Parents kept per generation.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    crossover: Option<f64>,
    #[arg(long)]
    mutation: Option<f64>,
    /// Search seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent evaluations inside one search.
    #[arg(long)]
    eval_workers: Option<usize>,
    #[arg(long)]
    restrict: Option<Restriction>,
}

#[derive(Args)]
struct LabelFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// planted, pooled or remote.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    scorer_seed: Option<u64>,
    /// Remote scorer command line (or `tcp:host:port`).
    #[arg(long)]
    cmd: Option<String>,
    /// The remote scorer handles one request at a time.
    #[arg(long)]
    serialized: bool,
    #[command(flatten)]
    evo: EvoFlags,
    /// Samples searched concurrently.
    #[arg(long)]
    workers: Option<usize>,
    /// Exhaustive search instead of evolution.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    space_cap: Option<u64>,
    /// Remote scorer timeout, seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
    /// ghm+cs, ghm, ce+cs, ce, focal+cs or focal.
    #[arg(long)]
    loss: Option<LossArm>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    /// Rotary position encoding.
    #[arg(long)]
    positions: bool,
    /// Train on visual tokens only.
    #[arg(long)]
    no_text: bool,
    /// Copy block weights from this parameter file.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    ghm_bins: Option<usize>,
    #[arg(long)]
    ghm_epsilon: Option<f64>,
    /// batch or sample.
    #[arg(long)]
    density_scope: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BudgetFlags {
    /// Tokens kept per sample.
    #[arg(long, conflicts_with = "ratio")]
    r: Option<usize>,
    /// Fraction of tokens kept per sample.
    #[arg(long)]
    ratio: Option<f64>,
}

impl BudgetFlags {
    fn budget(&self) -> Option<Budget> {
        self.r.map(Budget::Count).or(self.ratio.map(Budget::Ratio))
    }
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    planted: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetFlags,
    #[arg(long)]
    baseline_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompressFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    kept: Option<PathBuf>,
}

#[derive(Args)]
struct RenderFlags {
    /// Label file holding the mask.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    sample: Option<String>,
    /// Inline mask, e.g. 1,0,0,1.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cell: Option<usize>,
}

#[derive(Args)]
struct BenchFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[command(flatten)]
    evo: EvoFlags,
    #[arg(long)]
    scorer_seed: Option<u64>,
    #[arg(long)]
    latency_ms: Option<f64>,
    /// Worker counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    workers: Option<Vec<usize>>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    order_log: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct ServeFlags {
    /// echo or pooled.
    #[arg(long, default_value = "echo")]
    adapter: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Listen on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Defaults, then EVOCOMP_SEED, then the config file.
fn layered<T: Serialize + DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Ok(text) = std::env::var("EVOCOMP_SEED") {
        let seed = text
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("EVOCOMP_SEED={text:?} is not an unsigned integer")))?;
        override_seeds(&mut value, seed);
    }
    if let Some(path) = config {
        merge_values(&mut value, load_config_value(path)?);
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
}

fn apply_evo(evo: &mut evocomp::evolution::EvoConfig, restrict: &mut Restriction, f: EvoFlags) {
    set(&mut evo.population_size, f.q);
    set(&mut evo.parent_count, f.p);
    set(&mut evo.iterations, f.iters);
    set(&mut evo.crossover_prob, f.crossover);
    set(&mut evo.mutation_prob, f.mutation);
    set(&mut evo.seed, f.seed);
    set(&mut evo.workers, f.eval_workers);
    set(restrict, f.restrict);
}

fn scorer_spec(current: &ScorerSpec, f: &LabelFlags) -> Result<ScorerSpec> {
    let current_seed = match current {
        ScorerSpec::Planted { seed } | ScorerSpec::Pooled { seed } => *seed,
        ScorerSpec::Remote { .. } => 0,
    };
    let seed = f.scorer_seed.unwrap_or(current_seed);
    let concurrency = if f.serialized { Concurrency::Serialized } else { Concurrency::Safe };
    Ok(match f.scorer.as_deref() {
        None => match (current, &f.cmd) {
            (_, Some(cmd)) => ScorerSpec::Remote { endpoint: parse_endpoint(cmd), concurrency },
            (ScorerSpec::Planted { .. }, None) => ScorerSpec::Planted { seed },
            (ScorerSpec::Pooled { .. }, None) => ScorerSpec::Pooled { seed },
            (remote, None) => remote.clone(),
        },
        Some("planted") => ScorerSpec::Planted { seed },
        Some("pooled") => ScorerSpec::Pooled { seed },
        Some("remote") => match (&f.cmd, current) {
            (Some(cmd), _) => ScorerSpec::Remote { endpoint: parse_endpoint(cmd), concurrency },
            (None, ScorerSpec::Remote { .. }) => current.clone(),
            (None, _) => return Err(Error::InvalidConfig("--scorer remote needs --cmd".into())),
        },
        Some(other) => return Err(Error::InvalidConfig(format!("unknown scorer {other:?}"))),
    })
}

fn build(sub: Sub, config: Option<&Path>) -> Result<Command> {
    Ok(match sub {
        Sub::Gen(f) => {
            let mut c: GenCommand = layered(config)?;
            set(&mut c.gen.family, f.family);
            set(&mut c.gen.n_samples, f.n_samples);
            set(&mut c.gen.tokens, f.tokens);
            set(&mut c.gen.groups, f.groups);
            set(&mut c.gen.dim, f.dim);
            set(&mut c.gen.text_tokens, f.text_tokens);
            set(&mut c.gen.extra_anchors, f.extra_anchors);
            set(&mut c.gen.noise, f.noise);
            set(&mut c.gen.salience, f.salience);
            c.gen.text_keyed |= f.text_keyed;
            set(&mut c.gen.keys, f.keys);
            set(&mut c.gen.seed, f.seed);
            if f.planted_seed.is_some() {
                c.planted_seed = f.planted_seed;
            }
            set(&mut c.out, f.out);
            c.gen.validate()?;
            Command::Gen(c)
        }
        Sub::Label(f) => {
            let mut c: LabelCommand = layered(config)?;
            c.scorer = scorer_spec(&c.scorer, &f)?;
            set(&mut c.dataset, f.dataset);
            set(&mut c.anchors, f.anchors);
            set(&mut c.out, f.out);
            apply_evo(&mut c.evo, &mut c.restrict, f.evo);
            set(&mut c.workers, f.workers);
            c.oracle |= f.oracle;
            set(&mut c.space_cap, f.space_cap);
            set(&mut c.timeout_secs, f.timeout);
            if f.trace.is_some() {
                c.trace = f.trace;
            }
            c.evo.validate()?;
            Command::Label(c)
        }
        Sub::Train(f) => {
            let mut c: TrainCommand = layered(config)?;
            let m = &mut c.compressor;
            set(&mut c.dataset, f.dataset);
            set(&mut c.labels, f.labels);
            set(&mut c.out, f.out);
            if f.history.is_some() {
                c.history = f.history;
            }
            set(&mut m.loss, f.loss);
            set(&mut m.alpha, f.alpha);
            set(&mut m.epochs, f.epochs);
            set(&mut m.lr0, f.lr);
            set(&mut m.batch_size, f.batch_size);
            set(&mut m.d_model, f.d_model);
            set(&mut m.heads, f.heads);
            set(&mut m.mlp_ratio, f.mlp_ratio);
            m.use_positions |= f.positions;
            m.no_text |= f.no_text;
            set(&mut m.init, f.init_from.map(InitSource::Donor));
            set(&mut m.init_std, f.init_std);
            if let Some(bins) = f.ghm_bins {
                m.ghm = GhmConfig { momentum: m.ghm.momentum, ..GhmConfig::unit_region(bins) };
            }
            if let Some(eps) = f.ghm_epsilon {
                m.ghm = GhmConfig { momentum: m.ghm.momentum, ..GhmConfig::exact(eps) };
            }
            match f.density_scope.as_deref() {
                None => {}
                Some("batch") => m.density_scope = DensityScope::Batch,
                Some("sample") => m.density_scope = DensityScope::Sample,
                Some(s) => return Err(Error::InvalidConfig(format!("unknown density scope {s:?}"))),
            }
            set(&mut m.val_fraction, f.val_fraction);
            set(&mut m.seed, f.seed);
            m.validate()?;
            Command::Train(c)
        }
        Sub::Eval(f) => {
            let mut c: EvalCommand = layered(config)?;
            set(&mut c.dataset, f.dataset);
            set(&mut c.labels, f.labels);
            set(&mut c.params, f.params);
            if f.planted.is_some() {
                c.planted = f.planted;
            }
            set(&mut c.budget, f.budget.budget());
            set(&mut c.baseline_seed, f.baseline_seed);
            if f.out.is_some() {
                c.out = f.out;
            }
            Command::Eval(c)
        }
        Sub::Compress(f) => {
            let mut c: CompressCommand = layered(config)?;
            set(&mut c.dataset, f.dataset);
            set(&mut c.params, f.params);
            set(&mut c.budget, f.budget.budget());
            set(&mut c.out, f.out);
            if f.kept.is_some() {
                c.kept = f.kept;
            }
            Command::Compress(c)
        }
        Sub::Render(f) => {
            let mut c: RenderCommand = layered(config)?;
            if f.masks.is_some() {
                c.masks = f.masks;
            }
            if f.sample.is_some() {
                c.sample = f.sample;
            }
            if f.bits.is_some() {
                c.bits = f.bits;
            }
            if f.width.is_some() {
                c.width = f.width;
            }
            if f.out.is_some() {
                c.out = f.out;
            }
            set(&mut c.cell, f.cell);
            Command::Render(c)
        }
        Sub::Bench(f) => {
            let mut c: BenchCommand = layered(config)?;
            set(&mut c.dataset, f.dataset);
            set(&mut c.anchors, f.anchors);
            apply_evo(&mut c.evo, &mut c.restrict, f.evo);
            set(&mut c.scorer_seed, f.scorer_seed);
            set(&mut c.latency_ms, f.latency_ms);
            set(&mut c.workers, f.workers);
            if f.max_samples.is_some() {
                c.max_samples = f.max_samples;
            }
            if f.out.is_some() {
                c.out = f.out;
            }
            if f.order_log.is_some() {
                c.order_log = f.order_log;
            }
            Command::Bench(c)
        }
        Sub::GradCheck(f) => {
            let mut c: GradCheckCommand = layered(config)?;
            set(&mut c.seed, f.seed);
            set(&mut c.draws, f.draws);
            set(&mut c.h, f.h);
            set(&mut c.tolerance, f.tolerance);
            Command::GradCheck(c)
        }
        Sub::ServeScorer(_) => unreachable!("handled before build"),
    })
}

fn defaults(sub: &Sub) -> Result<(&'static str, serde_json::Value)> {
    fn v<T: Serialize + DeserializeOwned + Default>() -> Result<serde_json::Value> {
        Ok(serde_json::to_value(layered::<T>(None)?)?)
    }
    Ok(match sub {
        Sub::Gen(_) => ("gen", v::<GenCommand>()?),
        Sub::Label(_) => ("label", v::<LabelCommand>()?),
        Sub::Train(_) => ("train", v::<TrainCommand>()?),
        Sub::Eval(_) => ("eval", v::<EvalCommand>()?),
        Sub::Compress(_) => ("compress", v::<CompressCommand>()?),
        Sub::Render(_) => ("render", v::<RenderCommand>()?),
        Sub::Bench(_) => ("bench", v::<BenchCommand>()?),
        Sub::GradCheck(_) => ("grad-check", v::<GradCheckCommand>()?),
        Sub::ServeScorer(_) => ("serve-scorer", serde_json::json!({})),
    })
}

fn serve_scorer(f: ServeFlags) -> Result<()> {
    let adapter: Box<dyn BridgeAdapter> = match f.adapter.as_str() {
        "echo" => Box::new(EchoAdapter),
        "pooled" => Box::new(PooledAdapter(PooledScorer::new(f.seed))),
        other => return Err(Error::InvalidConfig(format!("unknown adapter {other:?}"))),
    };
    match f.listen {
        None => serve(io::stdin().lock(), io::stdout().lock(), adapter.as_ref())?,
        Some(addr) => {
            let listener = TcpListener::bind(&addr)?;
            println!("listening on {}", listener.local_addr()?);
            io::stdout().flush()?;
            let (stream, _) = listener.accept()?;
            serve(BufReader::new(stream.try_clone()?), stream, adapter.as_ref())?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.show_defaults {
        let (name, value) = defaults(&cli.command)?;
        print!("{}", describe_defaults(name, &value)?);
        return Ok(());
    }
    if let Sub::ServeScorer(f) = cli.command {
        return serve_scorer(f);
    }
    let cmd = build(cli.command, cli.config.as_deref())?;
    let (manifest, outcome) = execute(&cmd, cli.manifest.as_deref())?;
    print!("{}", outcome.display);
    log::info!("{} finished in {:.3}s", manifest.command, manifest.wall_clock_seconds);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
