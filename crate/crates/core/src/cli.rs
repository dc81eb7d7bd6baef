//! Command-line front end: argument parsing, config-file merging and report
//! writing for every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cam::{cam_export, to_feature_coords};
use crate::cost::{build_backbone, count_cost_with, efficiency, published_delta_top1, Backbone, CostReport, Counting, Variant};
use crate::data::{gen_direction_dataset, load_dataset, save_dataset, tsn_sample, ClipDataset, SampleMode};
use crate::error::{Error, Result};
use crate::gradcheck::{suite, worst_per_op, SuiteEntry};
use crate::toynet::{TemporalModule, ToyConfig, ToyNet};
use crate::train::{evaluate, train, write_history, EvalReport, TrainConfig};

/// Exit code for a run whose inputs or results failed validation.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for malformed command lines.
pub const EXIT_USAGE: i32 = 2;

pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "action-kit",
    version,
    about = "Multipath excitation toolkit for segment-based video models",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every operator and excitation path
    Gradcheck(GradcheckArgs),
    /// Analytic MACs and parameters of a backbone variant
    Cost(CostArgs),
    /// Generate a synthetic temporal-direction dataset
    Synth(SynthArgs),
    /// Train a toy network on a synthetic dataset
    Train(TrainArgs),
    /// Evaluate a trained toy network
    Eval(EvalArgs),
    /// Export class activation maps for clips of a dataset
    Cam(CamArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Global random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with default values; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountingArg {
    Framework,
    MacsOnly,
}

impl From<CountingArg> for Counting {
    fn from(c: CountingArg) -> Self {
        match c {
            CountingArg::Framework => Counting::Framework,
            CountingArg::MacsOnly => Counting::MacsOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Largest acceptable relative error
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: Common,
    /// resnet50 or mobilenet_v2
    #[arg(long)]
    pub backbone: Option<String>,
    /// tsn, tsm, ste, ce, me or action
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(short = 'T', long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub cls: Option<usize>,
    /// Comma-separated stage names receiving the temporal module
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub counting: Option<CountingArg>,
    /// Report all six variants of the backbone
    #[arg(long)]
    pub table3: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Raw frames per video
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Standard deviation of additive pixel noise
    #[arg(long)]
    pub noise: Option<f64>,
    /// Split tag stored in the manifest
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training dataset directory; a default synthetic set when omitted
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset directory
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// none, shift, ste, ce, me or action
    #[arg(long)]
    pub module: Option<String>,
    /// Comma-separated 1-based stages receiving the module
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(short = 'T', long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `train`
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(short = 'T', long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// First video index
    #[arg(long)]
    pub index: Option<usize>,
    /// Number of consecutive videos
    #[arg(long)]
    pub clips: Option<usize>,
    /// Class to explain; each video's own label when omitted
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(short = 'T', long)]
    pub segments: Option<usize>,
}

/// Every key a config file may set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub backbone: Option<String>,
    pub variant: Option<String>,
    pub segments: Option<usize>,
    pub cls: Option<usize>,
    pub stages: Option<toml::Value>,
    pub counting: Option<CountingArg>,
    pub table3: Option<bool>,
    pub n_per_class: Option<usize>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub noise: Option<f64>,
    pub split: Option<String>,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub module: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub decay_epochs: Option<Vec<usize>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub module_lr_mult: Option<f64>,
    pub model: Option<PathBuf>,
    pub index: Option<usize>,
    pub clips: Option<usize>,
    pub class: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        }
    }

    fn stage_names(&self) -> Result<Option<Vec<String>>> {
        self.stages
            .as_ref()
            .map(|v| match v {
                toml::Value::String(s) => Ok(split_list(s)),
                toml::Value::Array(a) => a.iter().map(|x| x.as_str().map(str::to_string).ok_or_else(stage_err)).collect(),
                _ => Err(stage_err()),
            })
            .transpose()
    }

    fn stage_indices(&self) -> Result<Option<Vec<usize>>> {
        self.stages
            .as_ref()
            .map(|v| match v {
                toml::Value::String(s) => split_list(s).iter().map(|x| x.parse().map_err(|_| stage_err())).collect(),
                toml::Value::Array(a) => {
                    a.iter().map(|x| x.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(stage_err)).collect()
                }
                _ => Err(stage_err()),
            })
            .transpose()
    }
}

fn stage_err() -> Error {
    Error::Config("config key `stages` must be a list or a comma-separated string".into())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_string).collect()
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required option --{what}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write_snapshot<T: Serialize>(dir: &Path, resolved: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(resolved).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(CONFIG_SNAPSHOT), text)?;
    Ok(())
}

/// Writes `body` to `dir/name` plus the resolved config when `dir` is set.
fn emit<T: Serialize>(out: Option<&Path>, name: &str, body: &str, resolved: &T) -> Result<()> {
    if let Some(dir) = out {
        write_snapshot(dir, resolved)?;
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Cost(a) => cost_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Cam(a) => cam_cmd(a),
    }
}

// ---- gradcheck ------------------------------------------------------

#[derive(Debug, Serialize)]
struct GradcheckConfig {
    seed: u64,
    tol: f64,
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    tol: f64,
    passed: bool,
    worst: Vec<OpWorst>,
    entries: Vec<SuiteEntry>,
}

#[derive(Debug, Serialize)]
struct OpWorst {
    op: String,
    max_rel_error: f64,
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = GradcheckConfig { seed: a.common.seed.or(file.seed).unwrap_or(0), tol: a.tol.or(file.tol).unwrap_or(1e-4) };
    let out = a.common.out.or(file.out);
    let entries = suite(cfg.seed)?;
    let worst: Vec<OpWorst> = worst_per_op(&entries).into_iter().map(|(op, max_rel_error)| OpWorst { op, max_rel_error }).collect();
    for w in &worst {
        let n = entries.iter().filter(|e| e.op == w.op).count();
        println!("{:<18} {:>3} configs  worst rel error {:.3e}", w.op, n, w.max_rel_error);
    }
    let passed = worst.iter().all(|w| w.max_rel_error < cfg.tol);
    println!("{} (tolerance {:e})", if passed { "all gradients agree" } else { "gradient mismatch" }, cfg.tol);
    let report = GradcheckReport { tol: cfg.tol, passed, worst, entries };
    emit(out.as_deref(), "gradcheck.json", &to_json(&report)?, &cfg)?;
    Ok(if passed { 0 } else { EXIT_INVALID })
}

// ---- cost -----------------------------------------------------------

#[derive(Debug, Serialize)]
struct CostConfig {
    seed: u64,
    backbone: String,
    variant: String,
    segments: usize,
    cls: usize,
    stages: Vec<String>,
    counting: CountingArg,
    table3: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageJson {
    pub stage: String,
    pub macs_g: f64,
    pub params_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaJson {
    pub baseline: String,
    pub macs_g: f64,
    pub macs_pct: f64,
    pub params_m: f64,
    /// Published top-1 change, where one exists.
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostJson {
    pub backbone: String,
    pub variant: String,
    #[serde(rename = "T")]
    pub segments: usize,
    #[serde(rename = "CLS")]
    pub cls: usize,
    pub stages: Vec<String>,
    pub counting: Counting,
    pub macs: u64,
    pub params: u64,
    pub macs_g: f64,
    pub params_m: f64,
    pub per_stage: Vec<StageJson>,
    pub deltas: DeltaJson,
    /// Extra FLOPs percent per point of published top-1, for excitation variants.
    pub eta: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Table3Json {
    backbone: String,
    #[serde(rename = "T")]
    segments: usize,
    #[serde(rename = "CLS")]
    cls: usize,
    stages: Vec<String>,
    counting: Counting,
    rows: Vec<CostJson>,
}

fn cost_of(backbone: Backbone, variant: Variant, t: usize, cls: usize, stages: &[String], counting: Counting) -> Result<CostReport> {
    count_cost_with(&build_backbone(backbone, variant, t, cls, stages)?, counting)
}

/// Cost of one variant with deltas against TSM on the same backbone.
pub fn cost_json(backbone: Backbone, variant: Variant, t: usize, cls: usize, stages: &[String], counting: Counting) -> Result<CostJson> {
    let report = cost_of(backbone, variant, t, cls, stages, counting)?;
    let base = cost_of(backbone, Variant::Tsm, t, cls, stages, counting)?;
    let dm = report.macs as f64 - base.macs as f64;
    let macs_pct = 100.0 * dm / base.macs as f64;
    let top1 = published_delta_top1(backbone, variant);
    let eta = match (variant, top1) {
        (Variant::Tsn | Variant::Tsm, _) | (_, None) => None,
        (_, Some(d)) => efficiency(macs_pct, d).ok(),
    };
    Ok(CostJson {
        backbone: backbone.name().into(),
        variant: variant.name().into(),
        segments: t,
        cls,
        stages: stages.to_vec(),
        counting,
        macs: report.macs,
        params: report.params,
        macs_g: report.macs_g(),
        params_m: report.params_m(),
        per_stage: report
            .per_stage
            .iter()
            .map(|s| StageJson { stage: s.stage.clone(), macs_g: s.macs as f64 / 1e9, params_m: s.params as f64 / 1e6 })
            .collect(),
        deltas: DeltaJson {
            baseline: Variant::Tsm.name().into(),
            macs_g: dm / 1e9,
            macs_pct,
            params_m: (report.params as f64 - base.params as f64) / 1e6,
            top1,
        },
        eta,
    })
}

fn cost_cmd(a: CostArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let backbone: Backbone = a.backbone.or(file.backbone.clone()).unwrap_or_else(|| "resnet50".into()).parse()?;
    let variant: Variant = a.variant.or(file.variant.clone()).unwrap_or_else(|| "action".into()).parse()?;
    let stages = match a.stages.or(file.stage_names()?) {
        Some(s) => s,
        None => backbone.stages().iter().map(|s| s.to_string()).collect(),
    };
    let cfg = CostConfig {
        seed: a.common.seed.or(file.seed).unwrap_or(0),
        backbone: backbone.name().into(),
        variant: variant.name().into(),
        segments: a.segments.or(file.segments).unwrap_or(8),
        cls: a.cls.or(file.cls).unwrap_or(83),
        stages,
        counting: a.counting.or(file.counting).unwrap_or(CountingArg::Framework),
        table3: a.table3 || file.table3.unwrap_or(false),
    };
    let out = a.common.out.or(file.out);
    let counting = Counting::from(cfg.counting);
    let body = if cfg.table3 {
        let rows = Variant::ALL
            .iter()
            .map(|&v| cost_json(backbone, v, cfg.segments, cfg.cls, &cfg.stages, counting))
            .collect::<Result<Vec<_>>>()?;
        to_json(&Table3Json {
            backbone: cfg.backbone.clone(),
            segments: cfg.segments,
            cls: cfg.cls,
            stages: cfg.stages.clone(),
            counting,
            rows,
        })?
    } else {
        to_json(&cost_json(backbone, variant, cfg.segments, cfg.cls, &cfg.stages, counting)?)?
    };
    print!("{body}");
    emit(out.as_deref(), "cost.json", &body, &cfg)?;
    Ok(0)
}

// ---- synth ----------------------------------------------------------

#[derive(Debug, Serialize)]
struct SynthConfig {
    seed: u64,
    out: PathBuf,
    n_per_class: usize,
    frames: usize,
    height: usize,
    width: usize,
    noise: f64,
    split: String,
}

/// Default synthetic set sizes and noise of the benchmark.
pub const DEFAULT_N_PER_CLASS: usize = 50;
pub const DEFAULT_FRAMES: usize = 40;
pub const DEFAULT_EXTENT: usize = 32;
pub const DEFAULT_NOISE: f64 = 0.05;

fn synth_cmd(a: SynthArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = SynthConfig {
        seed: a.common.seed.or(file.seed).unwrap_or(0),
        out: require(a.common.out.or(file.out), "out")?,
        n_per_class: a.n_per_class.or(file.n_per_class).unwrap_or(DEFAULT_N_PER_CLASS),
        frames: a.frames.or(file.frames).unwrap_or(DEFAULT_FRAMES),
        height: a.height.or(file.height).unwrap_or(DEFAULT_EXTENT),
        width: a.width.or(file.width).unwrap_or(DEFAULT_EXTENT),
        noise: a.noise.or(file.noise).unwrap_or(DEFAULT_NOISE),
        split: a.split.or(file.split).unwrap_or_else(|| "train".into()),
    };
    let mut ds = gen_direction_dataset(cfg.n_per_class, cfg.frames, cfg.height, cfg.width, cfg.noise, cfg.seed)?;
    ds.split = cfg.split.clone();
    save_dataset(&ds, &cfg.out)?;
    write_snapshot(&cfg.out, &cfg)?;
    println!("{} videos, {} classes -> {}", ds.len(), ds.num_classes(), cfg.out.display());
    Ok(0)
}

// ---- train ----------------------------------------------------------

#[derive(Debug, Serialize)]
struct TrainRunConfig {
    out: PathBuf,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    model: ToyConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    module: String,
    epochs: usize,
    final_loss: f64,
    train_top1: f64,
    val: Option<EvalReport>,
}

fn load_or_synth(dir: Option<&Path>, seed: u64) -> Result<ClipDataset> {
    match dir {
        Some(d) => load_dataset(d),
        None => gen_direction_dataset(DEFAULT_N_PER_CLASS, DEFAULT_FRAMES, DEFAULT_EXTENT, DEFAULT_EXTENT, DEFAULT_NOISE, seed),
    }
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        segments: a.segments.or(file.segments).unwrap_or(defaults.segments),
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr: a.lr.or(file.lr).unwrap_or(defaults.lr),
        decay_epochs: Vec::new(),
        momentum: file.momentum.unwrap_or(defaults.momentum),
        weight_decay: file.weight_decay.unwrap_or(defaults.weight_decay),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        module_lr_mult: file.module_lr_mult.unwrap_or(defaults.module_lr_mult),
        seed: a.common.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    let tc = TrainConfig {
        decay_epochs: file
            .decay_epochs
            .clone()
            .unwrap_or_else(|| defaults.decay_epochs.iter().copied().filter(|&d| d < tc.epochs).collect()),
        ..tc
    };
    tc.validate()?;
    let module: TemporalModule = a.module.or(file.module.clone()).unwrap_or_else(|| "action".into()).parse()?;
    let mut mc = ToyConfig::default().with_module(module);
    if let Some(s) = a.stages.or(file.stage_indices()?) {
        mc.stages = s;
    }
    if let Some(c) = file.cls {
        mc.cls = c;
    }
    let cfg = TrainRunConfig {
        out: require(a.common.out.or(file.out), "out")?,
        data: a.data.or(file.data),
        val: a.val.or(file.val),
        model: mc,
        train: tc,
    };
    let train_set = load_or_synth(cfg.data.as_deref(), cfg.train.seed)?;
    if train_set.num_classes() != cfg.model.cls {
        return Err(Error::Config(format!("dataset has {} classes, model expects {}", train_set.num_classes(), cfg.model.cls)));
    }
    let mut net = ToyNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let history = train(&mut net, &train_set, &cfg.train)?;
    fs::create_dir_all(&cfg.out)?;
    net.save(cfg.out.join("model"))?;
    write_history(&history, cfg.out.join("history.csv"))?;
    write_snapshot(&cfg.out, &cfg)?;
    let val = match &cfg.val {
        Some(d) => Some(evaluate(&net, &load_dataset(d)?, cfg.train.segments)?),
        None => None,
    };
    let last = history.last().ok_or_else(|| Error::Config("no epochs were run".into()))?;
    let summary = TrainSummary { module: module.name().into(), epochs: history.len(), final_loss: last.loss, train_top1: last.top1, val };
    let body = to_json(&summary)?;
    fs::write(cfg.out.join("summary.json"), &body)?;
    print!("{body}");
    Ok(0)
}

// ---- eval -----------------------------------------------------------

#[derive(Debug, Serialize)]
struct EvalConfig {
    seed: u64,
    model: PathBuf,
    data: PathBuf,
    segments: usize,
}

#[derive(Debug, Serialize)]
struct EvalJson {
    videos: usize,
    top1: f64,
    top5: f64,
}

fn model_dir(p: PathBuf) -> PathBuf {
    let nested = p.join("model");
    if nested.join("config.json").exists() {
        nested
    } else {
        p
    }
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = EvalConfig {
        seed: a.common.seed.or(file.seed).unwrap_or(0),
        model: model_dir(require(a.model.or(file.model), "model")?),
        data: require(a.data.or(file.data), "data")?,
        segments: a.segments.or(file.segments).unwrap_or(TrainConfig::default().segments),
    };
    let net = ToyNet::<f32>::load(&cfg.model)?;
    let ds = load_dataset(&cfg.data)?;
    let r = evaluate(&net, &ds, cfg.segments)?;
    let body = to_json(&EvalJson { videos: ds.len(), top1: r.top1, top5: r.top5 })?;
    print!("{body}");
    emit(a.common.out.or(file.out).as_deref(), "eval.json", &body, &cfg)?;
    Ok(0)
}

// ---- cam ------------------------------------------------------------

#[derive(Debug, Serialize)]
struct CamConfig {
    seed: u64,
    out: PathBuf,
    model: PathBuf,
    data: PathBuf,
    index: usize,
    clips: usize,
    class: Option<usize>,
    segments: usize,
}

#[derive(Debug, Serialize)]
pub struct CamClipJson {
    pub index: usize,
    pub label: usize,
    pub class: usize,
    pub dir: String,
    pub frames: Vec<usize>,
    /// (row, col) of each frame's strongest activation.
    pub peaks: Vec<[usize; 2]>,
    /// Object centre of each frame in feature-map coordinates, (x, y).
    pub centers: Vec<[f64; 2]>,
    /// Peak-to-centre distance in feature-map pixels.
    pub distances: Vec<f64>,
}

fn cam_cmd(a: CamArgs) -> Result<i32> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let cfg = CamConfig {
        seed: a.common.seed.or(file.seed).unwrap_or(0),
        out: require(a.common.out.or(file.out), "out")?,
        model: model_dir(require(a.model.or(file.model), "model")?),
        data: require(a.data.or(file.data), "data")?,
        index: a.index.or(file.index).unwrap_or(0),
        clips: a.clips.or(file.clips).unwrap_or(1),
        class: a.class.or(file.class),
        segments: a.segments.or(file.segments).unwrap_or(TrainConfig::default().segments),
    };
    let net = ToyNet::<f32>::load(&cfg.model)?;
    let ds = load_dataset(&cfg.data)?;
    if cfg.index + cfg.clips > ds.len() {
        return Err(Error::Data(format!("videos {}..{} out of range for {} videos", cfg.index, cfg.index + cfg.clips, ds.len())));
    }
    let mut clips = Vec::with_capacity(cfg.clips);
    for i in cfg.index..cfg.index + cfg.clips {
        let v = &ds.videos[i];
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let frames = crate::data::segment_indices(v.num_frames(), cfg.segments, SampleMode::Center, &mut rng)?;
        let clip = tsn_sample(v, cfg.segments, SampleMode::Center, cfg.seed)?;
        let class = cfg.class.unwrap_or(v.label);
        let dir = format!("clip_{i:05}");
        let cam = cam_export(&net, &clip, class, cfg.out.join(&dir))?;
        let s = cam.raw.shape();
        let input = [v.frames.shape()[2], v.frames.shape()[3]];
        let mut peaks = Vec::new();
        let mut centers = Vec::new();
        let mut distances = Vec::new();
        for (t, &f) in frames.iter().enumerate() {
            let (r, c) = cam.peak(t);
            let p = to_feature_coords(v.meta.centers[f], input, [s[1], s[2]]);
            peaks.push([r, c]);
            centers.push(p);
            distances.push(((c as f64 - p[0]).powi(2) + (r as f64 - p[1]).powi(2)).sqrt());
        }
        clips.push(CamClipJson { index: i, label: v.label, class, dir, frames, peaks, centers, distances });
    }
    write_snapshot(&cfg.out, &cfg)?;
    let body = to_json(&clips)?;
    fs::write(cfg.out.join("cam.json"), &body)?;
    print!("{body}");
    Ok(0)
}
